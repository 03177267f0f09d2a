"""Round transitions and full runs for the four federated WLS variants.

All four algorithms share the same skeleton per round: the server sends its
current broadcast down the noisy links to the scheduled clients, those
clients fold the received vector into their local models, the post-update
models travel back up the noisy links, and the server re-aggregates. They
differ in what the broadcast is, who updates, and what the server averages:

* ``AdmmBaseline``: clients keep an explicit dual vector and the server
  broadcasts its aggregate directly.
* ``DualFree``: the dual is eliminated; the server broadcasts an
  extrapolated combination of its last two aggregates and keeps a per-client
  cache of the most recent upload from every client, summing the whole cache
  over the number of scheduled clients. Under partial participation the
  stale cache entries make this variant accumulate error.
* ``RerceFed``: like DualFree but the server averages only the uploads that
  actually arrived this round, which removes the stale-entry amplification.
* ``RerceFedClu``: every client updates every round, unscheduled ones using
  the broadcast they last received; scheduled clients upload their own
  extrapolated combination and the server just averages its cache over all
  clients.

Round operations are pure: they take states and return fresh states. The
driver :func:`run` wires them to the scheduler and the tagged noise streams.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .channel import (
    BOOTSTRAP_STREAM,
    SchedulerMode,
    TaggedLinkNoise,
    corrupt,
    draw_schedule,
)
from .dataset import precompute_all


class AlgorithmVariant(Enum):
    ADMM_BASELINE = "admm_baseline"
    DUAL_FREE = "dual_free"
    RERCE_FED = "rerce_fed"
    RERCE_FED_CLU = "rerce_fed_clu"


@dataclass
class ClientState:
    """One client's per-round state.

    ``dual`` exists only for ADMM_BASELINE; ``stored_broadcast`` only for
    RERCE_FED_CLU (the last downlink the client actually received, reused
    verbatim in rounds where it is not scheduled).
    """

    model: np.ndarray
    dual: np.ndarray = None
    stored_broadcast: np.ndarray = None


@dataclass
class ServerState:
    """Server-side state.

    ``broadcast`` is what goes down the link next round. For DUAL_FREE and
    RERCE_FED it is the extrapolation 2*model - model_prev; for
    ADMM_BASELINE it is the aggregate itself; for RERCE_FED_CLU the
    extrapolation happens client-side, so the broadcast is the plain average
    of the upload cache. ``upload_cache`` (DUAL_FREE and RERCE_FED_CLU only)
    holds the most recent upload received from each client, bootstrapped
    from a pre-loop exchange of the clients' local fits.
    """

    model: np.ndarray
    model_prev: np.ndarray
    broadcast: np.ndarray
    upload_cache: np.ndarray = None


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a single trial.

    The trial seed governs all randomness of the run (schedules and link
    noise); the seeds inside the scheduler and channel configs are only used
    when those ops are called standalone.
    """

    variant: AlgorithmVariant
    problem: object
    channel: object
    scheduler: object
    rho: float = 1.0
    num_rounds: int = 1000
    trial_seed: int = 0
    exchange_init: bool = False

    def validate(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.num_rounds < 0:
            raise ValueError("num_rounds must be nonnegative")
        K = self.problem.num_clients
        self.scheduler.validate(K)
        self.channel.validate(K)


@dataclass
class RoundSnapshot:
    """Trajectory entry: server state plus a copy of every client model."""

    server: ServerState
    client_models: np.ndarray


def init_states(problem, variant, rho, precomputes=None, bootstrap_noise=None,
                exchange_init=False):
    """Initial (server, clients) pair for a variant.

    Every client starts at its own local fit. Variants with an upload cache
    (DUAL_FREE, RERCE_FED_CLU) bootstrap it from a pre-loop exchange in
    which each client sends its local fit; ``bootstrap_noise`` (shape
    (K, L)) is added to those uploads when the exchange happens over noisy
    links, and defaults to exact transmission.

    By default the server starts at zero (model, previous model, and
    broadcast all zero vectors). With ``exchange_init=True`` the server
    instead aggregates the pre-loop uploads before the first round: its
    model becomes their average and its broadcast is formed the same way a
    post-round broadcast would be. This is the initialization under which
    the dual-ascent baseline and the dual-eliminated variant trace exactly
    the same trajectory (the dual vectors then sum to zero from the first
    round on; from a zero server start they pick up a constant offset and
    the trajectories split). Under exchange init the continual-variant
    cache stores the extrapolations 2*fit - 0 so that its slots hold the
    same kind of vector a post-round upload would.
    """
    if precomputes is None:
        precomputes = precompute_all(problem, rho)
    K, L = problem.num_clients, problem.model_dim

    clients = []
    for k in range(K):
        clients.append(
            ClientState(
                model=precomputes[k].local_fit.copy(),
                dual=np.zeros(L) if variant is AlgorithmVariant.ADMM_BASELINE else None,
                stored_broadcast=(
                    np.zeros(L) if variant is AlgorithmVariant.RERCE_FED_CLU else None
                ),
            )
        )

    fits = np.stack([p.local_fit for p in precomputes])
    noise = 0.0 if bootstrap_noise is None else np.asarray(bootstrap_noise, dtype=float)

    cache = None
    if variant is AlgorithmVariant.DUAL_FREE:
        cache = fits + noise
    elif variant is AlgorithmVariant.RERCE_FED_CLU:
        cache = (2.0 * fits if exchange_init else fits) + noise

    zero = np.zeros(L)
    if not exchange_init:
        server = ServerState(
            model=zero.copy(),
            model_prev=zero.copy(),
            broadcast=zero.copy(),
            upload_cache=cache,
        )
        return server, clients

    if variant is AlgorithmVariant.RERCE_FED_CLU:
        aggregate = cache.mean(axis=0)
        broadcast = aggregate
    else:
        aggregate = (fits + noise).mean(axis=0)
        if variant is AlgorithmVariant.ADMM_BASELINE:
            broadcast = aggregate
        else:
            broadcast = 2.0 * aggregate
    server = ServerState(
        model=aggregate.copy(),
        model_prev=zero.copy(),
        broadcast=broadcast.copy(),
        upload_cache=cache,
    )
    return server, clients


def _require_participants(schedule):
    if schedule.count == 0:
        raise ValueError("schedule selects no clients")


class _ExactLink:
    """Noise applicator for the zero-noise case."""

    def downlink(self, v, client):
        return np.array(v, dtype=float)

    def uplink(self, v, client):
        return np.array(v, dtype=float)


_EXACT = _ExactLink()


def admm_baseline_round(states, precomputes, rho, schedule, noise=None):
    """One round of the dual-ascent baseline.

    Scheduled clients receive the server aggregate, push their dual vector
    along the disagreement, re-solve their local problem against the updated
    dual, and upload model + dual/rho as a single vector. The server averages
    the uploads it received. Unscheduled clients keep their state.
    """
    server, clients = states
    _require_participants(schedule)
    if noise is None:
        noise = _EXACT
    if clients[0].dual is None:
        raise ValueError("client states carry no dual vector; wrong variant?")

    new_clients = list(clients)
    uploads = []
    for k in schedule.selected:
        k = int(k)
        received = noise.downlink(server.broadcast, k)
        st = clients[k]
        dual = st.dual + rho * (st.model - received)
        model = precomputes[k].local_fit - precomputes[k].gain @ (dual - rho * received)
        new_clients[k] = ClientState(model=model, dual=dual)
        uploads.append(noise.uplink(model + dual / rho, k))

    aggregate = np.mean(uploads, axis=0)
    new_server = ServerState(
        model=aggregate,
        model_prev=server.model,
        broadcast=aggregate,
    )
    return new_server, new_clients


def _blend(state_model, gain, rho, received):
    """Shared client update: pull the model toward the received vector."""
    return state_model + rho * (gain @ (received - state_model))


def dual_free_round(states, precomputes, rho, schedule, noise=None):
    """One round of the dual-eliminated variant.

    Scheduled clients blend the received broadcast into their models and
    upload. The server overwrites those clients' cache entries and divides
    the sum of the whole cache (including stale entries) by the number of
    scheduled clients, then broadcasts 2*new - old. With full participation
    this reproduces the baseline's trajectory; with partial participation
    the mismatch between cache size and divisor feeds error back into the
    broadcast and the recursion accumulates it.
    """
    server, clients = states
    _require_participants(schedule)
    if noise is None:
        noise = _EXACT
    if server.upload_cache is None:
        raise ValueError("server has no upload cache; wrong variant?")

    new_clients = list(clients)
    cache = server.upload_cache.copy()
    for k in schedule.selected:
        k = int(k)
        received = noise.downlink(server.broadcast, k)
        model = _blend(clients[k].model, precomputes[k].gain, rho, received)
        new_clients[k] = ClientState(model=model)
        cache[k] = noise.uplink(model, k)

    aggregate = cache.sum(axis=0) / schedule.count
    new_server = ServerState(
        model=aggregate,
        model_prev=server.model,
        broadcast=2.0 * aggregate - server.model,
        upload_cache=cache,
    )
    return new_server, new_clients


def rerce_round(states, precomputes, rho, schedule, noise=None):
    """One round of the reduced-communication variant.

    Identical client update to :func:`dual_free_round`, but the server
    averages only the uploads that actually arrived this round, so stale
    state never enters the aggregate.
    """
    server, clients = states
    _require_participants(schedule)
    if noise is None:
        noise = _EXACT

    new_clients = list(clients)
    uploads = []
    for k in schedule.selected:
        k = int(k)
        received = noise.downlink(server.broadcast, k)
        model = _blend(clients[k].model, precomputes[k].gain, rho, received)
        new_clients[k] = ClientState(model=model)
        uploads.append(noise.uplink(model, k))

    aggregate = np.mean(uploads, axis=0)
    new_server = ServerState(
        model=aggregate,
        model_prev=server.model,
        broadcast=2.0 * aggregate - server.model,
    )
    return new_server, new_clients


def rerce_clu_round(states, precomputes, rho, schedule, noise=None):
    """One round of the continual-local-updates variant.

    Every client updates every round: scheduled ones against a freshly
    received broadcast (which they also store), the rest against the
    broadcast they last received. Scheduled clients upload the extrapolation
    2*new - old of their own model; the server overwrites their cache slots
    and broadcasts the average of the cache over all clients.
    """
    server, clients = states
    _require_participants(schedule)
    if noise is None:
        noise = _EXACT
    if server.upload_cache is None:
        raise ValueError("server has no upload cache; wrong variant?")
    if clients[0].stored_broadcast is None:
        raise ValueError("client states carry no stored broadcast; wrong variant?")

    mask = schedule.indicators.astype(bool)
    cache = server.upload_cache.copy()
    new_clients = []
    for k, st in enumerate(clients):
        if mask[k]:
            received = noise.downlink(server.broadcast, k)
        else:
            received = st.stored_broadcast
        model = _blend(st.model, precomputes[k].gain, rho, received)
        new_clients.append(ClientState(model=model, stored_broadcast=received))
        if mask[k]:
            cache[k] = noise.uplink(2.0 * model - st.model, k)

    aggregate = cache.mean(axis=0)
    new_server = ServerState(
        model=aggregate,
        model_prev=server.model,
        broadcast=aggregate,
        upload_cache=cache,
    )
    return new_server, new_clients


_ROUND_OPS = {
    AlgorithmVariant.ADMM_BASELINE: admm_baseline_round,
    AlgorithmVariant.DUAL_FREE: dual_free_round,
    AlgorithmVariant.RERCE_FED: rerce_round,
    AlgorithmVariant.RERCE_FED_CLU: rerce_clu_round,
}


def _snapshot(server, clients):
    return RoundSnapshot(
        server=server,
        client_models=np.stack([c.model for c in clients]),
    )


def run(config, schedule_source=None, noise_source=None, bootstrap_noise=None):
    """Run one trial and return its full trajectory.

    The trajectory has ``num_rounds + 1`` entries, the first being the
    initial state. All randomness keys off ``config.trial_seed``: schedules,
    per-round link noise, and (for cache-carrying variants) the bootstrap
    uploads. ``schedule_source`` and ``noise_source`` override the built-in
    draws; each maps a round index to a RoundSchedule, respectively to an
    object with ``downlink(v, k)`` / ``uplink(v, k)`` methods. Rounds whose
    schedule selects nobody (possible in Bernoulli mode) are skipped whole:
    no transmissions, no updates.
    """
    config.validate()
    problem = config.problem
    K = problem.num_clients
    precomputes = precompute_all(problem, config.rho)

    if schedule_source is None:
        def schedule_source(n):
            return draw_schedule(K, config.scheduler, n, seed=config.trial_seed)

    if noise_source is None:
        def noise_source(n):
            return TaggedLinkNoise(config.channel, config.trial_seed, n)

    needs_bootstrap = config.exchange_init or config.variant in (
        AlgorithmVariant.DUAL_FREE,
        AlgorithmVariant.RERCE_FED_CLU,
    )
    if bootstrap_noise is None and needs_bootstrap:
        bootstrap_noise = np.stack(
            [
                corrupt(
                    np.zeros(problem.model_dim),
                    config.channel.uplink_variance(k),
                    (config.trial_seed, BOOTSTRAP_STREAM, k, 0),
                )
                for k in range(K)
            ]
        )

    server, clients = init_states(
        problem,
        config.variant,
        config.rho,
        precomputes=precomputes,
        bootstrap_noise=bootstrap_noise,
        exchange_init=config.exchange_init,
    )
    round_op = _ROUND_OPS[config.variant]

    trajectory = [_snapshot(server, clients)]
    for n in range(config.num_rounds):
        schedule = schedule_source(n)
        if schedule.count > 0:
            server, clients = round_op(
                (server, clients), precomputes, config.rho, schedule, noise_source(n)
            )
        trajectory.append(_snapshot(server, clients))
    return trajectory
