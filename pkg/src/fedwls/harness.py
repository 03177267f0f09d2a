"""Monte Carlo experiment driver and theory-versus-simulation comparison.

The simulator in :mod:`fedwls.algorithms` runs one trial at a time with
per-transmission tagged noise streams. For experiments we want hundreds of
trials of the same configuration, so this module carries a batched engine
that advances all trials of a variant in lockstep as (clients, trials, dim)
arrays. Each trial still owns its randomness: trial ``t`` of a run with
master seed ``s`` draws schedules, downlink noise, and uplink noise from the
three generators seeded ``SeedSequence(s, spawn_key=(t, purpose))``, with the
purpose codes shared with :mod:`fedwls.channel`. Two invocations with the
same master seed therefore produce identical output, and because all
cross-trial reductions go through exact summation (``math.fsum``), any
permutation of the trials leaves every aggregate bit-identical.

Divergence policy: a trial whose normalized error passes +100 dB is frozen
on the spot, excluded from every averaged statistic, and counted in
``diverged_count``; a curve with no surviving trials reports the +120 dB
marker value. Diverged trials are never silently averaged.

The comparison driver converts second-moment predictions to the simulator's
normalized scale. The prediction is the steady-state energy of the stacked
deviation over two consecutive rounds of all clients, so it is divided by
``2 * num_clients * ||w_star||**2`` before the decibel conversion. That one
constant is the most likely place for a systematic offset to hide, so the
report carries it explicitly.
"""

import csv
import json
import math
from dataclasses import dataclass, is_dataclass, fields as dataclass_fields
from datetime import datetime, timezone
from enum import Enum

import numpy as np

from .algorithms import AlgorithmVariant
from .channel import (
    DOWNLINK_STREAM,
    SCHEDULE_STREAM,
    UPLINK_STREAM,
    SchedulerConfig,
    SchedulerMode,
)
from .dataset import generate_problem, optimal_wls, precompute_all
from .theory import SecondMomentAnalysis, check_spectral_properties, mean_transition

# Floor for decibel conversion of exact zeros: 10*log10(1e-32) = -320 dB.
NMSE_FLOOR_DB = -320.0
_FLOOR_LINEAR = 1e-32

# A trial is declared divergent once its NMSE passes this level ...
DIVERGENCE_CUTOFF_DB = 100.0
_CUTOFF_LINEAR = 1e10
# ... and its curve is reported at this marker value from then on.
DIVERGENCE_MARKER_DB = 120.0

_DB = 10.0 / math.log(10.0)

_CACHE_VARIANTS = (AlgorithmVariant.DUAL_FREE, AlgorithmVariant.RERCE_FED_CLU)


def nmse(client_models, weights_solution):
    """Normalized mean-square error of a set of client models, in dB.

    Averages ``||w_k - w_star||^2`` over clients, divides by
    ``||w_star||^2``, and converts to decibels. Exact agreement would be
    minus infinity; it is reported as the -320 dB floor instead so that the
    value stays finite and file formats stay simple.
    """
    models = np.asarray(client_models, dtype=float)
    target = np.asarray(weights_solution, dtype=float)
    if models.ndim != 2 or models.shape[1] != target.shape[0]:
        raise ValueError(
            f"expected client models of shape (K, {target.shape[0]}), got {models.shape}"
        )
    scale = float(target @ target)
    if scale == 0.0:
        raise ValueError("solution vector is zero; NMSE is undefined")
    diff = models - target[None, :]
    value = float((diff * diff).sum(axis=1).mean()) / scale
    return 10.0 * math.log10(max(value, _FLOOR_LINEAR))


def bias_metric(mean_model, weights_solution):
    """Squared distance of a trial-averaged model from the solution, per
    coordinate: ``||mean - w_star||^2 / L``.

    With independent trials this decays like 1/M in the number of trials
    averaged, which is what makes it useful for checking that the steady
    state wanders around the solution instead of around an offset point.
    """
    mean_model = np.asarray(mean_model, dtype=float)
    target = np.asarray(weights_solution, dtype=float)
    if mean_model.shape != target.shape:
        raise ValueError(
            f"model shape {mean_model.shape} does not match solution shape {target.shape}"
        )
    diff = mean_model - target
    return float(diff @ diff) / target.shape[0]


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one Monte Carlo experiment.

    ``channel``, ``scheduler``, and the variant list say what runs;
    ``num_trials`` independent trials of ``num_rounds`` rounds each run on a
    single shared problem instance (either generated from ``dataset`` or
    passed directly to :func:`run_monte_carlo`). ``steady_window`` is the
    number of trailing rounds averaged into the steady-state statistic and
    defaults to the final tenth of the run.

    ``start`` selects the initial condition: ``"cold"`` starts every client
    at its local fit with the server at zero (the default, matching
    :func:`fedwls.algorithms.init_states`), while ``"solution"`` starts at
    the consensus fixed point and bootstraps the server memory from two
    scheduled uploads of the solution over the noisy uplink. The solution
    start is how steady-state statistics are measured without waiting out
    the transient.
    """

    channel: object
    scheduler: object
    variants: tuple
    dataset: object = None
    rho: float = 1.0
    num_rounds: int = 1000
    num_trials: int = 100
    master_seed: int = 0
    steady_window: int = None
    exchange_init: bool = False
    start: str = "cold"
    track_bias: bool = False
    track_dispersion: bool = False
    sample_rounds: tuple = ()

    def validate(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.num_rounds < 1:
            raise ValueError("num_rounds must be at least 1")
        if self.num_trials < 1:
            raise ValueError("num_trials must be at least 1")
        if len(tuple(self.variants)) == 0:
            raise ValueError("at least one algorithm variant is required")
        for v in self.variants:
            if not isinstance(v, AlgorithmVariant):
                raise ValueError(f"not an AlgorithmVariant: {v!r}")
        w = self.steady_window
        if w is not None and not (1 <= w <= self.num_rounds):
            raise ValueError(
                f"steady_window must lie in [1, {self.num_rounds}], got {w}"
            )
        if self.start not in ("cold", "solution"):
            raise ValueError(f"start must be 'cold' or 'solution', got {self.start!r}")
        if self.start == "solution" and self.exchange_init:
            raise ValueError("exchange_init only applies to the cold start")
        for r in self.sample_rounds:
            if not (0 <= r <= self.num_rounds):
                raise ValueError(
                    f"sample round {r} outside [0, {self.num_rounds}]"
                )

    @property
    def resolved_window(self):
        if self.steady_window is not None:
            return self.steady_window
        return max(1, self.num_rounds // 10)


@dataclass
class LearningCurve:
    """Aggregated trajectory of one variant over all surviving trials.

    ``nmse_db`` has one entry per round plus the initial state. Trials that
    diverged are excluded from every entry (the exclusion is retroactive, a
    trial either contributes everywhere or nowhere) and counted in
    ``diverged_count``. ``steady_samples`` holds each surviving trial's
    linear NMSE averaged over the trailing window; ``steady_db`` and its
    standard error summarize them. ``bias`` and ``dispersion_samples`` are
    filled only when the experiment asked for them.

    Per-trial views: ``diverged_mask`` flags each trial, and
    ``round_samples`` maps each requested sample round to all trials' linear
    NMSE values there (diverged trials hold the value they froze at). These
    support per-trial claims such as "the error at round b exceeds the error
    at round a in most trials" without shipping the full per-trial history.
    """

    variant: AlgorithmVariant
    nmse_db: np.ndarray
    nmse_stderr_db: np.ndarray
    num_trials: int
    diverged_count: int
    window: int
    steady_db: float
    steady_stderr_db: float
    steady_samples: np.ndarray
    diverged_mask: np.ndarray = None
    round_samples: dict = None
    bias: np.ndarray = None
    dispersion_samples: np.ndarray = None


@dataclass
class MonteCarloResult:
    """Everything :func:`run_monte_carlo` produces: the problem the trials
    ran on, its exact solution, and one :class:`LearningCurve` per variant.
    """

    config: ExperimentConfig
    problem: object
    weights_solution: np.ndarray
    curves: dict


def _stream(master_seed, trial, purpose):
    return np.random.default_rng(
        np.random.SeedSequence(master_seed, spawn_key=(trial, purpose))
    )


def _link_stds(channel, num_clients, direction):
    """Per-client noise standard deviations, or None when the link is exact."""
    if direction == "down":
        var = np.array([channel.downlink_variance(k) for k in range(num_clients)])
    else:
        var = np.array([channel.uplink_variance(k) for k in range(num_clients)])
    if not var.any():
        return None
    return np.sqrt(var)


def _draw_uniforms(generators, num_clients):
    return np.stack([g.random(num_clients) for g in generators], axis=1)


def _draw_noise(generators, stds, block_dim):
    if stds is None:
        return 0.0
    out = np.stack(
        [g.standard_normal((stds.shape[0], block_dim)) for g in generators], axis=1
    )
    return out * stds[:, None, None]


def _participation_mask(uniforms, scheduler):
    """Vectorized schedule draw: one 0/1 column per trial.

    Matches :func:`fedwls.channel.schedule_from_uniforms` column by column,
    so the engine and the single-trial runner select the same clients when
    fed the same uniforms.
    """
    num_clients, _ = uniforms.shape
    mask = np.zeros(uniforms.shape)
    if scheduler.mode is SchedulerMode.FIXED_CARDINALITY:
        c = scheduler.cardinality
        if c >= num_clients:
            mask[:] = 1.0
        else:
            idx = np.argpartition(uniforms, c, axis=0)[:c]
            np.put_along_axis(mask, idx, 1.0, axis=0)
    else:
        mask[uniforms < scheduler.participation_prob] = 1.0
    return mask


def _apply_gain(gains4, vectors):
    """Batched gain application: gains4 is (K, 1, L, L), vectors (K, M, L)."""
    return np.matmul(gains4, vectors[..., None])[..., 0]


def _advance(state, variant, gains4, fits, rho, mask, down_noise, up_noise):
    """One synchronous round over all trial columns, in place.

    ``mask`` must already have dead trials zeroed out; a column with no
    participant (possible under Bernoulli scheduling, guaranteed for dead
    trials) is skipped whole, exactly like the single-trial runner skips
    empty rounds.
    """
    mask3 = mask[:, :, None].astype(bool)
    count = mask.sum(axis=0)
    active = (count > 0)[:, None]
    safe = np.maximum(count, 1.0)[:, None]
    broadcast = state["broadcast"]

    if variant is AlgorithmVariant.ADMM_BASELINE:
        received = broadcast[None, :, :] + down_noise
        dual_new = state["dual"] + rho * (state["w"] - received)
        w_new = fits[:, None, :] - _apply_gain(gains4, dual_new - rho * received)
        state["dual"] = np.where(mask3, dual_new, state["dual"])
        state["w"] = np.where(mask3, w_new, state["w"])
        uploads = state["w"] + state["dual"] / rho + up_noise
        aggregate = np.einsum("km,kml->ml", mask, uploads) / safe
        state["model"] = np.where(active, aggregate, state["model"])
        state["broadcast"] = state["model"]
        return

    if variant is AlgorithmVariant.DUAL_FREE:
        received = broadcast[None, :, :] + down_noise
        w_new = state["w"] + rho * _apply_gain(gains4, received - state["w"])
        state["w"] = np.where(mask3, w_new, state["w"])
        state["cache"] = np.where(mask3, state["w"] + up_noise, state["cache"])
        aggregate = state["cache"].sum(axis=0) / safe
        extrapolated = 2.0 * aggregate - state["model"]
        state["broadcast"] = np.where(active, extrapolated, state["broadcast"])
        state["model"] = np.where(active, aggregate, state["model"])
        return

    if variant is AlgorithmVariant.RERCE_FED:
        received = broadcast[None, :, :] + down_noise
        w_new = state["w"] + rho * _apply_gain(gains4, received - state["w"])
        state["w"] = np.where(mask3, w_new, state["w"])
        aggregate = np.einsum("km,kml->ml", mask, state["w"] + up_noise) / safe
        extrapolated = 2.0 * aggregate - state["model"]
        state["broadcast"] = np.where(active, extrapolated, state["broadcast"])
        state["model"] = np.where(active, aggregate, state["model"])
        return

    # Continual local updates: everyone moves, scheduled clients refresh
    # their stored broadcast and upload an extrapolation of their own model.
    fresh = broadcast[None, :, :] + down_noise
    received = np.where(mask3, fresh, state["stored"])
    w_old = state["w"]
    w_new = w_old + rho * _apply_gain(gains4, received - w_old)
    active3 = active[None, :, :]
    state["stored"] = np.where(active3, received, state["stored"])
    state["w"] = np.where(active3, w_new, w_old)
    state["cache"] = np.where(mask3, 2.0 * w_new - w_old + up_noise, state["cache"])
    aggregate = state["cache"].mean(axis=0)
    state["model"] = np.where(active, aggregate, state["model"])
    state["broadcast"] = state["model"]


def _cold_state(variant, fits, num_trials, exchange_init, bootstrap):
    """Initial batch state mirroring :func:`fedwls.algorithms.init_states`."""
    num_clients, dim = fits.shape
    w = np.repeat(fits[:, None, :], num_trials, axis=1)
    state = {"w": w}

    uploads = fits[:, None, :] + bootstrap
    if variant is AlgorithmVariant.ADMM_BASELINE:
        state["dual"] = np.zeros((num_clients, num_trials, dim))
    elif variant is AlgorithmVariant.DUAL_FREE:
        state["cache"] = np.broadcast_to(uploads, w.shape).copy()
    elif variant is AlgorithmVariant.RERCE_FED_CLU:
        base = 2.0 * fits if exchange_init else fits
        state["cache"] = np.broadcast_to(base[:, None, :] + bootstrap, w.shape).copy()
        state["stored"] = np.zeros_like(w)

    zero = np.zeros((num_trials, dim))
    if not exchange_init:
        state["model"] = zero
        state["broadcast"] = zero.copy()
        return state

    if variant is AlgorithmVariant.RERCE_FED_CLU:
        aggregate = state["cache"].mean(axis=0)
        broadcast = aggregate
    else:
        aggregate = np.broadcast_to(uploads, w.shape).mean(axis=0)
        if variant is AlgorithmVariant.ADMM_BASELINE:
            broadcast = aggregate
        else:
            broadcast = 2.0 * aggregate
    state["model"] = aggregate
    state["broadcast"] = broadcast.copy()
    return state


def _solution_state(variant, fits, gains, target, rho, num_trials, scheduler,
                    draw_uniforms, draw_uplink):
    """Batch state at the consensus fixed point.

    The clients sit exactly at the solution. Server memory is what it would
    hold had the solution been uploaded through the usual noisy exchange:
    variants that extrapolate from two aggregates get two scheduled
    bootstrap uploads, the cache-carrying continual variant gets a noisy
    cache refresh. The dual-ascent baseline has an exact stationary point,
    so it starts there with no bootstrap draws.
    """
    num_clients, dim = fits.shape
    w = np.repeat(target[None, None, :], num_clients, axis=0)
    w = np.repeat(w, num_trials, axis=1)
    state = {"w": w}
    tiled = np.repeat(target[None, :], num_trials, axis=0)

    if variant is AlgorithmVariant.ADMM_BASELINE:
        duals = np.stack(
            [np.linalg.solve(g, f - target) + rho * target for g, f in zip(gains, fits)]
        )
        state["dual"] = np.repeat(duals[:, None, :], num_trials, axis=1)
        state["model"] = tiled
        state["broadcast"] = tiled.copy()
        return state

    if variant is AlgorithmVariant.DUAL_FREE:
        raise ValueError(
            "the dual-free variant has no consistent fixed point under "
            "partial participation; use the cold start"
        )

    if variant is AlgorithmVariant.RERCE_FED_CLU:
        state["cache"] = w + draw_uplink()
        aggregate = state["cache"].mean(axis=0)
        state["model"] = aggregate
        state["broadcast"] = aggregate.copy()
        state["stored"] = np.repeat(aggregate[None, :, :], num_clients, axis=0)
        return state

    aggregates = []
    for _ in range(2):
        mask = _participation_mask(draw_uniforms(), scheduler)
        count = mask.sum(axis=0)
        safe = np.maximum(count, 1.0)[:, None]
        agg = np.einsum("km,kml->ml", mask, w + draw_uplink()) / safe
        aggregates.append(np.where((count > 0)[:, None], agg, tiled))
    state["model"] = aggregates[1]
    state["broadcast"] = 2.0 * aggregates[1] - aggregates[0]
    return state


def _nmse_rows(w, target, scale):
    diff = w - target[None, None, :]
    return (diff * diff).sum(axis=2).mean(axis=0) / scale


def _dispersion_rows(w_now, w_prev):
    """Consensus-excluded energy of the two-round stacked state, per trial."""
    stacked = np.concatenate([w_now, w_prev], axis=0)
    centered = stacked - stacked.mean(axis=0)[None, :, :]
    return (centered * centered).sum(axis=(0, 2))


def _aggregate_curve(linear, keep):
    """Round-wise mean and standard error over the kept trials, in dB.

    Sums are exact (math.fsum), so the result does not depend on trial
    order. With nothing to keep the curve is the divergence marker.
    """
    length = linear.shape[1]
    if not keep.any():
        return (
            np.full(length, DIVERGENCE_MARKER_DB),
            np.zeros(length),
        )
    rows = linear[keep]
    n = rows.shape[0]
    means = np.empty(length)
    errors = np.empty(length)
    for t in range(length):
        column = rows[:, t]
        m = math.fsum(column) / n
        means[t] = m
        if n > 1:
            var = math.fsum((column - m) ** 2) / (n - 1)
            errors[t] = math.sqrt(var / n)
        else:
            errors[t] = 0.0
    floored = np.maximum(means, _FLOOR_LINEAR)
    return 10.0 * np.log10(floored), _DB * errors / floored


def _summarize_samples(samples):
    """(mean in dB, standard error in dB) of positive linear samples."""
    n = samples.shape[0]
    mean = math.fsum(samples) / n
    if n > 1:
        var = math.fsum((samples - mean) ** 2) / (n - 1)
        err = math.sqrt(var / n)
    else:
        err = 0.0
    mean = max(mean, _FLOOR_LINEAR)
    return 10.0 * math.log10(mean), _DB * err / mean


def _window_means(values, window, keep):
    rows = values[keep]
    return np.array([math.fsum(row[-window:]) / window for row in rows])


def _simulate_variant(problem, precomputes, target, config, variant,
                      round_override=None, bootstrap_override=None):
    num_clients = problem.num_clients
    dim = problem.model_dim
    trials = config.num_trials
    rounds = config.num_rounds
    fits = np.stack([p.local_fit for p in precomputes])
    gains = np.stack([p.gain for p in precomputes])
    gains4 = gains[:, None]
    scale = float(target @ target)

    down_stds = _link_stds(config.channel, num_clients, "down")
    up_stds = _link_stds(config.channel, num_clients, "up")
    schedule_gens = [_stream(config.master_seed, t, SCHEDULE_STREAM) for t in range(trials)]
    down_gens = [_stream(config.master_seed, t, DOWNLINK_STREAM) for t in range(trials)]
    up_gens = [_stream(config.master_seed, t, UPLINK_STREAM) for t in range(trials)]

    if config.start == "solution":
        state = _solution_state(
            variant, fits, gains, target, config.rho, trials, config.scheduler,
            lambda: _draw_uniforms(schedule_gens, num_clients),
            lambda: (_draw_noise(up_gens, up_stds, dim) if up_stds is not None
                     else np.zeros((num_clients, trials, dim))),
        )
    else:
        needs_bootstrap = config.exchange_init or variant in _CACHE_VARIANTS
        if bootstrap_override is not None:
            bootstrap = bootstrap_override
        elif needs_bootstrap:
            bootstrap = _draw_noise(up_gens, up_stds, dim)
        else:
            bootstrap = 0.0
        state = _cold_state(variant, fits, trials, config.exchange_init, bootstrap)

    linear = np.empty((trials, rounds + 1))
    dispersion = np.empty((trials, rounds + 1)) if config.track_dispersion else None
    model_history = (
        np.empty((rounds + 1, trials, dim)) if config.track_bias else None
    )
    alive = np.ones(trials, dtype=bool)

    linear[:, 0] = _nmse_rows(state["w"], target, scale)
    if dispersion is not None:
        dispersion[:, 0] = _dispersion_rows(state["w"], state["w"])
    if model_history is not None:
        model_history[0] = state["model"]
    alive &= linear[:, 0] <= _CUTOFF_LINEAR

    for n in range(1, rounds + 1):
        if round_override is not None:
            mask, down_noise, up_noise = round_override(n - 1)
            mask = np.asarray(mask, dtype=float)
        else:
            uniforms = _draw_uniforms(schedule_gens, num_clients)
            mask = _participation_mask(uniforms, config.scheduler)
            down_noise = _draw_noise(down_gens, down_stds, dim)
            up_noise = _draw_noise(up_gens, up_stds, dim)
        mask = mask * alive
        w_before = state["w"]
        _advance(state, variant, gains4, fits, config.rho, mask, down_noise, up_noise)
        linear[:, n] = _nmse_rows(state["w"], target, scale)
        if dispersion is not None:
            dispersion[:, n] = _dispersion_rows(state["w"], w_before)
        if model_history is not None:
            model_history[n] = state["model"]
        # NaN-proof: a non-finite NMSE also fails this test and kills the trial.
        alive &= linear[:, n] <= _CUTOFF_LINEAR

    window = config.resolved_window
    nmse_db, stderr_db = _aggregate_curve(linear, alive)
    steady_samples = _window_means(linear, window, alive)
    if steady_samples.size:
        steady_db, steady_err = _summarize_samples(steady_samples)
    else:
        steady_db, steady_err = None, None

    bias_curve = None
    if model_history is not None:
        bias_curve = np.empty(rounds + 1)
        kept = model_history[:, alive, :]
        n_kept = max(kept.shape[1], 1)
        for t in range(rounds + 1):
            mean_model = np.array(
                [math.fsum(kept[t, :, a]) / n_kept for a in range(dim)]
            )
            bias_curve[t] = bias_metric(mean_model, target) if kept.shape[1] else np.nan

    dispersion_samples = None
    if dispersion is not None:
        dispersion_samples = _window_means(dispersion, window, alive)

    return LearningCurve(
        variant=variant,
        nmse_db=nmse_db,
        nmse_stderr_db=stderr_db,
        num_trials=trials,
        diverged_count=int(trials - alive.sum()),
        window=window,
        steady_db=steady_db,
        steady_stderr_db=steady_err,
        steady_samples=steady_samples,
        diverged_mask=~alive,
        round_samples={int(r): linear[:, int(r)].copy() for r in config.sample_rounds},
        bias=bias_curve,
        dispersion_samples=dispersion_samples,
    )


def run_monte_carlo(config, problem=None, _round_override=None,
                    _bootstrap_override=None):
    """Run every variant of an experiment and aggregate the trials.

    All trials share one problem instance: the one passed in, or one
    generated from ``config.dataset``. Each variant replays the same trial
    seeds, so schedules and link noise are common random numbers across
    variants and curve differences are differences between algorithms, not
    between draws.

    The two underscore parameters are test seams that replace the internal
    draws with caller-supplied arrays; they are not part of the public
    surface.
    """
    config.validate()
    if problem is None:
        if config.dataset is None:
            raise ValueError("config carries no dataset config and no problem was given")
        problem = generate_problem(config.dataset)
    config.scheduler.validate(problem.num_clients)
    config.channel.validate(problem.num_clients)

    precomputes = precompute_all(problem, config.rho)
    target = optimal_wls(problem)
    curves = {}
    for variant in config.variants:
        curves[variant] = _simulate_variant(
            problem, precomputes, target, config, variant,
            round_override=_round_override,
            bootstrap_override=_bootstrap_override,
        )
    return MonteCarloResult(
        config=config,
        problem=problem,
        weights_solution=target,
        curves=curves,
    )


@dataclass
class TheorySimPoint:
    """One sweep entry of a theory-versus-simulation comparison."""

    sweep_value: float
    theory_db: float
    sim_db: float
    sim_stderr_db: float
    gap_db: float
    diverged_count: int = 0
    unstable: bool = False


@dataclass
class ComparisonReport:
    """Theory against simulation across a sweep of channel configurations.

    ``conversion_constant`` is ``2 * num_clients * ||w_star||**2``: the
    predicted steady-state energy covers the stacked deviations of two
    consecutive rounds of all clients, and the simulator's NMSE averages
    per-client errors normalized by the solution energy, so every predicted
    energy is divided by this constant before the dB conversion. Any error
    in that bookkeeping shifts all points by the same offset, which is why
    the constant is carried in the report instead of buried in the code.
    For the ``"dispersion"`` statistic the two sides are compared as raw
    energies and the constant is None.

    When the second-moment recursion is unstable there is no steady state
    to compare against; ``mean_square_stable`` is False and every point is
    marked unstable with empty values.
    """

    points: list
    statistic: str
    conversion_constant: float
    mean_square_stable: bool
    settings: dict

    def to_rows(self):
        """Rows for the sweep CSV: (sweep_param, theory_db, sim_db, gap_db)."""
        return [
            (p.sweep_value, p.theory_db, p.sim_db, p.gap_db) for p in self.points
        ]


def compare_theory_sim(problem, rho, cardinality, channels, num_rounds, num_trials,
                       master_seed=0, sweep_values=None, statistic="nmse",
                       variant=AlgorithmVariant.RERCE_FED, start="cold",
                       window=None, deviation_mode="round_one", engine="auto",
                       include_cross_blocks=False, analysis=None, scheduler=None):
    """Sweep channel configurations and compare prediction to simulation.

    The expensive second-moment factorization depends only on the problem,
    the penalty, and the participation level, so it is built once and reused
    for every channel in the sweep (or taken from ``analysis`` if the caller
    already has one). Per channel this runs ``num_trials`` trials of the
    chosen variant and compares the windowed steady-state statistic against
    the prediction: NMSE by default, or the consensus-excluded dispersion
    with ``statistic="dispersion"`` (useful because it sidesteps directions
    in which the simulation performs a slow conserved random walk).

    Every sweep point reuses the same master seed, so the simulation noise
    is common across points and the gap varies smoothly along the sweep.
    """
    if statistic not in ("nmse", "dispersion"):
        raise ValueError(f"unknown statistic {statistic!r}")
    channels = list(channels)
    if sweep_values is None:
        sweep_values = list(range(len(channels)))
    sweep_values = list(sweep_values)
    if len(sweep_values) != len(channels):
        raise ValueError("sweep_values and channels must have equal length")
    if scheduler is None:
        scheduler = SchedulerConfig(
            mode=SchedulerMode.FIXED_CARDINALITY, cardinality=int(cardinality)
        )
    if analysis is None:
        analysis = SecondMomentAnalysis(problem, rho, cardinality, engine=engine)

    target = optimal_wls(problem)
    constant = 2.0 * problem.num_clients * float(target @ target)
    stable = analysis.mean_square_stable

    points = []
    for value, channel in zip(sweep_values, channels):
        if not stable:
            points.append(
                TheorySimPoint(
                    sweep_value=value, theory_db=None, sim_db=None,
                    sim_stderr_db=None, gap_db=None, unstable=True,
                )
            )
            continue
        report = analysis.report(
            channel, deviation_mode=deviation_mode,
            include_cross_blocks=include_cross_blocks,
        )
        if statistic == "nmse":
            theory_linear = report.total / constant
        else:
            theory_linear = report.dispersion
        theory_db = 10.0 * math.log10(max(theory_linear, _FLOOR_LINEAR))

        config = ExperimentConfig(
            channel=channel,
            scheduler=scheduler,
            variants=(variant,),
            rho=rho,
            num_rounds=num_rounds,
            num_trials=num_trials,
            master_seed=master_seed,
            steady_window=window,
            start=start,
            track_dispersion=(statistic == "dispersion"),
        )
        result = run_monte_carlo(config, problem=problem)
        curve = result.curves[variant]
        samples = (
            curve.steady_samples if statistic == "nmse" else curve.dispersion_samples
        )
        if samples is None or samples.size == 0:
            sim_db, sim_err, gap = None, None, None
        else:
            sim_db, sim_err = _summarize_samples(samples)
            gap = sim_db - theory_db
        points.append(
            TheorySimPoint(
                sweep_value=value,
                theory_db=theory_db,
                sim_db=sim_db,
                sim_stderr_db=sim_err,
                gap_db=gap,
                diverged_count=curve.diverged_count,
            )
        )

    return ComparisonReport(
        points=points,
        statistic=statistic,
        conversion_constant=constant if statistic == "nmse" else None,
        mean_square_stable=stable,
        settings={
            "rho": rho,
            "cardinality": cardinality,
            "num_rounds": num_rounds,
            "num_trials": num_trials,
            "master_seed": master_seed,
            "window": window,
            "variant": variant.value,
            "start": start,
            "deviation_mode": deviation_mode,
            "include_cross_blocks": include_cross_blocks,
        },
    )


@dataclass
class BiasScalingResult:
    """Bias of the trial-averaged global model as trials accumulate.

    ``metrics[i]`` is :func:`bias_metric` of the average over the first
    ``trial_counts[i]`` pool trials, itself averaged over the snapshot
    rounds. An unbiased steady state makes this decay like 1/M; a biased
    one makes it flatten at the squared bias.
    """

    trial_counts: list
    metrics: np.ndarray
    metrics_db: np.ndarray
    snapshot_rounds: list
    relaxation_time: float
    pool_size: int
    seed: int
    variant: AlgorithmVariant


def run_bias_scaling(problem, rho, scheduler, channel, trial_counts, seed=0,
                     pool_size=None, num_snapshots=8, relaxation_time=None,
                     variant=AlgorithmVariant.RERCE_FED, start="solution"):
    """Measure how the trial-averaged model's bias scales with trial count.

    Runs one pool of trials in a single batched pass and snapshots the
    server model at ``num_snapshots`` rounds, all placed well past the
    estimated relaxation time (six times it, then half of it apart) so the
    snapshots sample the steady state. The metric for M trials averages the
    first M pool columns; nested counts therefore share trials, which is
    deliberate: the comparison across M is then monotone in the law of
    large numbers rather than jittered by independent redraws.

    The pool runs on a single noise stream seeded by ``seed`` (trial columns
    here are not individually reseedable, unlike :func:`run_monte_carlo`,
    which would need one generator triple per pool column). The relaxation
    time is estimated from the spectrum of the mean recursion when not given
    explicitly.
    """
    counts = [int(c) for c in trial_counts]
    if not counts:
        raise ValueError("trial_counts is empty")
    if min(counts) < 1:
        raise ValueError("trial counts must be positive")
    pool = int(pool_size) if pool_size is not None else max(counts)
    if max(counts) > pool:
        raise ValueError(
            f"trial_counts go up to {max(counts)} but the pool holds {pool}"
        )
    if num_snapshots < 1:
        raise ValueError("num_snapshots must be at least 1")

    num_clients = problem.num_clients
    dim = problem.model_dim
    scheduler.validate(num_clients)
    channel.validate(num_clients)

    if relaxation_time is None:
        participation = scheduler.mean_participation(num_clients)
        mean_part = mean_transition(problem, rho, participation)
        spectrum = check_spectral_properties(mean_part.matrix)
        if spectrum.subunit_radius >= 1.0:
            raise RuntimeError(
                "the mean recursion does not relax; no steady state to sample"
            )
        relaxation_time = 1.0 / (1.0 - spectrum.subunit_radius)
    first = math.ceil(6.0 * relaxation_time)
    spacing = max(1, math.ceil(relaxation_time / 2.0))
    snapshot_rounds = [first + j * spacing for j in range(num_snapshots)]

    precomputes = precompute_all(problem, rho)
    target = optimal_wls(problem)
    fits = np.stack([p.local_fit for p in precomputes])
    gains = np.stack([p.gain for p in precomputes])
    gains4 = gains[:, None]
    down_stds = _link_stds(channel, num_clients, "down")
    up_stds = _link_stds(channel, num_clients, "up")

    rng = np.random.default_rng(np.random.SeedSequence(seed))

    def draw_uniforms():
        return rng.random((num_clients, pool))

    def draw_link(stds):
        if stds is None:
            return 0.0
        return rng.standard_normal((num_clients, pool, dim)) * stds[:, None, None]

    if start == "solution":
        state = _solution_state(
            variant, fits, gains, target, rho, pool, scheduler,
            draw_uniforms,
            lambda: (draw_link(up_stds) if up_stds is not None
                     else np.zeros((num_clients, pool, dim))),
        )
    elif start == "cold":
        needs_bootstrap = variant in _CACHE_VARIANTS
        state = _cold_state(
            variant, fits, pool, False,
            draw_link(up_stds) if needs_bootstrap else 0.0,
        )
    else:
        raise ValueError(f"start must be 'cold' or 'solution', got {start!r}")

    wanted = {r: j for j, r in enumerate(snapshot_rounds)}
    snapshots = np.empty((num_snapshots, pool, dim))
    for n in range(1, snapshot_rounds[-1] + 1):
        mask = _participation_mask(draw_uniforms(), scheduler)
        _advance(state, variant, gains4, fits, rho, mask,
                 draw_link(down_stds), draw_link(up_stds))
        if n in wanted:
            snapshots[wanted[n]] = state["model"]

    if not np.isfinite(snapshots).all():
        raise RuntimeError("the bias pool diverged; snapshots are not finite")

    metrics = []
    for m in counts:
        per_round = [
            bias_metric(snapshots[j, :m].mean(axis=0), target)
            for j in range(num_snapshots)
        ]
        metrics.append(math.fsum(per_round) / num_snapshots)
    metrics = np.array(metrics)
    return BiasScalingResult(
        trial_counts=counts,
        metrics=metrics,
        metrics_db=10.0 * np.log10(np.maximum(metrics, _FLOOR_LINEAR)),
        snapshot_rounds=snapshot_rounds,
        relaxation_time=float(relaxation_time),
        pool_size=pool,
        seed=seed,
        variant=variant,
    )


def _format_number(value):
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.12g}"


def write_curve_csv(result, path):
    """Write per-round learning curves: one row per (variant, round).

    Columns: round, variant, nmse_db_mean, nmse_db_stderr, diverged_count.
    RFC 4180 formatting (CRLF rows, UTF-8, '.' decimal); byte-identical for
    identical inputs.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["round", "variant", "nmse_db_mean", "nmse_db_stderr", "diverged_count"]
        )
        for variant in result.config.variants:
            curve = result.curves[variant]
            for t in range(curve.nmse_db.shape[0]):
                writer.writerow(
                    [
                        t,
                        variant.value,
                        _format_number(curve.nmse_db[t]),
                        _format_number(curve.nmse_stderr_db[t]),
                        curve.diverged_count,
                    ]
                )


def write_comparison_csv(report, path):
    """Write a sweep comparison: sweep_param, theory_db, sim_db, gap_db.

    Unstable or all-divergent points keep their row with the unavailable
    fields left empty, so the sweep axis stays complete.
    """
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sweep_param", "theory_db", "sim_db", "gap_db"])
        for row in report.to_rows():
            writer.writerow([_format_number(v) for v in row])


def write_bias_csv(result, path):
    """Write bias-versus-trial-count rows: num_trials, bias, bias_db."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["num_trials", "bias", "bias_db"])
        for m, value, db in zip(
            result.trial_counts, result.metrics, result.metrics_db
        ):
            writer.writerow([m, _format_number(value), _format_number(db)])


def _serialize(value):
    if is_dataclass(value) and not isinstance(value, type):
        return {
            f.name: _serialize(getattr(value, f.name))
            for f in dataclass_fields(value)
        }
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, dict):
        return {str(k): _serialize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_serialize(v) for v in value]
    return value


def write_manifest(path, config, extra=None):
    """Dump the resolved experiment configuration as JSON.

    Records everything needed to reproduce the run, including the resolved
    steady window and the trial seed scheme. The timestamp is the only field
    that differs between identical runs.
    """
    payload = {
        "config": _serialize(config),
        "resolved_window": config.resolved_window
        if isinstance(config, ExperimentConfig)
        else None,
        "trial_seed_scheme": "SeedSequence(master_seed, spawn_key=(trial, purpose)); "
        "purposes: 0 schedules, 1 downlink, 2 uplink",
        "divergence_cutoff_db": DIVERGENCE_CUTOFF_DB,
        "divergence_marker_db": DIVERGENCE_MARKER_DB,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    if extra:
        payload.update(_serialize(extra))
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
