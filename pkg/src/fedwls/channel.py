"""Random client scheduling and additive Gaussian link noise.

Two independent sources of randomness live here. The scheduler decides which
clients participate in a round, either as a uniformly random fixed-size
subset or as independent per-client coin flips. The link model adds zero-mean
Gaussian noise to every transmitted vector, with an independent reproducible
stream per (direction, client, round) tag so that reusing a stored copy of a
past transmission never redraws its noise.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np


class SchedulerMode(Enum):
    FIXED_CARDINALITY = "fixed_cardinality"
    BERNOULLI = "bernoulli"


@dataclass(frozen=True)
class SchedulerConfig:
    """Participation model for one experiment.

    ``cardinality`` applies to FIXED_CARDINALITY mode (exactly that many
    clients each round), ``participation_prob`` to BERNOULLI mode (each
    client flips its own coin each round). The unused field may be None.
    """

    mode: SchedulerMode = SchedulerMode.FIXED_CARDINALITY
    cardinality: int = None
    participation_prob: float = None
    seed: int = 0

    def validate(self, num_clients):
        if self.mode is SchedulerMode.FIXED_CARDINALITY:
            C = self.cardinality
            if C is None or not (1 <= C <= num_clients):
                raise ValueError(
                    f"cardinality must be in [1, {num_clients}], got {C}"
                )
        else:
            p = self.participation_prob
            if p is None or not (0.0 < p <= 1.0):
                raise ValueError(f"participation_prob must be in (0, 1], got {p}")

    def mean_participation(self, num_clients):
        """Marginal probability that any one client is selected."""
        if self.mode is SchedulerMode.FIXED_CARDINALITY:
            return self.cardinality / num_clients
        return self.participation_prob


@dataclass(frozen=True)
class ChannelConfig:
    """Additive-noise model for both link directions.

    Variances may be scalars (shared by all clients) or length-K sequences.
    Zero means exact transmission on that link.
    """

    uplink_variances: object = 0.0
    downlink_variances: object = 0.0
    seed: int = 0

    def uplink_variance(self, k):
        v = self.uplink_variances
        return float(v) if np.ndim(v) == 0 else float(v[k])

    def downlink_variance(self, k):
        v = self.downlink_variances
        return float(v) if np.ndim(v) == 0 else float(v[k])

    def validate(self, num_clients):
        for k in range(num_clients):
            if self.uplink_variance(k) < 0 or self.downlink_variance(k) < 0:
                raise ValueError("link noise variances must be nonnegative")


@dataclass(frozen=True)
class RoundSchedule:
    """Participation indicators for one round, one 0/1 entry per client."""

    indicators: np.ndarray

    @property
    def selected(self):
        """Sorted indices of participating clients."""
        return np.flatnonzero(self.indicators)

    @property
    def count(self):
        return int(self.indicators.sum())


# Spawn-key prefixes keeping the per-trial stream families disjoint.
SCHEDULE_STREAM = 0
DOWNLINK_STREAM = 1
UPLINK_STREAM = 2
BOOTSTRAP_STREAM = 3


def _keyed_rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def draw_schedule(num_clients, cfg, round_index, seed=None):
    """Draw the participation indicators for one round.

    Deterministic in (seed, round_index) and independent across rounds: each
    round keys its own substream, so schedules can be drawn in any order.
    FIXED_CARDINALITY ranks K iid uniforms and takes the smallest C, which
    makes every C-subset equally likely. ``seed`` overrides ``cfg.seed`` when
    a caller (such as a trial runner) manages its own seed layout.
    """
    cfg.validate(num_clients)
    root = cfg.seed if seed is None else seed
    u = _keyed_rng(root, SCHEDULE_STREAM, round_index).random(num_clients)
    return schedule_from_uniforms(u, cfg)


def schedule_from_uniforms(u, cfg):
    """Turn one row of iid uniforms into a RoundSchedule under ``cfg``."""
    K = u.shape[0]
    a = np.zeros(K, dtype=np.uint8)
    if cfg.mode is SchedulerMode.FIXED_CARDINALITY:
        C = cfg.cardinality
        if C >= K:
            a[:] = 1
        else:
            a[np.argpartition(u, C)[:C]] = 1
    else:
        a[u < cfg.participation_prob] = 1
    return RoundSchedule(indicators=a)


def link_noise_tag(seed, direction, client, round_index):
    """Stream tag for one transmission.

    ``direction`` is DOWNLINK_STREAM or UPLINK_STREAM. Tags built this way
    are mutually independent across all (direction, client, round) triples
    under one seed.
    """
    return (seed, direction, client, round_index)


class TaggedLinkNoise:
    """Link-noise applicator for one round of one trial.

    Each transmission gets its own stream keyed by (direction, client,
    round), so the same draw is reproduced no matter in what order the
    transmissions are evaluated.
    """

    def __init__(self, config, seed, round_index):
        self.config = config
        self.seed = seed
        self.round_index = round_index

    def downlink(self, v, client):
        return corrupt(
            v,
            self.config.downlink_variance(client),
            (self.seed, DOWNLINK_STREAM, client, self.round_index),
        )

    def uplink(self, v, client):
        return corrupt(
            v,
            self.config.uplink_variance(client),
            (self.seed, UPLINK_STREAM, client, self.round_index),
        )


def corrupt(v, variance, tag):
    """Return ``v`` plus iid zero-mean Gaussian noise of the given variance.

    ``tag`` identifies the noise stream: either a tuple
    (seed, *key-integers), typically from :func:`link_noise_tag`, or an
    already-built numpy Generator. Zero variance returns an exact copy and
    leaves any passed-in generator untouched.
    """
    v = np.array(v, dtype=float)
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    if variance == 0.0:
        return v
    if isinstance(tag, np.random.Generator):
        rng = tag
    else:
        rng = _keyed_rng(tag[0], *tag[1:])
    return v + rng.normal(0.0, np.sqrt(variance), size=v.shape)
