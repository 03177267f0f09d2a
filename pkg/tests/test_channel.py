import numpy as np
import pytest
from scipy import stats

from fedwls.channel import (
    DOWNLINK_STREAM,
    UPLINK_STREAM,
    ChannelConfig,
    SchedulerConfig,
    SchedulerMode,
    TaggedLinkNoise,
    corrupt,
    draw_schedule,
    schedule_from_uniforms,
)

FIXED = SchedulerMode.FIXED_CARDINALITY
BERN = SchedulerMode.BERNOULLI


def batch_schedules(cfg, K, n_draws, seed=0):
    u = np.random.default_rng(seed).random((n_draws, K))
    return np.stack([schedule_from_uniforms(row, cfg).indicators for row in u])


def test_fixed_cardinality_draws_exactly_c():
    cfg = SchedulerConfig(mode=FIXED, cardinality=3, seed=1)
    for n in range(200):
        s = draw_schedule(6, cfg, n)
        assert s.count == 3
        assert set(np.unique(s.indicators)) <= {0, 1}


def test_full_participation_is_all_ones():
    cfg = SchedulerConfig(mode=FIXED, cardinality=100, seed=0)
    s = draw_schedule(100, cfg, 0)
    assert np.array_equal(s.indicators, np.ones(100, dtype=np.uint8))


def test_schedule_deterministic_per_round_and_order_free():
    cfg = SchedulerConfig(mode=FIXED, cardinality=2, seed=42)
    fwd = [draw_schedule(8, cfg, n).indicators for n in range(50)]
    bwd = [draw_schedule(8, cfg, n).indicators for n in reversed(range(50))]
    for a, b in zip(fwd, reversed(bwd)):
        assert np.array_equal(a, b)
    assert any(not np.array_equal(fwd[0], f) for f in fwd[1:])


def test_fixed_cardinality_marginal_and_pair_moments():
    # K=6, C=3: marginal 1/2, pairwise (3/6)(2/5) under without-replacement draws
    cfg = SchedulerConfig(mode=FIXED, cardinality=3)
    a = batch_schedules(cfg, 6, 100_000, seed=7).astype(float)
    marg = a.mean(axis=0)
    assert np.all(np.abs(marg - 0.5) < 0.01)
    cross = (a[:, :1] * a[:, 1:]).mean(axis=0)
    assert np.all(np.abs(cross - 0.5 * (2.0 / 5.0)) < 0.01)


def test_all_subsets_equally_likely():
    # chi-square goodness of fit over the 10 possible 2-of-5 subsets
    cfg = SchedulerConfig(mode=FIXED, cardinality=2)
    a = batch_schedules(cfg, 5, 100_000, seed=3)
    keys = a @ (1 << np.arange(5))
    counts = np.unique(keys, return_counts=True)[1]
    assert len(counts) == 10
    assert stats.chisquare(counts).pvalue > 0.001


def test_bernoulli_moments_match_independent_coins():
    p = 0.5
    cfg = SchedulerConfig(mode=BERN, participation_prob=p)
    n = 100_000
    a = batch_schedules(cfg, 6, n, seed=11).astype(float)
    se_marg = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(a.mean(axis=0) - p) < 3 * se_marg)
    cross = (a[:, :1] * a[:, 1:]).mean(axis=0)
    se_cross = np.sqrt(p * p * (1 - p * p) / n)
    # independent coins give p^2, unlike the without-replacement (C/K)((C-1)/(K-1))
    assert np.all(np.abs(cross - p * p) < 3 * se_cross)


@pytest.mark.parametrize(
    "cfg",
    [
        SchedulerConfig(mode=FIXED, cardinality=0),
        SchedulerConfig(mode=FIXED, cardinality=7),
        SchedulerConfig(mode=FIXED, cardinality=None),
        SchedulerConfig(mode=BERN, participation_prob=0.0),
        SchedulerConfig(mode=BERN, participation_prob=1.5),
    ],
)
def test_scheduler_validation_rejects(cfg):
    with pytest.raises(ValueError):
        cfg.validate(6)


def test_corrupt_zero_variance_is_exact_and_nonaliasing():
    v = np.arange(5.0)
    out = corrupt(v, 0.0, (0, 1, 2, 3))
    assert np.array_equal(out, v)
    out[0] = 99.0
    assert v[0] == 0.0


def test_corrupt_deterministic_per_tag():
    v = np.zeros(16)
    a = corrupt(v, 1e-2, (5, UPLINK_STREAM, 2, 7))
    b = corrupt(v, 1e-2, (5, UPLINK_STREAM, 2, 7))
    c = corrupt(v, 1e-2, (5, UPLINK_STREAM, 2, 8))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_corrupt_sample_moments():
    var = 6.25e-4
    draws = np.concatenate(
        [corrupt(np.zeros(128), var, (9, DOWNLINK_STREAM, 0, n)) for n in range(800)]
    )
    n = draws.size
    assert abs(draws.mean()) < 3 * np.sqrt(var / n)
    assert abs(draws.var() - var) < 3 * var * np.sqrt(2.0 / n)


def test_noise_independent_across_tags():
    var = 1.0
    n = 100_000
    a = corrupt(np.zeros(n), var, (1, UPLINK_STREAM, 0, 0))
    b = corrupt(np.zeros(n), var, (1, UPLINK_STREAM, 1, 0))
    assert abs(np.mean(a * b)) < 3 / np.sqrt(n)


def test_corrupt_rejects_negative_variance():
    with pytest.raises(ValueError):
        corrupt(np.zeros(3), -1e-3, (0, 0, 0, 0))
    with pytest.raises(ValueError):
        ChannelConfig(uplink_variances=-1.0).validate(2)


def test_tagged_link_noise_streams():
    cfg = ChannelConfig(uplink_variances=1e-2, downlink_variances=1e-2)
    v = np.zeros(8)
    n1 = TaggedLinkNoise(cfg, seed=4, round_index=10)
    n2 = TaggedLinkNoise(cfg, seed=4, round_index=10)
    assert np.array_equal(n1.uplink(v, 3), n2.uplink(v, 3))
    assert not np.array_equal(n1.uplink(v, 3), n1.downlink(v, 3))
    assert not np.array_equal(n1.uplink(v, 3), n1.uplink(v, 4))


def test_per_client_variances():
    cfg = ChannelConfig(uplink_variances=[0.0, 1.0], downlink_variances=0.5)
    assert cfg.uplink_variance(0) == 0.0
    assert cfg.uplink_variance(1) == 1.0
    assert cfg.downlink_variance(1) == 0.5
    noise = TaggedLinkNoise(cfg, seed=0, round_index=0)
    assert np.array_equal(noise.uplink(np.ones(4), 0), np.ones(4))
