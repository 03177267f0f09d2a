"""Extended-state mean and second-moment analysis for scheduled consensus rounds.

The round recursion simulated in :mod:`fedwls.algorithms` couples each
client's next model to the two previous server aggregates, so its error
dynamics live on an extended state stacking every client's current and
one-round-old deviation: ``2 * num_clients`` blocks of length ``block_dim``.
This module builds the objects that govern that recursion in expectation:

* the per-round transition matrix for a given triple of schedules,
* its mean over schedules and the limit it drives the mean state to,
* the second-moment propagation matrix (the expected block-Kronecker
  square of the transposed transition), in closed form and by sampling,
* the covariance injected per round by uplink and downlink perturbations,
* the steady-state mean-square error assembled from those pieces.

Conventions, fixed once and used everywhere: extended vectors stack the
current-round client blocks first, then the previous-round blocks.  ``bvec``
flattens a block-partitioned matrix by row-block/column-block pair (row
block varies slowest), row-major inside each block, and ``block_kronecker``
is laid out to match, so that propagating a block-vectorized covariance
through one round is exactly multiplication by the second-moment matrix.

Scope note: the analysis covers the two-aggregate-memory update under
random fixed-cardinality scheduling.  The stored-broadcast variant with
continual local updates is deliberately out of scope here; it is studied
by simulation only.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .channel import ChannelConfig, SchedulerConfig, SchedulerMode, schedule_from_uniforms
from .dataset import ClientPrecompute, WlsProblem, optimal_wls, precompute_all

DEFAULT_EIGEN_TOL = 1e-8
DEFAULT_MAX_EXTENDED_DIM = 128
_INVERSE_ITERATION_SHIFT = 1e-7
_INVERSE_ITERATION_STEPS = 3


# ---------------------------------------------------------------------------
# block vectorization and the matched block-Kronecker product
# ---------------------------------------------------------------------------

def bvec(matrix, num_blocks, block_dim):
    """Flatten a block-partitioned square matrix into a vector.

    The matrix is read as a ``num_blocks`` by ``num_blocks`` grid of
    ``block_dim`` by ``block_dim`` blocks.  Output ordering: the (row-block,
    column-block) pair varies with the row block slowest, and entries inside
    each block are taken row-major.  ``bvec_inv`` undoes the mapping.
    """
    matrix = np.asarray(matrix, dtype=float)
    side = num_blocks * block_dim
    if matrix.shape != (side, side):
        raise ValueError(
            f"expected a {side}x{side} matrix for {num_blocks} blocks of "
            f"dimension {block_dim}, got shape {matrix.shape}"
        )
    four = matrix.reshape(num_blocks, block_dim, num_blocks, block_dim)
    return four.transpose(0, 2, 1, 3).reshape(-1)


def bvec_inv(vector, num_blocks, block_dim):
    """Rebuild the block-partitioned matrix that ``bvec`` flattened."""
    vector = np.asarray(vector, dtype=float)
    side = num_blocks * block_dim
    if vector.shape != (side * side,):
        raise ValueError(
            f"expected a vector of length {side * side}, got shape {vector.shape}"
        )
    four = vector.reshape(num_blocks, num_blocks, block_dim, block_dim)
    return four.transpose(0, 2, 1, 3).reshape(side, side)


def block_kronecker(left, right, block_dim):
    """Kronecker product taken block-by-block over a square block partition.

    Both factors are partitioned into ``block_dim`` square blocks; the result
    places the ordinary Kronecker product of block pairs so that
    ``bvec(L @ X @ R.T) == block_kronecker(L, R, block_dim) @ bvec(X)``.
    With a single block this reduces to ``np.kron``.
    """
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    if left.shape != right.shape or left.ndim != 2 or left.shape[0] != left.shape[1]:
        raise ValueError(
            f"factors must be square with equal shapes, got {left.shape} and {right.shape}"
        )
    side = left.shape[0]
    if side % block_dim != 0:
        raise ValueError(f"side {side} is not a multiple of block dimension {block_dim}")
    nb = side // block_dim
    lf = left.reshape(nb, block_dim, nb, block_dim)
    rf = right.reshape(nb, block_dim, nb, block_dim)
    prod = np.einsum("iajb,lcmd->ilacjmbd", lf, rf)
    return prod.reshape(side * side, side * side)


# ---------------------------------------------------------------------------
# extended-state helpers
# ---------------------------------------------------------------------------

def extended_target(weights_solution, num_clients):
    """Stack the network-wide solution into the extended consensus target."""
    weights_solution = np.asarray(weights_solution, dtype=float)
    return np.tile(weights_solution, 2 * num_clients)


def initial_extended_state(precomputes):
    """Extended state at the start of a run: local fits on top, zeros below."""
    fits = np.concatenate([p.local_fit for p in precomputes])
    return np.concatenate([fits, np.zeros_like(fits)])


def _stacked_gains(problem, rho, precomputes=None):
    if precomputes is None:
        precomputes = precompute_all(problem, rho)
    gains = np.stack([p.gain for p in precomputes])
    return precomputes, gains


# ---------------------------------------------------------------------------
# per-round transition for one schedule triple
# ---------------------------------------------------------------------------

def sample_transition(problem, rho, cardinality, schedules, precomputes=None):
    """Extended transition matrix realized by one triple of schedules.

    ``schedules`` holds the participation indicators for the current round,
    the previous round, and the round before that, each of length
    ``num_clients``.  ``cardinality`` is the aggregation divisor; it may be
    fractional when a nominal mean participation is analyzed.  The returned
    matrix maps the extended deviation at round ``n`` to round ``n + 1`` and
    leaves any consensus vector (identical blocks) fixed.
    """
    if cardinality <= 0:
        raise ValueError(f"aggregation divisor must be positive, got {cardinality}")
    if len(schedules) != 3:
        raise ValueError("exactly three schedules are required (current and two previous)")
    precomputes, gains = _stacked_gains(problem, rho, precomputes)
    k = problem.num_clients
    dim = problem.model_dim
    now, prev, before = (np.asarray(s, dtype=float).ravel() for s in schedules)
    for label, arr in (("current", now), ("previous", prev), ("second-previous", before)):
        if arr.shape != (k,):
            raise ValueError(f"{label} schedule has length {arr.shape}, expected {k}")

    pull = rho / float(cardinality)
    coupling = 2.0 * pull * np.einsum("i,j,iab->ijab", now, prev, gains)
    eye = np.eye(dim)
    for i in range(k):
        coupling[i, i] += eye - rho * now[i] * gains[i]
    memory = -pull * np.einsum("i,j,iab->ijab", now, before, gains)

    top_left = coupling.transpose(0, 2, 1, 3).reshape(k * dim, k * dim)
    top_right = memory.transpose(0, 2, 1, 3).reshape(k * dim, k * dim)
    bottom = np.hstack([np.eye(k * dim), np.zeros((k * dim, k * dim))])
    return np.vstack([np.hstack([top_left, top_right]), bottom])


# ---------------------------------------------------------------------------
# mean transition and its limit
# ---------------------------------------------------------------------------

@dataclass
class MeanTransition:
    """Expected one-round transition and the two pieces it is assembled from.

    ``update_pull`` is the block-diagonal matrix of per-client pull strengths
    (mean participation times step size times client gain).  ``broadcast_mix``
    is the rank-one-in-blocks mixing matrix through which the server
    aggregate feeds every client; its block rows are identical up to the
    leading client gain.
    """

    matrix: np.ndarray
    update_pull: np.ndarray
    broadcast_mix: np.ndarray
    participation: float


def mean_transition(problem, rho, participation, precomputes=None):
    """Average the per-round transition over schedules.

    ``participation`` is the marginal probability that a given client is
    scheduled in a round.  Because consecutive schedules are independent,
    every coupling block averages to the product of marginals, which is what
    makes the closed form exact rather than an independence approximation.
    """
    if not 0.0 < participation <= 1.0:
        raise ValueError(f"participation must lie in (0, 1], got {participation}")
    precomputes, gains = _stacked_gains(problem, rho, precomputes)
    k = problem.num_clients
    dim = problem.model_dim

    pull_blocks = participation * rho * gains
    update_pull = sla.block_diag(*pull_blocks)
    mix_strength = participation * rho / k
    broadcast_mix = np.vstack([np.tile(mix_strength * gains[i], (1, k)) for i in range(k)])

    eye = np.eye(k * dim)
    top = np.hstack([eye - update_pull + 2.0 * broadcast_mix, -broadcast_mix])
    bottom = np.hstack([eye, np.zeros((k * dim, k * dim))])
    return MeanTransition(
        matrix=np.vstack([top, bottom]),
        update_pull=update_pull,
        broadcast_mix=broadcast_mix,
        participation=float(participation),
    )


@dataclass
class MeanLimit:
    """Where the mean recursion is headed, measured two ways.

    ``power_vector`` is the mean state after ``num_rounds`` applications of
    the mean transition; ``eigen_prediction`` is the limit predicted by the
    unit-eigenvalue spectral projector built from the closed-form left
    eigenvectors (``left_vectors``, one row per model coordinate).  ``target``
    is the extended consensus stack of the network solution.
    """

    power_vector: np.ndarray
    eigen_prediction: np.ndarray
    target: np.ndarray
    left_vectors: np.ndarray
    num_rounds: int


def mean_limit(problem, rho, participation, num_rounds=10_000, precomputes=None):
    """Iterate the mean transition from the standard start and predict its limit.

    The start is the extended stack of local fits over zeros.  The eigenvector
    prediction uses the analytic left eigenvectors of the unit cluster; the
    right eigenvectors are the consensus directions (each coordinate repeated
    across all blocks), so the prediction is a consensus vector by
    construction.
    """
    if num_rounds < 0:
        raise ValueError(f"num_rounds must be nonnegative, got {num_rounds}")
    precomputes, gains = _stacked_gains(problem, rho, precomputes)
    k = problem.num_clients
    dim = problem.model_dim
    mean = mean_transition(problem, rho, participation, precomputes=precomputes)

    start = initial_extended_state(precomputes)
    state = start.copy()
    for _ in range(num_rounds):
        state = mean.matrix @ state

    curvature = np.zeros((dim, dim))
    for feats, wts in zip(problem.features, problem.weights):
        curvature += feats.T @ wts @ feats
    curvature_inv = np.linalg.inv(curvature)
    # inverse of each client gain, formed directly from the data
    top_rows = np.hstack(
        [
            0.5 * curvature_inv @ (2.0 * feats.T @ wts @ feats + rho * np.eye(dim))
            for feats, wts in zip(problem.features, problem.weights)
        ]
    )
    left_vectors = np.hstack([top_rows, -top_rows @ mean.broadcast_mix])

    coords = left_vectors @ start
    eigen_prediction = np.kron(np.ones(2 * k), coords)
    target = extended_target(optimal_wls(problem), k)
    return MeanLimit(
        power_vector=state,
        eigen_prediction=eigen_prediction,
        target=target,
        left_vectors=left_vectors,
        num_rounds=int(num_rounds),
    )


# ---------------------------------------------------------------------------
# second-moment propagation matrix
# ---------------------------------------------------------------------------

@dataclass
class QMatrix:
    """Second-moment propagation matrix with its construction provenance.

    ``matrix`` multiplies the block-vectorized covariance of the extended
    deviation to give the covariance one round later, averaged over
    schedules.  ``entry_stderr`` is populated only for sampled constructions.
    """

    matrix: np.ndarray
    method: str
    num_clients: int
    block_dim: int
    cardinality: float
    samples: Optional[int] = None
    entry_stderr: Optional[np.ndarray] = None

    @property
    def side(self):
        return self.matrix.shape[0]


def _require_extended_dim(num_clients, block_dim, max_extended_dim):
    extended = 2 * num_clients * block_dim
    if extended > max_extended_dim:
        raise ValueError(
            f"extended dimension 2*{num_clients}*{block_dim} = {extended} exceeds the "
            f"cap of {max_extended_dim}; the second-moment matrix would be dense "
            f"{extended ** 2}x{extended ** 2} (~{(extended ** 4) * 8 / 1e9:.1f} GB). "
            "Raise max_extended_dim explicitly if that cost is intended."
        )


def build_q_closed_form(
    problem,
    rho,
    cardinality,
    precomputes=None,
    max_extended_dim=DEFAULT_MAX_EXTENDED_DIM,
):
    """Assemble the schedule-averaged second-moment matrix exactly.

    Works block-by-block through every (row, column) pair of block indices of
    the two factors, substituting the without-replacement scheduling moments:
    single-client marginal ``C/K`` and distinct-pair probability
    ``C(C-1)/(K(K-1))``.  Exhaustive enumeration over schedule triples is the
    test oracle for this table.
    """
    cardinality = int(cardinality)
    k = problem.num_clients
    dim = problem.model_dim
    if not 1 <= cardinality <= k:
        raise ValueError(
            f"cardinality must lie in [1, {k}] for {k} clients, got {cardinality}"
        )
    _require_extended_dim(k, dim, max_extended_dim)
    precomputes, gains = _stacked_gains(problem, rho, precomputes)

    nb = 2 * k
    marg = cardinality / k
    pair = cardinality * (cardinality - 1) / (k * (k - 1)) if k > 1 else 1.0
    eye2 = np.eye(dim * dim)
    cache = {}

    def g_pair(i, l):
        key = (i, l)
        if key not in cache:
            cache[key] = np.kron(gains[i], gains[l])
        return cache[key]

    def g_right(l):
        key = ("eye", l)
        if key not in cache:
            cache[key] = np.kron(np.eye(dim), gains[l])
        return cache[key]

    def g_left(i):
        key = (i, "eye")
        if key not in cache:
            cache[key] = np.kron(gains[i], np.eye(dim))
        return cache[key]

    r = rho
    r2 = rho * rho
    cc = float(cardinality)
    side = (nb * dim) ** 2
    transposed = np.zeros((side, side))

    for i in range(nb):
        for j in range(nb):
            for l in range(nb):
                for m in range(nb):
                    i_cur, j_cur, l_cur, m_cur = i < k, j < k, l < k, m < k
                    blk = None
                    if i_cur and j_cur and l_cur and m_cur:
                        if i == j and l == m:
                            if i == l:
                                blk = (
                                    eye2
                                    - r * marg * (g_left(i) + g_right(i))
                                    + 2 * r * marg**2 / cc * (g_left(i) + g_right(i))
                                    + r2 * marg * g_pair(i, i)
                                    - 4 * r2 * marg**2 / cc * g_pair(i, i)
                                    + 4 * r2 * marg**2 / cc**2 * g_pair(i, i)
                                )
                            else:
                                blk = (
                                    eye2
                                    - r * marg * g_left(i)
                                    - r * marg * g_right(l)
                                    + 2 * r * marg**2 / cc * g_left(i)
                                    + 2 * r * marg**2 / cc * g_right(l)
                                    + r2 * pair * g_pair(i, l)
                                    - 4 * r2 * marg * pair / cc * g_pair(i, l)
                                    + 4 * r2 * pair**2 / cc**2 * g_pair(i, l)
                                )
                        elif i == j and l != m:
                            if i == l:
                                blk = (
                                    2 * r * marg**2 / cc * g_right(i)
                                    - 2 * r2 * marg**2 / cc * g_pair(i, i)
                                    + 4 * r2 * marg * pair / cc**2 * g_pair(i, i)
                                )
                            elif j == m:
                                blk = (
                                    2 * r * marg**2 / cc * g_right(l)
                                    - 2 * r2 * marg * pair / cc * g_pair(i, l)
                                    + 4 * r2 * pair * marg / cc**2 * g_pair(i, l)
                                )
                            else:
                                blk = (
                                    2 * r * marg**2 / cc * g_right(l)
                                    - 2 * r2 * marg * pair / cc * g_pair(i, l)
                                    + 4 * r2 * pair**2 / cc**2 * g_pair(i, l)
                                )
                        elif i != j and l == m:
                            if i == l:
                                blk = (
                                    2 * r * marg**2 / cc * g_left(i)
                                    - 2 * r2 * marg**2 / cc * g_pair(i, i)
                                    + 4 * r2 * pair * marg / cc**2 * g_pair(i, i)
                                )
                            elif j == m:
                                blk = (
                                    2 * r * marg**2 / cc * g_left(i)
                                    - 2 * r2 * pair * marg / cc * g_pair(i, l)
                                    + 4 * r2 * pair * marg / cc**2 * g_pair(i, l)
                                )
                            else:
                                blk = (
                                    2 * r * marg**2 / cc * g_left(i)
                                    - 2 * r2 * pair * marg / cc * g_pair(i, l)
                                    + 4 * r2 * pair**2 / cc**2 * g_pair(i, l)
                                )
                        else:
                            if i == l and j == m:
                                blk = 4 * r2 * marg**2 / cc**2 * g_pair(i, i)
                            elif i == l:
                                blk = 4 * r2 * marg * pair / cc**2 * g_pair(i, i)
                            elif j == m:
                                blk = 4 * r2 * marg * pair / cc**2 * g_pair(i, l)
                            else:
                                blk = 4 * r2 * pair**2 / cc**2 * g_pair(i, l)
                    elif i_cur and j_cur and l_cur and not m_cur:
                        if i == j:
                            if i == l:
                                blk = (
                                    -r * marg**2 / cc * g_right(i)
                                    + r2 * marg**2 / cc * g_pair(i, i)
                                    - 2 * r2 * marg**3 / cc**2 * g_pair(i, i)
                                )
                            else:
                                blk = (
                                    -r * marg**2 / cc * g_right(l)
                                    + r2 * pair * marg / cc * g_pair(i, l)
                                    - 2 * r2 * pair * marg**2 / cc**2 * g_pair(i, l)
                                )
                        else:
                            if i == l:
                                blk = -2 * r2 * marg**3 / cc**2 * g_pair(i, i)
                            else:
                                blk = -2 * r2 * pair * marg**2 / cc**2 * g_pair(i, l)
                    elif i_cur and j_cur and not l_cur and m_cur:
                        if l == m + k:
                            if i == j:
                                blk = (
                                    eye2
                                    - r * marg * g_left(i)
                                    + 2 * r * marg**2 / cc * g_left(i)
                                )
                            else:
                                blk = 2 * r * marg**2 / cc * g_left(i)
                    elif i_cur and not j_cur and l_cur and m_cur:
                        if l == m:
                            if i == l:
                                blk = (
                                    -r * marg**2 / cc * g_left(i)
                                    + r2 * marg**2 / cc * g_pair(i, i)
                                    - 2 * r2 * marg**3 / cc**2 * g_pair(i, i)
                                )
                            else:
                                blk = (
                                    -r * marg**2 / cc * g_left(i)
                                    + r2 * pair * marg / cc * g_pair(i, l)
                                    - 2 * r2 * pair * marg**2 / cc**2 * g_pair(i, l)
                                )
                        else:
                            if i == l:
                                blk = -2 * r2 * marg**3 / cc**2 * g_pair(i, i)
                            else:
                                blk = -2 * r2 * pair * marg**2 / cc**2 * g_pair(i, l)
                    elif i_cur and not j_cur and l_cur and not m_cur:
                        if i == l and j == m:
                            blk = r2 * marg**2 / cc**2 * g_pair(i, i)
                        elif i == l:
                            blk = r2 * pair * marg / cc**2 * g_pair(i, i)
                        elif j == m:
                            blk = r2 * pair * marg / cc**2 * g_pair(i, l)
                        else:
                            blk = r2 * pair**2 / cc**2 * g_pair(i, l)
                    elif i_cur and not j_cur and not l_cur and m_cur:
                        if l == m + k:
                            blk = -r * marg**2 / cc * g_left(i)
                    elif not i_cur and j_cur and l_cur and m_cur:
                        if i == j + k:
                            if l == m:
                                blk = (
                                    eye2
                                    - r * marg * g_right(l)
                                    + 2 * r * marg**2 / cc * g_right(l)
                                )
                            else:
                                blk = 2 * r * marg**2 / cc * g_right(l)
                    elif not i_cur and j_cur and l_cur and not m_cur:
                        if i == j + k:
                            blk = -r * marg**2 / cc * g_right(l)
                    elif not i_cur and j_cur and not l_cur and m_cur:
                        if i == j + k and l == m + k:
                            blk = eye2
                    if blk is not None:
                        row = (i * nb + l) * dim * dim
                        col = (j * nb + m) * dim * dim
                        transposed[row : row + dim * dim, col : col + dim * dim] = blk

    return QMatrix(
        matrix=transposed.T.copy(),
        method="closed_form",
        num_clients=k,
        block_dim=dim,
        cardinality=float(cardinality),
    )


def _schedule_patterns(num_clients, scheduler):
    """Enumerate (indicator, probability) pairs for one schedule draw."""
    if scheduler.mode is SchedulerMode.FIXED_CARDINALITY:
        combos = list(itertools.combinations(range(num_clients), scheduler.cardinality))
        weight = 1.0 / len(combos)
        out = []
        for combo in combos:
            ind = np.zeros(num_clients)
            ind[list(combo)] = 1.0
            out.append((ind, weight))
        return out
    prob = scheduler.participation_prob
    out = []
    for bits in itertools.product((0.0, 1.0), repeat=num_clients):
        ind = np.array(bits)
        count = int(ind.sum())
        out.append((ind, prob**count * (1.0 - prob) ** (num_clients - count)))
    return out


def build_q_monte_carlo(
    problem,
    rho,
    scheduler,
    samples,
    seed=0,
    cardinality=None,
    precomputes=None,
    triple_cap=4096,
    max_extended_dim=DEFAULT_MAX_EXTENDED_DIM,
):
    """Estimate the second-moment matrix by averaging sampled transitions.

    Draws independent schedule triples under ``scheduler``, forms the
    block-Kronecker square of each transposed transition, and averages.  When
    the space of distinct triples is small enough (at most ``triple_cap``)
    the sampling collapses to one multinomial draw over triples, which is
    distributionally identical to the naive loop but far cheaper.  The
    returned ``entry_stderr`` is the plug-in standard error of each entry,
    used both to validate the closed form and to size the gap when the
    scheduler mode does not match the closed form's moment assumptions.
    """
    if samples < 1:
        raise ValueError(f"samples must be at least 1, got {samples}")
    k = problem.num_clients
    dim = problem.model_dim
    _require_extended_dim(k, dim, max_extended_dim)
    scheduler.validate(k)
    precomputes, _ = _stacked_gains(problem, rho, precomputes)
    if cardinality is None:
        if scheduler.mode is SchedulerMode.FIXED_CARDINALITY:
            cardinality = float(scheduler.cardinality)
        else:
            cardinality = scheduler.participation_prob * k
    rng = np.random.default_rng(seed)
    side = (2 * k * dim) ** 2

    if scheduler.mode is SchedulerMode.FIXED_CARDINALITY:
        n_pat = math.comb(k, scheduler.cardinality)
    else:
        n_pat = 2**k
    mean = np.zeros((side, side))
    second = np.zeros((side, side))

    if n_pat**3 <= triple_cap:
        patterns = _schedule_patterns(k, scheduler)
        probs = np.array(
            [pa * pb * pc for (_, pa) in patterns for (_, pb) in patterns for (_, pc) in patterns]
        )
        counts = rng.multinomial(samples, probs)
        flat = 0
        for ind_a, _ in patterns:
            for ind_b, _ in patterns:
                for ind_c, _ in patterns:
                    cnt = counts[flat]
                    flat += 1
                    if cnt == 0:
                        continue
                    trans = sample_transition(
                        problem, rho, cardinality, (ind_a, ind_b, ind_c), precomputes
                    )
                    square = block_kronecker(trans.T, trans.T, dim)
                    wt = cnt / samples
                    mean += wt * square
                    second += wt * square * square
    else:
        for _ in range(samples):
            draws = []
            for _ in range(3):
                sched = schedule_from_uniforms(rng.random(k), scheduler)
                draws.append(np.asarray(sched.indicators, dtype=float))
            trans = sample_transition(problem, rho, cardinality, draws, precomputes)
            square = block_kronecker(trans.T, trans.T, dim)
            mean += square
            second += square * square
        mean /= samples
        second /= samples

    stderr = np.sqrt(np.clip(second - mean * mean, 0.0, None) / samples)
    return QMatrix(
        matrix=mean,
        method="monte_carlo",
        num_clients=k,
        block_dim=dim,
        cardinality=float(cardinality),
        samples=int(samples),
        entry_stderr=stderr,
    )


# ---------------------------------------------------------------------------
# per-round injected noise covariance
# ---------------------------------------------------------------------------

@dataclass
class NoiseMoments:
    """Block-vectorized covariances of the per-round noise injections.

    ``downlink`` covers the broadcast perturbation as filtered by the
    scheduled clients' gains; ``uplink`` covers the aggregate of perturbed
    uploads re-entering through the two-round server memory; ``combined`` is
    their sum and is what the steady-state analysis consumes.
    """

    downlink: np.ndarray
    uplink: np.ndarray
    num_clients: int
    block_dim: int
    uplink_form: str

    @property
    def combined(self):
        return self.downlink + self.uplink

    def downlink_matrix(self):
        return bvec_inv(self.downlink, 2 * self.num_clients, self.block_dim)

    def uplink_matrix(self):
        return bvec_inv(self.uplink, 2 * self.num_clients, self.block_dim)


def noise_moments(problem, rho, cardinality, channel, precomputes=None, include_cross_blocks=False):
    """Covariance injected per round by link noise, as block-vectorized stacks.

    The downlink part is exact: client ``i`` receives an independent
    perturbation through its own gain, scaled by the marginal scheduling
    probability.  The uplink part defaults to the diagonal short form that
    drops cross-client blocks (the form the steady-state predictions are
    quoted in); passing ``include_cross_blocks=True`` keeps the full
    between-client structure for diagnostics.
    """
    precomputes, gains = _stacked_gains(problem, rho, precomputes)
    k = problem.num_clients
    dim = problem.model_dim
    cardinality = float(cardinality)
    if not 0 < cardinality <= k:
        raise ValueError(f"cardinality must lie in (0, {k}], got {cardinality}")
    marg = cardinality / k
    pair = (
        cardinality * (cardinality - 1) / (k * (k - 1)) if k > 1 else 1.0
    )
    nb = 2 * k
    squares = np.stack([g @ g for g in gains])

    down = np.zeros((nb * dim, nb * dim))
    for i in range(k):
        down[i * dim : (i + 1) * dim, i * dim : (i + 1) * dim] = (
            marg * rho**2 * channel.downlink_variance(i) * squares[i]
        )

    total_up = float(sum(channel.uplink_variance(i) for i in range(k)))
    up = np.zeros((nb * dim, nb * dim))
    if include_cross_blocks:
        for i in range(k):
            for l in range(k):
                coef = 5.0 * rho**2 * (marg if i == l else pair) * marg / cardinality**2
                up[i * dim : (i + 1) * dim, l * dim : (l + 1) * dim] = (
                    coef * total_up * gains[i] @ gains[l]
                )
        form = "full"
    else:
        for i in range(k):
            up[i * dim : (i + 1) * dim, i * dim : (i + 1) * dim] = (
                5.0 * rho**2 / k**2 * total_up * squares[i]
            )
        form = "diagonal"

    return NoiseMoments(
        downlink=bvec(down, nb, dim),
        uplink=bvec(up, nb, dim),
        num_clients=k,
        block_dim=dim,
        uplink_form=form,
    )


def consensus_projector(num_clients, block_dim):
    """Projector removing the shared component across all extended blocks."""
    nb = 2 * num_clients
    return np.eye(nb * block_dim) - np.kron(
        np.full((nb, nb), 1.0 / nb), np.eye(block_dim)
    )


# ---------------------------------------------------------------------------
# unit-eigenvalue cluster machinery
# ---------------------------------------------------------------------------

def _unit_left_basis(num_clients, block_dim):
    """Exact left eigenvectors of the second-moment matrix at eigenvalue one.

    Column (i, j) is the block-vectorization of the rank-one form pairing
    consensus direction i against consensus direction j; these are eigenvectors
    of the transposed matrix by the same block-stochastic cancellation that
    fixes consensus vectors under every sampled transition.
    """
    nb = 2 * num_clients
    ones = np.ones(nb)
    eye = np.eye(block_dim)
    basis = np.empty(((nb * block_dim) ** 2, block_dim * block_dim))
    for i in range(block_dim):
        for j in range(block_dim):
            form = np.outer(np.kron(ones, eye[i]), np.kron(ones, eye[j]))
            basis[:, i * block_dim + j] = bvec(form, nb, block_dim)
    return basis


def _unit_right_basis(q_matrix, unit_dim, seed=0):
    """Orthonormal basis of the unit-eigenvalue right subspace.

    Shifted inverse iteration: factor the matrix minus a point just outside
    the unit cluster, then run a few block solves with re-orthonormalizations.
    The slight shift keeps the factorization well-posed while the cluster
    still dominates the iteration.
    """
    side = q_matrix.shape[0]
    shifted = q_matrix - (1.0 + _INVERSE_ITERATION_SHIFT) * np.eye(side)
    lu, piv = sla.lu_factor(shifted, overwrite_a=True)
    del shifted
    block = np.random.default_rng(seed).standard_normal((side, unit_dim))
    for _ in range(_INVERSE_ITERATION_STEPS):
        block = sla.lu_solve((lu, piv), block)
        block, _ = np.linalg.qr(block)
    return block


def unit_mode_noise_coupling(q, psi, eigen_tol=DEFAULT_EIGEN_TOL):
    """Per-direction pumping of injected noise into the non-decaying modes.

    For each unit-eigenvalue direction, returns the product of the noise
    vector against the (dual-normalized) right eigenvector and of the left
    eigenvector against the block-vectorized identity.  A direction with a
    nonzero product accumulates noise energy linearly in time instead of
    reaching a steady state.
    """
    nb = 2 * q.num_clients
    left = _unit_left_basis(q.num_clients, q.block_dim)
    right = _unit_right_basis(q.matrix, left.shape[1])
    pairing = left.T @ right
    dual = right @ np.linalg.inv(pairing)
    sigma = bvec(np.eye(nb * q.block_dim), nb, q.block_dim)
    return np.abs((np.asarray(psi) @ dual) * (left.T @ sigma))


# ---------------------------------------------------------------------------
# steady-state mean-square error
# ---------------------------------------------------------------------------

@dataclass
class TheoryReport:
    """Steady-state second-moment predictions for one noise configuration.

    ``total`` splits into ``noise_floor`` (driven by the deterministic
    initial deviation through the non-decaying modes) and ``link_noise``
    (steady accumulation of per-round link perturbations through the stable
    modes).  When the stable spectrum is not strictly inside the unit circle
    the mean-square recursion diverges, ``mean_square_stable`` is False and
    the error fields are left unset.
    """

    total: Optional[float]
    noise_floor: Optional[float]
    link_noise: Optional[float]
    link_noise_downlink: Optional[float]
    link_noise_uplink: Optional[float]
    noise_floor_alternate: Optional[float]
    deviation_mode: str
    dispersion: Optional[float]
    eigenvalues: np.ndarray
    unit_count: int
    subunit_radius: Optional[float]
    mean_square_stable: bool
    sigma_limit: np.ndarray
    mean_limit: np.ndarray
    engine: str
    eigen_tolerance: float
    num_clients: int
    block_dim: int
    cardinality: float

    def to_dict(self, top=64):
        vals = np.asarray(self.eigenvalues)
        if vals.size:
            order = np.argsort(-np.abs(vals))
            unit = np.flatnonzero(np.abs(vals - 1.0) < self.eigen_tolerance)
            keep = list(dict.fromkeys(list(order[:top]) + list(unit)))
            vals = vals[keep]
        return {
            "total": self.total,
            "noise_floor": self.noise_floor,
            "link_noise": self.link_noise,
            "link_noise_downlink": self.link_noise_downlink,
            "link_noise_uplink": self.link_noise_uplink,
            "noise_floor_alternate": self.noise_floor_alternate,
            "deviation_mode": self.deviation_mode,
            "dispersion": self.dispersion,
            "eigenvalues": [[float(v.real), float(v.imag)] for v in np.atleast_1d(vals)],
            "unit_count": self.unit_count,
            "subunit_radius": self.subunit_radius,
            "mean_square_stable": self.mean_square_stable,
            "sigma_limit_trace": float(np.trace(self.sigma_limit)),
            "engine": self.engine,
            "eigen_tolerance": self.eigen_tolerance,
            "num_clients": self.num_clients,
            "block_dim": self.block_dim,
            "cardinality": self.cardinality,
        }

    def to_json(self, top=64):
        return json.dumps(self.to_dict(top=top), indent=2)


class SecondMomentAnalysis:
    """Noise-independent factorizations for steady-state error predictions.

    Building the second-moment matrix, its unit-cluster projector, and the
    deflated-resolvent factorization dominates the cost of a prediction, and
    none of it depends on the link-noise levels.  Construct this once per
    problem/scheduling configuration, then ask for a report per channel
    configuration.
    """

    def __init__(
        self,
        problem,
        rho,
        cardinality,
        q=None,
        engine="auto",
        eigen_tol=DEFAULT_EIGEN_TOL,
        precomputes=None,
        max_extended_dim=DEFAULT_MAX_EXTENDED_DIM,
        stability_check=True,
    ):
        self.problem = problem
        self.rho = float(rho)
        self.cardinality = int(cardinality)
        self.eigen_tol = float(eigen_tol)
        self.precomputes, self.gains = _stacked_gains(problem, rho, precomputes)
        k = problem.num_clients
        dim = problem.model_dim
        self.num_clients = k
        self.block_dim = dim
        nb = 2 * k

        if q is None:
            q = build_q_closed_form(
                problem,
                rho,
                cardinality,
                precomputes=self.precomputes,
                max_extended_dim=max_extended_dim,
            )
        self.q = q
        side = q.side
        if engine == "auto":
            engine = "dense" if side <= 2000 else "resolvent"
        if engine not in ("dense", "resolvent"):
            raise ValueError(f"unknown engine {engine!r}")
        self.engine = engine

        unit_dim = dim * dim
        self.left_basis = _unit_left_basis(k, dim)
        left_residual = np.abs(q.matrix.T @ self.left_basis - self.left_basis).max()
        scale = np.abs(q.matrix).max()
        if left_residual > 1e-8 * max(scale, 1.0):
            raise ValueError(
                "consensus forms are not left-fixed by the second-moment matrix "
                f"(residual {left_residual:.3e}); the matrix was assembled "
                "inconsistently with the block conventions"
            )
        self.right_basis = _unit_right_basis(q.matrix, unit_dim)
        pairing = self.left_basis.T @ self.right_basis
        cond = np.linalg.cond(pairing)
        if not np.isfinite(cond) or cond > 1e10:
            raise ValueError(
                "unit-eigenvalue cluster appears defective: left/right pairing "
                f"condition number {cond:.3e}"
            )
        self._pairing_lu = sla.lu_factor(pairing)

        self.projector = self.right_basis @ sla.lu_solve(
            self._pairing_lu, self.left_basis.T
        )
        self.sigma = bvec(np.eye(nb * dim), nb, dim)

        deflated = self.projector - q.matrix
        deflated[np.diag_indices_from(deflated)] += 1.0
        self._resolvent_lu = sla.lu_factor(deflated, overwrite_a=True)
        del deflated

        self.sigma_response = sla.lu_solve(
            self._resolvent_lu, self.sigma - self.projector @ self.sigma
        )
        pi = consensus_projector(k, dim)
        sigma_pi = bvec(pi, nb, dim)
        self.dispersion_response = sla.lu_solve(
            self._resolvent_lu, sigma_pi - self.projector @ sigma_pi
        )
        self.sigma_limit = bvec_inv(self.projector @ self.sigma, nb, dim)

        self._eigenvalues = None
        self._coeffs = None
        self._evecs = None
        self.unit_count = unit_dim
        self.subunit_radius = None
        if engine == "dense":
            vals, vecs = np.linalg.eig(q.matrix)
            unit_mask = np.abs(vals - 1.0) < self.eigen_tol
            if int(unit_mask.sum()) != unit_dim:
                raise ValueError(
                    f"expected {unit_dim} eigenvalues at one, found "
                    f"{int(unit_mask.sum())} within tolerance {self.eigen_tol}; "
                    "the unit cluster is defective or the tolerance is misjudged"
                )
            self._eigenvalues = vals
            self._evecs = vecs
            self._unit_mask = unit_mask
            self._coeffs = np.linalg.solve(vecs, self.sigma.astype(complex))
            self.subunit_radius = float(np.abs(vals[~unit_mask]).max())
        elif stability_check:
            self.subunit_radius = self._arpack_margin()
            cluster = np.ones(unit_dim, dtype=complex)
            self._eigenvalues = np.concatenate(
                [cluster, np.atleast_1d(self._margin_values)]
            )
        else:
            self._eigenvalues = np.ones(unit_dim, dtype=complex)
        self.mean_square_stable = (
            self.subunit_radius is None or self.subunit_radius < 1.0
        )

        target = optimal_wls(problem)
        fits = np.stack([p.local_fit for p in self.precomputes])
        pulled = np.stack(
            [(np.eye(dim) - rho * g) @ f for g, f in zip(self.gains, fits)]
        )
        self._deviations = {
            "round_one": np.concatenate([(pulled - target).ravel(), (fits - target).ravel()]),
            "raw_init": np.concatenate([(fits - target).ravel(), np.tile(-target, k)]),
        }
        self.mean_prediction = mean_limit(
            problem, rho, cardinality / k, num_rounds=0, precomputes=self.precomputes
        ).eigen_prediction

    def _arpack_margin(self, count=8):
        side = self.q.side
        left = self.left_basis
        right = self.right_basis
        lu = self._pairing_lu
        qmat = self.q.matrix

        def matvec(vec):
            deflate = vec - right @ sla.lu_solve(lu, left.T @ vec)
            return qmat @ deflate

        op = spla.LinearOperator((side, side), matvec=matvec)
        k_eigs = min(count, side - 2)
        vals = spla.eigs(op, k=k_eigs, which="LM", return_eigenvectors=False, tol=1e-8)
        self._margin_values = vals
        return float(np.abs(vals).max())

    def link_noise(self, psi):
        """Steady-state energy accumulated from a per-round injection."""
        psi = np.asarray(psi, dtype=float)
        if self.engine == "resolvent":
            return float(psi @ self.sigma_response)
        mask = ~self._unit_mask
        weights = psi.astype(complex) @ self._evecs
        terms = weights[mask] * self._coeffs[mask] / (1.0 - self._eigenvalues[mask])
        value = terms.sum()
        if abs(value.imag) > 1e-10 * max(abs(value.real), 1e-300):
            raise ValueError(
                f"conjugate eigenvalue pairing failed: imaginary residue {value.imag:.3e} "
                f"against real part {value.real:.3e}"
            )
        return float(value.real)

    def dispersion(self, psi):
        """Steady-state consensus-excluded energy from a per-round injection."""
        return float(np.asarray(psi) @ self.dispersion_response)

    def report(self, channel, deviation_mode="round_one", include_cross_blocks=False):
        """Predict the steady-state error split for one channel configuration."""
        if deviation_mode not in self._deviations:
            raise ValueError(
                f"unknown deviation mode {deviation_mode!r}; choose from "
                f"{sorted(self._deviations)}"
            )
        moments = noise_moments(
            self.problem,
            self.rho,
            self.cardinality,
            channel,
            precomputes=self.precomputes,
            include_cross_blocks=include_cross_blocks,
        )
        alternate = "raw_init" if deviation_mode == "round_one" else "round_one"
        if self.mean_square_stable:
            dev = self._deviations[deviation_mode]
            dev_alt = self._deviations[alternate]
            floor = float(dev @ self.sigma_limit @ dev)
            floor_alt = float(dev_alt @ self.sigma_limit @ dev_alt)
            down = self.link_noise(moments.downlink)
            up = self.link_noise(moments.uplink)
            link = self.link_noise(moments.combined)
            disp = self.dispersion(moments.combined)
            total = floor + link
        else:
            floor = floor_alt = down = up = link = disp = total = None
        return TheoryReport(
            total=total,
            noise_floor=floor,
            link_noise=link,
            link_noise_downlink=down,
            link_noise_uplink=up,
            noise_floor_alternate=floor_alt,
            deviation_mode=deviation_mode,
            dispersion=disp,
            eigenvalues=np.atleast_1d(self._eigenvalues),
            unit_count=self.unit_count,
            subunit_radius=self.subunit_radius,
            mean_square_stable=self.mean_square_stable,
            sigma_limit=self.sigma_limit,
            mean_limit=self.mean_prediction,
            engine=self.engine,
            eigen_tolerance=self.eigen_tol,
            num_clients=self.num_clients,
            block_dim=self.block_dim,
            cardinality=float(self.cardinality),
        )


def steady_state_mse(
    problem,
    rho,
    cardinality,
    channel,
    deviation_mode="round_one",
    engine="auto",
    eigen_tol=DEFAULT_EIGEN_TOL,
    include_cross_blocks=False,
    q=None,
    precomputes=None,
    max_extended_dim=DEFAULT_MAX_EXTENDED_DIM,
    stability_check=True,
):
    """One-call wrapper: build the analysis and report for a single channel."""
    analysis = SecondMomentAnalysis(
        problem,
        rho,
        cardinality,
        q=q,
        engine=engine,
        eigen_tol=eigen_tol,
        precomputes=precomputes,
        max_extended_dim=max_extended_dim,
        stability_check=stability_check,
    )
    return analysis.report(
        channel,
        deviation_mode=deviation_mode,
        include_cross_blocks=include_cross_blocks,
    )


# ---------------------------------------------------------------------------
# spectral reporting
# ---------------------------------------------------------------------------

@dataclass
class SpectralReport:
    """Spectral summary of a transition or second-moment matrix."""

    spectral_radius: float
    unit_count: int
    subunit_radius: float
    eigenvalues: np.ndarray
    exhaustive: bool
    tolerance: float


def check_spectral_properties(matrix, unit_tol=DEFAULT_EIGEN_TOL, max_dense_side=2048, top=64):
    """Measure the unit-eigenvalue cluster and the convergence margin.

    For sides up to ``max_dense_side`` the full spectrum is computed and the
    unit count is exact; beyond that only the ``top`` largest-magnitude
    eigenvalues are retrieved iteratively, so the count is a lower bound and
    the report says so via ``exhaustive``.
    """
    matrix = np.asarray(matrix)
    side = matrix.shape[0]
    if side <= max_dense_side:
        vals = np.linalg.eigvals(matrix)
        exhaustive = True
    else:
        k_eigs = min(top, side - 2)
        vals = spla.eigs(matrix, k=k_eigs, which="LM", return_eigenvectors=False)
        exhaustive = False
    mags = np.abs(vals)
    unit = np.abs(vals - 1.0) < unit_tol
    sub = mags[~unit]
    return SpectralReport(
        spectral_radius=float(mags.max()),
        unit_count=int(unit.sum()),
        subunit_radius=float(sub.max()) if sub.size else 0.0,
        eigenvalues=vals[np.argsort(-mags)][:top],
        exhaustive=exhaustive,
        tolerance=float(unit_tol),
    )
