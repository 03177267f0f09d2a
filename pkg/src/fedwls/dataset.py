"""Synthetic federated weighted least-squares problems.

Every client owns a private regression block drawn around a shared
ground-truth model: a feature matrix with client-specific mean and scale, a
response vector with client-specific observation noise, and an SPD weighting
matrix. The module also provides the network-wide closed-form optimum and the
per-client quantities (update gain, local ridge fit) that both the iterative
algorithms and the steady-state analysis consume.

Client data is generated from named substreams of a single seed, so adding
clients to a config never perturbs the data of existing ones.
"""

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np


class WeightMode(Enum):
    """How the per-client weighting matrices are chosen."""

    INVERSE_OBS_COVARIANCE = "inverse_obs_covariance"
    IDENTITY = "identity"
    EXPLICIT_SPD = "explicit_spd"


class DegenerateProblemError(ValueError):
    """Raised when the aggregate normal matrix is singular or near-singular."""


@dataclass(frozen=True)
class DataGenConfig:
    """Recipe for one synthetic problem instance.

    Parameters
    ----------
    num_clients : int
        Number of clients K, at least 1.
    model_dim : int
        Model dimension L, at least 1.
    rows_range : tuple of int
        Inclusive bounds for the per-client row count.
    feature_mean_range : tuple of float
        Per-client feature mean is drawn uniformly from this interval.
    feature_var_range : tuple of float
        Per-client feature variance is drawn uniformly from this interval.
        Must be strictly positive.
    obs_noise_variances : float or sequence of float
        Observation noise variance, shared or per client. Zero is allowed
        (noiseless responses) except under INVERSE_OBS_COVARIANCE weighting,
        which needs a positive variance to invert.
    weight_mode : WeightMode
        Weighting matrix recipe.
    seed : int
        Root seed for all generation substreams.
    """

    num_clients: int
    model_dim: int
    rows_range: tuple = (50, 90)
    feature_mean_range: tuple = (-0.5, 0.5)
    feature_var_range: tuple = (0.5, 1.5)
    obs_noise_variances: object = 1e-2
    weight_mode: WeightMode = WeightMode.INVERSE_OBS_COVARIANCE
    seed: int = 0

    def noise_variance(self, k):
        """Observation noise variance for client ``k``."""
        v = self.obs_noise_variances
        if np.ndim(v) == 0:
            return float(v)
        return float(v[k])

    def validate(self):
        """Raise ValueError on an inconsistent config."""
        if self.num_clients < 1:
            raise ValueError("num_clients must be at least 1")
        if self.model_dim < 1:
            raise ValueError("model_dim must be at least 1")
        lo, hi = self.rows_range
        if not (1 <= lo <= hi):
            raise ValueError(f"rows_range must satisfy 1 <= lo <= hi, got {self.rows_range}")
        a, b = self.feature_var_range
        if not (0 < a <= b):
            raise ValueError("feature_var_range must be strictly positive")
        m0, m1 = self.feature_mean_range
        if m0 > m1:
            raise ValueError("feature_mean_range is reversed")
        variances = [self.noise_variance(k) for k in range(self.num_clients)]
        if any(v < 0 for v in variances):
            raise ValueError("observation noise variances must be nonnegative")
        if self.weight_mode is WeightMode.INVERSE_OBS_COVARIANCE and any(
            v == 0 for v in variances
        ):
            raise ValueError(
                "INVERSE_OBS_COVARIANCE weighting needs positive observation "
                "noise variances; use IDENTITY for noiseless responses"
            )


@dataclass
class WlsProblem:
    """One realized problem: per-client data blocks plus the ground truth.

    Attributes
    ----------
    features : list of ndarray
        Per-client feature matrices, shapes (d_k, L).
    responses : list of ndarray
        Per-client response vectors, shapes (d_k,).
    weights : list of ndarray
        Per-client SPD weighting matrices, shapes (d_k, d_k).
    truth : ndarray
        The generating model, shape (L,).
    """

    features: list
    responses: list
    weights: list
    truth: np.ndarray

    @property
    def num_clients(self):
        return len(self.features)

    @property
    def model_dim(self):
        return self.truth.shape[0]

    @property
    def row_counts(self):
        return [X.shape[0] for X in self.features]

    def validate(self, tol=1e-8):
        """Check shape consistency and weight symmetry/definiteness."""
        if not (len(self.features) == len(self.responses) == len(self.weights)):
            raise ValueError("per-client lists have mismatched lengths")
        L = self.model_dim
        for k, (X, y, W) in enumerate(zip(self.features, self.responses, self.weights)):
            d = X.shape[0]
            if X.shape != (d, L):
                raise ValueError(f"client {k}: features have shape {X.shape}, expected (d, {L})")
            if y.shape != (d,):
                raise ValueError(f"client {k}: response length {y.shape} != row count {d}")
            if W.shape != (d, d):
                raise ValueError(f"client {k}: weight shape {W.shape} != ({d}, {d})")
            if not np.allclose(W, W.T, atol=tol * max(1.0, np.abs(W).max())):
                raise ValueError(f"client {k}: weight matrix is not symmetric")
            eigs = np.linalg.eigvalsh(W)
            if eigs.min() <= tol * max(1.0, eigs.max()):
                raise ValueError(f"client {k}: weight matrix is not positive definite")


@dataclass
class ClientPrecompute:
    """Fixed per-client quantities used by every algorithm round.

    ``gain`` is the inverse of (2 X'WX + rho I): the matrix a client applies
    to whatever it receives. ``local_fit`` is 2 gain X'W y, the model the
    client would settle on with no network at all (a ridge-regularized local
    solve). Both depend only on the data and the penalty weight rho.
    """

    gain: np.ndarray
    local_fit: np.ndarray


def generate_problem(config):
    """Draw one problem instance from a generation config.

    Each client's block comes from its own named substream of
    ``config.seed``, so regenerating with more clients leaves earlier
    clients' data bit-identical. The ground truth has its own substream.

    Raises
    ------
    DegenerateProblemError
        If the aggregate normal matrix of the drawn instance is singular to
        working precision. The caller decides whether to reseed.
    """
    config.validate()
    K, L = config.num_clients, config.model_dim
    truth_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    truth = truth_rng.standard_normal(L)

    features, responses, weights = [], [], []
    lo, hi = config.rows_range
    for k in range(K):
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1, k)))
        d = int(rng.integers(lo, hi + 1))
        mu = rng.uniform(*config.feature_mean_range)
        var = rng.uniform(*config.feature_var_range)
        X = rng.normal(mu, np.sqrt(var), size=(d, L))
        nv = config.noise_variance(k)
        y = X @ truth
        if nv > 0:
            y = y + rng.normal(0.0, np.sqrt(nv), size=d)

        if config.weight_mode is WeightMode.INVERSE_OBS_COVARIANCE:
            W = np.eye(d) / nv
        elif config.weight_mode is WeightMode.IDENTITY:
            W = np.eye(d)
        else:
            G = rng.standard_normal((d, d))
            W = G @ G.T / d + 0.5 * np.eye(d)
        features.append(X)
        responses.append(y)
        weights.append(W)

    problem = WlsProblem(features=features, responses=responses, weights=weights, truth=truth)
    _normal_matrix(problem)  # raises DegenerateProblemError if singular
    return problem


def _normal_matrix(problem):
    """Aggregate normal matrix, sum over clients of X'WX, with a rank check."""
    L = problem.model_dim
    H = np.zeros((L, L))
    for X, W in zip(problem.features, problem.weights):
        H += X.T @ W @ X
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > 1.0 / np.finfo(float).eps:
        raise DegenerateProblemError(
            f"aggregate normal matrix is numerically singular (cond={cond:.3e})"
        )
    return H


def optimal_wls(problem):
    """Closed-form minimizer of the network-wide weighted residual.

    Solves (sum_k X'WX) w = sum_k X'Wy. This is the target every federated
    variant is trying to reach.
    """
    H = _normal_matrix(problem)
    rhs = np.zeros(problem.model_dim)
    for X, y, W in zip(problem.features, problem.responses, problem.weights):
        rhs += X.T @ (W @ y)
    return np.linalg.solve(H, rhs)


def precompute_client(problem, k, rho):
    """Per-client gain and local fit for penalty weight ``rho``.

    The gain inverts 2 X'WX + rho I, which is positive definite for any
    rho > 0, with eigenvalues in (0, 1/rho]. ``local_fit`` is what the gain
    produces from the client's own data alone.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    X, y, W = problem.features[k], problem.responses[k], problem.weights[k]
    A = X.T @ (W @ X)
    L = problem.model_dim
    gain = np.linalg.inv(2.0 * A + rho * np.eye(L))
    gain = 0.5 * (gain + gain.T)
    local_fit = 2.0 * gain @ (X.T @ (W @ y))
    return ClientPrecompute(gain=gain, local_fit=local_fit)


def precompute_all(problem, rho):
    """List of :func:`precompute_client` results for every client."""
    return [precompute_client(problem, k, rho) for k in range(problem.num_clients)]


_FORMAT_NAME = "fedwls-problem"
_FORMAT_VERSION = 1


def save_problem(problem, path, config=None):
    """Serialize a problem (and optionally its generating config) to JSON.

    The file is self-describing: a format tag, a version, full-precision
    per-client blocks, and the ground truth. ``load_problem`` round-trips
    bit-exactly because floats are stored through repr.
    """
    doc = {
        "format": _FORMAT_NAME,
        "version": _FORMAT_VERSION,
        "truth": problem.truth.tolist(),
        "clients": [
            {
                "features": X.tolist(),
                "response": y.tolist(),
                "weight": W.tolist(),
            }
            for X, y, W in zip(problem.features, problem.responses, problem.weights)
        ],
    }
    if config is not None:
        doc["config"] = {
            "num_clients": config.num_clients,
            "model_dim": config.model_dim,
            "rows_range": list(config.rows_range),
            "feature_mean_range": list(config.feature_mean_range),
            "feature_var_range": list(config.feature_var_range),
            "obs_noise_variances": np.asarray(config.obs_noise_variances).tolist(),
            "weight_mode": config.weight_mode.value,
            "seed": config.seed,
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_problem(path):
    """Load a problem written by :func:`save_problem` and validate it.

    Returns
    -------
    (WlsProblem, DataGenConfig or None)
    """
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != _FORMAT_NAME:
        raise ValueError(f"not a {_FORMAT_NAME} file: format tag is {doc.get('format')!r}")
    if doc.get("version") != _FORMAT_VERSION:
        raise ValueError(f"unsupported format version {doc.get('version')!r}")
    problem = WlsProblem(
        features=[np.asarray(c["features"], dtype=float) for c in doc["clients"]],
        responses=[np.asarray(c["response"], dtype=float) for c in doc["clients"]],
        weights=[np.asarray(c["weight"], dtype=float) for c in doc["clients"]],
        truth=np.asarray(doc["truth"], dtype=float),
    )
    problem.validate()
    _normal_matrix(problem)

    config = None
    if "config" in doc:
        c = doc["config"]
        obs = c["obs_noise_variances"]
        config = DataGenConfig(
            num_clients=c["num_clients"],
            model_dim=c["model_dim"],
            rows_range=tuple(c["rows_range"]),
            feature_mean_range=tuple(c["feature_mean_range"]),
            feature_var_range=tuple(c["feature_var_range"]),
            obs_noise_variances=obs if np.ndim(obs) == 0 else list(obs),
            weight_mode=WeightMode(c["weight_mode"]),
            seed=c["seed"],
        )
    return problem, config
