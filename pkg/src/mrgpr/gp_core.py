"""Exact Gaussian process regression with a squared-exponential kernel.

The GP has a zero prior mean. All solves go through a lower Cholesky factor
of ``K + jitter * I``; the only place a dense inverse is formed is the
likelihood gradient used by :func:`optimize_hyperparameters`.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import lapack, solve_triangular
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

LOG_PARAM_BOUNDS = (-6.0, 6.0)
DEFAULT_BUDGET = 100
DEFAULT_SUBSAMPLE_CAP = 2000
DUPLICATE_TOL = 1e-12
MODEL_FORMAT = "mrgpr-gp-model/1"


class DimensionError(ValueError):
    pass


class CholeskyError(np.linalg.LinAlgError):
    """Gram matrix is not numerically positive definite."""

    def __init__(self, pivot: int, size: int, jitter: float):
        self.pivot = pivot
        self.size = size
        self.jitter = jitter
        super().__init__(
            f"Cholesky failed at pivot {pivot} of {size} (jitter={jitter:g}); "
            "the Gram matrix is not numerically positive definite, "
            "increase the jitter or remove duplicate regressors"
        )


@dataclass(frozen=True)
class Hyperparameters:
    signal_std: float
    lengthscales: tuple[float, ...]
    jitter: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "signal_std", float(self.signal_std))
        object.__setattr__(self, "lengthscales", tuple(float(v) for v in self.lengthscales))
        object.__setattr__(self, "jitter", float(self.jitter))
        if not self.signal_std > 0 or not math.isfinite(self.signal_std):
            raise ValueError(f"signal_std must be positive, got {self.signal_std}")
        if not self.lengthscales:
            raise ValueError("lengthscales must be non-empty")
        if any(not (l > 0 and math.isfinite(l)) for l in self.lengthscales):
            raise ValueError(f"lengthscales must be positive, got {self.lengthscales}")
        if not self.jitter >= 0 or not math.isfinite(self.jitter):
            raise ValueError(f"jitter must be nonnegative, got {self.jitter}")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    @property
    def signal_var(self) -> float:
        return self.signal_std**2

    @classmethod
    def from_data(cls, regressors, targets, jitter_rel: float = 1e-8) -> "Hyperparameters":
        """Normalisation heuristic: sigma_f = std(u), l_i = std of column i.

        Zero spreads fall back to 1. Jitter is ``jitter_rel * sigma_f**2``.
        """
        X = np.asarray(regressors, dtype=float)
        u = np.asarray(targets, dtype=float)
        sf = float(np.std(u)) if u.size else 0.0
        sf = sf if sf > 0 else 1.0
        ls = np.std(X, axis=0) if X.size else np.ones(X.shape[1])
        ls = tuple(float(v) if v > 0 else 1.0 for v in ls)
        return cls(sf, ls, jitter_rel * sf**2)

    def to_log_params(self) -> np.ndarray:
        return np.log(np.r_[self.signal_std, self.lengthscales])

    @classmethod
    def from_log_params(cls, theta, jitter: float) -> "Hyperparameters":
        theta = np.asarray(theta, dtype=float)
        return cls(float(np.exp(theta[0])), tuple(np.exp(theta[1:])), jitter)

    def to_dict(self) -> dict:
        return {
            "signal_std": self.signal_std,
            "lengthscales": list(self.lengthscales),
            "jitter": self.jitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        return cls(d["signal_std"], tuple(d["lengthscales"]), d.get("jitter", 0.0))


@dataclass(frozen=True)
class TrainingPair:
    """Regressor ``[y-hist; u-hist; y(t); y(t+1)]`` and the input ``u(t)``."""

    regressor: tuple[float, ...]
    target: float

    def __post_init__(self):
        object.__setattr__(self, "regressor", tuple(float(v) for v in self.regressor))
        object.__setattr__(self, "target", float(self.target))


def as_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    """Regressor matrix and target vector from pairs or a dataset-like object."""
    if hasattr(pairs, "regressors") and hasattr(pairs, "targets"):
        X = np.asarray(pairs.regressors, dtype=float)
        u = np.asarray(pairs.targets, dtype=float)
    else:
        pairs = list(pairs)
        if not pairs:
            return np.zeros((0, 0)), np.zeros(0)
        lengths = {len(p.regressor) for p in pairs}
        if len(lengths) != 1:
            raise DimensionError(f"regressors have mixed lengths {sorted(lengths)}")
        X = np.array([p.regressor for p in pairs], dtype=float)
        u = np.array([p.target for p in pairs], dtype=float)
    if X.ndim != 2 or u.shape != (X.shape[0],):
        raise DimensionError(f"bad training arrays: regressors {X.shape}, targets {u.shape}")
    return X, u


def _check_dim(n_x: int, hp: Hyperparameters, what: str = "regressor"):
    if n_x != hp.dim:
        raise DimensionError(f"{what} has length {n_x} but hyperparameters have {hp.dim} lengthscales")


def se_kernel(x, y, hp: Hyperparameters) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if not (x.size == y.size == hp.dim):
        raise DimensionError(
            f"kernel arguments have lengths {x.size} and {y.size}, lengthscales {hp.dim}"
        )
    d2 = 0.0
    for xi, yi, li in zip(x, y, hp.lengthscales):
        r = (xi - yi) / li
        d2 += r * r
    return float(hp.signal_var * np.exp(-0.5 * d2))


def _scaled_sqdist(X: np.ndarray, Y: np.ndarray, lengthscales: Sequence[float]) -> np.ndarray:
    # per-dimension accumulation in index order: exact symmetry, no |a|^2+|b|^2-2ab cancellation
    d2 = np.zeros((X.shape[0], Y.shape[0]))
    for k, l in enumerate(lengthscales):
        r = np.subtract.outer(X[:, k], Y[:, k])
        r /= l
        r *= r
        d2 += r
    return d2


def gram(X, Y, hp: Hyperparameters) -> np.ndarray:
    """Cross-covariance matrix ``k(X_i, Y_j)`` (jitter not included)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    _check_dim(X.shape[1], hp)
    _check_dim(Y.shape[1], hp)
    K = _scaled_sqdist(X, Y, hp.lengthscales)
    K *= -0.5
    np.exp(K, out=K)
    K *= hp.signal_var
    return K


def cholesky(A: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor; raises :class:`CholeskyError` with the 1-based pivot."""
    c, info = lapack.dpotrf(A, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise CholeskyError(int(info), A.shape[0], jitter)
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return c


def _cho_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    return solve_triangular(L, solve_triangular(L, b, lower=True), lower=True, trans="T")


@dataclass(frozen=True, eq=False)
class GpModel:
    regressors: np.ndarray
    targets: np.ndarray
    hyperparameters: Hyperparameters
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.regressors.shape[1]

    @property
    def pairs(self) -> list[TrainingPair]:
        return [TrainingPair(x, t) for x, t in zip(self.regressors, self.targets)]

    def __len__(self):
        return self.regressors.shape[0]


def _factor(X: np.ndarray, hp: Hyperparameters) -> np.ndarray:
    K = gram(X, X, hp)
    K[np.diag_indices_from(K)] += hp.jitter
    return cholesky(K, hp.jitter)


def fit(pairs, hp: Hyperparameters) -> GpModel:
    X, u = as_arrays(pairs)
    if X.shape[0] == 0:
        raise ValueError("cannot fit a GP on an empty training set")
    _check_dim(X.shape[1], hp)
    L = _factor(X, hp)
    alpha = _cho_solve(L, u)
    for a in (X, u, L, alpha):
        a.setflags(write=False)
    return GpModel(X, u, hp, L, alpha)


def _query(model: GpModel, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 1:
        xi = xi[None, :]
    if xi.shape[1] != model.dim:
        raise DimensionError(f"query has length {xi.shape[1]}, model expects {model.dim}")
    return xi


def predict_mean(model: GpModel, Xs) -> np.ndarray:
    """Posterior mean at each row of ``Xs``."""
    Xs = _query(model, Xs)
    return gram(Xs, model.regressors, model.hyperparameters) @ model.alpha


def predict(model: GpModel, Xs) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and (clamped) variance at each row of ``Xs``."""
    Xs = _query(model, Xs)
    Ks = gram(model.regressors, Xs, model.hyperparameters)
    mean = Ks.T @ model.alpha
    v = solve_triangular(model.chol, Ks, lower=True)
    var = model.hyperparameters.signal_var - np.einsum("ij,ij->j", v, v)
    return mean, np.maximum(var, 0.0)


def posterior_mean(model: GpModel, xi) -> float:
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 1:
        raise DimensionError("posterior_mean takes a single regressor vector")
    return float(predict_mean(model, xi)[0])


def posterior_var(model: GpModel, xi) -> float:
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 1:
        raise DimensionError("posterior_var takes a single regressor vector")
    return float(predict(model, xi)[1][0])


def log_marginal_likelihood(pairs, hp: Hyperparameters) -> float:
    X, u = as_arrays(pairs)
    if X.shape[0] == 0:
        raise ValueError("log marginal likelihood of an empty training set")
    _check_dim(X.shape[1], hp)
    return _lml(X, u, hp)


def _lml(X: np.ndarray, u: np.ndarray, hp: Hyperparameters) -> float:
    L = _factor(X, hp)
    a = solve_triangular(L, u, lower=True)
    m = X.shape[0]
    return float(-0.5 * a @ a - np.log(np.diag(L)).sum() - 0.5 * m * math.log(2 * math.pi))


def _nll(theta: np.ndarray, X: np.ndarray, u: np.ndarray, jitter_rel: float, want_grad: bool):
    """Negative LML (and gradient w.r.t. ``[log sf, log l_1..log l_d]``).

    The jitter is ``jitter_rel * sf**2`` so it scales with the signal variance.
    """
    hp = Hyperparameters.from_log_params(theta, jitter_rel * math.exp(2 * theta[0]))
    m = X.shape[0]
    Kf = gram(X, X, hp)
    K = Kf.copy()
    K[np.diag_indices_from(K)] += hp.jitter
    L = cholesky(K, hp.jitter)
    del K
    alpha = _cho_solve(L, u)
    nll = float(0.5 * u @ alpha + np.log(np.diag(L)).sum() + 0.5 * m * math.log(2 * math.pi))
    if not want_grad:
        return nll, None
    # dense inverse is needed for the trace terms only
    W = _cho_solve(L, np.eye(m))
    W -= np.outer(alpha, alpha)
    WK = W * (Kf + hp.jitter * np.eye(m))
    grad = np.empty_like(theta)
    grad[0] = WK.sum()  # 0.5 * tr(W dK), dK = 2 (Kf + jitter I)
    WK = W * Kf
    for k, l in enumerate(hp.lengthscales):
        r = np.subtract.outer(X[:, k], X[:, k])
        r /= l
        r *= r
        grad[k + 1] = 0.5 * np.einsum("ij,ij->", WK, r)
    return nll, grad


def _projected_bfgs(fun, x0, lo, hi, budget, gtol=1e-6, max_step=1.0):
    """Box-constrained BFGS with monotone Armijo backtracking.

    ``fun(x, want_grad)`` returns (value, gradient or None) and may raise
    CholeskyError, in which case the trial point is rejected and the step
    shortened. Returns the last accepted point and its value.
    """
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    f, g = fun(x, True)
    n = x.size
    H = np.eye(n)
    for _ in range(budget):
        free = ~(((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0)))
        if not free.any() or np.linalg.norm(g[free], np.inf) < gtol:
            break
        p = -(H @ g)
        p[~free] = 0.0
        if p @ g >= 0:
            H = np.eye(n)
            p = np.where(free, -g, 0.0)
        scale = np.abs(p).max()
        if scale > max_step:
            p *= max_step / scale
        step = 1.0
        xn = None
        for _ in range(40):
            trial = np.clip(x + step * p, lo, hi)
            try:
                fn, _ = fun(trial, False)
            except CholeskyError:
                fn = np.inf
            if np.isfinite(fn) and fn <= f + 1e-4 * (g @ (trial - x)) and fn <= f:
                xn = trial
                break
            step *= 0.5
        if xn is None:
            break
        try:
            _, gn = fun(xn, True)
        except CholeskyError:
            break
        if not np.all(np.isfinite(gn)):
            x, f = xn, fn
            break
        s, yv = xn - x, gn - g
        sy = s @ yv
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, yv)
            H = V @ H @ V.T + rho * np.outer(s, s)
        done = f - fn <= 1e-12 * max(1.0, abs(f))
        x, f, g = xn, fn, gn
        if done:
            break
    return x, f


def subsample_indices(m: int, cap: int, seed: int) -> np.ndarray:
    """Sorted uniform subsample of ``cap`` row indices (all rows if m <= cap)."""
    if m <= cap:
        return np.arange(m)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(m, size=cap, replace=False))


def optimize_hyperparameters(
    pairs,
    init: Hyperparameters,
    budget: int = DEFAULT_BUDGET,
    subsample_cap: int = DEFAULT_SUBSAMPLE_CAP,
    seed: int = 0,
) -> Hyperparameters:
    """Maximise the log marginal likelihood over log(sigma_f) and log(l_i).

    The jitter is held fixed relative to the signal variance: the returned
    hyperparameters keep ``jitter / sigma_f**2`` of ``init``. Log-parameters
    are clamped to ``LOG_PARAM_BOUNDS``. With more than ``subsample_cap``
    pairs the search runs on a seeded uniform subsample, and the never-worse
    guarantee refers to that subsample.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    X, u = as_arrays(pairs)
    if X.shape[0] == 0:
        raise ValueError("cannot optimise hyperparameters on an empty training set")
    _check_dim(X.shape[1], init)
    idx = subsample_indices(X.shape[0], subsample_cap, seed)
    X, u = X[idx], u[idx]
    lo, hi = LOG_PARAM_BOUNDS
    jitter_rel = init.jitter / init.signal_var

    def fun(theta, want_grad):
        return _nll(theta, X, u, jitter_rel, want_grad)

    f_init = -_lml(X, u, init)  # raises at a bad init
    theta_start = np.clip(init.to_log_params(), lo, hi)
    try:
        theta, f = _projected_bfgs(fun, theta_start, lo, hi, budget)
    except CholeskyError:
        logger.info("clamped initial hyperparameters are not factorisable; returning init")
        return init
    if not f <= f_init:
        return init
    logger.info("hyperparameter search on %d pairs: nll %.6g -> %.6g", X.shape[0], f_init, f)
    return Hyperparameters.from_log_params(theta, jitter_rel * math.exp(2 * theta[0]))


def duplicate_mask(regressors, tol: float = DUPLICATE_TOL) -> np.ndarray:
    """Boolean mask keeping the first of any regressors closer than ``tol``."""
    X = np.asarray(regressors, dtype=float)
    keep = np.ones(X.shape[0], dtype=bool)
    if X.shape[0] < 2:
        return keep
    for i, j in sorted(cKDTree(X).query_pairs(tol)):
        if keep[i] and keep[j]:
            keep[j] = False
    return keep


def deduplicate(pairs, tol: float = DUPLICATE_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Drop near-identical regressors (first occurrence wins), warning if any."""
    X, u = as_arrays(pairs)
    keep = duplicate_mask(X, tol)
    dropped = int((~keep).sum())
    if dropped:
        logger.warning("dropped %d duplicate regressor(s) closer than %g", dropped, tol)
    return X[keep], u[keep]


@dataclass(frozen=True)
class _Arrays:
    regressors: np.ndarray
    targets: np.ndarray


def pairs_from_arrays(regressors, targets) -> _Arrays:
    """Wrap arrays so they can be passed wherever pairs are accepted."""
    return _Arrays(np.asarray(regressors, dtype=float), np.asarray(targets, dtype=float))


def save_model(model: GpModel, path) -> None:
    """Write hyperparameters and training pairs; floats are written as hex."""
    doc = {
        "format": MODEL_FORMAT,
        "dim": model.dim,
        "hyperparameters": {
            "signal_std": model.hyperparameters.signal_std.hex(),
            "lengthscales": [l.hex() for l in model.hyperparameters.lengthscales],
            "jitter": model.hyperparameters.jitter.hex(),
        },
        "regressors": [[float(v).hex() for v in row] for row in model.regressors],
        "targets": [float(v).hex() for v in model.targets],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_model(path) -> GpModel:
    """Read a model file; the factorisation is recomputed."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not a {MODEL_FORMAT} file")
    h = doc["hyperparameters"]
    hp = Hyperparameters(
        float.fromhex(h["signal_std"]),
        tuple(float.fromhex(v) for v in h["lengthscales"]),
        float.fromhex(h["jitter"]),
    )
    dim = int(doc["dim"])
    X = np.array([[float.fromhex(v) for v in row] for row in doc["regressors"]], dtype=float)
    X = X.reshape(-1, dim)
    u = np.array([float.fromhex(v) for v in doc["targets"]], dtype=float)
    return fit(_Arrays(X, u), hp)
