"""Squared-exponential kernels and homoscedastic GP regression.

The homoscedastic model is the baseline surrogate of the LH-SGPR comparison
method; the kernel and the Cholesky helpers are shared with the
heteroscedastic model in :mod:`stochbed.vhgpr`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

log = logging.getLogger(__name__)

LOG_BOUND = 6.0
JITTER_START = 1e-8
JITTER_MAX = 1e-4
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class ConditioningError(np.linalg.LinAlgError):
    """Raised when a covariance matrix stays indefinite after maximal jitter."""


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


def as_points(x, dim: int | None = None) -> np.ndarray:
    """Coerce a point or a batch of points to a 2-D ``(m, d)`` float array."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1) if dim is None or arr.size == dim else arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"expected points of shape (m, d), got {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"dimension mismatch: expected d={dim}, got d={arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("input points must be finite")
    return arr


@dataclass(frozen=True)
class Dataset:
    """Ordered inputs ``X`` of shape ``(n, d)`` with scalar responses ``y``."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs but {y.shape[0]} outputs")
        if y.size < 1:
            raise ValueError("a dataset needs at least one observation")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset entries must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def append(self, x, y: float) -> "Dataset":
        x = as_points(x, self.dim)
        return Dataset(np.vstack([self.X, x]), np.append(self.y, y))


@dataclass(frozen=True)
class KernelParams:
    """Amplitude ``tau`` and per-dimension lengthscales of an RBF kernel."""

    amplitude: float
    lengthscales: tuple[float, ...]

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "amplitude", float(self.amplitude))
        if not self.amplitude > 0 or not all(v > 0 for v in ls):
            raise ValueError("kernel amplitude and lengthscales must be positive")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    def to_log(self) -> np.ndarray:
        return np.log(np.r_[self.amplitude, self.lengthscales])

    @classmethod
    def from_log(cls, v) -> "KernelParams":
        v = np.exp(np.asarray(v, dtype=float))
        return cls(v[0], tuple(v[1:]))


@dataclass(frozen=True)
class SgprHyper:
    kernel: KernelParams
    noise_std: float

    def __post_init__(self):
        if not self.noise_std >= 0:
            raise ValueError("noise_std must be nonnegative")

    def to_log(self) -> np.ndarray:
        return np.r_[self.kernel.to_log(), np.log(max(self.noise_std, 1e-300))]

    @classmethod
    def from_log(cls, v) -> "SgprHyper":
        v = np.asarray(v, dtype=float)
        return cls(KernelParams.from_log(v[:-1]), float(np.exp(v[-1])))


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------


def _scaled_sqdist(X, X2, lengthscales) -> np.ndarray:
    ls = np.asarray(lengthscales, dtype=float)
    A = X / ls
    B = X2 / ls
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def rbf_kernel(x, x2, p: KernelParams) -> float:
    """Evaluate ``tau^2 exp(-0.5 sum_j (x_j - x2_j)^2 / l_j^2)`` for two points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape or x.size != p.dim:
        raise ValueError(f"dimension mismatch: {x.shape}, {x2.shape}, kernel d={p.dim}")
    r = (x - x2) / np.asarray(p.lengthscales)
    return p.amplitude**2 * float(np.exp(-0.5 * r @ r))


def kernel_matrix(X, X2, p: KernelParams) -> np.ndarray:
    """Cross-covariance matrix with entries ``rbf_kernel(X[i], X2[j], p)``."""
    X = as_points(X, p.dim)
    X2 = as_points(X2, p.dim)
    if X is X2 or (X.shape == X2.shape and np.array_equal(X, X2)):
        # exact symmetry and unit diagonal
        diff = X[:, None, :] - X[None, :, :]
        d2 = ((diff / np.asarray(p.lengthscales)) ** 2).sum(-1)
    else:
        d2 = _scaled_sqdist(X, X2, p.lengthscales)
    return p.amplitude**2 * np.exp(-0.5 * d2)


def _sq_diffs(X) -> np.ndarray:
    """Per-dimension squared differences, shape ``(d, n, n)``."""
    diff = X[:, None, :] - X[None, :, :]
    return np.moveaxis(diff * diff, -1, 0)


def jittered_cholesky(K: np.ndarray, scale: float, start: float = JITTER_START):
    """Lower Cholesky factor of ``K + eps I`` with escalating ``eps``.

    ``eps`` starts at ``start * scale`` and grows tenfold up to
    ``JITTER_MAX * scale``. Returns the factor and the jitter used.
    """
    n = K.shape[0]
    eps = start * scale
    while True:
        try:
            return np.linalg.cholesky(K + eps * np.eye(n)), eps
        except np.linalg.LinAlgError:
            eps *= 10.0
            if eps > JITTER_MAX * scale * (1 + 1e-9):
                raise ConditioningError(
                    f"covariance matrix of size {n} not positive definite "
                    f"even with diagonal jitter {JITTER_MAX * scale:.3g}"
                ) from None
            log.debug("escalating jitter to %.3g", eps)


def gram(X: np.ndarray, p: KernelParams) -> np.ndarray:
    """Training covariance with the baseline jitter folded in.

    Folding ``1e-8 tau^2`` into the kernel keeps ``dK/dlog(tau) = 2K`` exact.
    """
    K = kernel_matrix(X, X, p)
    K[np.diag_indices_from(K)] *= 1.0 + JITTER_START
    return K


# ---------------------------------------------------------------------------
# Homoscedastic regression
# ---------------------------------------------------------------------------


def _sgpr_objective(logh: np.ndarray, X: np.ndarray, y: np.ndarray, sqd: np.ndarray):
    """Log marginal likelihood and its gradient w.r.t. log-hyperparameters."""
    n, d = X.shape
    tau2 = np.exp(2 * logh[0])
    ls = np.exp(logh[1 : 1 + d])
    noise2 = np.exp(2 * logh[-1])
    E = np.exp(-0.5 * np.tensordot(1.0 / ls**2, sqd, axes=1))
    K = tau2 * E
    K[np.diag_indices(n)] *= 1.0 + JITTER_START
    C = K + noise2 * np.eye(n)
    Lc, _ = jittered_cholesky(C, tau2 + noise2, start=0.0 if noise2 > 0 else JITTER_START)
    alpha = cho_solve((Lc, True), y)
    value = -0.5 * y @ alpha - np.log(np.diag(Lc)).sum() - n * _HALF_LOG_2PI
    Cinv = cho_solve((Lc, True), np.eye(n))
    G = 0.5 * (np.outer(alpha, alpha) - Cinv)
    grad = np.empty_like(logh)
    grad[0] = 2.0 * (G * K).sum()
    KE = tau2 * E
    for j in range(d):
        grad[1 + j] = (G * KE * sqd[j]).sum() / ls[j] ** 2
    grad[-1] = 2.0 * noise2 * np.trace(G)
    return value, grad


def sgpr_log_marginal(data: Dataset, h: SgprHyper, return_grad: bool = False):
    """Log density of ``y`` under ``N(0, K_f + noise_std^2 I)``.

    With ``return_grad`` the gradient with respect to
    ``(log tau, log l_1..l_d, log noise_std)`` is returned as well.
    """
    if h.kernel.dim != data.dim:
        raise ValueError("kernel dimension does not match the dataset")
    if h.noise_std == 0:
        # no log-parameterisation for a zero noise level; value only
        K = gram(data.X, h.kernel)
        L, _ = jittered_cholesky(K, h.kernel.amplitude**2, start=0.0)
        a = solve_triangular(L, data.y, lower=True)
        value = -0.5 * a @ a - np.log(np.diag(L)).sum() - data.n * _HALF_LOG_2PI
        if return_grad:
            raise ValueError("gradient undefined at noise_std = 0")
        return value
    value, grad = _sgpr_objective(h.to_log(), data.X, data.y, _sq_diffs(data.X))
    return (value, grad) if return_grad else value


@dataclass
class SgprModel:
    """Trained homoscedastic GP with cached factorisation of ``K_f + noise I``."""

    data: Dataset
    hyper: SgprHyper
    log_marginal: float
    converged: bool = True
    _chol: np.ndarray = field(default=None, repr=False)
    _alpha: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._chol is None:
            K = gram(self.data.X, self.hyper.kernel)
            noise2 = self.hyper.noise_std**2
            C = K + noise2 * np.eye(self.data.n)
            self._chol, _ = jittered_cholesky(C, self.hyper.kernel.amplitude**2 + noise2, start=0.0)
            self._alpha = cho_solve((self._chol, True), self.data.y)

    def predict(self, X, with_var: bool = True):
        """Posterior of ``f`` at ``X`` packaged with a constant log-variance."""
        from stochbed.vhgpr import PointPosterior

        X = as_points(X, self.data.dim)
        Ks = kernel_matrix(X, self.data.X, self.hyper.kernel)
        mean = Ks @ self._alpha
        g = np.full_like(mean, 2.0 * np.log(max(self.hyper.noise_std, 1e-300)))
        zeros = np.zeros_like(mean)
        if not with_var:
            return PointPosterior(mean, zeros, g, zeros)
        v = solve_triangular(self._chol, Ks.T, lower=True)
        var = np.maximum(self.hyper.kernel.amplitude**2 - (v * v).sum(0), 0.0)
        return PointPosterior(mean, var, g, zeros)


def sgpr_predict(m: SgprModel, x) -> tuple[float, float]:
    """Posterior mean and variance of ``f`` at a single input."""
    post = m.predict(as_points(x, m.data.dim))
    return float(post.mu_f[0]), float(post.var_f[0])


def default_sgpr_init(data: Dataset) -> SgprHyper:
    span = np.ptp(data.X, axis=0)
    span = np.where(span > 0, span, 1.0)
    sd = float(np.std(data.y)) or 1.0
    return SgprHyper(KernelParams(sd, tuple(0.25 * span)), 0.1 * sd)


def sgpr_fit(
    data: Dataset,
    init: SgprHyper | None = None,
    restarts: int = 3,
    seed: int = 0,
    maxiter: int = 500,
) -> SgprModel:
    """Maximise the log marginal likelihood in log-space from ``init``.

    The first start is ``init`` itself; ``restarts`` further starts perturb
    it by N(0, 0.5^2) in log-space. The best optimum is kept. If no start
    reports convergence the best point is returned with ``converged=False``.
    """
    if data.n < 2:
        raise ValueError("sgpr_fit needs at least two observations")
    init = init or default_sgpr_init(data)
    x0 = np.clip(init.to_log(), -LOG_BOUND, LOG_BOUND)
    sqd = _sq_diffs(data.X)
    rng = np.random.default_rng(seed)
    bounds = [(-LOG_BOUND, LOG_BOUND)] * x0.size

    def negative(v):
        try:
            val, grad = _sgpr_objective(v, data.X, data.y, sqd)
        except ConditioningError:
            return np.inf, np.zeros_like(v)
        return -val, -grad

    starts = [x0] + [np.clip(x0 + 0.5 * rng.standard_normal(x0.size), -LOG_BOUND, LOG_BOUND) for _ in range(restarts)]
    best = None
    any_converged = False
    for s in starts:
        res = minimize(negative, s, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": maxiter})
        any_converged |= bool(res.success)
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise ConditioningError("all SGPR optimisation starts failed")
    if not any_converged:
        log.warning("SGPR hyperparameter optimisation did not converge")
    hyper = SgprHyper.from_log(best.x)
    return SgprModel(data, hyper, -float(best.fun), converged=any_converged)
