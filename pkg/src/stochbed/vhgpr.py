"""Variational heteroscedastic GP regression.

Two independent GP priors are placed on the latent mean ``f`` and on the
log noise variance ``g``::

    y_i = f(x_i) + N(0, exp(g(x_i))),  f ~ GP(0, k_f),  g ~ GP(mu0, k_g)

The Gaussian posterior of ``g`` at the training inputs is tied to an
``n``-vector ``lam`` (the diagonal of Lambda)::

    mu    = K_g (lam - 1/2) + mu0
    Sigma = (K_g^{-1} + diag(lam))^{-1}

and ``lam`` is fitted jointly with the hyperparameters by maximising the
marginalised variational bound

    F = log N(y | 0, K_f + R) - tr(Sigma)/4 - KL(N(mu, Sigma) || N(mu0, K_g))

with ``R = diag(exp(mu_i - Sigma_ii / 2))``. Everything is evaluated through
the Cholesky factor of ``B = I + W K_g W`` (``W = diag(sqrt(lam))``), which is
well conditioned for any positive ``lam``; ``K_g^{-1}`` is never formed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from stochbed.gp import (
    JITTER_START,
    LOG_BOUND,
    ConditioningError,
    Dataset,
    KernelParams,
    _HALF_LOG_2PI,
    _sq_diffs,
    as_points,
    gram,
    jittered_cholesky,
    kernel_matrix,
    sgpr_fit,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MIN_POINTS = 5
MU0_BOUND = 30.0
# lengthscales may not shrink below this fraction of each input's span
LENGTHSCALE_FLOOR = 0.05
# recovery from a first step into overflow: box half-width and rounds
STALL_STEP = 1.0
STALL_ROUNDS = 20


class PointPosterior(NamedTuple):
    """Marginal posteriors of ``f`` and ``g``; fields are floats or arrays."""

    mu_f: np.ndarray
    var_f: np.ndarray
    mu_g: np.ndarray
    var_g: np.ndarray

    def item(self, i: int) -> "PointPosterior":
        return PointPosterior(*(float(np.asarray(v).ravel()[i]) for v in self))


@dataclass(frozen=True)
class VhgprHyper:
    mu0: float
    kernel_f: KernelParams
    kernel_g: KernelParams

    @property
    def dim(self) -> int:
        return self.kernel_f.dim

    def to_vector(self) -> np.ndarray:
        """``[mu0, log tau_f, log l_f..., log tau_g, log l_g...]``."""
        return np.r_[self.mu0, self.kernel_f.to_log(), self.kernel_g.to_log()]

    @classmethod
    def from_vector(cls, v) -> "VhgprHyper":
        v = np.asarray(v, dtype=float)
        d = (v.size - 3) // 2
        return cls(float(v[0]), KernelParams.from_log(v[1 : 2 + d]), KernelParams.from_log(v[2 + d :]))


@dataclass(frozen=True)
class VariationalState:
    lam: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray

    @property
    def Z(self) -> np.ndarray:
        return np.exp(self.mu - 0.5 * np.diag(self.Sigma))


# ---------------------------------------------------------------------------
# Variational moments and the bound
# ---------------------------------------------------------------------------


def _b_factor(Kg: np.ndarray, lam: np.ndarray):
    w = np.sqrt(lam)
    B = np.eye(lam.size) + w[:, None] * Kg * w[None, :]
    LB, _ = jittered_cholesky(B, 1.0, start=0.0)
    return w, LB


def variational_moments(lam, Kg, mu0: float):
    """Mean and covariance of ``q(g)`` implied by ``lam``.

    ``Sigma = K_g - K_g W B^{-1} W K_g``, algebraically equal to
    ``(K_g^{-1} + Lambda)^{-1}``.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("Lambda entries must be positive")
    Kg = np.asarray(Kg, dtype=float)
    w, LB = _b_factor(Kg, lam)
    WK = w[:, None] * Kg
    V = solve_triangular(LB, WK, lower=True)
    Sigma = Kg - V.T @ V
    Sigma = 0.5 * (Sigma + Sigma.T)
    mu = Kg @ (lam - 0.5) + mu0
    return mu, Sigma


def _unpack(theta, d):
    mu0 = theta[0]
    kf = np.exp(theta[1 : 2 + d])
    kg = np.exp(theta[2 + d :])
    return mu0, kf[0] ** 2, kf[1:], kg[0] ** 2, kg[1:]


def _kernel_grads(G, E, tau2, ls, sqd):
    """Chain ``dF/dK`` to ``(log tau, log l_j)`` for a jittered RBF gram."""
    out = np.empty(1 + ls.size)
    K = tau2 * E
    out[0] = 2.0 * ((G * K).sum() + JITTER_START * tau2 * np.trace(G))
    for j in range(ls.size):
        out[1 + j] = (G * K * sqd[j]).sum() / ls[j] ** 2
    return out


def _elbo_core(y, s, theta, sqd, need_grad=True):
    n = y.size
    d = sqd.shape[0]
    lam = np.exp(s)
    mu0, tf2, lf, tg2, lg = _unpack(theta, d)
    Ef = np.exp(-0.5 * np.tensordot(1.0 / lf**2, sqd, axes=1))
    Eg = np.exp(-0.5 * np.tensordot(1.0 / lg**2, sqd, axes=1))
    eye = np.eye(n)
    Kf = tf2 * Ef + JITTER_START * tf2 * eye
    Kg = tg2 * Eg + JITTER_START * tg2 * eye

    w, LB = _b_factor(Kg, lam)
    Binv = cho_solve((LB, True), eye)
    WBW = w[:, None] * Binv * w[None, :]  # (K_g + Lambda^{-1})^{-1}
    KWBW = Kg @ WBW
    Sigma = Kg - KWBW @ Kg
    v = lam - 0.5
    Kv = Kg @ v
    mu = Kv + mu0
    sig = np.diag(Sigma).copy()
    with np.errstate(over="ignore"):
        r = np.exp(mu - 0.5 * sig)

    C = Kf + np.diag(r)
    LC, _ = jittered_cholesky(C, tf2, start=0.0)
    alpha = cho_solve((LC, True), y)
    log_lik = -0.5 * y @ alpha - np.log(np.diag(LC)).sum() - n * _HALF_LOG_2PI
    kl = 0.5 * (np.trace(Binv) + v @ Kv - n + 2.0 * np.log(np.diag(LB)).sum())
    value = log_lik - 0.25 * sig.sum() - kl
    cache = dict(LB=LB, w=w, LC=LC, alpha=alpha, mu=mu, Sigma=Sigma, lam=lam)
    if not need_grad:
        return value, None, None, cache

    Cinv = cho_solve((LC, True), eye)
    GC = 0.5 * (np.outer(alpha, alpha) - Cinv)
    a = np.diag(GC) * r  # dF/dmu
    b = -0.5 * a - 0.25  # dF/d diag(Sigma)
    P = eye - KWBW  # (I + K_g Lambda)^{-1}
    PS = P @ Sigma
    g_lam = Kg @ a - (Sigma * Sigma) @ b - 0.5 * sig + 0.5 * np.diag(PS) - Kv
    g_s = lam * g_lam

    GK = np.outer(a, v) + P.T @ (b[:, None] * P) - 0.5 * (WBW - P.T @ WBW + np.outer(v, v))
    g_theta = np.empty_like(theta)
    g_theta[0] = a.sum()
    g_theta[1 : 2 + d] = _kernel_grads(GC, Ef, tf2, lf, sqd)
    g_theta[2 + d :] = _kernel_grads(GK, Eg, tg2, lg, sqd)
    return value, g_s, g_theta, cache


def elbo(data: Dataset, lam, h: VhgprHyper, return_grad: bool = True):
    """Marginalised variational bound at ``lam`` and hyperparameters ``h``.

    Returns ``(value, grad_log_lam, grad_hyper)`` where ``grad_hyper`` is
    ordered as :meth:`VhgprHyper.to_vector`; with ``return_grad=False`` only
    the value.
    """
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (data.n,) or np.any(lam <= 0):
        raise ValueError("lam must be a positive vector with one entry per observation")
    if h.dim != data.dim:
        raise ValueError("hyperparameter dimension does not match the dataset")
    value, gs, gt, _ = _elbo_core(data.y, np.log(lam), h.to_vector(), _sq_diffs(data.X), return_grad)
    return (value, gs, gt) if return_grad else value


def gaussian_kl(mu, Sigma, m0, K) -> float:
    """``KL(N(mu, Sigma) || N(m0, K))`` by the textbook formula."""
    n = len(mu)
    LK, _ = jittered_cholesky(np.asarray(K, float), 1.0, start=0.0)
    LS = np.linalg.cholesky(Sigma)
    M = solve_triangular(LK, LS, lower=True)
    dm = solve_triangular(LK, np.asarray(mu) - m0, lower=True)
    return 0.5 * ((M * M).sum() + dm @ dm - n + 2 * np.log(np.diag(LK)).sum() - 2 * np.log(np.diag(LS)).sum())


def elbo_from_moments(data: Dataset, mu, Sigma, h: VhgprHyper) -> float:
    """The same bound written directly in terms of ``q(g) = N(mu, Sigma)``.

    Used to check that ``variational_moments`` sits at a stationary point.
    """
    Kf = gram(data.X, h.kernel_f)
    Kg = gram(data.X, h.kernel_g)
    sig = np.diag(Sigma)
    C = Kf + np.diag(np.exp(np.asarray(mu) - 0.5 * sig))
    LC = np.linalg.cholesky(C)
    a = solve_triangular(LC, data.y, lower=True)
    log_lik = -0.5 * a @ a - np.log(np.diag(LC)).sum() - data.n * _HALF_LOG_2PI
    return log_lik - 0.25 * sig.sum() - gaussian_kl(mu, Sigma, h.mu0, Kg)


# ---------------------------------------------------------------------------
# Trained model
# ---------------------------------------------------------------------------


@dataclass
class TrainedVhgpr:
    data: Dataset
    hyper: VhgprHyper
    lam: np.ndarray
    converged: bool = True
    elbo_value: float = np.nan
    trace: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        if self.lam.shape != (self.data.n,):
            raise ValueError("lam length must equal the number of observations")
        value, _, _, c = _elbo_core(self.data.y, np.log(self.lam), self.hyper.to_vector(), _sq_diffs(self.data.X), False)
        self._c = c
        if not np.isfinite(self.elbo_value):
            self.elbo_value = value

    @property
    def vstate(self) -> VariationalState:
        return VariationalState(self._c["lam"], self._c["mu"], self._c["Sigma"])

    def predict(self, X, with_var: bool = True) -> PointPosterior:
        X = as_points(X, self.data.dim)
        c = self._c
        kf, kg = self.hyper.kernel_f, self.hyper.kernel_g
        Kfs = kernel_matrix(X, self.data.X, kf)
        Kgs = kernel_matrix(X, self.data.X, kg)
        mu_f = Kfs @ c["alpha"]
        mu_g = Kgs @ (c["lam"] - 0.5) + self.hyper.mu0
        if not with_var:
            z = np.zeros_like(mu_f)
            return PointPosterior(mu_f, z, mu_g, z)
        vf = solve_triangular(c["LC"], Kfs.T, lower=True)
        vg = solve_triangular(c["LB"], c["w"][:, None] * Kgs.T, lower=True)
        var_f = np.maximum(kf.amplitude**2 - (vf * vf).sum(0), 0.0)
        var_g = np.maximum(kg.amplitude**2 - (vg * vg).sum(0), 0.0)
        return PointPosterior(mu_f, var_f, mu_g, var_g)

    def predict_cov(self, X):
        """Full posterior covariances of ``f`` and ``g`` over the rows of ``X``."""
        X = as_points(X, self.data.dim)
        c = self._c
        kf, kg = self.hyper.kernel_f, self.hyper.kernel_g
        Kfs = kernel_matrix(X, self.data.X, kf)
        Kgs = kernel_matrix(X, self.data.X, kg)
        vf = solve_triangular(c["LC"], Kfs.T, lower=True)
        vg = solve_triangular(c["LB"], c["w"][:, None] * Kgs.T, lower=True)
        cov_f = kernel_matrix(X, X, kf) - vf.T @ vf
        cov_g = kernel_matrix(X, X, kg) - vg.T @ vg
        return cov_f, cov_g

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "stochbed.vhgpr",
            "version": FORMAT_VERSION,
            "X": self.data.X.tolist(),
            "y": self.data.y.tolist(),
            "hyper": self.hyper.to_vector().tolist(),
            "lam": self.lam.tolist(),
            "converged": bool(self.converged),
            "elbo": float(self.elbo_value),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedVhgpr":
        if d.get("format") != "stochbed.vhgpr":
            raise ValueError("not a serialised VHGPR model")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {d.get('version')}")
        return cls(
            Dataset(np.array(d["X"]), np.array(d["y"])),
            VhgprHyper.from_vector(d["hyper"]),
            np.array(d["lam"]),
            converged=d["converged"],
            elbo_value=d["elbo"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TrainedVhgpr":
        return cls.from_dict(json.loads(Path(path).read_text()))


def vhgpr_predict(m: TrainedVhgpr, x) -> PointPosterior:
    """Posterior of ``f`` and ``g`` at a single input, as floats."""
    return m.predict(as_points(x, m.data.dim)).item(0)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def default_vhgpr_init(data: Dataset) -> VhgprHyper:
    """Data-driven starting hyperparameters.

    Lengthscales are a quarter of each input range and the ``f`` amplitude
    the response std. ``mu0`` is the log residual variance of a quick
    homoscedastic fit and the ``g`` amplitude starts at one.
    """
    span = np.ptp(data.X, axis=0)
    span = np.where(span > 0, span, 1.0)
    sd = float(np.std(data.y)) or 1.0
    try:
        quick = sgpr_fit(data, restarts=0, maxiter=100)
        resid = data.y - quick.predict(data.X, with_var=False).mu_f
        var = float(np.var(resid))
        mu0 = np.log(max(var, quick.hyper.noise_std**2, 1e-12))
    except ConditioningError:
        mu0 = np.log(0.01 * sd**2)
    ls = tuple(0.25 * span)
    return VhgprHyper(float(mu0), KernelParams(sd, ls), KernelParams(1.0, ls))


def _hyper_bounds(data: Dataset, lengthscale_floor: float):
    """Box for ``VhgprHyper.to_vector`` with span-relative lengthscale floors."""
    d = data.dim
    lo = np.r_[-MU0_BOUND, np.full(2 * d + 2, -LOG_BOUND)]
    hi = np.r_[MU0_BOUND, np.full(2 * d + 2, LOG_BOUND)]
    if lengthscale_floor > 0:
        span = np.ptp(data.X, axis=0)
        floor = np.log(np.maximum(lengthscale_floor * span, np.exp(-LOG_BOUND)))
        floor = np.minimum(floor, LOG_BOUND - 1.0)
        lo[2 : 2 + d] = floor
        lo[3 + d :] = floor
    return lo, hi


def _stalled(res, z0, gtol) -> bool:
    """True when L-BFGS-B stopped where it started despite a clear gradient."""
    return bool(np.array_equal(res.x, z0) and np.isfinite(res.fun) and np.max(np.abs(res.jac)) > max(gtol, 1e-8))


def vhgpr_fit(
    data: Dataset,
    init: VhgprHyper | None = None,
    lam_init=None,
    optimize_hyper: bool = True,
    maxiter: int = 500,
    ftol: float = 1e-6,
    gtol: float = 1e-5,
    lengthscale_floor: float = LENGTHSCALE_FLOOR,
) -> TrainedVhgpr:
    """Maximise the bound over ``log lam`` and the hyperparameters.

    ``lam`` starts at 1/2 (so ``mu = mu0``) unless ``lam_init`` is given;
    shorter warm-start vectors are padded with 1/2. L-BFGS-B stops once the
    relative change of the bound drops below ``ftol`` or after ``maxiter``
    iterations; in the latter case the best point is returned with
    ``converged=False``. With ``optimize_hyper=False`` only ``lam`` moves;
    ``init`` is then required and any nonempty dataset is accepted.

    Lengthscales are kept above ``lengthscale_floor`` times the span of
    the inputs in each dimension, so the noise process cannot collapse
    onto isolated observations.
    """
    n = data.n
    if optimize_hyper and n < MIN_POINTS:
        raise ValueError(f"vhgpr_fit needs at least {MIN_POINTS} observations, got {n}")
    if n < 1:
        raise ValueError("vhgpr_fit needs data")
    if init is None:
        if not optimize_hyper:
            raise ValueError("fixed-hyperparameter fits need explicit hyperparameters")
        init = default_vhgpr_init(data)
    if init.dim != data.dim:
        raise ValueError("hyperparameter dimension does not match the dataset")
    lam0 = np.full(n, 0.5)
    if lam_init is not None:
        lam_init = np.asarray(lam_init, dtype=float)[:n]
        lam0[: lam_init.size] = lam_init
    s0 = np.clip(np.log(lam0), -LOG_BOUND, LOG_BOUND)
    th0 = init.to_vector()
    lo, hi = _hyper_bounds(data, lengthscale_floor)
    th0 = np.clip(th0, lo, hi)
    sqd = _sq_diffs(data.X)
    y = data.y

    if optimize_hyper:
        z0 = np.r_[s0, th0]
        bounds = [(-LOG_BOUND, LOG_BOUND)] * n + list(zip(lo, hi))

        def split(z):
            return z[:n], z[n:]
    else:
        z0 = s0
        bounds = [(-LOG_BOUND, LOG_BOUND)] * n

        def split(z):
            return z, th0

    evaluated: dict[bytes, float] = {}

    def negative(z):
        s, th = split(z)
        try:
            val, gs, gt, _ = _elbo_core(y, s, th, sqd)
        except (ConditioningError, np.linalg.LinAlgError, ValueError):
            return np.inf, np.zeros_like(z)
        if not np.isfinite(val):
            return np.inf, np.zeros_like(z)
        evaluated[z.tobytes()] = val
        grad = np.r_[gs, gt] if optimize_hyper else gs
        return -val, -grad

    trace: list[float] = []

    def callback(zk):
        val = evaluated.get(zk.tobytes())
        if val is not None:
            trace.append(val)
        evaluated.clear()

    def run(start, box):
        return minimize(
            negative,
            start,
            jac=True,
            method="L-BFGS-B",
            bounds=box,
            callback=callback,
            options={"maxiter": maxiter, "ftol": ftol, "gtol": gtol},
        )

    res = run(z0, bounds)
    if _stalled(res, z0, gtol):
        # The first trial step overshot into a region where the bound
        # overflows and the line search gave up at the start. Walk out
        # with step-limited boxes, then finish under the full bounds.
        log.info("VHGPR optimisation stalled at its start; retrying with step-limited boxes")
        for _ in range(STALL_ROUNDS):
            box = [(max(lb, z - STALL_STEP), min(ub, z + STALL_STEP)) for (lb, ub), z in zip(bounds, res.x)]
            start = res.x
            res = run(start, box)
            if np.max(np.abs(res.x - start)) < 0.5 * STALL_STEP:
                break
        res = run(res.x, bounds)
    if not np.isfinite(res.fun):
        raise ConditioningError("bound is not finite at the optimiser's best point")
    if not res.success:
        log.info("VHGPR optimisation stopped without convergence: %s", res.message)
    s, th = split(res.x)
    return TrainedVhgpr(
        data,
        VhgprHyper.from_vector(th),
        np.exp(s),
        converged=bool(res.success),
        elbo_value=-float(res.fun),
        trace=trace,
    )
