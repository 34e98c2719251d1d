"""Exceedance probability under the surrogate and the weighted-U acquisition.

For fixed latent values ``(f, g)`` the response is ``N(f, exp(g))`` so the
pointwise exceedance probability is ``Phi((f - delta) / exp(g / 2))``.
Its spread over the posterior of ``(f, g)`` is approximated by a four-point
spherical cubature; the acquisition weights that spread by the input density.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from stochbed.gp import as_points
from stochbed.vhgpr import PointPosterior

SQRT2 = np.sqrt(2.0)
CUBATURE_WEIGHTS = np.full(4, 0.25)


def tail_prob(f_val, g_val, delta):
    """``P(f + exp(g/2) z > delta)`` for a standard normal ``z``."""
    f_val = np.asarray(f_val, dtype=float)
    g_val = np.asarray(g_val, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        z = (f_val - delta) * np.exp(-0.5 * g_val)
    z = np.where(np.isnan(z) & (f_val == delta), 0.0, z)
    out = ndtr(z)
    return float(out) if out.ndim == 0 else out


def cubature_points(p: PointPosterior):
    """Four equally weighted points at ``mean +/- sqrt(2 var)`` along each axis.

    Returns ``(f_points, g_points, weights)`` with the point index first.
    """
    mf, vf, mg, vg = (np.asarray(v, dtype=float) for v in p)
    sf = np.sqrt(2.0 * np.maximum(vf, 0.0))
    sg = np.sqrt(2.0 * np.maximum(vg, 0.0))
    f_pts = np.stack([mf + sf, mf, mf - sf, mf])
    g_pts = np.stack([mg, mg + sg, mg, mg - sg])
    return f_pts, g_pts, CUBATURE_WEIGHTS


def cubature_std(p: PointPosterior, delta: float):
    """Cubature mean and standard deviation of the exceedance probability."""
    f_pts, g_pts, w = cubature_points(p)
    vals = tail_prob(f_pts, g_pts, delta)
    mean = np.tensordot(w, vals, axes=1)
    var = np.tensordot(w, (vals - mean) ** 2, axes=1)
    std = np.sqrt(np.maximum(var, 0.0))
    if np.ndim(mean) == 0:
        return float(mean), float(std)
    return mean, std


def gauss_hermite_std(p: PointPosterior, delta: float, order: int = 40):
    """Tensor Gauss-Hermite version of :func:`cubature_std`, for reference.

    An even ``order`` keeps nodes off the mean, which makes the
    deterministic-noise limit of a centred posterior exactly Bernoulli(1/2).
    """
    z, wz = np.polynomial.hermite_e.hermegauss(order)
    wz = wz / wz.sum()
    mf, vf, mg, vg = (np.asarray(v, dtype=float)[..., None, None] for v in p)
    f = mf + np.sqrt(vf) * z[:, None]
    g = mg + np.sqrt(vg) * z[None, :]
    vals = tail_prob(f, g, delta)
    W = np.outer(wz, wz)
    mean = (vals * W).sum((-2, -1))
    var = ((vals - mean[..., None, None]) ** 2 * W).sum((-2, -1))
    std = np.sqrt(np.maximum(var, 0.0))
    if np.ndim(mean) == 0:
        return float(mean), float(std)
    return mean, std


def acquisition_value(x, model, prob):
    """Cubature std of the exceedance probability times the input density."""
    X = as_points(x, prob.dim)
    _, std = cubature_std(model.predict(X), prob.threshold)
    val = np.atleast_1d(std) * prob.pdf(X)
    return float(val[0]) if np.ndim(x) <= 1 and X.shape[0] == 1 else val


@dataclass
class AcquisitionResult:
    x_star: np.ndarray
    value: float
    index: int
    candidates: np.ndarray | None = None
    values: np.ndarray | None = None


def candidate_pool(prob, n_candidates: int, rng: np.random.Generator) -> np.ndarray:
    """``n_candidates`` draws from the input density plus a Latin hypercube
    of ``n_candidates // 10`` points over the problem's domain box."""
    from stochbed.design import latin_hypercube

    if n_candidates < 1:
        raise ValueError("candidate pool must not be empty")
    pool = [prob.sample(n_candidates, rng)]
    n_lh = n_candidates // 10
    if n_lh:
        lo, hi = prob.bounds[:, 0], prob.bounds[:, 1]
        pool.append(lo + (hi - lo) * latin_hypercube(n_lh, prob.dim, rng))
    return np.vstack(pool)


def select_next(model, prob, n_candidates: int = 10_000, rng=None, keep_diagnostics: bool = False) -> AcquisitionResult:
    """Maximise the acquisition over a reproducible candidate pool.

    Ties go to the lowest candidate index.
    """
    rng = np.random.default_rng(rng)
    pool = candidate_pool(prob, n_candidates, rng)
    vals = np.atleast_1d(acquisition_value(pool, model, prob))
    vals = np.where(np.isfinite(vals), vals, -np.inf)
    i = int(np.argmax(vals))
    return AcquisitionResult(
        pool[i].copy(),
        float(vals[i]),
        i,
        pool if keep_diagnostics else None,
        vals if keep_diagnostics else None,
    )


def variance_upper_bound(model, prob, n_quad: int | None = None, std_method: str = "cubature") -> float:
    """Half the density-weighted integral of the exceedance-probability std.

    Bounds the posterior variance of the integrated exceedance probability.
    """
    if prob.dim > 2:
        raise ValueError("deterministic quadrature is only provided for d <= 2")
    nodes, weights = prob.integration_rule(n_quad)
    post = model.predict(nodes)
    if std_method == "cubature":
        _, std = cubature_std(post, prob.threshold)
    elif std_method == "gauss-hermite":
        _, std = gauss_hermite_std(post, prob.threshold)
    else:
        raise ValueError(f"unknown std_method {std_method!r}")
    return 0.5 * float(np.dot(weights, std))
