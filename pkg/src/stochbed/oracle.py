"""Reference values: Monte Carlo exceedance probabilities, brute-force
evidence for small heteroscedastic GP datasets, and the long-record ship
solution."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp, ndtr

from stochbed.gp import Dataset, kernel_matrix
from stochbed.vhgpr import VhgprHyper

MAX_EVIDENCE_POINTS = 4


@dataclass(frozen=True)
class McEstimate:
    """Bernoulli Monte Carlo estimate with its binomial standard error."""

    value: float
    std_error: float
    n_samples: int
    seed: int | None

    @classmethod
    def from_counts(cls, hits: int, n: int, seed=None) -> "McEstimate":
        p = hits / n
        return cls(p, float(np.sqrt(p * (1 - p) / n)), int(n), seed)

    def band(self, rel: float = 0.05) -> tuple[float, float]:
        return self.value * (1 - rel), self.value * (1 + rel)


def exact_mc(prob, n: int = 1_000_000, seed: int = 0, chunk: int = 200_000) -> McEstimate:
    """Draw ``x ~ p_X`` and one response per input; count exceedances."""
    if n < 1000:
        raise ValueError("exact_mc needs n >= 1000")
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        X = prob.sample(m, rng)
        hits += int(np.count_nonzero(prob.respond(X, rng) > prob.threshold))
        done += m
    return McEstimate.from_counts(hits, n, seed)


def quadrature_pe(prob, n_per_dim: int | None = None) -> float:
    """Exceedance probability of a synthetic problem by grid quadrature of
    ``Phi((f - delta) / sigma)`` against the input density."""
    nodes, w = prob.integration_rule(n_per_dim)
    z = (prob.mean_fn(nodes) - prob.threshold) / prob.noise_std(nodes)
    return float(np.dot(w, ndtr(z)))


def _cache_dir() -> Path:
    return Path(os.environ.get("STOCHBED_CACHE_DIR", Path.home() / ".cache" / "stochbed"))


def cached_exact_mc(prob, n: int = 1_000_000, seed: int = 0, cache_dir=None) -> McEstimate:
    """:func:`exact_mc` memoised on disk by ``(problem digest, n, seed)``."""
    root = Path(cache_dir) if cache_dir is not None else _cache_dir()
    path = root / f"exact_mc_{prob.digest()}_{n}_{seed}.json"
    if path.exists():
        return McEstimate(**json.loads(path.read_text()))
    est = exact_mc(prob, n, seed)
    root.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(asdict(est)))
    tmp.replace(path)
    return est


def brute_force_log_evidence(data: Dataset, h: VhgprHyper, n_mc: int = 100_000, seed: int = 0, chunk: int = 20_000):
    """Monte Carlo log evidence of the heteroscedastic GP.

    ``g`` is drawn from its prior; ``f`` is integrated analytically, so each
    draw contributes ``N(y | 0, K_f + diag(exp(g)))``.

    Returns
    -------
    (float, float)
        Log of the mean likelihood and its delta-method standard error.
    """
    if data.n > MAX_EVIDENCE_POINTS:
        raise ValueError(f"brute-force evidence is limited to n <= {MAX_EVIDENCE_POINTS} points")
    rng = np.random.default_rng(seed)
    Kf = kernel_matrix(data.X, data.X, h.kernel_f)
    Kg = kernel_matrix(data.X, data.X, h.kernel_g)
    # eigen-decomposition is robust for the (possibly singular) prior of g
    evals, evecs = np.linalg.eigh(Kg)
    root = evecs * np.sqrt(np.clip(evals, 0, None))
    y = data.y
    n = data.n
    logs = []
    for start in range(0, n_mc, chunk):
        m = min(chunk, n_mc - start)
        G = h.mu0 + rng.standard_normal((m, n)) @ root.T
        C = Kf[None] + np.exp(G)[:, :, None] * np.eye(n)[None]
        L = np.linalg.cholesky(C)
        z = np.linalg.solve(L, np.broadcast_to(y, (m, n))[..., None])[..., 0]
        logdet = 2 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(1)
        logs.append(-0.5 * (z * z).sum(1) - 0.5 * logdet - 0.5 * n * np.log(2 * np.pi))
    ll = np.concatenate(logs)
    est = float(logsumexp(ll) - np.log(n_mc))
    w = np.exp(ll - est)
    se = float(np.std(w, ddof=1) / np.sqrt(n_mc))
    return est, se


def sgpr_log_evidence_direct(data: Dataset, kernel_f, noise_var: float) -> float:
    """Closed-form homoscedastic evidence, used to cross-check the above."""
    C = kernel_matrix(data.X, data.X, kernel_f) + noise_var * np.eye(data.n)
    c = cho_factor(C, lower=True)
    a = cho_solve(c, data.y)
    return float(-0.5 * data.y @ a - np.log(np.diag(c[0])).sum() - 0.5 * data.n * np.log(2 * np.pi))


def ship_exact(prob, delta: float | None = None) -> McEstimate:
    """Per-group exceedance fraction from one continuous run over the record."""
    from stochbed.ship import group_maxima

    delta = prob.threshold if delta is None else float(delta)
    resp, _ = group_maxima(prob)
    return McEstimate.from_counts(int(np.count_nonzero(resp > delta)), resp.size, prob.seed)
