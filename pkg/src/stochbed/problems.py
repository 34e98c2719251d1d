"""Problem definitions: input density, stochastic response and threshold."""

from __future__ import annotations

import hashlib
import json

import numpy as np
from scipy.stats import norm

from stochbed.gp import as_points

SQRT2 = np.sqrt(2.0)


class Problem:
    """Base class for an exceedance-probability problem.

    Subclasses provide the input density (``pdf``, ``sample``,
    ``map_to_input``, ``integration_rule``), the domain box ``bounds`` of
    shape ``(d, 2)`` and a vectorised stochastic response ``respond``.
    """

    name = "problem"
    dim = 1
    threshold = 0.0
    default_design = "density"
    bounds: np.ndarray

    def pdf(self, X) -> np.ndarray:
        raise NotImplementedError

    def sample(self, n: int, rng) -> np.ndarray:
        raise NotImplementedError

    def map_to_input(self, U) -> np.ndarray:
        raise NotImplementedError

    def integration_rule(self, n_per_dim: int | None = None):
        raise NotImplementedError

    def map_to_box(self, U) -> np.ndarray:
        """Affine map of unit points onto the domain box (uniform design)."""
        U = self._check_unit(U)
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return lo + (hi - lo) * U

    def design_points(self, U, design: str | None = None) -> np.ndarray:
        """Map a unit-cube design onto inputs.

        ``"box"`` spreads the points uniformly over the domain box;
        ``"density"`` pushes them through the inverse CDF of the input
        density instead. ``None`` uses the problem's ``default_design``.
        """
        design = self.default_design if design is None else design
        if design == "box":
            return self.map_to_box(U)
        if design == "density":
            return self.map_to_input(U)
        raise ValueError(f"unknown design {design!r}; valid: box, density")

    def respond(self, X, rng) -> np.ndarray:
        """One response draw per row of ``X``."""
        raise NotImplementedError

    def itr_sampler(self, x, seed) -> float:
        """A single seeded draw of the response at ``x``."""
        X = as_points(x, self.dim)[:1]
        return float(self.respond(X, np.random.default_rng(seed))[0])

    def describe(self) -> dict:
        return {"name": self.name, "dim": self.dim, "threshold": self.threshold}

    def digest(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def _check_unit(self, U) -> np.ndarray:
        U = as_points(U, self.dim)
        if np.any(U < 0) or np.any(U >= 1):
            raise ValueError("unit points must lie in [0, 1)^d")
        return U


class GaussianInputProblem(Problem):
    """Independent Gaussian inputs with per-dimension mean and std."""

    def __init__(self, mean, std):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.std = np.atleast_1d(np.asarray(std, dtype=float))
        self.dim = self.mean.size
        self.bounds = np.column_stack([self.mean - 5 * self.std, self.mean + 5 * self.std])

    def pdf(self, X):
        X = as_points(X, self.dim)
        return np.prod(norm.pdf(X, self.mean, self.std), axis=1)

    def sample(self, n, rng):
        rng = np.random.default_rng(rng)
        return self.mean + self.std * rng.standard_normal((n, self.dim))

    def map_to_input(self, U):
        U = self._check_unit(U)
        X = norm.ppf(U, self.mean, self.std)
        if not np.all(np.isfinite(X)):
            raise ValueError("unit point maps to an infinite input; use the open interval (0, 1)")
        return X

    def integration_rule(self, n_per_dim=None):
        """Midpoint tensor grid over mean +/- 8 std, density weights summing to one."""
        n = n_per_dim or (400 if self.dim == 1 else 200)
        axes = []
        for m, s in zip(self.mean, self.std):
            edges = np.linspace(m - 8 * s, m + 8 * s, n + 1)
            axes.append(0.5 * (edges[1:] + edges[:-1]))
        grids = np.meshgrid(*axes, indexing="ij")
        nodes = np.column_stack([g.ravel() for g in grids])
        w = self.pdf(nodes)
        return nodes, w / w.sum()

    def describe(self):
        return super().describe() | {"mean": self.mean.tolist(), "std": self.std.tolist()}


class Synthetic1D(GaussianInputProblem):
    """``S(x) = (x - 5)^2 + (0.1 + 0.1 x^2) z`` with ``x ~ N(5, 1)``, threshold 9."""

    name = "synthetic1d"
    # uniform coverage of the box reveals the growth of f and the noise
    # towards the exceedance region, which a density design barely samples
    default_design = "box"

    def __init__(self, threshold: float = 9.0):
        super().__init__([5.0], [1.0])
        self.threshold = float(threshold)

    @staticmethod
    def mean_fn(X):
        x = as_points(X, 1)[:, 0]
        return (x - 5.0) ** 2

    @staticmethod
    def noise_std(X):
        x = as_points(X, 1)[:, 0]
        return 0.1 + 0.1 * x**2

    def respond(self, X, rng):
        X = as_points(X, 1)
        rng = np.random.default_rng(rng)
        return self.mean_fn(X) + self.noise_std(X) * rng.standard_normal(X.shape[0])


def fourbranch_branches(x1, x2) -> np.ndarray:
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    quad = 8.0 + 0.1 * (x1 - x2) ** 2
    s = (x1 + x2) / SQRT2
    c = 6.0 / SQRT2 + 5.0
    return np.stack([quad + s, quad - s, (x1 - x2) + c, (x2 - x1) + c])


def fourbranch_mean(x1, x2):
    """Negative minimum of the four branches."""
    out = -fourbranch_branches(x1, x2).min(axis=0)
    return float(out) if out.ndim == 0 else out


class FourBranch2D(GaussianInputProblem):
    """Four-branch mean with noise std ``max(|f| / 6, floor)``, ``x ~ N(0, I)``.

    The default threshold is -5, the level at which the exceedance region
    is the classical four-branch failure domain.
    """

    name = "fourbranch2d"

    def __init__(self, threshold: float = -5.0, noise_floor: float = 0.05):
        super().__init__([0.0, 0.0], [1.0, 1.0])
        self.threshold = float(threshold)
        self.noise_floor = float(noise_floor)

    @staticmethod
    def mean_fn(X):
        X = as_points(X, 2)
        return fourbranch_mean(X[:, 0], X[:, 1])

    def noise_std(self, X):
        return np.maximum(np.abs(self.mean_fn(X)) / 6.0, self.noise_floor)

    def respond(self, X, rng):
        X = as_points(X, 2)
        rng = np.random.default_rng(rng)
        return self.mean_fn(X) + self.noise_std(X) * rng.standard_normal(X.shape[0])

    def describe(self):
        return super().describe() | {"noise_floor": self.noise_floor}
