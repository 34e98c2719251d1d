"""Nonlinear ship roll in irregular waves as a stochastic response.

The roll angle obeys

    xi'' + a1 xi' + a2 xi'^3 + (b1 + e1 cos(phi) eta(t)) xi + b2 xi^3 = e2 sin(phi) eta(t)

driven by the surface elevation ``eta``. The response at a group parameter
``(L, A)`` is the maximum roll through a randomly chosen matching group of a
long record, integrated from rest a few groups upstream, so the ship meets
the group with a realistic, random initial state.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numba
import numpy as np

from stochbed.gp import as_points
from stochbed.problems import Problem
from stochbed.waves import (
    GroupDensity,
    SpectrumConfig,
    WaveField,
    catalog_array,
    extract_groups,
    group_density,
    load_catalog,
    save_catalog,
    synth_wave_field,
    window_indices,
)

N_NEIGHBOURS = 10
NEIGHBOUR_TOL = 1.0
UPSTREAM_GROUPS = 5
CAPSIZE_ANGLE = np.pi / 2


class RollBlowUp(FloatingPointError):
    """The roll integration produced a non-finite state."""

    def __init__(self, time: float):
        super().__init__(f"roll integration blew up at t = {time:.3f} s")
        self.time = time


@dataclass(frozen=True)
class RollParams:
    alpha1: float = 0.19
    alpha2: float = 0.06
    beta1: float = 0.04
    beta2: float = -0.1
    eps1: float = 0.020
    eps2: float = 0.004
    phi: float = np.pi / 6

    def __post_init__(self):
        if not all(np.isfinite(v) for v in asdict(self).values()):
            raise ValueError("roll parameters must be finite")

    def coefficients(self) -> np.ndarray:
        return np.array(
            [
                self.alpha1,
                self.alpha2,
                self.beta1,
                self.beta2,
                self.eps1 * np.cos(self.phi),
                self.eps2 * np.sin(self.phi),
            ]
        )


@numba.njit(cache=True)
def _rhs(x, v, e, c):
    acc = -c[0] * v - c[1] * v * v * v - (c[2] + c[4] * e) * x - c[3] * x * x * x + c[5] * e
    return v, acc


@numba.njit(cache=True)
def _rk4(eta, x0, v0, c, nsub):
    """RK4 with ``nsub`` steps per sample interval, eta linearly interpolated.

    Time is measured in sample intervals; the caller rescales the step.
    Returns ``(xi, bad)`` with ``bad`` the first non-finite sample or -1.
    """
    n = eta.size
    out = np.empty(n)
    out[0] = x0
    x = x0
    v = v0
    h = c[6] / nsub
    for i in range(n - 1):
        e0 = eta[i]
        de = eta[i + 1] - e0
        for s in range(nsub):
            ea = e0 + de * s / nsub
            em = e0 + de * (s + 0.5) / nsub
            eb = e0 + de * (s + 1.0) / nsub
            k1x, k1v = _rhs(x, v, ea, c)
            k2x, k2v = _rhs(x + 0.5 * h * k1x, v + 0.5 * h * k1v, em, c)
            k3x, k3v = _rhs(x + 0.5 * h * k2x, v + 0.5 * h * k2v, em, c)
            k4x, k4v = _rhs(x + h * k3x, v + h * k3v, eb, c)
            x += h * (k1x + 2 * k2x + 2 * k3x + k4x) / 6
            v += h * (k1v + 2 * k2v + 2 * k3v + k4v) / 6
        if not (np.isfinite(x) and np.isfinite(v)) or abs(x) > 1e6:
            return out, i + 1
        out[i + 1] = x
    return out, -1


@numba.njit(cache=True)
def _window_maxima(eta, starts, c, nsub, cap):
    """Per-window maximum of ``xi`` and ``|xi|`` for a continuous run.

    The run starts from rest; a capsize (``|xi| > cap``) saturates the
    window's maxima at ``cap`` with the capsize sign and restarts the ship
    from rest at the next window.
    """
    nw = starts.size
    mx = np.full(nw, -np.inf)
    mabs = np.zeros(nw)
    capsized = np.zeros(nw, dtype=np.bool_)
    h = c[6] / nsub
    n = eta.size
    w = 0
    x = 0.0
    v = 0.0
    i = starts[0]
    while i < n:
        while w + 1 < nw and i >= starts[w + 1]:
            w += 1
        if x > mx[w]:
            mx[w] = x
        if abs(x) > mabs[w]:
            mabs[w] = abs(x)
        if i == n - 1:
            break
        e0 = eta[i]
        de = eta[i + 1] - e0
        for s in range(nsub):
            ea = e0 + de * s / nsub
            em = e0 + de * (s + 0.5) / nsub
            eb = e0 + de * (s + 1.0) / nsub
            k1x, k1v = _rhs(x, v, ea, c)
            k2x, k2v = _rhs(x + 0.5 * h * k1x, v + 0.5 * h * k1v, em, c)
            k3x, k3v = _rhs(x + 0.5 * h * k2x, v + 0.5 * h * k2v, em, c)
            k4x, k4v = _rhs(x + h * k3x, v + h * k3v, eb, c)
            x += h * (k1x + 2 * k2x + 2 * k3x + k4x) / 6
            v += h * (k1v + 2 * k2v + 2 * k3v + k4v) / 6
        i += 1
        if not (abs(x) <= cap):
            # capsize (or non-finite state): saturate and restart next window
            capsized[w] = True
            if x > 0:
                mx[w] = cap
            mabs[w] = cap
            if w + 1 >= nw:
                break
            w += 1
            i = starts[w]
            x = 0.0
            v = 0.0
    return mx, mabs, capsized


def roll_simulate(eta, ic=(0.0, 0.0), params: RollParams | None = None, dt: float = 0.125, eta_dt: float | None = None) -> np.ndarray:
    """Integrate the roll equation through ``eta`` with classical RK4.

    Parameters
    ----------
    eta : array_like
        Surface elevation sampled every ``eta_dt`` seconds.
    ic : (float, float)
        Initial roll angle and rate.
    params : RollParams, optional
    dt : float
        Integration step [s]; ``eta_dt`` must be an integer multiple of it.
    eta_dt : float, optional
        Sample interval of ``eta``; defaults to ``dt``.

    Returns
    -------
    numpy.ndarray
        Roll angle at the sample times of ``eta``.

    Raises
    ------
    RollBlowUp
        If the state becomes non-finite; carries the time of failure.
    """
    params = params or RollParams()
    eta_dt = dt if eta_dt is None else eta_dt
    nsub = int(round(eta_dt / dt))
    if nsub < 1 or abs(nsub * dt - eta_dt) > 1e-9 * eta_dt:
        raise ValueError("eta_dt must be an integer multiple of dt")
    eta = np.ascontiguousarray(eta, dtype=float)
    if eta.size == 0:
        return eta.copy()
    c = np.append(params.coefficients(), eta_dt)
    xi, bad = _rk4(eta, float(ic[0]), float(ic[1]), c, nsub)
    if bad >= 0:
        raise RollBlowUp(bad * eta_dt)
    return xi


def roll_step_count(eta_dt: float, max_step: float) -> int:
    """Smallest number of RK4 substeps keeping the step below ``max_step``."""
    return max(1, int(np.ceil(eta_dt / max_step - 1e-12)))


class ShipRoll(Problem):
    """Group-parameter input ``(L, A)``; response is the maximum roll.

    Parameters
    ----------
    field : WaveField
    catalog : list of WaveGroup
        Groups extracted from ``field``.
    threshold : float
        Roll exceedance level [rad].
    params : RollParams, optional
    max_step : float
        Upper bound on the RK4 step [s].
    absolute : bool
        Use ``max |xi|`` instead of ``max xi`` as the response.
    capsize : float
        Roll angle treated as capsize: the response saturates there and
        the ship restarts from rest at the next group.
    """

    name = "shiproll"
    dim = 2

    def __init__(self, field: WaveField, catalog, threshold: float = 0.3, params=None, max_step: float = 0.125, absolute: bool = False, capsize: float = CAPSIZE_ANGLE, spectrum: SpectrumConfig | None = None, seed=None):
        if len(catalog) == 0:
            raise ValueError("ship problem needs a nonempty group catalog")
        self.field = field
        self.catalog = list(catalog)
        self.points = catalog_array(self.catalog)
        self.windows = window_indices(self.catalog, field.dt)
        self.threshold = float(threshold)
        self.params = params or RollParams()
        self.nsub = roll_step_count(field.dt, max_step)
        self.absolute = bool(absolute)
        self.capsize = float(capsize)
        self.spectrum = spectrum
        self.seed = seed
        self.density: GroupDensity = group_density(self.catalog) if len(self.catalog) >= 100 else GroupDensity(self.points)
        self.bounds = self.density.support.copy()
        self.bounds[:, 0] = np.maximum(self.bounds[:, 0], 1e-6)
        self._scale = self.points.std(axis=0)
        self._order_L = np.argsort(self.points[:, 0], kind="stable")

    @classmethod
    def build(cls, spectrum: SpectrumConfig | None = None, seed=0, group_fraction: float = 0.25, **kw) -> "ShipRoll":
        """Synthesise a record and its catalog and wrap them as a problem."""
        spectrum = spectrum or SpectrumConfig()
        field = synth_wave_field(spectrum, seed)
        catalog = extract_groups(field, group_fraction * spectrum.Hs)
        return cls(field, catalog, spectrum=spectrum, seed=seed, **kw)

    # -- input density -------------------------------------------------
    def pdf(self, X):
        return self.density.pdf(as_points(X, 2))

    def sample(self, n, rng):
        return self.density.sample(n, rng)

    def map_to_input(self, U):
        """Conditional empirical quantiles: ``L`` from the catalog marginal,
        then ``A`` among the catalog groups with the nearest ``L``."""
        U = self._check_unit(U)
        n = self.points.shape[0]
        k = max(1, min(n, int(round(np.sqrt(n)))))
        Ls = self.points[self._order_L, 0]
        out = np.empty_like(U)
        for i, (u1, u2) in enumerate(U):
            j = min(int(u1 * n), n - 1)
            out[i, 0] = Ls[j]
            lo = min(max(j - k // 2, 0), n - k)
            As = np.sort(self.points[self._order_L[lo : lo + k], 1])
            out[i, 1] = As[min(int(u2 * k), k - 1)]
        return out

    def integration_rule(self, n_per_dim=None):
        """The catalog itself, equally weighted (group-based probability)."""
        n = self.points.shape[0]
        return self.points.copy(), np.full(n, 1.0 / n)

    # -- response --------------------------------------------------------
    def neighbours(self, x) -> np.ndarray:
        """Indices of up to ``N_NEIGHBOURS`` catalog groups near ``x``
        within the standardized tolerance."""
        x = np.asarray(x, dtype=float).reshape(2)
        d = np.sqrt((((self.points - x) / self._scale) ** 2).sum(1))
        idx = np.argsort(d, kind="stable")[:N_NEIGHBOURS]
        ok = idx[d[idx] <= NEIGHBOUR_TOL]
        if ok.size == 0:
            raise ValueError(f"no wave group within tolerance of (L, A) = {tuple(x)}; nearest distance {d[idx[0]]:.3g}")
        return ok

    def group_response(self, j: int) -> float:
        """Maximum roll over group ``j`` starting from rest upstream."""
        first = max(j - UPSTREAM_GROUPS, 0)
        starts = self.windows[first : j + 1, 0]
        eta = self.field.eta[starts[0] : self.windows[j, 1]]
        mx, mabs, _ = self.window_maxima(eta, starts - starts[0])
        return float(mabs[-1] if self.absolute else mx[-1])

    def window_maxima(self, eta, starts):
        c = np.append(self.params.coefficients(), self.field.dt)
        return _window_maxima(np.ascontiguousarray(eta, dtype=float), np.ascontiguousarray(starts, dtype=np.int64), c, self.nsub, self.capsize)

    def itr_sampler(self, x, seed) -> float:
        rng = np.random.default_rng(seed)
        return self.group_response(int(rng.choice(self.neighbours(x))))

    def respond(self, X, rng):
        rng = np.random.default_rng(rng)
        return np.array([self.itr_sampler(x, rng) for x in as_points(X, 2)])

    def describe(self):
        d = super().describe() | {
            "n_groups": len(self.catalog),
            "dt": self.field.dt,
            "duration": self.field.duration,
            "substeps": self.nsub,
            "absolute": self.absolute,
            "capsize": self.capsize,
            "roll": asdict(self.params),
            "seed": self.seed,
            "eta_checksum": float(np.round(np.sum(self.field.eta**2), 6)),
        }
        if self.spectrum is not None:
            d["spectrum"] = asdict(self.spectrum)
        return d

    # -- persistence -------------------------------------------------------
    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.field.save(directory / "field.npz")
        save_catalog(self.catalog, directory / "catalog.csv")
        return directory

    @classmethod
    def load(cls, directory, **kw) -> "ShipRoll":
        directory = Path(directory)
        return cls(WaveField.load(directory / "field.npz"), load_catalog(directory / "catalog.csv"), **kw)


def group_maxima(prob: ShipRoll) -> tuple[np.ndarray, np.ndarray]:
    """Per-group maximum roll from one continuous run over the whole record.

    Returns the response (``max xi`` or ``max |xi|``) per group and the
    capsize flags.
    """
    mx, mabs, capsized = prob.window_maxima(prob.field.eta, prob.windows[:, 0])
    return (mabs if prob.absolute else mx), capsized
