"""Narrow-band wave fields, their envelope and the wave-group catalog.

A unidirectional linear sea is synthesised at a fixed point from a Gaussian
wavenumber spectrum, its envelope is taken with the Hilbert transform and
the envelope is cut into Gaussian-shaped groups ``A exp(-(t - t_c)^2 / 2L^2)``.
The catalog of ``(L, A)`` pairs defines the input density of the ship
problem.
"""

from __future__ import annotations

import configparser
import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.signal import argrelextrema, hilbert
from scipy.stats import gaussian_kde

GRAVITY = 9.81
HOUR = 3600.0


@dataclass(frozen=True)
class SpectrumConfig:
    """Gaussian wavenumber spectrum and record settings (SI units).

    Parameters
    ----------
    Hs : float
        Significant wave height [m]; the spectrum integrates to ``Hs**2 / 16``.
    k0 : float
        Peak wavenumber [1/m].
    K : float
        Spectral width [1/m]; must be smaller than ``k0``.
    gravity : float
        Gravitational acceleration used by the deep-water dispersion relation.
    duration : float
        Record length [s].
    dt : float
        Sampling interval of the record [s].
    """

    Hs: float = 12.0
    k0: float = 0.018
    K: float = 0.05 * 0.018
    gravity: float = GRAVITY
    duration: float = 150 * HOUR
    dt: float = 0.25

    def __post_init__(self):
        vals = asdict(self)
        bad = [k for k, v in vals.items() if not (np.isfinite(v) and v > 0)]
        if bad:
            raise ValueError(f"spectrum settings must be positive and finite: {', '.join(bad)}")
        if self.K >= self.k0:
            raise ValueError("spectral width K must be smaller than k0")

    @property
    def omega_peak(self) -> float:
        return float(np.sqrt(self.gravity * self.k0))

    @property
    def peak_period(self) -> float:
        return 2 * np.pi / self.omega_peak

    def spectrum(self, k) -> np.ndarray:
        """Wavenumber spectral density ``F(k)`` [m^3]."""
        k = np.asarray(k, dtype=float)
        z = (k - self.k0) / self.K
        return self.Hs**2 / 16 / (np.sqrt(2 * np.pi) * self.K) * np.exp(-0.5 * z * z)


@dataclass(frozen=True)
class WaveField:
    """Surface elevation ``eta`` and its envelope ``rho`` at uniform ``dt``."""

    eta: np.ndarray
    rho: np.ndarray
    dt: float

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.eta.size)

    @property
    def duration(self) -> float:
        return self.dt * self.eta.size

    def save(self, path) -> Path:
        path = Path(path)
        np.savez(path, eta=self.eta, rho=self.rho, dt=self.dt)
        return path if path.suffix == ".npz" else path.with_name(path.name + ".npz")

    @classmethod
    def load(cls, path) -> "WaveField":
        with np.load(path) as z:
            return cls(z["eta"], z["rho"], float(z["dt"]))


def envelope(eta) -> np.ndarray:
    """Modulus of the analytic signal of ``eta``."""
    return np.abs(hilbert(np.asarray(eta, dtype=float)))


def synth_wave_field(cfg: SpectrumConfig, rng=None) -> WaveField:
    """Random-phase synthesis of a periodic record by inverse FFT.

    Frequencies sit on the FFT grid ``omega_j = j * 2 pi / duration``; each
    component in ``k0 +/- 5K`` (mapped through ``omega^2 = g k``) gets the
    amplitude ``sqrt(2 F(k_j) dk_j)`` with ``dk_j = 2 omega_j d_omega / g``.
    """
    tp = cfg.peak_period
    if cfg.dt > tp / 20:
        raise ValueError(f"dt={cfg.dt} s is too coarse; need dt <= T_p/20 = {tp / 20:.4g} s")
    if cfg.duration < 100 * tp:
        raise ValueError(f"record of {cfg.duration} s is shorter than 100 peak periods")
    rng = np.random.default_rng(rng)
    n = int(round(cfg.duration / cfg.dt))
    n += n % 2
    d_omega = 2 * np.pi / (n * cfg.dt)
    omega = d_omega * np.arange(n // 2 + 1)
    k = omega**2 / cfg.gravity
    band = np.abs(k - cfg.k0) <= 5 * cfg.K
    amp = np.zeros_like(omega)
    amp[band] = np.sqrt(2 * cfg.spectrum(k[band]) * 2 * omega[band] * d_omega / cfg.gravity)
    phase = rng.uniform(0, 2 * np.pi, omega.size)
    # eta(t) = sum a_j cos(omega_j t + phi_j) = Re sum a_j e^{i phi_j} e^{i omega_j t}
    eta = np.fft.irfft(amp * np.exp(1j * phase), n) * n / 2
    return WaveField(eta, envelope(eta), cfg.dt)


@dataclass(frozen=True)
class WaveGroup:
    t_c: float
    A: float
    L: float
    window: tuple[float, float]


def gaussian_group(t, t_c: float, A: float, L: float):
    return A * np.exp(-((np.asarray(t) - t_c) ** 2) / (2 * L * L))


def _fit_length(t, rho, t_c, A) -> float:
    """Least-squares group length with ``t_c`` and ``A`` held fixed."""
    span = t[-1] - t[0]
    hi = max(span, 2 * (t[1] - t[0]))
    lo = 0.5 * (t[1] - t[0])

    def sse(L):
        r = gaussian_group(t, t_c, A, L) - rho
        return float(r @ r)

    res = minimize_scalar(sse, bounds=(lo, hi), method="bounded", options={"xatol": 1e-6 * hi})
    return float(res.x)


def extract_groups(field: WaveField, threshold: float) -> list[WaveGroup]:
    """Cut the envelope into groups around its large local maxima.

    Every local maximum with ``rho >= threshold`` starts a group; the
    boundary between two consecutive groups is the envelope minimum between
    their peaks, the first and last windows extend to the record ends, so
    the windows tile the record. ``L`` is fitted by least squares over each
    window. A record without any qualifying maximum yields an empty catalog.
    """
    rho = np.asarray(field.rho, dtype=float)
    if rho.size < 3:
        return []
    t = field.t
    peaks = argrelextrema(rho, np.greater_equal, order=1)[0]
    peaks = peaks[(rho[peaks] >= threshold) & (peaks > 0) & (peaks < rho.size - 1)]
    # plateaus produce runs of equal maxima; keep the first of each run
    if peaks.size:
        keep = np.r_[True, (np.diff(peaks) > 1) | (rho[peaks[1:]] != rho[peaks[:-1]])]
        peaks = peaks[keep]
    if peaks.size == 0:
        return []
    cuts = [0]
    for a, b in zip(peaks[:-1], peaks[1:]):
        cuts.append(a + int(np.argmin(rho[a : b + 1])))
    cuts.append(rho.size)
    groups = []
    for j, p in enumerate(peaks):
        s, e = cuts[j], cuts[j + 1]
        A = float(rho[p])
        L = _fit_length(t[s:e], rho[s:e], t[p], A)
        groups.append(WaveGroup(float(t[p]), A, L, (float(t[s]), float(t[e - 1] + field.dt))))
    return groups


def catalog_array(catalog) -> np.ndarray:
    """``(n, 2)`` array of ``(L, A)``."""
    return np.array([[g.L, g.A] for g in catalog], dtype=float).reshape(-1, 2)


def window_indices(catalog, dt: float) -> np.ndarray:
    """Sample index ranges ``[start, end)`` of the group windows."""
    return np.array([[round(g.window[0] / dt), round(g.window[1] / dt)] for g in catalog], dtype=np.int64).reshape(-1, 2)


def save_catalog(catalog, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_c", "A", "L", "t_start", "t_end"])
        for g in catalog:
            w.writerow([repr(g.t_c), repr(g.A), repr(g.L), repr(g.window[0]), repr(g.window[1])])
    return path


def load_catalog(path) -> list[WaveGroup]:
    with open(path, newline="") as fh:
        return [
            WaveGroup(float(r["t_c"]), float(r["A"]), float(r["L"]), (float(r["t_start"]), float(r["t_end"])))
            for r in csv.DictReader(fh)
        ]


class GroupDensity:
    """Gaussian kernel density over ``(L, A)`` with Scott's bandwidth.

    Sampling resamples the catalog and adds kernel jitter. ``support`` is
    the data range widened by four bandwidths per axis.
    """

    def __init__(self, catalog):
        pts = catalog_array(catalog) if not isinstance(catalog, np.ndarray) else np.asarray(catalog, float)
        if pts.shape[0] < 2 or np.any(np.ptp(pts, axis=0) <= 0):
            raise ValueError("degenerate catalog: (L, A) needs spread in both coordinates")
        self.points = pts
        self.kde = gaussian_kde(pts.T, bw_method="scott")
        bw = np.sqrt(np.diag(self.kde.covariance))
        self.support = np.column_stack([pts.min(0) - 4 * bw, pts.max(0) + 4 * bw])

    def pdf(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, 2)
        return self.kde(X.T)

    def sample(self, n: int, rng=None) -> np.ndarray:
        return self.kde.resample(n, seed=np.random.default_rng(rng)).T


def group_density(catalog) -> GroupDensity:
    """Kernel density of the group catalog (requires at least 100 groups)."""
    if len(catalog) < 100:
        raise ValueError(f"group density needs at least 100 groups, got {len(catalog)}")
    return GroupDensity(catalog)


def read_config(path) -> dict:
    """Read a ``key = value`` config file into a plain dict of sections.

    Values are parsed as ``int``, ``float`` or ``bool`` where possible.
    """
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    out = {}
    for sec in cp.sections():
        out[sec] = {k: _coerce(v) for k, v in cp[sec].items()}
    return out


def _coerce(v: str):
    low = v.strip().lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for typ in (int, float):
        try:
            return typ(v)
        except ValueError:
            pass
    return v.strip()
