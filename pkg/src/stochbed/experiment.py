"""Replicated, seeded experiments and their on-disk artifacts.

Layout under the output directory::

    <problem>_<method>/run_000.csv   per-iteration record of replication 0
    <problem>_<method>/run_000.json  its metadata sidecar
    <problem>_<method>/summary.csv   per-iteration statistics across runs
    <problem>_<method>/manifest.json config echo, build id, failures, timings
    comparison_<problem>.csv         ratio report written by ``compare``
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from stochbed import __version__
from stochbed.design import METHODS, run_sequential
from stochbed.oracle import cached_exact_mc, ship_exact
from stochbed.problems import FourBranch2D, Synthetic1D
from stochbed.waves import HOUR, SpectrumConfig

log = logging.getLogger(__name__)

PROBLEMS = ("synthetic1d", "fourbranch2d", "shiproll")
DEFAULT_N_INIT = {"synthetic1d": 40, "fourbranch2d": 60, "shiproll": 40}


class UsageError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines an experiment's outputs.

    ``threshold=None`` keeps the problem default. The ``ship_*`` fields
    configure the wave record of the ship problem; ``oracle_n`` is the
    Monte Carlo size of the synthetic-problem reference.
    """

    problem: str = "synthetic1d"
    method: str = "seq-vhgpr"
    n_init: int | None = None
    n_iter: int = 60
    reps: int = 20
    seed: int = 0
    out: str = "results"
    jobs: int = 1
    n_candidates: int = 10_000
    design: str | None = None
    threshold: float | None = None
    oracle_n: int = 1_000_000
    ship_hours: float = 150.0
    ship_dt: float = 0.25
    ship_seed: int = 0
    ship_absolute: bool = False

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise UsageError(f"unknown problem {self.problem!r}; valid: {', '.join(PROBLEMS)}")
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.n_init is None:
            object.__setattr__(self, "n_init", DEFAULT_N_INIT[self.problem])
        if self.n_init < 5 or self.n_iter < 0 or self.reps < 1 or self.jobs < 1:
            raise UsageError("need n_init >= 5, n_iter >= 0, reps >= 1 and jobs >= 1")
        if self.design not in (None, "box", "density"):
            raise UsageError(f"unknown design {self.design!r}; valid: box, density")

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**values)

    @property
    def tag(self) -> str:
        return f"{self.problem}_{self.method}"

    def problem_key(self) -> tuple:
        """Settings that determine the problem instance (not the method)."""
        return (self.problem, self.threshold, self.ship_hours, self.ship_dt, self.ship_seed, self.ship_absolute)


def make_problem(cfg: ExperimentConfig, cache_dir=None):
    """Instantiate the configured problem.

    The ship record is synthesised once and stored under ``cache_dir``
    (when given) so later runs reload instead of re-synthesising.
    """
    kw = {} if cfg.threshold is None else {"threshold": cfg.threshold}
    if cfg.problem == "synthetic1d":
        return Synthetic1D(**kw)
    if cfg.problem == "fourbranch2d":
        return FourBranch2D(**kw)
    from stochbed.ship import ShipRoll

    spec = SpectrumConfig(duration=cfg.ship_hours * HOUR, dt=cfg.ship_dt)
    kw |= {"absolute": cfg.ship_absolute, "spectrum": spec, "seed": cfg.ship_seed}
    if cache_dir is not None:
        key = hashlib.sha256(repr((asdict(spec), cfg.ship_seed)).encode()).hexdigest()[:12]
        where = Path(cache_dir) / f"ship_{key}"
        if (where / "catalog.csv").exists():
            return ShipRoll.load(where, **kw)
        prob = ShipRoll.build(spec, cfg.ship_seed, **{k: v for k, v in kw.items() if k not in ("spectrum", "seed")})
        prob.save(where)
        return prob
    return ShipRoll.build(spec, cfg.ship_seed, **{k: v for k, v in kw.items() if k not in ("spectrum", "seed")})


def oracle_value(prob, cfg: ExperimentConfig):
    """Reference P_e: long-record exact value for the ship, Exact-MC otherwise."""
    if cfg.problem == "shiproll":
        return ship_exact(prob)
    return cached_exact_mc(prob, cfg.oracle_n, cfg.seed)


def build_id() -> str:
    """Hash of the package sources, a stand-in for a commit id."""
    h = hashlib.sha1()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _one_run(prob, cfg: ExperimentConfig, index: int, run_dir: Path):
    seed = cfg.seed + index
    t0 = time.perf_counter()
    try:
        rec = run_sequential(prob, cfg.n_init, cfg.n_iter, seed, cfg.method, cfg.n_candidates, cfg.design)
    except Exception as exc:  # a failed replication must not sink the batch
        log.exception("replication %d failed", index)
        return {"index": index, "seed": seed, "ok": False, "error": repr(exc), "pe": None, "wall_s": time.perf_counter() - t0}
    rec.write(run_dir / f"run_{index:03d}")
    return {
        "index": index,
        "seed": seed,
        "ok": not rec.aborted,
        "error": rec.error,
        "pe": rec.pe,
        "wall_s": time.perf_counter() - t0,
    }


@dataclass
class SummaryTable:
    """Per-iteration statistics of P_e across replications."""

    iters: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    median: np.ndarray
    n_runs: np.ndarray
    oracle: float
    oracle_se: float
    band: float = 0.05

    @classmethod
    def from_runs(cls, trajectories, n_iter: int, oracle: float, oracle_se: float, band: float = 0.05):
        rows = n_iter + 1
        T = np.full((len(trajectories), rows), np.nan)
        for i, tr in enumerate(trajectories):
            T[i, : len(tr)] = tr
        counts = np.sum(np.isfinite(T), axis=0)
        with np.errstate(all="ignore"), _quiet():
            mean = np.nanmean(T, axis=0) if len(T) else np.full(rows, np.nan)
            std = np.nanstd(T, axis=0) if len(T) else np.full(rows, np.nan)
            median = np.nanmedian(T, axis=0) if len(T) else np.full(rows, np.nan)
        return cls(np.arange(rows), mean, std, median, counts, float(oracle), float(oracle_se), band)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "mean", "std", "median", "n_runs", "oracle", "oracle_se", "band_lo", "band_hi"])
        lo, hi = self.oracle * (1 - self.band), self.oracle * (1 + self.band)
        for k in range(self.iters.size):
            w.writerow([int(self.iters[k]), _fmt(self.mean[k]), _fmt(self.std[k]), _fmt(self.median[k]), int(self.n_runs[k]), _fmt(self.oracle), _fmt(self.oracle_se), _fmt(lo), _fmt(hi)])
        return buf.getvalue()

    @classmethod
    def read(cls, path) -> "SummaryTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        col = lambda k: np.array([float(r[k]) if r[k] else np.nan for r in rows])  # noqa: E731
        first = rows[0]
        oracle = float(first["oracle"])
        band = float(first["band_hi"]) / oracle - 1 if oracle else 0.05
        return cls(col("iter").astype(int), col("mean"), col("std"), col("median"), col("n_runs").astype(int), oracle, float(first["oracle_se"]), band)


def _fmt(v) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


class _quiet:
    def __enter__(self):
        import warnings

        self._cm = warnings.catch_warnings()
        self._cm.__enter__()
        warnings.simplefilter("ignore", RuntimeWarning)

    def __exit__(self, *exc):
        return self._cm.__exit__(*exc)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    directory: Path
    trajectories: list = field(repr=False)
    failed: list
    summary: SummaryTable = field(repr=False)

    @property
    def ok(self) -> bool:
        return not self.failed

    def final_values(self) -> np.ndarray:
        return np.array([t[-1] for t in self.trajectories if len(t) == self.config.n_iter + 1])


def run_experiment(cfg: ExperimentConfig, prob=None, oracle=None) -> ExperimentResult:
    """Run ``cfg.reps`` seeded replications and write all artifacts."""
    out = Path(cfg.out)
    run_dir = out / cfg.tag
    run_dir.mkdir(parents=True, exist_ok=True)
    prob = prob if prob is not None else make_problem(cfg, out / "problems")
    oracle = oracle if oracle is not None else oracle_value(prob, cfg)
    t0 = time.perf_counter()
    if cfg.jobs > 1 and cfg.reps > 1:
        results = Parallel(n_jobs=cfg.jobs)(delayed(_one_run)(prob, cfg, i, run_dir) for i in range(cfg.reps))
    else:
        results = [_one_run(prob, cfg, i, run_dir) for i in range(cfg.reps)]
    results.sort(key=lambda r: r["index"])
    trajectories = [r["pe"] for r in results if r["pe"]]
    failed = [r["index"] for r in results if not r["ok"]]
    summary = SummaryTable.from_runs(trajectories, cfg.n_iter, oracle.value, oracle.std_error)
    (run_dir / "summary.csv").write_text(summary.to_csv())
    manifest = {
        "config": asdict(cfg),
        "build": build_id(),
        "problem": prob.describe(),
        "oracle": asdict(oracle),
        "failed": failed,
        "errors": {str(r["index"]): r["error"] for r in results if r["error"]},
        "wall_seconds": {str(r["index"]): r["wall_s"] for r in results},
        "total_wall_seconds": time.perf_counter() - t0,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, default=str))
    return ExperimentResult(cfg, run_dir, [r["pe"] or [] for r in results], failed, summary)


@dataclass
class Comparison:
    problem: str
    oracle: float
    results: dict

    def rows(self) -> list[dict]:
        out = []
        for method, res in self.results.items():
            final = res.final_values()
            out.append(
                {
                    "method": method,
                    "n_runs": int(final.size),
                    "final_mean": float(np.mean(final)) if final.size else np.nan,
                    "final_median": float(np.median(final)) if final.size else np.nan,
                    "final_std": float(np.std(final)) if final.size else np.nan,
                    "oracle": self.oracle,
                    "ratio_median": float(np.median(final)) / self.oracle if final.size and self.oracle else np.nan,
                    "ratio_mean": float(np.mean(final)) / self.oracle if final.size and self.oracle else np.nan,
                }
            )
        return out

    def to_csv(self) -> str:
        rows = self.rows()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = ["method", "n_runs", "final_mean", "final_median", "final_std", "oracle", "ratio_median", "ratio_mean"]
        w.writerow(keys)
        for r in rows:
            w.writerow([r[k] if isinstance(r[k], (str, int)) else _fmt(r[k]) for k in keys])
        return buf.getvalue()

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results.values())


def compare(methods, cfg: ExperimentConfig) -> Comparison:
    """Run several methods on identical seeds, budgets and problem instance."""
    methods = list(methods)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown method(s) {', '.join(bad)}; valid: {', '.join(METHODS)}")
    out = Path(cfg.out)
    prob = make_problem(cfg, out / "problems")
    oracle = oracle_value(prob, cfg)
    results = {m: run_experiment(replace(cfg, method=m), prob, oracle) for m in methods}
    comp = Comparison(cfg.problem, oracle.value, results)
    (out / f"comparison_{cfg.problem}.csv").write_text(comp.to_csv())
    return comp
