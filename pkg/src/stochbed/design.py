"""Sequential sampling driver and the final exceedance-probability estimator."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from stochbed.acquisition import select_next, tail_prob
from stochbed.gp import ConditioningError, Dataset, SgprModel, sgpr_fit
from stochbed.vhgpr import TrainedVhgpr, vhgpr_fit

log = logging.getLogger(__name__)

METHODS = ("seq-vhgpr", "lh-vhgpr", "lh-sgpr")


def latin_hypercube(n: int, d: int, rng=None) -> np.ndarray:
    """``n`` jittered Latin hypercube points in ``[0, 1)^d``."""
    if n < 1:
        raise ValueError("latin_hypercube needs n >= 1")
    rng = np.random.default_rng(rng)
    return qmc.LatinHypercube(d=d, seed=rng).random(n)


def estimate_pe(model, prob, n_per_dim: int | None = None) -> float:
    """Integrate the exceedance probability at the posterior means.

    Uses the problem's deterministic integration rule (a density-weighted
    tensor grid for Gaussian inputs, the group catalog for the ship).
    """
    nodes, weights = prob.integration_rule(n_per_dim)
    post = model.predict(nodes, with_var=False)
    pe = float(np.dot(weights, tail_prob(post.mu_f, post.mu_g, prob.threshold)))
    if not np.isfinite(pe):
        raise FloatingPointError("exceedance-probability quadrature is not finite")
    return min(max(pe, 0.0), 1.0)


def fit_surrogate(method: str, data: Dataset, previous=None, seed: int = 0):
    """Fit the method's surrogate, warm-starting from ``previous`` if given."""
    if method in ("seq-vhgpr", "lh-vhgpr"):
        # warm start plus a cold start; the higher bound wins
        fits = []
        if isinstance(previous, TrainedVhgpr):
            try:
                fits.append(vhgpr_fit(data, init=previous.hyper, lam_init=previous.lam))
            except (ConditioningError, np.linalg.LinAlgError) as exc:
                log.warning("warm-started VHGPR fit failed: %s", exc)
        fits.append(vhgpr_fit(data))
        return max(fits, key=lambda m: m.elbo_value)
    if method == "lh-sgpr":
        init = previous.hyper if isinstance(previous, SgprModel) else None
        return sgpr_fit(data, init=init, seed=seed)
    raise ValueError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")


def hyper_vector(model) -> list[float]:
    if isinstance(model, TrainedVhgpr):
        return model.hyper.to_vector().tolist()
    return model.hyper.to_log().tolist()


@dataclass
class RunRecord:
    problem: dict
    method: str
    seed: int
    n_init: int
    n_iter: int
    X_init: np.ndarray
    y_init: np.ndarray
    iters: list = field(default_factory=list)
    xs: list = field(default_factory=list)
    ys: list = field(default_factory=list)
    acq: list = field(default_factory=list)
    pe: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    hyper_trace: list = field(default_factory=list)
    converged: list = field(default_factory=list)
    n_queries: int = 0
    aborted: bool = False
    error: str | None = None
    design: str = ""
    final_model: object = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.X_init.shape[1]

    def columns(self) -> list[str]:
        xs = ["x"] if self.dim == 1 else [f"x{j + 1}" for j in range(self.dim)]
        return ["iter", *xs, "y", "acq_value", "pe_estimate", "wall_ms"]

    def to_csv(self, timings: bool = False) -> str:
        """Per-iteration table; ``wall_ms`` stays empty unless ``timings``.

        Leaving timings out keeps reruns byte-identical.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for k, it in enumerate(self.iters):
            x = self.xs[k]
            xcells = [""] * self.dim if x is None else [repr(float(v)) for v in x]
            cells = [
                it,
                *xcells,
                "" if self.ys[k] is None else repr(float(self.ys[k])),
                "" if self.acq[k] is None else repr(float(self.acq[k])),
                repr(float(self.pe[k])),
                f"{self.wall_ms[k]:.3f}" if timings else "",
            ]
            w.writerow(cells)
        return buf.getvalue()

    def metadata(self) -> dict:
        model = self.final_model
        return {
            "problem": self.problem,
            "method": self.method,
            "seed": self.seed,
            "n_init": self.n_init,
            "n_iter": self.n_iter,
            "design": self.design,
            "n_queries": self.n_queries,
            "initial_inputs": self.X_init.tolist(),
            "initial_outputs": self.y_init.tolist(),
            "hyper_trace": self.hyper_trace,
            "converged": self.converged,
            "aborted": self.aborted,
            "error": self.error,
            "final_model": model.to_dict() if isinstance(model, TrainedVhgpr) else None,
        }

    def write(self, stem, timings: bool = False) -> tuple[Path, Path]:
        """Write ``<stem>.csv`` and the ``<stem>.json`` metadata sidecar."""
        stem = Path(stem)
        csv_path = stem.with_suffix(".csv")
        json_path = stem.with_suffix(".json")
        csv_path.write_text(self.to_csv(timings))
        meta = self.metadata() | {"wall_ms": self.wall_ms}
        json_path.write_text(json.dumps(meta, indent=1))
        return csv_path, json_path

    @staticmethod
    def read_pe(csv_path) -> np.ndarray:
        with open(csv_path, newline="") as fh:
            return np.array([float(r["pe_estimate"]) for r in csv.DictReader(fh)])


def run_sequential(
    prob,
    n_init: int,
    n_iter: int,
    seed: int = 0,
    method: str = "seq-vhgpr",
    n_candidates: int = 10_000,
    design: str | None = None,
) -> RunRecord:
    """Run the sequential design (or an LH reference mode) and record P_e.

    All randomness comes from ``seed``: independent child streams drive the
    initial design, the response draws, the candidate pools and, for the
    LH modes, the pre-generated follow-up design. The response function is
    queried exactly ``n_init + n_iter`` times unless the run aborts.

    ``design`` selects how Latin hypercube points reach the input space
    (see :meth:`Problem.design_points`); ``None`` uses the problem default.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")
    if n_init < 5:
        raise ValueError("n_init must be at least 5")
    design_ss, query_ss, cand_ss, queue_ss = np.random.SeedSequence(seed).spawn(4)
    query_rng = np.random.default_rng(query_ss)
    cand_rng = np.random.default_rng(cand_ss)

    def query(x):
        rec.n_queries += 1
        return prob.itr_sampler(x, int(query_rng.integers(2**63)))

    design = prob.default_design if design is None else design
    X0 = prob.design_points(latin_hypercube(n_init, prob.dim, design_ss), design)
    rec = RunRecord(prob.describe(), method, seed, n_init, n_iter, X0, np.empty(0), design=design)
    rec.y_init = np.array([query(x) for x in X0])
    data = Dataset(X0, rec.y_init)
    queue = None
    if method != "seq-vhgpr" and n_iter > 0:
        queue = prob.design_points(latin_hypercube(n_iter, prob.dim, queue_ss), design)

    model = None
    x_new = y_new = acq = None
    for j in range(n_iter + 1):
        t0 = time.perf_counter()
        try:
            model = _fit_with_retry(method, data, model, seed + j)
        except (ConditioningError, np.linalg.LinAlgError, ValueError) as exc:
            rec.aborted = True
            rec.error = f"iteration {j}: surrogate fit failed: {exc}"
            log.error(rec.error)
            break
        pe = estimate_pe(model, prob)
        rec.iters.append(j)
        rec.xs.append(x_new)
        rec.ys.append(y_new)
        rec.acq.append(acq)
        rec.pe.append(pe)
        rec.hyper_trace.append(hyper_vector(model))
        rec.converged.append(bool(model.converged))
        if j == n_iter:
            rec.wall_ms.append(1e3 * (time.perf_counter() - t0))
            break
        if queue is None:
            res = select_next(model, prob, n_candidates, cand_rng)
            x_new, acq = res.x_star, res.value
        else:
            x_new, acq = queue[j], None
        y_new = query(x_new)
        data = data.append(x_new, y_new)
        rec.wall_ms.append(1e3 * (time.perf_counter() - t0))
    rec.final_model = model
    return rec


def _fit_with_retry(method, data, previous, seed):
    try:
        return fit_surrogate(method, data, previous, seed)
    except (ConditioningError, np.linalg.LinAlgError) as exc:
        if previous is None:
            raise
        log.warning("warm-started fit failed (%s); retrying from a fresh initialisation", exc)
        return fit_surrogate(method, data, None, seed)
