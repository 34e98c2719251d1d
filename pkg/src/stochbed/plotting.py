"""Figures rendered from experiment CSVs (non-interactive Agg backend).

Every figure is written next to the table it was drawn from, with the
same stem and a ``.png`` suffix.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from stochbed.experiment import SummaryTable  # noqa: E402

GOLDEN = (np.sqrt(5) - 1) / 2
METHOD_COLORS = {"seq-vhgpr": "#2ca02c", "lh-vhgpr": "#ff7f0e", "lh-sgpr": "#1f77b4"}
STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "figure.dpi": 150,
    "savefig.bbox": "tight",
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _figure(width=5.0):
    return plt.subplots(figsize=(width, width * GOLDEN))


def _draw_band(ax, table: SummaryTable, n_init: int):
    x = n_init + table.iters
    lo, hi = table.oracle * (1 - table.band), table.oracle * (1 + table.band)
    ax.axhline(lo, color="k", ls="--", lw=0.9)
    ax.axhline(hi, color="k", ls="--", lw=0.9, label=f"reference $\\pm${table.band:.0%}")
    ax.set_xlim(x[0], x[-1])


def plot_summary(summary_csv, n_init: int = 0, label: str | None = None, out=None) -> Path:
    """Mean P_e with a one-std band above it, against the reference band."""
    summary_csv = Path(summary_csv)
    table = SummaryTable.read(summary_csv)
    method = label or summary_csv.parent.name.split("_", 1)[-1]
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        x = n_init + table.iters
        color = METHOD_COLORS.get(method, "C0")
        ax.plot(x, table.mean, color=color, label=method)
        ax.fill_between(x, table.mean, table.mean + table.std, color=color, alpha=0.25, lw=0)
        _draw_band(ax, table, n_init)
        ax.set_xlabel("number of samples")
        ax.set_ylabel("$P_e$")
        ax.legend(frameon=False)
        out = Path(out) if out else summary_csv.with_suffix(".png")
        fig.savefig(out)
        plt.close(fig)
    return out


def plot_comparison(directory, problem: str, n_init: int = 0, out=None) -> Path:
    """Overlay every method's summary for ``problem`` found in ``directory``."""
    directory = Path(directory)
    tables = {p.parent.name.split("_", 1)[1]: SummaryTable.read(p) for p in sorted(directory.glob(f"{problem}_*/summary.csv"))}
    if not tables:
        raise FileNotFoundError(f"no summaries for {problem!r} under {directory}")
    with plt.rc_context(STYLE):
        fig, ax = _figure(5.5)
        for method, t in tables.items():
            x = n_init + t.iters
            c = METHOD_COLORS.get(method)
            ax.plot(x, t.mean, color=c, label=method)
            ax.fill_between(x, t.mean, t.mean + t.std, color=c, alpha=0.2, lw=0)
        _draw_band(ax, next(iter(tables.values())), n_init)
        ax.set_xlabel("number of samples")
        ax.set_ylabel("$P_e$")
        ax.legend(frameon=False, ncol=2)
        out = Path(out) if out else directory / f"comparison_{problem}.png"
        fig.savefig(out)
        plt.close(fig)
    return out


def _read_run(run_csv):
    with open(run_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    xcols = [k for k in rows[0] if k == "x" or (k.startswith("x") and k[1:].isdigit())]
    pts = np.array([[float(r[k]) for k in xcols] for r in rows if r[xcols[0]]]).reshape(-1, len(xcols))
    return pts


def plot_samples(run_csv, out=None) -> Path:
    """Where the sequential samples of one run landed (initial design from
    the JSON sidecar)."""
    import json

    run_csv = Path(run_csv)
    seq = _read_run(run_csv)
    meta = json.loads(run_csv.with_suffix(".json").read_text())
    init = np.asarray(meta["initial_inputs"], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        if init.shape[1] == 1:
            ax.plot(init[:, 0], np.zeros(len(init)), "o", ms=3, color="navy", label="initial")
            ax.plot(seq[:, 0], np.full(len(seq), 0.1), "o", ms=3, color="orange", label="sequential")
            ax.set_yticks([])
            ax.set_ylim(-0.5, 0.6)
            ax.set_xlabel("$x$")
        else:
            ax.plot(init[:, 0], init[:, 1], "o", ms=3, color="navy", label="initial")
            if seq.size:
                ax.plot(seq[:, 0], seq[:, 1], "o", ms=3, color="orange", label="sequential")
            ax.set_xlabel("$x_1$")
            ax.set_ylabel("$x_2$")
        ax.legend(frameon=False)
        out = Path(out) if out else run_csv.with_name(run_csv.stem + "_samples.png")
        fig.savefig(out)
        plt.close(fig)
    return out


def render_report(directory) -> list[Path]:
    """Draw every figure that the tables under ``directory`` support."""
    import json

    directory = Path(directory)
    made = []
    problems = set()
    for summary in sorted(directory.glob("*_*/summary.csv")):
        manifest = json.loads((summary.parent / "manifest.json").read_text())
        n_init = int(manifest["config"]["n_init"])
        made.append(plot_summary(summary, n_init))
        problems.add((manifest["config"]["problem"], n_init))
        first = summary.parent / "run_000.csv"
        if first.exists() and manifest["config"]["method"] == "seq-vhgpr":
            made.append(plot_samples(first))
    for problem, n_init in sorted(problems):
        made.append(plot_comparison(directory, problem, n_init))
    return made
