import logging
from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from models import AttackReport, PlotError  # noqa: E402

logger = logging.getLogger(__name__)

CURVE_METRICS = ("precision", "recall", "match_rate")


def curve_table(reports: Sequence[AttackReport]) -> pd.DataFrame:
    rows = [
        (r.scenario, r.seed, p.provenance.value, p.match_key, p.uniques_only, p.k, p.precision, p.recall,
         p.match_rate)
        for r in reports for p in r.curves
    ]
    table = pd.DataFrame(rows, columns=["scenario", "seed", "provenance", "match_key", "uniques_only", "k",
                                        *CURVE_METRICS])
    return table.astype({metric: float for metric in CURVE_METRICS})


def solvar_table(reports: Sequence[AttackReport]) -> pd.DataFrame:
    rows = [
        (r.scenario, r.seed, s.block_id, s.attributes, s.subset.value, s.raw, s.normalized, s.exact)
        for r in reports for s in r.solvar
    ]
    return pd.DataFrame(rows, columns=["scenario", "seed", "block_id", "attributes", "subset", "raw",
                                       "normalized", "exact"])


def scatter_table(reports: Sequence[AttackReport]) -> pd.DataFrame:
    rows = [(r.scenario, r.seed, b, putative, true) for r in reports for b, putative, true in r.violation_counts]
    return pd.DataFrame(rows, columns=["scenario", "seed", "block_id", "putative", "true"])


def _save(fig, table: pd.DataFrame, path: Path) -> List[Path]:
    fig.tight_layout()
    fig.savefig(path.with_suffix(".png"), dpi=150)
    plt.close(fig)
    table.to_csv(path.with_suffix(".csv"), index=False)
    return [path.with_suffix(".png"), path.with_suffix(".csv")]


def _plot_curves(table: pd.DataFrame, out: Path) -> List[Path]:
    written = []
    for (scenario, match_key), group in table.groupby(["scenario", "match_key"], sort=True):
        fig, axes = plt.subplots(1, len(CURVE_METRICS), figsize=(5 * len(CURVE_METRICS), 4))
        for ax, metric in zip(axes, CURVE_METRICS):
            series = group.groupby(["provenance", "uniques_only", "k"], sort=True)[metric].mean()
            for (provenance, uniques_only), values in series.groupby(level=[0, 1], sort=True):
                ks = values.index.get_level_values("k")
                # NaN breaks the line, so undefined points show as gaps
                ax.plot(ks, values.to_numpy(dtype=float), marker=".",
                        label=f"{provenance.lower()}{' (uniques)' if uniques_only else ''}")
            ax.set_xlabel("k")
            ax.set_ylabel(metric)
            ax.set_ylim(-0.02, 1.02)
            ax.set_title(f"{scenario} / {match_key}")
            ax.legend(fontsize="small")
        written += _save(fig, group, out / f"curves_{scenario}_{match_key}")
    return written


def _plot_solvar(table: pd.DataFrame, out: Path) -> List[Path]:
    written = []
    for attributes, group in table.groupby("attributes", sort=True):
        fig, ax = plt.subplots(figsize=(6, 4))
        for scenario, rows in group.groupby("scenario", sort=True):
            values = np.sort(rows["normalized"].dropna().to_numpy(dtype=float))
            if values.size == 0:
                continue
            ax.step(values, np.arange(1, values.size + 1) / values.size, where="post", label=scenario)
        ax.set_xlabel("normalized solution variability")
        ax.set_ylabel("cumulative share of blocks")
        ax.set_title(f"solution variability ({attributes})")
        ax.legend(fontsize="small")
        written += _save(fig, group, out / f"solvar_cdf_{attributes}")
    return written


def _plot_scatter(table: pd.DataFrame, out: Path) -> List[Path]:
    fig, ax = plt.subplots(figsize=(5, 5))
    for scenario, rows in table.groupby("scenario", sort=True):
        ax.scatter(rows["true"], rows["putative"], s=12, alpha=0.6, label=scenario)
    ax.set_xlabel("true violations")
    ax.set_ylabel("putative violations")
    ax.set_title("putative vs true violations per flagged block")
    if not table.empty:
        ax.legend(fontsize="small")
    return _save(fig, table, out / "violations_scatter")


def emit_plots(reports: Sequence[AttackReport], out: Path) -> List[Path]:
    """
    Write curve, solvar CDF and violation scatter figures, each with a CSV sidecar.

    Args:
        reports: reports sharing one k grid
        out: directory for the figures

    Returns:
        list of written file paths
    """
    if not reports:
        raise PlotError("no reports to plot")
    grids = {r.k_grid for r in reports if r.curves}
    if len(grids) > 1:
        raise PlotError(f"reports use different k grids: {sorted(len(g) for g in grids)} points")

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = _plot_curves(curve_table(reports), out)
    solvar = solvar_table(reports)
    if not solvar.empty:
        written += _plot_solvar(solvar, out)
    written += _plot_scatter(scatter_table(reports), out)
    logger.info(f"Wrote {len(written)} plot files to {out}")
    return written
