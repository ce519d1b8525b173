"""
Report service: CSV, JSON and SVG emission for run records, trajectories and mixing curves
"""
import csv
import io
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.models.experiment_models import ExperimentKind, RunRecord  # noqa: E402
from app.utils.errors import ConfigError, LabError  # noqa: E402

logger = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
FORMATS = ("csv", "json", "svg")

KIND_COLUMNS: Dict[ExperimentKind, List[str]] = {
    ExperimentKind.SCALING_STUDY: [
        "n", "instance", "beta", "method", "gap", "t_rel", "log_t_rel", "t_mix", "t_mix_uniform",
        "search_min_gap", "maximin",
    ],
    ExperimentKind.FREE_ENERGY: ["n", "instance", "beta", "quenched", "annealed", "difference"],
    ExperimentKind.BOTTLENECK_PIPELINE: [
        "n", "instance", "beta", "reference", "verdict", "hypotheses_met", "certified", "min_drop", "lemma_rhs",
        "log_ratio", "log_bound", "ball_mass", "conductance", "log_lower_bound", "t_rel", "cheeger_consistent",
    ],
    ExperimentKind.ESCAPE_STUDY: [
        "n", "instance", "beta", "start", "reference", "rho", "reps", "censored", "median",
        "median_lower_bound", "mean",
    ],
    ExperimentKind.RESTRICTED_NORM_STUDY: [
        "law", "n", "instance", "rho", "subset_size", "mode", "norm", "scaled_norm", "bound_rhs",
        "fitted_constant", "evaluations", "quadratic_form",
    ],
}
TRAJECTORY_COLUMNS = ["step", "energy", "overlap"]
CURVE_COLUMNS = ["t", "d_t"]

SVG_RC = {"svg.hashsalt": "sklab", "svg.fonttype": "none", "figure.max_open_warning": 0}


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_csv(columns: Sequence[str], rows: Iterable[Mapping[str, Any]], schema: str) -> str:
    """CSV text with a '# schema' comment line and a fixed header"""
    buffer = io.StringIO()
    buffer.write(f"# schema: {schema} v{CSV_SCHEMA_VERSION}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(column)) for column in columns])
    return buffer.getvalue()


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        logger.error(f"Cannot write report {path}: {e}")
        raise LabError(f"cannot write report {path}: {e}") from e
    return path


def write_trajectory_csv(rows: Iterable[Mapping[str, Any]], path: Union[str, Path]) -> Path:
    """Trajectory checkpoints as step, energy, overlap"""
    return _write(Path(path), render_csv(TRAJECTORY_COLUMNS, rows, "trajectory"))


def write_curve_csv(rows: Iterable[Mapping[str, Any]], path: Union[str, Path]) -> Path:
    """Mixing curve as t, d_t"""
    return _write(Path(path), render_csv(CURVE_COLUMNS, rows, "mixing_curve"))


def render_json(record: RunRecord) -> str:
    return record.model_dump_json(indent=2) + "\n"


def _figure():
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    return fig, ax


def _svg_text(fig) -> str:
    buffer = io.StringIO()
    fig.savefig(buffer, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buffer.getvalue()


def _scaling_plot(record: RunRecord, ax) -> None:
    rows = [r for r in record.rows if r.get("t_rel") is not None]
    if rows:
        points, = ax.plot([r["n"] for r in rows], [r["t_rel"] for r in rows], "o", alpha=0.5, label="instances")
        points.set_gid("data_points")
    for fit in record.fits:
        grid = np.linspace(min(fit.sizes), max(fit.sizes), 64)
        medians, = ax.plot(fit.sizes, np.exp(fit.medians), "s", label=f"median beta={fit.beta}")
        medians.set_gid(f"medians_beta_{fit.beta}")
        for model, gid in ((fit.third, "fit_alpha_1_3"), (fit.linear, "fit_alpha_1")):
            line, = ax.plot(grid, np.exp(model.a + model.b * grid ** model.alpha), "-",
                            label=f"alpha={model.label} rss={model.rss:.3g}")
            line.set_gid(gid)
    ax.set_yscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("t_rel")


def _curve_plot(record: RunRecord, ax) -> None:
    for k, curve in enumerate(record.curves):
        line, = ax.plot(curve.times, curve.distances, "-", label=f"N={curve.n} beta={curve.beta} {curve.start}")
        line.set_gid(f"curve_{k}")
    ax.axhline(record.config.epsilon, color="grey", linestyle=":")
    ax.set_xscale("symlog")
    ax.set_xlabel("t")
    ax.set_ylabel("d(t)")


def _profile_plot(record: RunRecord, ax) -> None:
    for key, values in record.gap_profiles.items():
        ax.hist(values, bins=20, histtype="step", label=key, gid=f"profile_{key}")
    ax.axvline(record.config.gamma, color="grey", linestyle=":")
    ax.set_xlabel("sigma_i L_i")
    ax.set_ylabel("sites")


def _by_beta_plot(record: RunRecord, ax, column: str, ylabel: str) -> None:
    series: Dict[Any, List] = {}
    for row in record.rows:
        if row.get(column) is None:
            continue
        label = f"N={row['n']}" + (f" {row['start']}" if "start" in row and row["start"] != "reference" else "")
        series.setdefault(label, []).append((row["beta"], row[column]))
    for label, points in series.items():
        points.sort()
        line, = ax.plot([p[0] for p in points], [p[1] for p in points], "o", label=label)
        line.set_gid(f"series_{label}")
    ax.set_xlabel("beta")
    ax.set_ylabel(ylabel)


def _norm_plot(record: RunRecord, ax) -> None:
    for law in sorted({r["law"] for r in record.rows}):
        rows = [r for r in record.rows if r["law"] == law]
        line, = ax.plot([r["rho"] for r in rows], [r["fitted_constant"] for r in rows], "o", label=law)
        line.set_gid(f"constant_{law}")
    ax.set_xlabel("rho")
    ax.set_ylabel("sqrt(N) ||A_II|| / sqrt(rho log(1/rho) N)")


def render_svgs(record: RunRecord) -> Dict[str, str]:
    """SVG documents keyed by plot name; empty records give no plots"""
    plots: Dict[str, str] = {}
    kind = record.kind
    with plt.rc_context(SVG_RC):
        main = {
            ExperimentKind.SCALING_STUDY: ("t_rel_vs_n", _scaling_plot),
            ExperimentKind.FREE_ENERGY: ("free_energy", lambda r, ax: _by_beta_plot(r, ax, "difference", "quenched - annealed")),
            ExperimentKind.BOTTLENECK_PIPELINE: ("log_lower_bound", lambda r, ax: _by_beta_plot(r, ax, "log_lower_bound", "-log(2 Phi(B))")),
            ExperimentKind.ESCAPE_STUDY: ("escape_median", lambda r, ax: _by_beta_plot(r, ax, "median_lower_bound", "median exit step")),
            ExperimentKind.RESTRICTED_NORM_STUDY: ("restricted_norm", _norm_plot),
        }[kind]
        if record.rows:
            fig, ax = _figure()
            main[1](record, ax)
            ax.legend(fontsize="small")
            ax.set_title(f"{record.config.name} ({kind.value})")
            plots[main[0]] = _svg_text(fig)
        if record.curves:
            fig, ax = _figure()
            _curve_plot(record, ax)
            ax.legend(fontsize="small")
            plots["mixing_curves"] = _svg_text(fig)
        if record.gap_profiles:
            fig, ax = _figure()
            _profile_plot(record, ax)
            ax.legend(fontsize="x-small")
            plots["gap_profiles"] = _svg_text(fig)
    return plots


def emit_report(record: RunRecord, formats: Sequence[str], out_dir: Union[str, Path]) -> List[Path]:
    """
    Write the requested report files for a run record

    Args:
        record: Run record
        formats: Any of csv, json, svg
        out_dir: Destination directory

    Returns:
        List[Path]: Written files in a fixed order
    """
    unknown = [f for f in formats if f not in FORMATS]
    if unknown:
        raise ConfigError(f"unknown report formats {unknown}; expected a subset of {list(FORMATS)}")
    out_dir = Path(out_dir)
    stem = record.config.name
    written: List[Path] = []
    if "csv" in formats:
        text = render_csv(KIND_COLUMNS[record.kind], record.rows, record.kind.value)
        written.append(_write(out_dir / f"{stem}-metrics.csv", text))
        for k, curve in enumerate(record.curves):
            rows = [{"t": t, "d_t": d} for t, d in zip(curve.times, curve.distances)]
            written.append(write_curve_csv(rows, out_dir / f"{stem}-curve-{k}.csv"))
    if "json" in formats:
        written.append(_write(out_dir / f"{stem}-record.json", render_json(record)))
    if "svg" in formats:
        for name, text in render_svgs(record).items():
            written.append(_write(out_dir / f"{stem}-{name}.svg", text))
    logger.info(f"emit_report {stem}: {len(written)} files in {out_dir}")
    return written
