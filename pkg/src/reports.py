"""
Result tables, temperature sweep plots and latent scatter plots rendered from
run records.
"""

import logging
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from src.errors import ReportWriteError  # noqa: E402
from src.evaluation import RunRecord  # noqa: E402

logger = logging.getLogger(__name__)

TABLE1_COLUMNS = ["Model", "Loss term", "Accuracy"]
TABLE2_COLUMNS = [
    "Model",
    "F-measure",
    "Total Accuracy",
    "Acc closed set",
    "Acc open set",
    "Binary F-measure",
]

LOSS_TERMS = {
    "teacher_ce": "CE",
    "student_ce": "CE",
    "student_kd": "KD",
    "student_crd_ce": "CRD + CE",
    "student_ce_kd": "CE + KD",
    "student_kd_crd_ce": "KD + CRD + CE",
    "student_openset": "CE (k+1)",
    "student_joint_kd_osr": "KD + CRD + CE (k+1)",
}

MODEL_NAMES = {
    "teacher_ce": "Teacher",
    "student_ce": "Scratch Student",
    "student_kd_crd_ce": "Distilled Student",
    "student_openset": "Open Set Student",
    "student_joint_kd_osr": "Distilled Open Set Student",
}

OPEN_SET_REGIMES = {"student_openset", "student_joint_kd_osr"}


def parameter_slug(parameter: str) -> str:
    """File-name form of a dotted parameter, ``loss.tau_kd`` -> ``loss_tau_kd``"""
    return parameter.replace(".", "_")


def _model_name(record: RunRecord) -> str:
    return MODEL_NAMES.get(record.regime, record.regime)


def table1(records: list[RunRecord]) -> pd.DataFrame:
    """Closed set accuracy per k-way model"""
    rows = [
        {
            "Model": "Teacher" if record.arch == "teacher" else "Student",
            "Loss term": LOSS_TERMS.get(record.regime, record.regime),
            "Accuracy": 100 * record.closed_accuracy,
        }
        for record in records
        if record.regime not in OPEN_SET_REGIMES
    ]
    return pd.DataFrame(rows, columns=TABLE1_COLUMNS)


def table2(records: list[RunRecord]) -> pd.DataFrame:
    """Open set metrics (x100) per model evaluated with an open test set"""
    rows = [
        {"Model": _model_name(record), **record.metrics.as_percent()}
        for record in records
        if record.metrics is not None
    ]
    return pd.DataFrame(rows, columns=TABLE2_COLUMNS)


def sweep_table(records: list[RunRecord]) -> pd.DataFrame:
    rows = [
        {
            "value": record.sweep_value,
            "closed_accuracy": 100 * record.closed_accuracy,
            "open_accuracy": (
                100 * record.metrics.open_accuracy if record.metrics else float("nan")
            ),
            "seed": record.seed,
        }
        for record in records
    ]
    frame = pd.DataFrame(rows).sort_values("value", kind="stable")
    return frame.reset_index(drop=True)


def summary_table(records: list[RunRecord]) -> pd.DataFrame:
    """Mean and spread of closed/open accuracy per regime across seeds"""
    rows = [
        {
            "regime": record.regime,
            "seed": record.seed,
            "closed_accuracy": 100 * record.closed_accuracy,
            "open_accuracy": (
                100 * record.metrics.open_accuracy if record.metrics else float("nan")
            ),
        }
        for record in records
    ]
    frame = pd.DataFrame(rows)
    summary = frame.groupby("regime", sort=True).agg(
        runs=("seed", "count"),
        closed_mean=("closed_accuracy", "mean"),
        closed_std=("closed_accuracy", "std"),
        open_mean=("open_accuracy", "mean"),
        open_std=("open_accuracy", "std"),
    )
    return summary.reset_index()


def _write_table(table: pd.DataFrame, stem: Path) -> list[Path]:
    csv_path = stem.with_suffix(".csv")
    txt_path = stem.with_suffix(".txt")
    table.to_csv(csv_path, index=False)
    txt_path.write_text(
        table.to_string(index=False, float_format="{:.2f}".format) + "\n",
        encoding="utf-8",
    )
    return [csv_path, txt_path]


def plot_sweep(parameter: str, table: pd.DataFrame, path: Path) -> Path:
    """Closed and open accuracy panels against the swept parameter"""
    means = table.groupby("value", sort=True).mean(numeric_only=True)
    fig, (closed_ax, open_ax) = plt.subplots(1, 2, figsize=(10, 4))
    for ax, column, title in (
        (closed_ax, "closed_accuracy", "Closed set accuracy"),
        (open_ax, "open_accuracy", "Open set accuracy"),
    ):
        ax.plot(means.index, means[column], "o-", color="steelblue", linewidth=2)
        if (means.index > 0).all():
            ax.set_xscale("log")
        ax.set_xlabel(parameter)
        ax.set_ylabel("Accuracy (%)")
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_latent(
    name: str, coordinates: pd.DataFrame, num_known: int, path: Path
) -> Path:
    """Scatter of 2D coordinates using each class id as its marker.

    Label ``num_known`` marks open samples.
    """
    fig, ax = plt.subplots(figsize=(7, 7))
    cmap = plt.get_cmap("tab20")
    for label, group in coordinates.groupby("label", sort=True):
        ax.scatter(
            group["x"],
            group["y"],
            marker=f"${int(label)}$",
            s=60,
            color="black" if label == num_known else cmap(int(label) % 20),
            label=f"{int(label)} (open)" if label == num_known else str(int(label)),
        )
    ax.set_title(name)
    ax.legend(loc="best", fontsize="small", frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_reports(
    records: list[RunRecord],
    output_dir: Path | str,
    latents: dict[str, pd.DataFrame] | None = None,
    num_known: int | None = None,
) -> list[Path]:
    """Write tables, sweep plots and latent plots; returns the written paths.

    ``latents`` maps a run name to a frame with ``x``, ``y`` and ``label``
    columns.
    """
    if not records:
        raise ValueError("render_reports needs at least one run record")
    output_dir = Path(output_dir)
    written: list[Path] = []
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
        single = [r for r in records if r.sweep_parameter is None]
        if single:
            written += _write_table(table1(single), output_dir / "table1")
            written += _write_table(table2(single), output_dir / "table2")
            written += _write_table(summary_table(single), output_dir / "summary")

        by_parameter: dict[str, list[RunRecord]] = defaultdict(list)
        for record in records:
            if record.sweep_parameter is not None:
                by_parameter[record.sweep_parameter].append(record)
        for parameter, sweep_records in sorted(by_parameter.items()):
            table = sweep_table(sweep_records)
            stem = f"sweep_{parameter_slug(parameter)}"
            csv_path = output_dir / f"{stem}.csv"
            table.to_csv(csv_path, index=False)
            written.append(csv_path)
            png_path = output_dir / f"{stem}.png"
            written.append(plot_sweep(parameter, table, png_path))

        for name, coordinates in sorted((latents or {}).items()):
            k = num_known if num_known is not None else int(coordinates["label"].max())
            written.append(
                plot_latent(name, coordinates, k, output_dir / f"latent_{name}.png")
            )
    except OSError as exc:
        raise ReportWriteError(f"cannot write reports to {output_dir}: {exc}") from exc

    logger.info("wrote %d report files to %s", len(written), output_dir)
    return written
