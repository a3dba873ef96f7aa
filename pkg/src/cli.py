"""Command line entry point: prepare, train, eval, sweep and report."""

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import pandas as pd

from src.cache import read_cache, write_cache
from src.dataset import build_splits, build_synthetic_split
from src.entities import DatasetSplit
from src.errors import (
    DatasetLayoutError,
    ManifestError,
    MissingArtifactError,
    OpenDistillError,
)
from src.evaluation import RunRecord, collect_outputs, evaluate_model
from src.manifest import (
    ExperimentManifest,
    claim_run_dir,
    exclusive_output,
    load_manifest,
)
from src.metrics import embed_2d, latent_separation, threshold_sweep
from src.models import ModelHandle, load_checkpoint
from src.osr import PredictionMode, write_prediction_table
from src.pseudo_openset import generate_pseudo_open_set
from src.reports import (
    OPEN_SET_REGIMES,
    parameter_slug,
    plot_sweep,
    render_reports,
    sweep_table,
)
from src.trainer import apply_override, train
from src.training_log import TrainingMonitor

logger = logging.getLogger(__name__)

RECORD_FILE = "record.jsonl"
CHECKPOINT_FILE = "checkpoint.pt"
REPORT_DIR = "reports"
LOSS_FIELDS = {"alpha", "beta", "gamma", "tau_kd", "tau_crd"}


def _refuse_existing(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ManifestError(f"{path} already exists; rerun with --force to replace it")


def build_dataset(manifest: ExperimentManifest) -> DatasetSplit:
    dataset = manifest.dataset
    if dataset.source == "synthetic":
        return build_synthetic_split(
            n_train_per_class=dataset.synthetic_train_per_class,
            n_test_per_class=dataset.synthetic_test_per_class,
            n_points=dataset.n_points,
            rng_seed=dataset.rng_seed,
            known=dataset.resolved_known(),
            held_out=dataset.resolved_held_out(),
        )
    if dataset.root is None:
        raise DatasetLayoutError(
            "dataset.root is not set; set it in the manifest or export "
            "OPEN_DISTILL_DATASET_ROOT"
        )
    return build_splits(
        dataset.root,
        dataset.resolved_known(),
        n_points=dataset.n_points,
        rng_seed=dataset.rng_seed,
        n_jobs=dataset.n_jobs,
    )


def load_split(manifest: ExperimentManifest) -> DatasetSplit:
    """Cached split with its pseudo open samples attached"""
    for path in (manifest.split_cache, manifest.pseudo_open_cache):
        if not path.exists():
            raise MissingArtifactError(path, "prepare")
    split = read_cache(manifest.split_cache)
    pseudo = read_cache(manifest.pseudo_open_cache)
    return split.with_pseudo_open(pseudo.pseudo_open_train)


def _loss_echo(manifest: ExperimentManifest) -> dict[str, float]:
    return manifest.train.effective_loss().model_dump(include=LOSS_FIELDS)


def _write_records(records: list[RunRecord], path: Path) -> Path:
    path.write_text(
        "".join(record.model_dump_json() + "\n" for record in records), "utf-8"
    )
    return path


def cmd_prepare(manifest: ExperimentManifest, force: bool = False) -> int:
    _refuse_existing(manifest.pseudo_open_cache, force)
    if manifest.split_cache.exists() and not force:
        # same dataset, new mix: keep the sampled clouds
        split = read_cache(manifest.split_cache)
    else:
        split = build_dataset(manifest)
        write_cache(split, manifest.split_cache)
    pseudo = generate_pseudo_open_set(split, manifest.mix)
    write_cache(
        DatasetSplit(
            class_names=split.class_names,
            closed_train=[],
            closed_test=[],
            pseudo_open_train=pseudo,
        ),
        manifest.pseudo_open_cache,
    )
    counts = split.with_pseudo_open(pseudo).counts()
    sys.stdout.write(
        " ".join(f"{name}={count}" for name, count in counts.items()) + "\n"
    )
    return 0


def cmd_train(manifest: ExperimentManifest, force: bool = False) -> int:
    split = load_split(manifest)
    run_dir = claim_run_dir(manifest)
    checkpoint = run_dir / CHECKPOINT_FILE
    _refuse_existing(checkpoint, force)
    steps = run_dir / "steps.jsonl"
    steps.unlink(missing_ok=True)

    with TrainingMonitor.track_steps(steps):
        report = train(
            manifest.resolved_train(), split, checkpoint, manifest.eval.threshold
        )
    (run_dir / "train_record.json").write_text(
        report.model_dump_json(indent=2), "utf-8"
    )
    logger.info(
        "%s: closed accuracy %.4f", manifest.name, report.closed_accuracy
    )
    return 0


def _latent_frames(
    manifest: ExperimentManifest,
    split: DatasetSplit,
    model: ModelHandle,
    features: np.ndarray,
    labels: np.ndarray,
) -> None:
    run_dir = manifest.run_dir
    k = split.num_known
    separation = [
        latent_separation(features, labels, k).assign(reference="open_test")
    ]
    if split.pseudo_open_train:
        closed = collect_outputs(model, split.closed_test)
        pseudo = collect_outputs(
            model, split.pseudo_open_train[: manifest.eval.embedding_samples]
        )
        separation.append(
            latent_separation(
                np.concatenate([closed.features, pseudo.features]),
                np.concatenate([closed.labels, pseudo.labels]),
                k,
            ).assign(reference="pseudo_open")
        )
    pd.concat(separation, ignore_index=True).to_csv(
        run_dir / "latent_separation.csv", index=False
    )

    if manifest.eval.embedding:
        rng = np.random.default_rng(manifest.train.rng_seed)
        n = len(labels)
        keep = np.sort(
            rng.choice(
                n, size=min(n, manifest.eval.embedding_samples), replace=False
            )
        )
        coordinates = embed_2d(features[keep], manifest.train.rng_seed)
        pd.DataFrame(
            {"x": coordinates[:, 0], "y": coordinates[:, 1], "label": labels[keep]}
        ).to_csv(run_dir / "latent.csv", index=False)


def cmd_eval(manifest: ExperimentManifest) -> int:
    run_dir = manifest.run_dir
    checkpoint = run_dir / CHECKPOINT_FILE
    if not checkpoint.exists():
        raise MissingArtifactError(checkpoint, "train")
    split = load_split(manifest)
    model = load_checkpoint(checkpoint)
    result = evaluate_model(model, split, manifest.eval.threshold)

    write_prediction_table(result.predictions, run_dir / "predictions.csv")
    labels = result.outputs.labels
    if split.open_test:
        if result.mode is PredictionMode.THRESHOLD:
            threshold_sweep(
                result.outputs.probs, labels.tolist(), manifest.eval.sweep_thresholds
            ).to_csv(run_dir / "thresholds.csv", index=False)
        _latent_frames(manifest, split, model, result.outputs.features, labels)

    record = RunRecord.from_evaluation(
        manifest.name, model, result, loss=_loss_echo(manifest)
    )
    _write_records([record], run_dir / RECORD_FILE)
    logger.info("%s: %s", manifest.name, record.model_dump_json(exclude={"created_at"}))
    return 0


def cmd_sweep(
    manifest: ExperimentManifest,
    parameter: str | None = None,
    values: list[float] | None = None,
    force: bool = False,
) -> int:
    if parameter is None and manifest.sweep is not None:
        parameter = manifest.sweep.parameter
        values = values or manifest.sweep.values
    if not parameter or not values:
        raise ManifestError(
            "sweep needs --parameter and --values or a manifest sweep section"
        )

    split = load_split(manifest)
    run_dir = claim_run_dir(manifest)
    slug = parameter_slug(parameter)
    base = manifest.resolved_train()
    records = []
    for value in values:
        try:
            config = apply_override(base, parameter, value)
        except ValueError as exc:
            raise ManifestError(f"cannot sweep {parameter}={value}: {exc}") from exc
        value_dir = run_dir / f"sweep_{slug}" / f"{value:g}"
        checkpoint = value_dir / CHECKPOINT_FILE
        _refuse_existing(checkpoint, force)
        with TrainingMonitor.track_steps(value_dir / "steps.jsonl"):
            train(config, split, checkpoint, manifest.eval.threshold)
        model = load_checkpoint(checkpoint)
        result = evaluate_model(model, split, manifest.eval.threshold)
        records.append(
            RunRecord.from_evaluation(
                manifest.name,
                model,
                result,
                loss=config.effective_loss().model_dump(include=LOSS_FIELDS),
                sweep_parameter=parameter,
                sweep_value=float(value),
            )
        )
        logger.info(
            "%s=%g: closed accuracy %.4f", parameter, value, result.closed_accuracy
        )

    _write_records(records, run_dir / f"sweep_{slug}.jsonl")
    plot_sweep(parameter, sweep_table(records), run_dir / f"sweep_{slug}.png")
    return 0


def collect_records(output_dir: Path) -> list[RunRecord]:
    paths = sorted(output_dir.rglob(RECORD_FILE))
    paths += sorted(output_dir.rglob("sweep_*.jsonl"))
    return [
        RunRecord.model_validate_json(line)
        for path in paths
        for line in path.read_text("utf-8").splitlines()
        if line.strip()
    ]


def cmd_report(manifest: ExperimentManifest) -> int:
    output_dir = manifest.output_path
    records = collect_records(output_dir)
    if not records:
        raise MissingArtifactError(output_dir / "<name>" / RECORD_FILE, "eval")
    latents = {
        "_".join(path.parent.relative_to(output_dir).parts): pd.read_csv(path)
        for path in sorted(output_dir.rglob("latent.csv"))
    }
    num_known = min(
        record.num_classes - (record.regime in OPEN_SET_REGIMES) for record in records
    )
    written = render_reports(records, output_dir / REPORT_DIR, latents, num_known)
    sys.stdout.write("".join(f"{path}\n" for path in written))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", type=Path, required=True, help="Experiment JSON")
    common.add_argument(
        "--seed", type=int, default=None, help="Override train.rng_seed"
    )
    common.add_argument(
        "--force", action="store_true", help="Replace existing artifacts"
    )
    common.add_argument(
        "--desk-scale",
        action="store_true",
        help="Synthetic primitives and eval.desk_epochs epochs",
    )

    parser = argparse.ArgumentParser(
        prog="python -m src",
        description="Point cloud distillation and open set recognition experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="Build split and pseudo caches")
    sub.add_parser("train", parents=[common], help="Train the manifest's regime")
    sub.add_parser("eval", parents=[common], help="Evaluate a trained checkpoint")
    sweep = sub.add_parser("sweep", parents=[common], help="Train over values")
    sweep.add_argument("--parameter", default=None, help="Dotted train parameter")
    sweep.add_argument("--values", type=float, nargs="+", default=None)
    sub.add_parser("report", parents=[common], help="Aggregate records into reports")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    try:
        manifest = load_manifest(args.manifest)
        if args.desk_scale:
            manifest = manifest.desk_scale()
        if args.seed is not None:
            manifest = manifest.with_seed(args.seed)

        with exclusive_output(manifest.output_path):
            match args.command:
                case "prepare":
                    return cmd_prepare(manifest, args.force)
                case "train":
                    return cmd_train(manifest, args.force)
                case "eval":
                    return cmd_eval(manifest)
                case "sweep":
                    return cmd_sweep(manifest, args.parameter, args.values, args.force)
                case "report":
                    return cmd_report(manifest)
    except OpenDistillError as exc:
        logger.error("%s failed: %s", args.command, exc)
        sys.stderr.write(f"error: {exc}\n")
        return 1
    return 1
