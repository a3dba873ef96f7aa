"""
Experiment manifests: one JSON file per experiment naming the dataset, the
pseudo open mix, the training run and evaluation settings.
"""

import hashlib
import json
import os
from collections.abc import Iterator
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import ClassVar, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.dataset import MODELNET10_CLASSES, SYNTHETIC_HELD_OUT, SYNTHETIC_KNOWN
from src.entities import DEFAULT_NUM_POINTS
from src.errors import ManifestError
from src.pseudo_openset import MixConfig
from src.trainer import TrainConfig

DATASET_ROOT_ENV = "OPEN_DISTILL_DATASET_ROOT"
LOCK_FILE = ".lock"
FINGERPRINT_LENGTH = 12


def fingerprint(config: BaseModel, exclude: set[str] | None = None) -> str:
    """Short stable digest of a config, used to key cache files"""
    payload = json.dumps(config.model_dump(mode="json", exclude=exclude), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:FINGERPRINT_LENGTH]


class DatasetConfig(BaseModel):
    """Where clouds come from and how they are sampled"""

    model_config: ClassVar[ConfigDict] = ConfigDict(frozen=True)

    source: Literal["modelnet", "synthetic"] = "modelnet"
    root: str | None = Field(
        default=None, description=f"ModelNet root; overridden by ${DATASET_ROOT_ENV}"
    )
    known_classes: list[str] | None = Field(
        default=None, description="Defaults to ModelNet10 or the synthetic knowns"
    )
    held_out_classes: list[str] | None = Field(
        default=None, description="Synthetic source only"
    )
    n_points: int = Field(default=DEFAULT_NUM_POINTS, ge=1)
    rng_seed: int = 0
    n_jobs: int = Field(default=1, description="joblib workers for mesh sampling")
    synthetic_train_per_class: int = Field(default=500, ge=1)
    synthetic_test_per_class: int = Field(default=100, ge=1)

    def resolved_known(self) -> list[str]:
        if self.known_classes is not None:
            return list(self.known_classes)
        return list(SYNTHETIC_KNOWN if self.source == "synthetic" else MODELNET10_CLASSES)

    def resolved_held_out(self) -> list[str]:
        if self.held_out_classes is not None:
            return list(self.held_out_classes)
        return list(SYNTHETIC_HELD_OUT)


class EvalConfig(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(frozen=True)

    threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    sweep_thresholds: list[float] = Field(
        default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    )
    embedding: bool = Field(default=True, description="Write 2D latent coordinates")
    embedding_samples: int = Field(default=500, ge=2)
    desk_epochs: int = Field(default=10, ge=1, description="Epochs under --desk-scale")

    @field_validator("sweep_thresholds")
    @classmethod
    def _thresholds_in_range(cls, values: list[float]) -> list[float]:
        if any(not 0.0 <= t <= 1.0 for t in values):
            raise ValueError(f"sweep thresholds must lie in [0, 1], got {values}")
        return values


class SweepConfig(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(frozen=True)

    parameter: str = Field(description="Dotted train parameter, e.g. loss.tau_kd")
    values: list[float] = Field(min_length=1)


class ExperimentManifest(BaseModel):
    """A single experiment; ``name`` identifies its run directory"""

    model_config: ClassVar[ConfigDict] = ConfigDict(frozen=True)

    name: str = Field(pattern=r"^[A-Za-z0-9_.-]+$")
    output_dir: str = "runs"
    dataset: DatasetConfig = DatasetConfig()
    mix: MixConfig = MixConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    sweep: SweepConfig | None = None

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    @property
    def cache_dir(self) -> Path:
        """One directory per sampled dataset; worker count does not change the clouds"""
        key = fingerprint(self.dataset, exclude={"n_jobs"})
        return self.output_path / "cache" / f"{self.dataset.source}-{key}"

    @property
    def split_cache(self) -> Path:
        return self.cache_dir / "split.bin"

    @property
    def pseudo_open_cache(self) -> Path:
        return self.cache_dir / f"pseudo_open-{fingerprint(self.mix)}.bin"

    @property
    def run_dir(self) -> Path:
        return self.output_path / self.name / f"seed{self.train.rng_seed}"

    def teacher_path(self) -> Path | None:
        """Teacher checkpoint with ``{seed}`` filled in; relative paths live under output_dir"""
        if self.train.teacher_checkpoint is None:
            return None
        path = Path(self.train.teacher_checkpoint.format(seed=self.train.rng_seed))
        return path if path.is_absolute() else self.output_path / path

    def resolved_train(self) -> TrainConfig:
        teacher = self.teacher_path()
        return self.train.model_copy(
            update={"teacher_checkpoint": str(teacher) if teacher else None}
        )

    def with_seed(self, seed: int) -> "ExperimentManifest":
        return self.model_copy(
            update={"train": self.train.model_copy(update={"rng_seed": seed})}
        )

    def desk_scale(self) -> "ExperimentManifest":
        """Synthetic primitives and reduced epochs, written under ``<output_dir>/desk``"""
        dataset = self.dataset.model_copy(
            update={
                "source": "synthetic",
                "known_classes": None,
                "held_out_classes": None,
                "root": None,
            }
        )
        train = self.train.model_copy(update={"epochs": self.eval.desk_epochs})
        return self.model_copy(
            update={
                "dataset": dataset,
                "train": train,
                "output_dir": str(self.output_path / "desk"),
            }
        )


def load_manifest(path: Path | str) -> ExperimentManifest:
    """Read and validate a manifest, applying the dataset root environment override"""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} does not exist")
    try:
        manifest = ExperimentManifest.model_validate_json(path.read_text("utf-8"))
    except ValidationError as exc:
        raise ManifestError(f"invalid manifest {path}:\n{exc}") from exc

    root = os.environ.get(DATASET_ROOT_ENV)
    if root:
        dataset = manifest.dataset.model_copy(update={"root": root})
        manifest = manifest.model_copy(update={"dataset": dataset})
    return manifest


def claim_run_dir(manifest: ExperimentManifest) -> Path:
    """Create the run directory, refusing one that belongs to a different manifest"""
    run_dir = manifest.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    stamp = run_dir / "manifest.json"
    current = manifest.model_dump(mode="json")
    if stamp.exists():
        previous = json.loads(stamp.read_text("utf-8"))
        if previous != current:
            raise ManifestError(
                f"experiment name {manifest.name!r} is already used in "
                f"{manifest.output_dir} by a different manifest ({stamp})"
            )
    else:
        stamp.write_text(json.dumps(current, indent=2, sort_keys=True), "utf-8")
    return run_dir


@contextmanager
def exclusive_output(output_dir: Path | str) -> Iterator[Path]:
    """Hold ``<output_dir>/.lock`` for the duration of a command"""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    lock_path = output_dir / LOCK_FILE
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ManifestError(
            f"{output_dir} is busy: another command holds {lock_path}"
        ) from None
    with os.fdopen(fd, "w", encoding="utf-8") as handle:
        json.dump({"pid": os.getpid(), "time": datetime.now(timezone.utc).isoformat()}, handle)
    try:
        yield lock_path
    finally:
        lock_path.unlink(missing_ok=True)
