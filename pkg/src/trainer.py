"""
Training regimes for teacher, scratch/distilled students and open set students,
plus grid search over configuration parameters.
"""

import itertools
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Any, ClassVar, Literal

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from src.entities import DatasetSplit, LabeledSample
from src.errors import (
    IncompatibleTeacherError,
    MissingArtifactError,
    PseudoOpenSetError,
    TrainingDivergedError,
)
from src.evaluation import evaluate_model
from src.losses import CrdLoss, LossConfig, joint_loss
from src.metrics import OsrMetrics
from src.models import (
    Architecture,
    ModelHandle,
    build_model,
    forward,
    load_checkpoint,
    save_checkpoint,
    transform_regularizer,
)
from src.training_log import StepLog, TrainingMonitor

logger = logging.getLogger(__name__)

JITTER_SIGMA = 0.01
JITTER_CLIP = 0.05


class Regime(str, Enum):
    TEACHER_CE = "teacher_ce"
    STUDENT_CE = "student_ce"
    STUDENT_KD = "student_kd"
    STUDENT_CRD_CE = "student_crd_ce"
    STUDENT_CE_KD = "student_ce_kd"
    STUDENT_KD_CRD_CE = "student_kd_crd_ce"
    STUDENT_OPENSET = "student_openset"
    STUDENT_JOINT_KD_OSR = "student_joint_kd_osr"

    @property
    def terms(self) -> frozenset[str]:
        return REGIME_TERMS[self]

    @property
    def arch(self) -> Architecture:
        return Architecture.TEACHER if self is Regime.TEACHER_CE else Architecture.STUDENT

    @property
    def open_set(self) -> bool:
        """Whether the model gets a k+1-th output trained on pseudo open samples"""
        return self in (Regime.STUDENT_OPENSET, Regime.STUDENT_JOINT_KD_OSR)

    @property
    def needs_teacher(self) -> bool:
        return bool(self.terms & {"kd", "crd"})


REGIME_TERMS: dict[Regime, frozenset[str]] = {
    Regime.TEACHER_CE: frozenset({"ce", "reg"}),
    Regime.STUDENT_CE: frozenset({"ce"}),
    Regime.STUDENT_KD: frozenset({"kd"}),
    Regime.STUDENT_CRD_CE: frozenset({"crd", "ce"}),
    Regime.STUDENT_CE_KD: frozenset({"ce", "kd"}),
    Regime.STUDENT_KD_CRD_CE: frozenset({"kd", "crd", "ce"}),
    Regime.STUDENT_OPENSET: frozenset({"ce"}),
    Regime.STUDENT_JOINT_KD_OSR: frozenset({"kd", "crd", "ce"}),
}


class Objective(str, Enum):
    CLOSED_ACC = "closed_acc"
    F_MEASURE = "f_measure"


class TrainConfig(BaseModel):
    """One training run. Relative teacher paths are resolved by the caller."""

    model_config: ClassVar[ConfigDict] = ConfigDict(frozen=True)

    regime: Regime = Regime.STUDENT_CE
    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=32, ge=2)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    lr_step: int = Field(default=20, ge=1, description="Epochs between LR decays")
    lr_gamma: float = Field(default=0.5, gt=0.0, le=1.0)
    optimizer: Literal["adam", "sgd"] = "adam"
    momentum: float = Field(default=0.9, ge=0.0, description="SGD only")
    augment: bool = True
    rng_seed: int = 0
    loss: LossConfig = LossConfig()
    teacher_checkpoint: str | None = None
    num_workers: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _teacher_for_distillation(self) -> "TrainConfig":
        if self.regime.needs_teacher and not self.teacher_checkpoint:
            raise ValueError(f"regime {self.regime.value} requires teacher_checkpoint")
        return self

    def effective_loss(self) -> LossConfig:
        """Loss weights with the terms this regime does not use set to zero"""
        terms = self.regime.terms
        return self.loss.model_copy(
            update={
                "alpha": self.loss.alpha if "kd" in terms else 0.0,
                "beta": self.loss.beta if "crd" in terms else 0.0,
                "gamma": self.loss.gamma if "ce" in terms else 0.0,
            }
        )


class EpochLosses(BaseModel):
    """Per-epoch means of the loss components"""

    epoch: int
    ce: float
    kd: float
    crd: float
    reg: float
    total: float
    lr: float


class TrainReport(BaseModel):
    regime: Regime
    closed_accuracy: float
    final_metrics: OsrMetrics | None = None
    loss_curves: list[EpochLosses]
    checkpoint_path: str | None = None
    config_echo: dict[str, Any]


def augment_batch(points: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Random rotation about the vertical (z) axis plus clipped Gaussian jitter"""
    batch = points.shape[0]
    angles = torch.rand(batch, generator=generator, dtype=points.dtype) * 2 * math.pi
    cos, sin = torch.cos(angles), torch.sin(angles)
    zeros, ones = torch.zeros_like(angles), torch.ones_like(angles)
    rotation = torch.stack(
        [
            torch.stack([cos, -sin, zeros], dim=1),
            torch.stack([sin, cos, zeros], dim=1),
            torch.stack([zeros, zeros, ones], dim=1),
        ],
        dim=1,
    )
    rotated = points @ rotation.transpose(1, 2)
    noise = torch.randn(points.shape, generator=generator, dtype=points.dtype)
    return rotated + (JITTER_SIGMA * noise).clamp(-JITTER_CLIP, JITTER_CLIP)


def _stack(samples: list[LabeledSample]) -> tuple[torch.Tensor, torch.Tensor]:
    points = torch.from_numpy(np.stack([s.cloud.points for s in samples]))
    labels = torch.tensor([s.label for s in samples], dtype=torch.long)
    return points, labels


def training_samples(config: TrainConfig, split: DatasetSplit) -> list[LabeledSample]:
    """Closed training samples, plus pseudo open samples for open set regimes"""
    if not config.regime.open_set:
        return list(split.closed_train)
    if not split.pseudo_open_train:
        raise PseudoOpenSetError(
            f"regime {config.regime.value} needs pseudo open training samples; "
            "run `python -m src prepare` with a mix config first"
        )
    return list(split.closed_train) + list(split.pseudo_open_train)


def load_teacher(path: Path | str, num_known: int) -> ModelHandle:
    """Load and freeze a k-class teacher"""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, "train")
    teacher = load_checkpoint(path)
    if teacher.num_classes != num_known:
        raise IncompatibleTeacherError(
            f"teacher {path} has {teacher.num_classes} classes, split has {num_known}"
        )
    return teacher.freeze()


class Trainer:
    """Runs one regime on one split"""

    def __init__(self, config: TrainConfig, split: DatasetSplit):
        self.config = config
        self.split = split
        self.samples = training_samples(config, split)
        self.loss_cfg = config.effective_loss()
        k = split.num_known
        self.num_outputs = k + 1 if config.regime.open_set else k

        self.model = build_model(config.regime.arch, self.num_outputs, config.rng_seed)
        self.model.metadata.update(regime=config.regime.value)
        self.teacher = (
            load_teacher(config.teacher_checkpoint, k)
            if config.regime.needs_teacher
            else None
        )

        self.crd: CrdLoss | None = None
        if "crd" in config.regime.terms:
            crd_cfg = self.loss_cfg.for_dataset(len(self.samples))
            self.crd = CrdLoss(
                self.model.feature_dim,
                self.teacher.feature_dim,
                crd_cfg,
                seed=config.rng_seed + 2,
            )

    def _optimizer(self) -> torch.optim.Optimizer:
        params = self.model.parameters()
        if self.crd is not None:
            params += list(self.crd.parameters())
        if self.config.optimizer == "sgd":
            return torch.optim.SGD(
                params, lr=self.config.learning_rate, momentum=self.config.momentum
            )
        return torch.optim.Adam(params, lr=self.config.learning_rate)

    def _loader(self) -> DataLoader:
        points, labels = _stack(self.samples)
        indices = torch.arange(len(self.samples))
        return DataLoader(
            TensorDataset(points, labels, indices),
            batch_size=self.config.batch_size,
            shuffle=True,
            drop_last=len(self.samples) > self.config.batch_size,
            num_workers=self.config.num_workers,
            generator=torch.Generator().manual_seed(self.config.rng_seed),
        )

    def step_loss(
        self, points: torch.Tensor, labels: torch.Tensor, indices: torch.Tensor
    ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        """Total loss and components for one batch"""
        out = forward(self.model, points)
        teacher_out = None
        if self.teacher is not None:
            with torch.no_grad():
                teacher_out = forward(self.teacher, points)
        total, parts = joint_loss(
            out, teacher_out, labels, self.loss_cfg, self.crd, indices
        )
        reg = total.new_zeros(())
        if "reg" in self.config.regime.terms and out.feature_transforms:
            reg = self.loss_cfg.transform_reg_weight * transform_regularizer(
                out.feature_transforms
            )
            total = total + reg
        return total, {**parts, "reg": reg}

    def fit(self) -> list[EpochLosses]:
        config = self.config
        optimizer = self._optimizer()
        scheduler = torch.optim.lr_scheduler.StepLR(
            optimizer, step_size=config.lr_step, gamma=config.lr_gamma
        )
        loader = self._loader()
        augment_generator = torch.Generator().manual_seed(config.rng_seed + 1)
        curves: list[EpochLosses] = []
        step = 0

        self.model.network.train()
        if self.crd is not None:
            self.crd.train()

        progress = tqdm(
            range(1, config.epochs + 1),
            desc=config.regime.value,
            disable=not logger.isEnabledFor(logging.INFO),
        )
        for epoch in progress:
            lr = optimizer.param_groups[0]["lr"]
            sums = dict.fromkeys(("ce", "kd", "crd", "reg", "total"), 0.0)
            batches = 0
            for points, labels, indices in loader:
                if config.augment:
                    points = augment_batch(points, augment_generator)
                total, parts = self.step_loss(points, labels, indices)
                if not torch.isfinite(total):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, step {step}: "
                        + ", ".join(f"{k}={float(v):.4g}" for k, v in parts.items())
                    )
                optimizer.zero_grad()
                total.backward()
                optimizer.step()

                values = {name: float(value) for name, value in parts.items()}
                values["total"] = float(total)
                for name in sums:
                    sums[name] += values[name]
                batches += 1
                TrainingMonitor.log_step(
                    StepLog(step=step, epoch=epoch, lr=lr, **values)
                )
                step += 1
            scheduler.step()

            means = {name: value / max(batches, 1) for name, value in sums.items()}
            curves.append(EpochLosses(epoch=epoch, lr=lr, **means))
            progress.set_postfix(loss=f"{means['total']:.4f}")
            logger.debug("epoch %d: %s", epoch, means)
        return curves


def train(
    config: TrainConfig,
    split: DatasetSplit,
    checkpoint_path: Path | str | None = None,
    threshold: float = 0.5,
) -> TrainReport:
    """Train ``config.regime`` on ``split`` and evaluate on its test partitions.

    Global torch RNG state is restored afterwards; the run depends only on
    ``config.rng_seed``.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.rng_seed)
        trainer = Trainer(config, split)
        logger.info(
            "training %s (%s, %d outputs) on %d samples for %d epochs",
            config.regime.value,
            trainer.model.arch.value,
            trainer.num_outputs,
            len(trainer.samples),
            config.epochs,
        )
        curves = trainer.fit()

    result = evaluate_model(trainer.model, split, threshold)
    written = None
    if checkpoint_path is not None:
        written = save_checkpoint(
            trainer.model, checkpoint_path, epochs=config.epochs, rng_seed=config.rng_seed
        )
        logger.info("checkpoint written to %s", written)

    return TrainReport(
        regime=config.regime,
        closed_accuracy=result.closed_accuracy,
        final_metrics=result.metrics,
        loss_curves=curves,
        checkpoint_path=str(written) if written else None,
        config_echo=config.model_dump(mode="json"),
    )


def apply_override(config: TrainConfig, parameter: str, value: Any) -> TrainConfig:
    """Copy of ``config`` with a dotted parameter (e.g. ``loss.tau_kd``) replaced"""
    data = config.model_dump()
    target = data
    *parents, leaf = parameter.split(".")
    for part in parents:
        if not isinstance(target.get(part), dict):
            raise ValueError(f"unknown config parameter {parameter!r}")
        target = target[part]
    if leaf not in target:
        raise ValueError(f"unknown config parameter {parameter!r}")
    target[leaf] = value
    return TrainConfig.model_validate(data)


def grid_search(
    base: TrainConfig,
    grid: dict[str, list[Any]],
    split: DatasetSplit,
    objective: Objective | str = Objective.CLOSED_ACC,
    limit: int = 64,
    search_epochs: int | None = None,
) -> tuple[TrainConfig, pd.DataFrame]:
    """Train every combination of ``grid`` and return the best config and all results.

    Parameters are enumerated in sorted name order; ties go to the earliest
    combination. ``search_epochs`` shortens each search run; the returned
    config keeps the base epoch count.
    """
    objective = Objective(objective)
    if not grid or any(not values for values in grid.values()):
        raise ValueError("grid must name at least one parameter with values")
    names = sorted(grid)
    size = math.prod(len(grid[name]) for name in names)
    if size > limit:
        raise ValueError(f"grid has {size} combinations, limit is {limit}")

    rows = []
    best: TrainConfig | None = None
    best_score = -math.inf
    for combination in itertools.product(*(grid[name] for name in names)):
        candidate = base
        for name, value in zip(names, combination, strict=True):
            candidate = apply_override(candidate, name, value)
        run_config = candidate
        if search_epochs is not None:
            run_config = candidate.model_copy(update={"epochs": search_epochs})

        report = train(run_config, split)
        f_measure = report.final_metrics.f_measure if report.final_metrics else None
        if objective is Objective.F_MEASURE and f_measure is None:
            raise ValueError("f_measure objective needs an open test partition")
        score = report.closed_accuracy if objective is Objective.CLOSED_ACC else f_measure
        rows.append(
            {
                **dict(zip(names, combination, strict=True)),
                "closed_accuracy": report.closed_accuracy,
                "f_measure": f_measure,
            }
        )
        logger.info("grid point %s -> %s %.4f", rows[-1], objective.value, score)
        if score > best_score:
            best, best_score = candidate, score

    return best, pd.DataFrame(rows)
