"""Model evaluation on the closed and open test partitions, plus result records."""

from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, Field

from src.entities import DatasetSplit, LabeledSample
from src.metrics import OsrMetrics, compute_metrics, confusion_matrix
from src.models import PENULTIMATE_DIM, ModelHandle, forward
from src.osr import PredictionMode, predict_batch, prediction_table


@dataclass
class ModelOutputs:
    sample_ids: list[str]
    labels: np.ndarray
    probs: np.ndarray
    features: np.ndarray


@dataclass
class EvaluationResult:
    closed_accuracy: float
    metrics: OsrMetrics | None
    mode: PredictionMode
    threshold: float
    outputs: ModelOutputs
    predictions: pd.DataFrame


def collect_outputs(
    model: ModelHandle, samples: list[LabeledSample], batch_size: int = 64
) -> ModelOutputs:
    """Softmax probabilities and penultimate features in eval mode"""
    model.network.eval()
    probs, features = [], []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            batch = torch.from_numpy(np.stack([s.cloud.points for s in chunk]))
            out = forward(model, batch)
            probs.append(torch.softmax(out.logits.double(), dim=1).numpy())
            features.append(out.penultimate.double().numpy())
    width = model.num_classes
    return ModelOutputs(
        sample_ids=[s.sample_id for s in samples],
        labels=np.asarray([s.label for s in samples], dtype=np.int64),
        probs=np.concatenate(probs) if probs else np.empty((0, width)),
        features=(
            np.concatenate(features) if features else np.empty((0, PENULTIMATE_DIM))
        ),
    )


def evaluate_model(
    model: ModelHandle, split: DatasetSplit, threshold: float = 0.5
) -> EvaluationResult:
    """Closed accuracy by plain argmax, and open set metrics when an open test set exists.

    k-way models are scored with the threshold rule, (k+1)-way models natively.
    """
    k = split.num_known
    outputs = collect_outputs(model, split.closed_test + split.open_test)
    n_closed = len(split.closed_test)

    closed_probs = outputs.probs[:n_closed]
    closed_accuracy = (
        float((closed_probs.argmax(axis=1) == outputs.labels[:n_closed]).mean())
        if n_closed
        else 0.0
    )

    predictions = (
        predict_batch(outputs.probs, k, threshold) if len(outputs.labels) else []
    )
    mode = (
        PredictionMode.THRESHOLD
        if model.num_classes == k
        else PredictionMode.NATIVE_K_PLUS_1
    )
    metrics = None
    if split.open_test:
        cm = confusion_matrix(predictions, outputs.labels.tolist(), k)
        metrics = compute_metrics(cm, k)

    return EvaluationResult(
        closed_accuracy=closed_accuracy,
        metrics=metrics,
        mode=mode,
        threshold=threshold,
        outputs=outputs,
        predictions=prediction_table(
            outputs.sample_ids, outputs.labels.tolist(), predictions
        ),
    )


class RunRecord(BaseModel):
    """Machine-readable result of one evaluated run; one JSON line per record"""

    name: str
    regime: str
    arch: str
    num_classes: int
    seed: int
    loss: dict[str, Any] = Field(default_factory=dict)
    sweep_parameter: str | None = None
    sweep_value: float | None = None
    closed_accuracy: float
    metrics: OsrMetrics | None = None
    threshold: float
    mode: PredictionMode
    created_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))

    @classmethod
    def from_evaluation(
        cls,
        name: str,
        model: ModelHandle,
        result: EvaluationResult,
        loss: dict[str, Any] | None = None,
        sweep_parameter: str | None = None,
        sweep_value: float | None = None,
    ) -> "RunRecord":
        return cls(
            name=name,
            regime=str(model.metadata.get("regime", model.arch.value)),
            arch=model.arch.value,
            num_classes=model.num_classes,
            seed=model.seed,
            loss=loss or {},
            sweep_parameter=sweep_parameter,
            sweep_value=sweep_value,
            closed_accuracy=result.closed_accuracy,
            metrics=result.metrics,
            threshold=result.threshold,
            mode=result.mode,
        )
