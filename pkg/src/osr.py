"""Open set predictions: thresholded k-way softmax and native (k+1)-way argmax."""

from enum import Enum
from pathlib import Path
from typing import ClassVar

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from src.errors import InvalidProbabilityError

DEFAULT_THRESHOLD = 0.5
_SUM_TOLERANCE = 1e-4


class PredictionMode(str, Enum):
    THRESHOLD = "threshold"
    NATIVE_K_PLUS_1 = "native_k_plus_1"


class OsrPrediction(BaseModel):
    """Predicted class in ``{0..k}`` with the winning probability"""

    model_config: ClassVar[ConfigDict] = ConfigDict(frozen=True)

    predicted_class: int
    max_prob: float
    mode: PredictionMode


def _validate_probs(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] < 1:
        raise InvalidProbabilityError(
            f"expected probability rows, got shape {probs.shape}"
        )
    if not np.isfinite(probs).all() or (probs < 0).any():
        raise InvalidProbabilityError("probabilities must be finite and >= 0")
    sums = probs.sum(axis=1)
    if (np.abs(sums - 1.0) > _SUM_TOLERANCE).any():
        bad = sums[np.abs(sums - 1.0) > _SUM_TOLERANCE][:3]
        raise InvalidProbabilityError(f"probability rows must sum to 1, got {bad}")
    return probs


def threshold_classes(
    probs: np.ndarray, threshold: float = DEFAULT_THRESHOLD
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized rule: argmax over k classes, class ``k`` when ``max < threshold``.

    ``np.argmax`` returns the lowest index on ties.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    probs = _validate_probs(probs)
    k = probs.shape[1]
    max_prob = probs.max(axis=1)
    predicted = np.where(max_prob < threshold, k, probs.argmax(axis=1))
    return predicted, max_prob


def native_classes(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized plain argmax over all k+1 outputs"""
    probs = _validate_probs(probs)
    return probs.argmax(axis=1), probs.max(axis=1)


def threshold_predict(
    probs: np.ndarray, threshold: float = DEFAULT_THRESHOLD
) -> OsrPrediction:
    predicted, max_prob = threshold_classes(np.atleast_2d(probs), threshold)
    return OsrPrediction(
        predicted_class=int(predicted[0]),
        max_prob=float(max_prob[0]),
        mode=PredictionMode.THRESHOLD,
    )


def native_predict(probs: np.ndarray) -> OsrPrediction:
    predicted, max_prob = native_classes(np.atleast_2d(probs))
    return OsrPrediction(
        predicted_class=int(predicted[0]),
        max_prob=float(max_prob[0]),
        mode=PredictionMode.NATIVE_K_PLUS_1,
    )


def predict_batch(
    probs: np.ndarray, num_known: int, threshold: float = DEFAULT_THRESHOLD
) -> list[OsrPrediction]:
    """Threshold mode for k-wide rows, native mode for (k+1)-wide rows"""
    probs = np.atleast_2d(probs)
    if probs.shape[1] == num_known:
        predicted, max_prob = threshold_classes(probs, threshold)
        mode = PredictionMode.THRESHOLD
    elif probs.shape[1] == num_known + 1:
        predicted, max_prob = native_classes(probs)
        mode = PredictionMode.NATIVE_K_PLUS_1
    else:
        raise InvalidProbabilityError(
            f"rows have {probs.shape[1]} entries, expected {num_known} or "
            f"{num_known + 1}"
        )
    return [
        OsrPrediction(predicted_class=int(c), max_prob=float(p), mode=mode)
        for c, p in zip(predicted, max_prob, strict=True)
    ]


def prediction_table(
    sample_ids: list[str], truths: list[int], predictions: list[OsrPrediction]
) -> pd.DataFrame:
    """One row per sample: id, true label, predicted class, max probability"""
    return pd.DataFrame(
        {
            "sample_id": sample_ids,
            "true_label": truths,
            "predicted_class": [p.predicted_class for p in predictions],
            "max_prob": [p.max_prob for p in predictions],
        }
    )


def write_prediction_table(table: pd.DataFrame, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False)
    return path


def read_prediction_table(path: Path | str) -> pd.DataFrame:
    return pd.read_csv(path)
