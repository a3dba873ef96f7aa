"""
Open set evaluation metrics, threshold sweeps, 2D embeddings and latent
separation statistics.
"""

from collections.abc import Sequence
from typing import ClassVar

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from sklearn.manifold import TSNE
from sklearn.metrics import confusion_matrix as sklearn_confusion_matrix

from src.osr import OsrPrediction, threshold_classes

TSNE_PERPLEXITY = 30.0
TSNE_ITERATIONS = 1000


class OsrMetrics(BaseModel):
    """Accuracies and F-measures as fractions; ``as_percent`` gives table values"""

    model_config: ClassVar[ConfigDict] = ConfigDict(frozen=True)

    f_measure: float = Field(ge=0.0, le=1.0, description="Macro F1 over k+1 classes")
    total_accuracy: float = Field(ge=0.0, le=1.0)
    closed_accuracy: float = Field(ge=0.0, le=1.0)
    open_accuracy: float = Field(ge=0.0, le=1.0)
    binary_f_measure: float = Field(
        default=0.0, ge=0.0, le=1.0, description="Known vs unknown F1, unknown positive"
    )
    n_closed: int = 0
    n_open: int = 0

    def as_percent(self) -> dict[str, float]:
        return {
            "F-measure": 100 * self.f_measure,
            "Total Accuracy": 100 * self.total_accuracy,
            "Acc closed set": 100 * self.closed_accuracy,
            "Acc open set": 100 * self.open_accuracy,
            "Binary F-measure": 100 * self.binary_f_measure,
        }


def confusion_matrix(
    predictions: Sequence[OsrPrediction | int], truths: Sequence[int], k: int
) -> np.ndarray:
    """``(k+1) x (k+1)`` counts; rows are truths, columns predictions"""
    if len(predictions) != len(truths):
        raise ValueError(
            f"{len(predictions)} predictions for {len(truths)} ground-truth labels"
        )
    predicted = np.asarray(
        [p.predicted_class if isinstance(p, OsrPrediction) else p for p in predictions],
        dtype=np.int64,
    )
    truth = np.asarray(truths, dtype=np.int64)
    for name, values in (("prediction", predicted), ("label", truth)):
        if values.size and (values.min() < 0 or values.max() > k):
            raise ValueError(f"{name}s must lie in [0, {k}]")
    if truth.size == 0:
        return np.zeros((k + 1, k + 1), dtype=np.int64)
    return sklearn_confusion_matrix(truth, predicted, labels=np.arange(k + 1)).astype(
        np.int64
    )


def _ratio(numerator: float, denominator: float) -> float:
    return float(numerator / denominator) if denominator else 0.0


def _f1(tp: float, predicted: float, actual: float) -> float:
    precision = _ratio(tp, predicted)
    recall = _ratio(tp, actual)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def compute_metrics(cm: np.ndarray, k: int) -> OsrMetrics:
    """Closed/open/total accuracy plus macro and binary F-measures"""
    cm = np.asarray(cm, dtype=np.int64)
    if cm.shape != (k + 1, k + 1):
        raise ValueError(f"confusion matrix must be {(k + 1, k + 1)}, got {cm.shape}")
    total = int(cm.sum())
    if total == 0:
        raise ValueError("cannot compute metrics from an empty confusion matrix")

    diagonal = np.diag(cm)
    row_sums = cm.sum(axis=1)
    col_sums = cm.sum(axis=0)
    n_closed = int(row_sums[:k].sum())
    n_open = int(row_sums[k])

    per_class = [_f1(diagonal[c], col_sums[c], row_sums[c]) for c in range(k + 1)]

    known_as_unknown = int(cm[:k, k].sum())
    binary = _f1(cm[k, k], cm[k, k] + known_as_unknown, n_open)

    return OsrMetrics(
        f_measure=float(np.mean(per_class)),
        total_accuracy=_ratio(diagonal.sum(), total),
        closed_accuracy=_ratio(diagonal[:k].sum(), n_closed),
        open_accuracy=_ratio(cm[k, k], n_open),
        binary_f_measure=binary,
        n_closed=n_closed,
        n_open=n_open,
    )


def threshold_sweep(
    probs_table: np.ndarray, truths: Sequence[int], thresholds: Sequence[float]
) -> pd.DataFrame:
    """One metrics row per threshold for a k-way probability table"""
    probs_table = np.asarray(probs_table, dtype=np.float64)
    k = probs_table.shape[1]
    rows = []
    for threshold in thresholds:
        predicted, _ = threshold_classes(probs_table, threshold)
        metrics = compute_metrics(confusion_matrix(list(predicted), truths, k), k)
        rows.append({"threshold": float(threshold), **metrics.model_dump()})
    return pd.DataFrame(rows)


def embed_2d(features: np.ndarray, rng_seed: int = 0) -> np.ndarray:
    """t-SNE projection to two dimensions, deterministic for a given seed"""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < 2:
        raise ValueError(f"embedding needs at least 2 samples, got {n}")
    perplexity = min(TSNE_PERPLEXITY, max(1.0, (n - 1) / 3))
    tsne = TSNE(
        n_components=2,
        perplexity=perplexity,
        max_iter=TSNE_ITERATIONS,
        init="pca" if n > 2 and features.shape[1] >= 2 else "random",
        random_state=rng_seed,
    )
    return tsne.fit_transform(features)


def latent_separation(
    features: np.ndarray, labels: Sequence[int], k: int
) -> pd.DataFrame:
    """Per known class: mean within-class distance to the centroid vs the mean
    distance of open samples (label ``k``) to that centroid.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    open_features = features[labels == k]
    if len(open_features) == 0:
        raise ValueError("latent separation needs samples with the open label")
    rows = []
    for c in range(k):
        members = features[labels == c]
        if len(members) == 0:
            continue
        centroid = members.mean(axis=0)
        within = float(np.linalg.norm(members - centroid, axis=1).mean())
        open_distance = float(np.linalg.norm(open_features - centroid, axis=1).mean())
        rows.append(
            {
                "class": c,
                "within_class": within,
                "open_to_centroid": open_distance,
                "separated": open_distance > within,
            }
        )
    return pd.DataFrame(rows)
