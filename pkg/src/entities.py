from enum import Enum
from typing import Any, ClassVar

import numpy as np
from pydantic import BaseModel, field_validator, model_validator
from pydantic.config import ConfigDict

DEFAULT_NUM_POINTS = 1024
DEFAULT_NUM_KNOWN = 10


class Provenance(str, Enum):
    """Where a labeled sample comes from"""

    REAL = "real"
    PSEUDO_OPEN = "pseudo_open"
    OPEN_TEST = "open_test"

    @property
    def is_open(self) -> bool:
        return self is not Provenance.REAL


class PointCloud(BaseModel):
    """A set of 3D points, the unit of model input.

    Points are stored as a float32 ``(n, 3)`` array. Two clouds are equal when
    their arrays are bitwise equal.
    """

    model_config: ClassVar[ConfigDict] = ConfigDict(
        arbitrary_types_allowed=True, frozen=True
    )

    points: np.ndarray

    @field_validator("points", mode="before")
    @classmethod
    def _coerce_points(cls, value: Any) -> np.ndarray:
        points = np.ascontiguousarray(value, dtype=np.float32)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {points.shape}")
        if points.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.isfinite(points).all():
            raise ValueError("point coordinates must be finite")
        return points

    @property
    def num_points(self) -> int:
        return int(self.points.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return np.array_equal(self.points, other.points)

    def __repr__(self) -> str:
        return f"PointCloud(num_points={self.num_points})"


class LabeledSample(BaseModel):
    """A point cloud with its class id; label ``k`` is the unknown bucket."""

    model_config: ClassVar[ConfigDict] = ConfigDict(frozen=True)

    sample_id: str
    cloud: PointCloud
    label: int
    provenance: Provenance = Provenance.REAL

    @field_validator("label")
    @classmethod
    def _non_negative(cls, value: int) -> int:
        if value < 0:
            raise ValueError(f"label must be >= 0, got {value}")
        return value


class DatasetSplit(BaseModel):
    """Closed/open partitions used for training and evaluation."""

    model_config: ClassVar[ConfigDict] = ConfigDict(frozen=True)

    class_names: list[str]
    closed_train: list[LabeledSample]
    closed_test: list[LabeledSample]
    open_test: list[LabeledSample] = []
    pseudo_open_train: list[LabeledSample] = []

    @property
    def num_known(self) -> int:
        """k, the number of known classes (and the unknown label)"""
        return len(self.class_names)

    @property
    def num_points(self) -> int:
        for partition in self.partitions().values():
            if partition:
                return partition[0].cloud.num_points
        return 0

    def partitions(self) -> dict[str, list[LabeledSample]]:
        return {
            "closed_train": self.closed_train,
            "closed_test": self.closed_test,
            "open_test": self.open_test,
            "pseudo_open_train": self.pseudo_open_train,
        }

    def counts(self) -> dict[str, int]:
        return {name: len(samples) for name, samples in self.partitions().items()}

    def with_pseudo_open(self, samples: list[LabeledSample]) -> "DatasetSplit":
        """Return a copy of the split carrying the given pseudo open samples"""
        return DatasetSplit(
            class_names=self.class_names,
            closed_train=self.closed_train,
            closed_test=self.closed_test,
            open_test=self.open_test,
            pseudo_open_train=samples,
        )

    @model_validator(mode="after")
    def _check_labels(self) -> "DatasetSplit":
        k = self.num_known
        for name in ("closed_train", "closed_test"):
            for sample in getattr(self, name):
                if not 0 <= sample.label < k or sample.provenance.is_open:
                    raise ValueError(
                        f"{name} sample {sample.sample_id!r} has label "
                        f"{sample.label}, expected a known class in [0, {k})"
                    )
        for name in ("open_test", "pseudo_open_train"):
            for sample in getattr(self, name):
                if sample.label != k or not sample.provenance.is_open:
                    raise ValueError(
                        f"{name} sample {sample.sample_id!r} must carry the "
                        f"unknown label {k}, got {sample.label}"
                    )

        sizes = {
            sample.cloud.num_points
            for samples in self.partitions().values()
            for sample in samples
        }
        if len(sizes) > 1:
            raise ValueError(f"all clouds must have the same size, got {sizes}")

        train_ids = {s.sample_id for s in self.closed_train + self.pseudo_open_train}
        test_ids = {s.sample_id for s in self.closed_test + self.open_test}
        shared = train_ids & test_ids
        if shared:
            raise ValueError(
                f"samples shared between train and test: {sorted(shared)[:5]}"
            )
        return self
