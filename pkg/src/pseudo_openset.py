"""Pseudo open set samples built by shuffling points across known-class clouds."""

import logging
import math
from collections import defaultdict
from typing import ClassVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.entities import DatasetSplit, LabeledSample, PointCloud, Provenance
from src.errors import PseudoOpenSetError
from src.mesh_io import normalize_cloud

logger = logging.getLogger(__name__)


class MixConfig(BaseModel):
    """How many pseudo open samples to generate for each mixing order"""

    model_config: ClassVar[ConfigDict] = ConfigDict(frozen=True)

    mix_orders: list[int] = Field(
        default=[2, 3, 4], description="Number of source clouds mixed together"
    )
    counts_per_order: dict[int, int] | None = Field(
        default=None,
        description="Samples per order; None means ceil(closed_train / 9) each",
    )
    rng_seed: int = 0
    renormalize: bool = Field(
        default=True, description="Re-normalize mixed clouds to the unit sphere"
    )

    @field_validator("mix_orders")
    @classmethod
    def _orders_at_least_two(cls, orders: list[int]) -> list[int]:
        if not orders:
            raise ValueError("mix_orders must not be empty")
        if any(n < 2 for n in orders):
            raise ValueError(f"every mix order must be >= 2, got {orders}")
        if len(set(orders)) != len(orders):
            raise ValueError(f"mix orders must be distinct, got {orders}")
        return orders

    @model_validator(mode="after")
    def _counts_cover_orders(self) -> "MixConfig":
        if self.counts_per_order is not None:
            if any(count < 0 for count in self.counts_per_order.values()):
                raise ValueError("counts_per_order values must be >= 0")
            missing = set(self.mix_orders) - set(self.counts_per_order)
            if missing:
                raise ValueError(f"counts_per_order lacks orders {sorted(missing)}")
        return self

    def resolved_counts(self, closed_train_size: int) -> dict[int, int]:
        if self.counts_per_order is not None:
            return {n: self.counts_per_order[n] for n in self.mix_orders}
        default = math.ceil(closed_train_size / 9)
        return dict.fromkeys(self.mix_orders, default)


def mix_clouds(
    sources: list[LabeledSample], rng_seed: int, num_known: int
) -> list[LabeledSample]:
    """Stack the sources' points, shuffle them, and cut them into equal chunks.

    Points are moved, never transformed: the multiset of output coordinates is
    exactly the multiset of input coordinates.
    """
    n = len(sources)
    if n < 2:
        raise PseudoOpenSetError(f"mixing needs at least 2 clouds, got {n}")
    labels = [s.label for s in sources]
    if len(set(labels)) != n:
        raise PseudoOpenSetError(f"source labels must be pairwise distinct: {labels}")
    if any(label >= num_known for label in labels):
        raise PseudoOpenSetError(f"sources must be known-class samples: {labels}")
    sizes = {s.cloud.num_points for s in sources}
    if len(sizes) != 1:
        raise PseudoOpenSetError(f"source clouds differ in size: {sorted(sizes)}")
    n0 = sizes.pop()

    stacked = np.concatenate([s.cloud.points for s in sources], axis=0)
    shuffled = stacked[np.random.default_rng(rng_seed).permutation(len(stacked))]
    prefix = "+".join(s.sample_id for s in sources)
    return [
        LabeledSample(
            sample_id=f"pseudo/{rng_seed}/{i}/{prefix}",
            cloud=PointCloud(points=shuffled[i * n0 : (i + 1) * n0]),
            label=num_known,
            provenance=Provenance.PSEUDO_OPEN,
        )
        for i in range(n)
    ]


def generate_pseudo_open_set(
    split: DatasetSplit, cfg: MixConfig
) -> list[LabeledSample]:
    """Generate pseudo open samples from ``split.closed_train``.

    Each order ``n`` draws ``n`` distinct classes, one cloud from each, and
    mixes them until ``N_n`` samples are collected. Orders use the derived seed
    ``rng_seed + n``.
    """
    k = split.num_known
    by_class: dict[int, list[LabeledSample]] = defaultdict(list)
    for sample in split.closed_train:
        by_class[sample.label].append(sample)
    populated = sorted(by_class)

    counts = cfg.resolved_counts(len(split.closed_train))
    generated: list[LabeledSample] = []
    for n in cfg.mix_orders:
        target = counts[n]
        if target == 0:
            continue
        if n > k or n > len(populated):
            raise PseudoOpenSetError(
                f"order {n} needs {n} distinct classes, "
                f"closed_train has {len(populated)} of k={k}"
            )
        rng = np.random.default_rng(cfg.rng_seed + n)
        batch: list[LabeledSample] = []
        while len(batch) < target:
            classes = rng.choice(populated, size=n, replace=False)
            sources = [
                by_class[c][int(rng.integers(len(by_class[c])))] for c in classes
            ]
            mixed = mix_clouds(sources, int(rng.integers(2**32)), k)
            batch.extend(mixed)
        batch = batch[:target]
        for index, sample in enumerate(batch):
            cloud = normalize_cloud(sample.cloud) if cfg.renormalize else sample.cloud
            generated.append(
                LabeledSample(
                    sample_id=f"pseudo/n{n}/{index:05d}",
                    cloud=cloud,
                    label=k,
                    provenance=Provenance.PSEUDO_OPEN,
                )
            )
    logger.info("Generated %d pseudo open samples (%s)", len(generated), counts)
    return generated
