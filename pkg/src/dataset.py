"""
Closed/open split construction for ModelNet-style trees and the synthetic
primitive-shapes dataset used for desk-scale runs.
"""

import logging
import zlib
from pathlib import Path

import numpy as np
import trimesh
from joblib import Parallel, delayed

from src.entities import (
    DEFAULT_NUM_POINTS,
    DatasetSplit,
    LabeledSample,
    PointCloud,
    Provenance,
)
from src.errors import DatasetLayoutError
from src.mesh_io import normalize_cloud, parse_mesh_file, sample_point_cloud

logger = logging.getLogger(__name__)

MODELNET10_CLASSES = [
    "bathtub",
    "bed",
    "chair",
    "desk",
    "dresser",
    "monitor",
    "night_stand",
    "sofa",
    "table",
    "toilet",
]

SYNTHETIC_KNOWN = ["sphere", "cube", "cylinder", "torus"]
SYNTHETIC_HELD_OUT = ["cone", "capsule"]


def sample_seed(rng_seed: int, sample_id: str) -> int:
    """Per-sample seed, independent of enumeration order"""
    sequence = np.random.SeedSequence([rng_seed, zlib.crc32(sample_id.encode())])
    return int(sequence.generate_state(1)[0])


def load_mesh_cloud(path: Path, n_points: int, rng_seed: int) -> PointCloud:
    """Parse, sample and normalize one mesh file"""
    vertices, faces = parse_mesh_file(path)
    return normalize_cloud(sample_point_cloud(vertices, faces, n_points, rng_seed))


def _mesh_files(class_dir: Path, partition: str) -> list[Path]:
    return sorted((class_dir / partition).glob("*.off"))


def build_splits(
    dataset_root: Path | str,
    known_class_names: list[str],
    n_points: int = DEFAULT_NUM_POINTS,
    rng_seed: int = 0,
    n_jobs: int = 1,
) -> DatasetSplit:
    """Build closed train/test and open test partitions from ``<root>/<class>/{train,test}/*.off``.

    Known classes keep their position in ``known_class_names`` as label; every
    other class directory contributes its test meshes to the open test set with
    label ``k``.
    """
    root = Path(dataset_root)
    if not root.is_dir():
        raise DatasetLayoutError(f"dataset root {root} does not exist")
    if len(set(known_class_names)) != len(known_class_names):
        raise DatasetLayoutError(f"duplicate known classes in {known_class_names}")

    available = sorted(d.name for d in root.iterdir() if d.is_dir())
    missing = [name for name in known_class_names if name not in available]
    if missing:
        raise DatasetLayoutError(f"missing class directories under {root}: {missing}")

    k = len(known_class_names)
    jobs: list[tuple[str, str, Path, int, Provenance]] = []
    empty: list[str] = []
    for label, name in enumerate(known_class_names):
        train_files = _mesh_files(root / name, "train")
        test_files = _mesh_files(root / name, "test")
        if not train_files or not test_files:
            empty.append(name)
        jobs.extend(
            ("closed_train", f"{name}/train/{p.name}", p, label, Provenance.REAL)
            for p in train_files
        )
        jobs.extend(
            ("closed_test", f"{name}/test/{p.name}", p, label, Provenance.REAL)
            for p in test_files
        )
    for name in available:
        if name in known_class_names:
            continue
        test_files = _mesh_files(root / name, "test")
        if not test_files:
            empty.append(name)
        jobs.extend(
            ("open_test", f"{name}/test/{p.name}", p, k, Provenance.OPEN_TEST)
            for p in test_files
        )
    if empty:
        raise DatasetLayoutError(f"classes without meshes under {root}: {empty}")

    clouds = Parallel(n_jobs=n_jobs)(
        delayed(load_mesh_cloud)(path, n_points, sample_seed(rng_seed, sample_id))
        for _, sample_id, path, _, _ in jobs
    )

    partitions: dict[str, list[LabeledSample]] = {
        "closed_train": [],
        "closed_test": [],
        "open_test": [],
    }
    for (partition, sample_id, _, label, provenance), cloud in zip(
        jobs, clouds, strict=True
    ):
        partitions[partition].append(
            LabeledSample(
                sample_id=sample_id, cloud=cloud, label=label, provenance=provenance
            )
        )

    split = DatasetSplit(class_names=list(known_class_names), **partitions)
    logger.info("Built split from %s: %s", root, split.counts())
    return split


def primitive_mesh(name: str) -> trimesh.Trimesh:
    """Canonical mesh for a synthetic primitive class"""
    match name:
        case "sphere":
            return trimesh.creation.icosphere(subdivisions=3, radius=0.8)
        case "cube":
            return trimesh.creation.box(extents=(1.2, 1.2, 1.2))
        case "cylinder":
            return trimesh.creation.cylinder(radius=0.5, height=1.6, sections=32)
        case "torus":
            return trimesh.creation.torus(major_radius=0.8, minor_radius=0.25)
        case "cone":
            return trimesh.creation.cone(radius=0.7, height=1.5, sections=32)
        case "capsule":
            return trimesh.creation.capsule(height=1.2, radius=0.4)
    raise DatasetLayoutError(f"unknown synthetic primitive {name!r}")


def synthetic_cloud(name: str, n_points: int, rng_seed: int) -> PointCloud:
    """Randomly scaled and rotated primitive, surface sampled and normalized"""
    rng = np.random.default_rng(rng_seed)
    mesh = primitive_mesh(name)
    scale = rng.uniform(0.8, 1.2, size=3)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    cos, sin = np.cos(theta), np.sin(theta)
    rotation = np.array([[cos, -sin, 0.0], [sin, cos, 0.0], [0.0, 0.0, 1.0]])
    vertices = (np.asarray(mesh.vertices) * scale) @ rotation.T
    cloud = sample_point_cloud(
        vertices, np.asarray(mesh.faces), n_points, int(rng.integers(2**32))
    )
    return normalize_cloud(cloud)


def build_synthetic_split(
    n_train_per_class: int = 500,
    n_test_per_class: int = 100,
    n_points: int = DEFAULT_NUM_POINTS,
    rng_seed: int = 0,
    known: list[str] | None = None,
    held_out: list[str] | None = None,
) -> DatasetSplit:
    """Primitive-shapes split: four known shapes, two held out as open set"""
    known = known or SYNTHETIC_KNOWN
    held_out = SYNTHETIC_HELD_OUT if held_out is None else held_out
    k = len(known)

    def make(name: str, part: str, index: int, label: int, provenance: Provenance):
        sample_id = f"synthetic/{name}/{part}/{index:04d}"
        cloud = synthetic_cloud(name, n_points, sample_seed(rng_seed, sample_id))
        return LabeledSample(
            sample_id=sample_id, cloud=cloud, label=label, provenance=provenance
        )

    split = DatasetSplit(
        class_names=list(known),
        closed_train=[
            make(name, "train", i, label, Provenance.REAL)
            for label, name in enumerate(known)
            for i in range(n_train_per_class)
        ],
        closed_test=[
            make(name, "test", i, label, Provenance.REAL)
            for label, name in enumerate(known)
            for i in range(n_test_per_class)
        ],
        open_test=[
            make(name, "test", i, k, Provenance.OPEN_TEST)
            for name in held_out
            for i in range(n_test_per_class)
        ],
    )
    logger.info("Built synthetic split: %s", split.counts())
    return split
