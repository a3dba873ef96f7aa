from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from src.entities import DatasetSplit, LabeledSample, PointCloud, Provenance

TINY_POINTS = 32
TINY_CLASSES = ["a", "b", "c"]

TETRAHEDRON_VERTICES = np.array(
    [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
)
TETRAHEDRON_FACES = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])


def blob(center: np.ndarray, rng: np.random.Generator, n: int = TINY_POINTS) -> PointCloud:
    """Gaussian cloud around ``center``"""
    return PointCloud(points=center + 0.05 * rng.standard_normal((n, 3)))


def make_split(
    n_train: int = 8,
    n_test: int = 3,
    n_open: int = 4,
    n_points: int = TINY_POINTS,
    seed: int = 0,
    class_names: list[str] | None = None,
) -> DatasetSplit:
    """Well separated class blobs along the axes; open samples sit at the origin"""
    class_names = class_names or TINY_CLASSES
    k = len(class_names)
    rng = np.random.default_rng(seed)
    centers = np.eye(3)[:k] if k <= 3 else rng.standard_normal((k, 3))

    def samples(part: str, count: int) -> list[LabeledSample]:
        return [
            LabeledSample(
                sample_id=f"{name}/{part}/{i}",
                cloud=blob(centers[label], rng, n_points),
                label=label,
            )
            for label, name in enumerate(class_names)
            for i in range(count)
        ]

    return DatasetSplit(
        class_names=class_names,
        closed_train=samples("train", n_train),
        closed_test=samples("test", n_test),
        open_test=[
            LabeledSample(
                sample_id=f"open/test/{i}",
                cloud=blob(np.zeros(3), rng, n_points),
                label=k,
                provenance=Provenance.OPEN_TEST,
            )
            for i in range(n_open)
        ],
    )


def write_off(
    path: Path,
    vertices: np.ndarray = TETRAHEDRON_VERTICES,
    faces: np.ndarray = TETRAHEDRON_FACES,
    header: str = "OFF",
) -> Path:
    """Write a mesh in OFF format"""
    lines = [header, f"{len(vertices)} {len(faces)} 0"]
    lines += [" ".join(f"{c:.6f}" for c in v) for v in vertices]
    lines += [f"{len(f)} " + " ".join(str(i) for i in f) for f in faces]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def tiny_split() -> DatasetSplit:
    return make_split()


@pytest.fixture
def off_writer(tmp_path: Path) -> Callable[..., Path]:
    def _write(name: str = "mesh.off", **kwargs) -> Path:
        return write_off(tmp_path / name, **kwargs)

    return _write


@pytest.fixture
def modelnet_tree(tmp_path: Path) -> Path:
    """``<root>/<class>/{train,test}/*.off`` with three known and one extra class"""
    root = tmp_path / "ModelNet"
    for scale, name in enumerate(["chair", "desk", "sofa", "lamp"], start=1):
        vertices = TETRAHEDRON_VERTICES * scale
        for i in range(2):
            write_off(root / name / "train" / f"{name}_{i:04d}.off", vertices)
        write_off(root / name / "test" / f"{name}_{0:04d}.off", vertices)
    return root
