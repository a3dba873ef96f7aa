"""Tests for split construction from ModelNet-style trees and synthetic primitives"""

import shutil

import numpy as np
import pytest

from src.dataset import (
    SYNTHETIC_HELD_OUT,
    SYNTHETIC_KNOWN,
    build_splits,
    build_synthetic_split,
    primitive_mesh,
    sample_seed,
    synthetic_cloud,
)
from src.entities import DatasetSplit, LabeledSample, PointCloud, Provenance
from src.errors import DatasetLayoutError

KNOWN = ["chair", "desk", "sofa"]


class TestBuildSplits:
    """ModelNet layout ingestion"""

    def test_partitions_and_labels(self, modelnet_tree):
        """Known classes fill the closed partitions, the rest go to open test"""
        split = build_splits(modelnet_tree, KNOWN, n_points=16, rng_seed=0)

        assert split.counts() == {
            "closed_train": 6,
            "closed_test": 3,
            "open_test": 1,
            "pseudo_open_train": 0,
        }
        assert split.class_names == KNOWN
        assert {s.label for s in split.closed_train} == {0, 1, 2}
        assert all(s.label == 3 for s in split.open_test)
        assert all(s.provenance is Provenance.OPEN_TEST for s in split.open_test)
        assert split.open_test[0].sample_id == "lamp/test/lamp_0000.off"

    def test_clouds_are_normalized(self, modelnet_tree):
        """Every cloud has N0 points inside the unit sphere"""
        split = build_splits(modelnet_tree, KNOWN, n_points=16, rng_seed=0)

        for sample in split.closed_train + split.closed_test + split.open_test:
            assert sample.cloud.num_points == 16
            assert np.linalg.norm(sample.cloud.points, axis=1).max() <= 1.0 + 1e-6

    def test_deterministic_and_parallel_safe(self, modelnet_tree):
        """Same seed gives identical clouds with one or two workers"""
        serial = build_splits(modelnet_tree, KNOWN, n_points=16, rng_seed=4)
        parallel = build_splits(modelnet_tree, KNOWN, n_points=16, rng_seed=4, n_jobs=2)

        assert serial == parallel

    def test_class_order_defines_labels(self, modelnet_tree):
        """Labels follow the order of the known class list"""
        split = build_splits(modelnet_tree, ["sofa", "chair"], n_points=8)

        sofa = [s for s in split.closed_train if s.sample_id.startswith("sofa/")]
        assert {s.label for s in sofa} == {0}
        assert {s.sample_id.split("/")[0] for s in split.open_test} == {"desk", "lamp"}

    def test_every_class_known(self, modelnet_tree):
        """With no remaining classes the open test set is empty"""
        split = build_splits(
            modelnet_tree, ["chair", "desk", "sofa", "lamp"], n_points=8
        )

        assert split.open_test == []
        assert split.counts()["closed_train"] == 8
        assert split.counts()["closed_test"] == 4

    def test_missing_root(self, tmp_path):
        """A missing dataset root is named in the error"""
        missing = tmp_path / "nowhere"

        with pytest.raises(DatasetLayoutError, match="nowhere"):
            build_splits(missing, KNOWN)

    def test_missing_class_directory(self, modelnet_tree):
        """Every known class must have a directory"""
        with pytest.raises(DatasetLayoutError, match="bathtub"):
            build_splits(modelnet_tree, ["chair", "bathtub"])

    def test_duplicate_known_classes(self, modelnet_tree):
        """Known class names must be unique"""
        with pytest.raises(DatasetLayoutError, match="duplicate"):
            build_splits(modelnet_tree, ["chair", "chair"])

    def test_class_without_meshes(self, modelnet_tree):
        """An empty partition directory is reported"""
        shutil.rmtree(modelnet_tree / "desk" / "test")
        (modelnet_tree / "desk" / "test").mkdir()

        with pytest.raises(DatasetLayoutError, match="desk"):
            build_splits(modelnet_tree, KNOWN, n_points=8)


class TestSampleSeed:
    """Per-sample seeds"""

    def test_depends_on_seed_and_id(self):
        """Seeds differ across ids and base seeds and repeat otherwise"""
        assert sample_seed(0, "a/train/x.off") == sample_seed(0, "a/train/x.off")
        assert sample_seed(0, "a/train/x.off") != sample_seed(1, "a/train/x.off")
        assert sample_seed(0, "a/train/x.off") != sample_seed(0, "a/train/y.off")


class TestSyntheticShapes:
    """Primitive-shape dataset used for desk-scale runs"""

    @pytest.mark.parametrize("name", SYNTHETIC_KNOWN + SYNTHETIC_HELD_OUT)
    def test_primitives_have_area(self, name):
        """Every primitive is a mesh with positive surface area"""
        assert primitive_mesh(name).area > 0

    def test_unknown_primitive(self):
        """Unknown shape names are rejected"""
        with pytest.raises(DatasetLayoutError, match="pyramid"):
            primitive_mesh("pyramid")

    def test_cloud_is_normalized(self):
        """Synthetic clouds are centered and unit-scaled"""
        cloud = synthetic_cloud("torus", 128, 3)

        assert cloud.num_points == 128
        np.testing.assert_allclose(cloud.points.mean(axis=0), 0.0, atol=1e-5)
        assert np.linalg.norm(cloud.points, axis=1).max() == pytest.approx(1.0, abs=1e-5)

    def test_split_layout(self):
        """Four known shapes, two held out as open set"""
        split = build_synthetic_split(
            n_train_per_class=3, n_test_per_class=2, n_points=32, rng_seed=0
        )

        assert split.class_names == SYNTHETIC_KNOWN
        assert split.counts() == {
            "closed_train": 12,
            "closed_test": 8,
            "open_test": 4,
            "pseudo_open_train": 0,
        }
        assert {s.label for s in split.open_test} == {4}

    def test_split_is_deterministic(self):
        """Same seed, same clouds"""
        first = build_synthetic_split(2, 1, n_points=16, rng_seed=7)
        second = build_synthetic_split(2, 1, n_points=16, rng_seed=7)

        assert first == second


class TestDatasetSplit:
    """Split invariants"""

    def test_rejects_shared_train_test_ids(self, tiny_split):
        """A sample cannot be in both train and test"""
        leaked = tiny_split.closed_train[0]

        with pytest.raises(ValueError, match="shared"):
            DatasetSplit(
                class_names=tiny_split.class_names,
                closed_train=tiny_split.closed_train,
                closed_test=[leaked],
            )

    def test_rejects_known_label_in_open_test(self, tiny_split):
        """Open test samples must carry label k"""
        wrong = LabeledSample(
            sample_id="open/x",
            cloud=tiny_split.open_test[0].cloud,
            label=0,
            provenance=Provenance.OPEN_TEST,
        )

        with pytest.raises(ValueError, match="unknown label"):
            DatasetSplit(
                class_names=tiny_split.class_names,
                closed_train=[],
                closed_test=[],
                open_test=[wrong],
            )

    def test_rejects_mixed_cloud_sizes(self, tiny_split):
        """Every cloud in a split has the same size"""
        odd = LabeledSample(sample_id="a/odd", cloud=PointCloud(points=np.zeros((5, 3))), label=0)

        with pytest.raises(ValueError, match="same size"):
            DatasetSplit(
                class_names=tiny_split.class_names,
                closed_train=tiny_split.closed_train + [odd],
                closed_test=[],
            )

    def test_point_cloud_rejects_non_finite(self):
        """Coordinates must be finite"""
        with pytest.raises(ValueError, match="finite"):
            PointCloud(points=[[0.0, np.nan, 1.0]])
