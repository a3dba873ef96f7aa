"""Tests for the teacher/student networks and checkpoints"""

import math

import pytest
import torch

from src.models import (
    PENULTIMATE_DIM,
    Architecture,
    build_model,
    forward,
    load_checkpoint,
    save_checkpoint,
    transform_regularizer,
)


class TestParameterCounts:
    """Published parameter counts"""

    def test_teacher_count(self):
        """Teacher with ten classes"""
        assert build_model("teacher", 10, 0).parameter_count == 3_463_763

    def test_student_count(self):
        """Student with ten classes"""
        assert build_model("student", 10, 0).parameter_count == 666_378

    def test_open_set_student_count(self):
        """The extra open class adds one row of the last layer"""
        assert build_model("student", 11, 0).parameter_count == 666_635


class TestBuildModel:
    """Construction"""

    def test_same_seed_same_weights(self):
        """Initialization depends only on the seed"""
        first = build_model(Architecture.STUDENT, 4, 7).network.state_dict()
        second = build_model(Architecture.STUDENT, 4, 7).network.state_dict()
        third = build_model(Architecture.STUDENT, 4, 8).network.state_dict()

        assert all(torch.equal(first[name], second[name]) for name in first)
        assert not torch.equal(first["conv1.weight"], third["conv1.weight"])

    def test_global_rng_untouched(self):
        """Building a model does not consume the global torch RNG"""
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        build_model("teacher", 3, 0)

        assert torch.equal(torch.rand(3), expected)

    def test_unsupported_architecture(self):
        """Only teacher and student exist"""
        with pytest.raises(ValueError, match="Unsupported architecture"):
            build_model("transformer", 10, 0)

    def test_too_few_classes(self):
        """A classifier needs two outputs"""
        with pytest.raises(ValueError, match="num_classes"):
            build_model("student", 1, 0)

    def test_feature_dim(self):
        """Both networks expose 256-wide penultimate features"""
        assert build_model("teacher", 3, 0).feature_dim == PENULTIMATE_DIM == 256
        assert build_model("student", 3, 0).feature_dim == 256


class TestForward:
    """Forward pass"""

    @pytest.mark.parametrize("arch", ["teacher", "student"])
    def test_output_shapes(self, arch):
        """Logits are B x k, features B x 256"""
        model = build_model(arch, 5, 0)
        model.network.eval()

        out = forward(model, torch.randn(4, 64, 3))

        assert out.logits.shape == (4, 5)
        assert out.penultimate.shape == (4, 256)

    def test_teacher_transform_matrices(self):
        """The teacher reports its 3x3 and 64x64 alignment matrices"""
        model = build_model("teacher", 5, 0)
        model.network.eval()

        out = forward(model, torch.randn(2, 32, 3))

        assert [tuple(m.shape) for m in out.transform_matrices] == [
            (2, 3, 3),
            (2, 64, 64),
        ]
        assert [tuple(m.shape) for m in out.feature_transforms] == [(2, 64, 64)]

    def test_student_has_no_transforms(self):
        """The student drops both alignment networks"""
        model = build_model("student", 5, 0)
        model.network.eval()

        out = forward(model, torch.randn(2, 32, 3))

        assert out.transform_matrices is None
        assert out.feature_transforms == []

    @pytest.mark.parametrize("arch", ["teacher", "student"])
    def test_permutation_invariance(self, arch):
        """Reordering the points leaves the outputs unchanged"""
        torch.manual_seed(0)
        model = build_model(arch, 4, 0)
        model.network.eval()
        points = torch.randn(3, 128, 3)
        shuffled = points[:, torch.randperm(128)]

        with torch.no_grad():
            original = forward(model, points)
            permuted = forward(model, shuffled)

        torch.testing.assert_close(original.logits, permuted.logits, rtol=1e-4, atol=1e-5)
        torch.testing.assert_close(
            original.penultimate, permuted.penultimate, rtol=1e-4, atol=1e-5
        )

    @pytest.mark.parametrize(("arch", "num_classes"), [("teacher", 10), ("student", 11)])
    def test_every_parameter_receives_gradient(self, arch, num_classes):
        """No layer is cut off from the loss"""
        model = build_model(arch, num_classes, 0)
        model.network.eval()
        generator = torch.Generator().manual_seed(1)
        points = torch.randn(4, 64, 3, generator=generator)
        labels = torch.tensor([0, 1, 2, num_classes - 1])

        out = forward(model, points)
        loss = torch.nn.functional.cross_entropy(out.logits, labels)
        if out.transform_matrices:
            loss = loss + 0.001 * transform_regularizer(out.feature_transforms)
        loss.backward()

        dead = [
            name
            for name, parameter in model.network.named_parameters()
            if parameter.grad is None or torch.count_nonzero(parameter.grad) == 0
        ]
        assert dead == []

    def test_single_point_cloud(self):
        """A cloud may hold a single point"""
        model = build_model("student", 3, 0)
        model.network.eval()

        assert forward(model, torch.randn(2, 1, 3)).logits.shape == (2, 3)

    def test_rejects_wrong_shape(self):
        """Inputs must be B x N0 x 3"""
        model = build_model("student", 3, 0)

        with pytest.raises(ValueError, match="B x N0 x 3"):
            forward(model, torch.randn(2, 3, 16))

    def test_rejects_non_finite(self):
        """NaN coordinates are refused before the network runs"""
        model = build_model("student", 3, 0)
        batch = torch.zeros(2, 8, 3)
        batch[0, 0, 0] = float("nan")

        with pytest.raises(ValueError, match="non-finite"):
            forward(model, batch)


class TestTransformRegularizer:
    """Orthogonality penalty"""

    def test_zero_for_identity(self):
        """Identity matrices are orthogonal"""
        assert float(transform_regularizer(torch.eye(64).expand(4, 64, 64))) == 0.0

    def test_zero_for_rotation(self):
        """Rotations are orthogonal"""
        angle = 0.7
        rotation = torch.tensor(
            [
                [math.cos(angle), -math.sin(angle), 0.0],
                [math.sin(angle), math.cos(angle), 0.0],
                [0.0, 0.0, 1.0],
            ]
        )

        assert float(transform_regularizer(rotation.unsqueeze(0))) == pytest.approx(
            0.0, abs=1e-10
        )

    def test_scaled_identity(self):
        """For A = 2I (64x64), ||I - 4I||_F^2 = 9 * 64 = 576"""
        assert float(transform_regularizer(2 * torch.eye(64).unsqueeze(0))) == 576.0

    def test_sums_over_matrices(self):
        """A list of matrices contributes the sum of their penalties"""
        matrices = [2 * torch.eye(64).unsqueeze(0), 2 * torch.eye(64).unsqueeze(0)]

        assert float(transform_regularizer(matrices)) == 1152.0

    def test_rejects_non_square(self):
        """Alignment matrices are square"""
        with pytest.raises(ValueError, match="square"):
            transform_regularizer(torch.ones(1, 3, 4))


class TestCheckpoints:
    """Save and load"""

    def test_round_trip_preserves_outputs(self, tmp_path):
        """A reloaded model computes the same logits"""
        model = build_model("teacher", 4, 3)
        model.network.eval()
        points = torch.randn(2, 32, 3)
        path = save_checkpoint(model, tmp_path / "ckpt" / "model.pt", regime="teacher_ce")

        restored = load_checkpoint(path)
        restored.network.eval()

        assert restored.arch is Architecture.TEACHER
        assert restored.num_classes == 4
        assert restored.seed == 3
        assert restored.metadata["regime"] == "teacher_ce"
        with torch.no_grad():
            torch.testing.assert_close(
                forward(restored, points).logits, forward(model, points).logits
            )

    def test_freeze_stops_gradients(self):
        """Frozen models are in eval mode without trainable parameters"""
        model = build_model("student", 3, 0).freeze()

        assert not model.network.training
        assert model.parameter_count == 0
