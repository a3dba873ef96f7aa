"""
Teacher and student point cloud classifiers.

Layer widths reproduce the published parameter counts exactly:
teacher (k=10) 3,463,763 and student (k=10) 666,378.
"""

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

GLOBAL_FEATURE_DIM = 1024
PENULTIMATE_DIM = 256


class Architecture(str, Enum):
    TEACHER = "teacher"
    STUDENT = "student"


@dataclass
class ForwardOutput:
    """Penultimate features, logits and (teacher only) the alignment matrices"""

    penultimate: torch.Tensor
    logits: torch.Tensor
    transform_matrices: list[torch.Tensor] | None = None

    @property
    def feature_transforms(self) -> list[torch.Tensor]:
        """Transforms acting on feature space (everything after the 3x3 one)"""
        if not self.transform_matrices:
            return []
        return self.transform_matrices[1:]


class TNet(nn.Module):
    """Predicts a ``dim x dim`` alignment matrix from the whole point set"""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.conv1 = nn.Conv1d(dim, 64, 1)
        self.conv2 = nn.Conv1d(64, 128, 1)
        self.conv3 = nn.Conv1d(128, GLOBAL_FEATURE_DIM, 1)
        self.fc1 = nn.Linear(GLOBAL_FEATURE_DIM, 512)
        self.fc2 = nn.Linear(512, 256)
        self.fc3 = nn.Linear(256, dim * dim)
        self.bn1 = nn.BatchNorm1d(64)
        self.bn2 = nn.BatchNorm1d(128)
        self.bn3 = nn.BatchNorm1d(GLOBAL_FEATURE_DIM)
        self.bn4 = nn.BatchNorm1d(512)
        self.bn5 = nn.BatchNorm1d(256)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.relu(self.bn2(self.conv2(x)))
        x = F.relu(self.bn3(self.conv3(x)))
        x = torch.max(x, dim=2).values
        x = F.relu(self.bn4(self.fc1(x)))
        x = F.relu(self.bn5(self.fc2(x)))
        x = self.fc3(x)
        identity = torch.eye(self.dim, dtype=x.dtype, device=x.device)
        return x.view(-1, self.dim, self.dim) + identity


class ClassifierHead(nn.Module):
    """Global feature -> 512 -> 256 (penultimate) -> logits"""

    def __init__(self, num_classes: int):
        super().__init__()
        self.fc1 = nn.Linear(GLOBAL_FEATURE_DIM, 512)
        self.fc2 = nn.Linear(512, PENULTIMATE_DIM)
        self.fc3 = nn.Linear(PENULTIMATE_DIM, num_classes)
        self.bn1 = nn.BatchNorm1d(512)
        self.bn2 = nn.BatchNorm1d(PENULTIMATE_DIM)
        self.dropout = nn.Dropout(p=0.3)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = F.relu(self.bn1(self.fc1(x)))
        penultimate = F.relu(self.bn2(self.dropout(self.fc2(x))))
        return penultimate, self.fc3(penultimate)


class PointNetTeacher(nn.Module):
    """Full network: input transform, feature transform, max-pool, MLP head"""

    def __init__(self, num_classes: int):
        super().__init__()
        self.input_transform = TNet(3)
        self.conv1 = nn.Conv1d(3, 64, 1)
        self.bn1 = nn.BatchNorm1d(64)
        self.feature_transform = TNet(64)
        self.conv2 = nn.Conv1d(64, 128, 1)
        self.bn2 = nn.BatchNorm1d(128)
        self.conv3 = nn.Conv1d(128, GLOBAL_FEATURE_DIM, 1)
        self.bn3 = nn.BatchNorm1d(GLOBAL_FEATURE_DIM)
        self.head = ClassifierHead(num_classes)

    def forward(self, points: torch.Tensor) -> ForwardOutput:
        x = points.transpose(1, 2)
        input_matrix = self.input_transform(x)
        x = torch.bmm(input_matrix.transpose(1, 2), x)
        x = F.relu(self.bn1(self.conv1(x)))
        feature_matrix = self.feature_transform(x)
        x = torch.bmm(feature_matrix.transpose(1, 2), x)
        x = F.relu(self.bn2(self.conv2(x)))
        x = self.bn3(self.conv3(x))
        global_feature = torch.max(x, dim=2).values
        penultimate, logits = self.head(global_feature)
        return ForwardOutput(penultimate, logits, [input_matrix, feature_matrix])


class PointNetStudent(nn.Module):
    """Transforms and two per-point blocks removed: one 3 -> 1024 block remains"""

    def __init__(self, num_classes: int):
        super().__init__()
        self.conv1 = nn.Conv1d(3, GLOBAL_FEATURE_DIM, 1)
        self.bn1 = nn.BatchNorm1d(GLOBAL_FEATURE_DIM)
        self.head = ClassifierHead(num_classes)

    def forward(self, points: torch.Tensor) -> ForwardOutput:
        x = self.bn1(self.conv1(points.transpose(1, 2)))
        global_feature = torch.max(x, dim=2).values
        penultimate, logits = self.head(global_feature)
        return ForwardOutput(penultimate, logits)


_NETWORKS: dict[Architecture, type[nn.Module]] = {
    Architecture.TEACHER: PointNetTeacher,
    Architecture.STUDENT: PointNetStudent,
}


@dataclass
class ModelHandle:
    """A network together with the metadata needed to rebuild it"""

    arch: Architecture
    num_classes: int
    seed: int
    network: nn.Module
    metadata: dict[str, str | int | float | None] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return PENULTIMATE_DIM

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.network.parameters() if p.requires_grad)

    def parameters(self) -> list[nn.Parameter]:
        return list(self.network.parameters())

    def freeze(self) -> "ModelHandle":
        """Put the network in eval mode and stop gradient tracking"""
        self.network.eval()
        self.network.requires_grad_(False)
        return self


def build_model(arch: Architecture | str, num_classes: int, rng_seed: int) -> ModelHandle:
    """Build a freshly initialized teacher or student; init depends only on the seed"""
    try:
        arch = Architecture(arch)
    except ValueError:
        raise ValueError(
            f"Unsupported architecture {arch!r}; expected one of "
            f"{[a.value for a in Architecture]}"
        ) from None
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng_seed)
        network = _NETWORKS[arch](num_classes)
    return ModelHandle(arch=arch, num_classes=num_classes, seed=rng_seed, network=network)


def forward(model: ModelHandle, batch: torch.Tensor) -> ForwardOutput:
    """Run a ``B x N0 x 3`` batch through the model"""
    if batch.ndim != 3 or batch.shape[-1] != 3:
        raise ValueError(f"expected a B x N0 x 3 batch, got {tuple(batch.shape)}")
    if batch.shape[1] < 1:
        raise ValueError("clouds must contain at least one point")
    if not torch.isfinite(batch).all():
        raise ValueError("input batch contains non-finite coordinates")
    return model.network(batch)


def transform_regularizer(
    transform_matrices: list[torch.Tensor] | torch.Tensor,
) -> torch.Tensor:
    """Sum of ``||I - A A^T||_F^2`` over the given matrices, batch-averaged"""
    if isinstance(transform_matrices, torch.Tensor):
        transform_matrices = [transform_matrices]
    total = torch.zeros(())
    for matrix in transform_matrices:
        dim = matrix.shape[-1]
        if matrix.shape[-2] != dim:
            raise ValueError(f"transform must be square, got {tuple(matrix.shape)}")
        identity = torch.eye(dim, dtype=matrix.dtype, device=matrix.device)
        residual = identity - matrix @ matrix.transpose(-1, -2)
        per_matrix = residual.pow(2).sum(dim=(-2, -1))
        total = total.to(per_matrix) + per_matrix.mean()
    return total


def save_checkpoint(model: ModelHandle, path: Path | str, **metadata) -> Path:
    """Write a named-tensor archive with the architecture metadata"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    merged = {**model.metadata, **metadata}
    torch.save(
        {
            "arch": model.arch.value,
            "num_classes": model.num_classes,
            "seed": model.seed,
            "metadata": merged,
            "state_dict": model.network.state_dict(),
        },
        path,
    )
    return path


def load_checkpoint(path: Path | str) -> ModelHandle:
    """Rebuild a model from ``save_checkpoint`` output"""
    archive = torch.load(Path(path), map_location="cpu", weights_only=True)
    model = build_model(archive["arch"], archive["num_classes"], archive["seed"])
    model.network.load_state_dict(archive["state_dict"])
    model.metadata = dict(archive.get("metadata", {}))
    return model
