"""
Loss terms: cross-entropy, temperature-scaled KD, contrastive representation
distillation with a memory bank, and their weighted combination.
"""

import math
from typing import ClassVar

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn

from src.models import ForwardOutput

_UNIT_NORM_TOLERANCE = 1e-4


class LossConfig(BaseModel):
    """Weights, temperatures and contrastive sampling parameters"""

    model_config: ClassVar[ConfigDict] = ConfigDict(frozen=True)

    alpha: float = Field(default=1.0, ge=0.0, description="KD weight")
    beta: float = Field(default=0.8, ge=0.0, description="CRD weight")
    gamma: float = Field(default=1.0, ge=0.0, description="Cross-entropy weight")
    tau_kd: float = Field(default=10.0, gt=0.0)
    tau_crd: float = Field(default=0.1, gt=0.0)
    n_negatives: int = Field(default=4096, ge=1, description="N negatives per anchor")
    dataset_size: int | None = Field(
        default=None, ge=1, description="M, filled in from the training set"
    )
    embed_dim: int = Field(default=128, ge=1)
    buffer_momentum: float = Field(default=0.5, ge=0.0, le=1.0)
    kd_tau_squared: bool = Field(
        default=True, description="Scale the KD term by tau_kd ** 2"
    )
    distill_closed_only: bool = Field(
        default=False, description="Skip KD/CRD on pseudo open samples"
    )
    transform_reg_weight: float = Field(default=0.001, ge=0.0)

    @model_validator(mode="after")
    def _negatives_below_dataset_size(self) -> "LossConfig":
        if self.dataset_size is not None and self.n_negatives >= self.dataset_size:
            raise ValueError(
                f"n_negatives ({self.n_negatives}) must be < dataset_size "
                f"({self.dataset_size})"
            )
        return self

    def for_dataset(self, dataset_size: int) -> "LossConfig":
        """Bind M and clamp N to ``min(n_negatives, M - 1)``"""
        return LossConfig.model_validate(
            self.model_dump()
            | {
                "dataset_size": dataset_size,
                "n_negatives": min(self.n_negatives, dataset_size - 1),
            }
        )


def soft_softmax(z: torch.Tensor, tau: float) -> torch.Tensor:
    """Softmax of ``z / tau`` along the last axis"""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    z = torch.as_tensor(z)
    return torch.softmax(z / tau, dim=-1)


def kd_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    tau_kd: float,
    tau_squared: bool = True,
) -> torch.Tensor:
    """Cross-entropy from softened teacher targets to softened student predictions.

    Uses full cross-entropy, not KL, so the value includes the teacher entropy.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"logit shapes differ: student {tuple(student_logits.shape)}, "
            f"teacher {tuple(teacher_logits.shape)}"
        )
    if student_logits.shape[-1] < 2:
        raise ValueError("KD needs at least 2 classes")
    if tau_kd <= 0:
        raise ValueError(f"temperature must be > 0, got {tau_kd}")
    targets = soft_softmax(teacher_logits, tau_kd)
    log_predictions = F.log_softmax(student_logits / tau_kd, dim=-1)
    loss = -(targets * log_predictions).sum(dim=-1).mean()
    return loss * tau_kd**2 if tau_squared else loss


def _check_unit(name: str, embed: torch.Tensor) -> None:
    norms = embed.norm(dim=-1)
    if not torch.allclose(norms, torch.ones_like(norms), atol=_UNIT_NORM_TOLERANCE):
        raise ValueError(f"{name} must be L2-normalized, got norms {norms.tolist()}")


def crd_critic_h(
    t_embed: torch.Tensor,
    s_embed: torch.Tensor,
    tau_crd: float,
    n_negatives: int,
    dataset_size: int,
) -> torch.Tensor:
    """``e^{<t,s>/tau} / (e^{<t,s>/tau} + N/M)``, the probability a pair is positive"""
    _check_unit("t_embed", t_embed)
    _check_unit("s_embed", s_embed)
    score = (t_embed * s_embed).sum(dim=-1) / tau_crd
    return torch.sigmoid(score - math.log(n_negatives / dataset_size))


class CrdMemory(nn.Module):
    """Per-sample teacher and student embedding banks.

    Row ``i`` belongs to position ``i`` of the training list. Rows are unit
    vectors after initialization and after every update.
    """

    def __init__(
        self, dataset_size: int, embed_dim: int, momentum: float = 0.5, seed: int = 0
    ):
        super().__init__()
        self.dataset_size = dataset_size
        self.momentum = momentum
        generator = torch.Generator().manual_seed(seed)
        self.register_buffer(
            "teacher_bank",
            F.normalize(torch.randn(dataset_size, embed_dim, generator=generator), dim=1),
        )
        self.register_buffer(
            "student_bank",
            F.normalize(torch.randn(dataset_size, embed_dim, generator=generator), dim=1),
        )

    def sample_negatives(
        self, indices: torch.Tensor, n_negatives: int, generator: torch.Generator
    ) -> torch.Tensor:
        """Uniform draws with replacement over all rows except each anchor's own"""
        draws = torch.randint(
            0, self.dataset_size - 1, (len(indices), n_negatives), generator=generator
        )
        return draws + (draws >= indices.unsqueeze(1)).long()

    @torch.no_grad()
    def update(
        self, indices: torch.Tensor, t_embed: torch.Tensor, s_embed: torch.Tensor
    ) -> None:
        """Momentum update of the anchors' rows, then re-normalization"""
        for bank, embed in ((self.teacher_bank, t_embed), (self.student_bank, s_embed)):
            rows = bank[indices] * self.momentum + embed.to(bank) * (1 - self.momentum)
            bank.index_copy_(0, indices, F.normalize(rows, dim=1))


def contrastive_objective(
    s_embed: torch.Tensor,
    t_embed: torch.Tensor,
    memory: CrdMemory,
    negative_indices: torch.Tensor,
    tau_crd: float,
) -> torch.Tensor:
    """Negated CRD bound on normalized embeddings.

    Student anchors are contrasted with teacher-bank negatives and teacher
    anchors with student-bank negatives; the two directions are averaged.
    """
    n_negatives = negative_indices.shape[1]
    if n_negatives >= memory.dataset_size:
        raise ValueError(
            f"n_negatives ({n_negatives}) must be < dataset_size "
            f"({memory.dataset_size})"
        )
    log_ratio = math.log(n_negatives / memory.dataset_size)

    positive = (s_embed * t_embed).sum(dim=-1) / tau_crd
    positive_term = -F.logsigmoid(positive - log_ratio).mean()

    teacher_negatives = memory.teacher_bank[negative_indices]
    student_negatives = memory.student_bank[negative_indices]
    s_scores = torch.einsum("bnd,bd->bn", teacher_negatives, s_embed) / tau_crd
    t_scores = torch.einsum("bnd,bd->bn", student_negatives, t_embed) / tau_crd
    s_negative_term = -F.logsigmoid(log_ratio - s_scores).sum(dim=1).mean()
    t_negative_term = -F.logsigmoid(log_ratio - t_scores).sum(dim=1).mean()

    return positive_term + 0.5 * (s_negative_term + t_negative_term)


class CrdLoss(nn.Module):
    """Projections G^S, G^T plus the memory bank; forward returns the CRD loss.

    The banks are only updated in training mode.
    """

    def __init__(
        self, student_dim: int, teacher_dim: int, cfg: LossConfig, seed: int = 0
    ):
        super().__init__()
        if cfg.dataset_size is None:
            raise ValueError("LossConfig.dataset_size must be set for CRD")
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.embed_s = nn.Linear(student_dim, cfg.embed_dim)
            self.embed_t = nn.Linear(teacher_dim, cfg.embed_dim)
        self.memory = CrdMemory(
            cfg.dataset_size, cfg.embed_dim, cfg.buffer_momentum, seed=seed
        )
        self.generator = torch.Generator().manual_seed(seed + 1)

    def embed(
        self, student_penult: torch.Tensor, teacher_penult: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        s_embed = F.normalize(self.embed_s(student_penult), dim=1)
        t_embed = F.normalize(self.embed_t(teacher_penult), dim=1)
        return s_embed, t_embed

    def forward(
        self,
        student_penult: torch.Tensor,
        teacher_penult: torch.Tensor,
        indices: torch.Tensor,
        negative_indices: torch.Tensor | None = None,
        update_memory: bool = True,
    ) -> torch.Tensor:
        s_embed, t_embed = self.embed(student_penult, teacher_penult)
        if negative_indices is None:
            negative_indices = self.memory.sample_negatives(
                indices, self.cfg.n_negatives, self.generator
            )
        loss = contrastive_objective(
            s_embed, t_embed, self.memory, negative_indices, self.cfg.tau_crd
        )
        if update_memory and self.training:
            self.memory.update(indices, t_embed.detach(), s_embed.detach())
        return loss


def crd_loss(
    student_penult: torch.Tensor,
    teacher_penult: torch.Tensor,
    indices: torch.Tensor,
    criterion: CrdLoss,
    negative_indices: torch.Tensor | None = None,
    update_memory: bool = True,
) -> torch.Tensor:
    """Functional entry point for ``CrdLoss.forward``"""
    return criterion(
        student_penult, teacher_penult, indices, negative_indices, update_memory
    )


def joint_loss(
    student_out: ForwardOutput,
    teacher_out: ForwardOutput | None,
    labels: torch.Tensor,
    cfg: LossConfig,
    crd: CrdLoss | None = None,
    indices: torch.Tensor | None = None,
    negative_indices: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """``alpha * kd + beta * crd + gamma * ce``.

    CE uses every student logit, so pseudo open samples target class ``k``.
    KD uses only the first ``k`` student logits against the ``k`` teacher
    logits. CRD works on penultimate features.
    """
    logits = student_out.logits
    num_outputs = logits.shape[1]
    if int(labels.max()) >= num_outputs or int(labels.min()) < 0:
        raise ValueError(
            f"labels must lie in [0, {num_outputs - 1}], got "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    zero = logits.new_zeros(())
    ce = F.cross_entropy(logits, labels)
    kd = zero
    crd_value = zero

    if teacher_out is not None:
        k = teacher_out.logits.shape[1]
        if num_outputs not in (k, k + 1):
            raise ValueError(
                f"student has {num_outputs} logits, teacher {k}; expected k or k+1"
            )
        mask = labels < k if cfg.distill_closed_only else torch.ones_like(labels, dtype=torch.bool)
        if bool(mask.any()):
            kd = kd_loss(
                logits[mask, :k],
                teacher_out.logits[mask],
                cfg.tau_kd,
                cfg.kd_tau_squared,
            )
            if crd is not None:
                if indices is None:
                    raise ValueError("CRD needs the batch's dataset indices")
                crd_value = crd(
                    student_out.penultimate[mask],
                    teacher_out.penultimate[mask],
                    indices[mask],
                    None if negative_indices is None else negative_indices[mask],
                )

    total = cfg.alpha * kd + cfg.beta * crd_value + cfg.gamma * ce
    return total, {"ce": ce, "kd": kd, "crd": crd_value}
