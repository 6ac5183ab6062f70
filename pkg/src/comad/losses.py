"""Fused teacher targets and the token-level / spatial-level distillation losses."""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, gelu, kl_from_logits, linear
from .errors import ConfigError, ContractError, DimensionError
from .nn import MLP, trunc_normal

LOSS_VARIANTS = ("dual_kl", "token_only", "spatial_only", "dual_mse")
KL_DIRECTIONS = ("student_first", "teacher_first")


@dataclass(frozen=True)
class LossConfig:
    variant: str = "dual_kl"
    kl_direction: str = "student_first"
    projection_dim: int = 64

    def __post_init__(self):
        if self.variant not in LOSS_VARIANTS:
            raise ConfigError(f"unknown loss.variant {self.variant!r}; expected one of {LOSS_VARIANTS}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigError(f"unknown loss.kl_direction {self.kl_direction!r}; expected one of {KL_DIRECTIONS}")
        if self.projection_dim < 2:
            raise ConfigError(f"loss.projection_dim must be >= 2, got {self.projection_dim}")


@dataclass
class LossReport:
    l_token: float
    l_spatial: float
    total: float
    visible_count: int
    alpha_mean: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


class ProjectionHead(MLP):
    """D_S -> D_S -> K logits. ``frozen_weights=True`` evaluates with gradient-stopped weights.

    Weights start from N(0, 1/fan_in) so that unit-variance tokens give O(1)
    logits; with the encoder's 0.02 scale the two distributions would both sit
    at uniform and the divergence would carry no signal.
    """

    def __init__(self, dim: int, out_dim: int, rng: np.random.Generator | int = 0, dtype="f32"):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        dt = ag.resolve_dtype(dtype)
        super().__init__(dim, dim, out_dim, rng, dt)
        for layer in (self.fc1, self.fc2):
            fan_in = layer.weight.shape[1]
            layer.weight.data = trunc_normal(rng, layer.weight.shape, std=fan_in**-0.5, dtype=dt)
        self.out_dim = out_dim
        self._pinned: tuple[np.ndarray, ...] | None = None

    def __call__(self, x: Tensor, frozen_weights: bool = False) -> Tensor:
        if not frozen_weights:
            return super().__call__(x)
        if self._pinned is not None:
            w1, b1, w2, b2 = (Tensor(a) for a in self._pinned)
        else:
            w1, b1 = self.fc1.weight.detach(), self.fc1.bias.detach()
            w2, b2 = self.fc2.weight.detach(), self.fc2.bias.detach()
        return linear(gelu(linear(x, w1, b1)), w2, b2)

    @contextmanager
    def pinned_target(self):
        """Hold the gradient-stopped (teacher-side) weights at their current values.

        Finite-difference checks need this: perturbing a head weight must not
        move the stop-gradient copy, or the numeric derivative picks up a path
        autograd deliberately ignores.
        """
        self._pinned = tuple(t.data.copy() for t in (self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias))
        try:
            yield self
        finally:
            self._pinned = None


def fuse(alpha: Tensor, adapted: Sequence[Tensor]) -> Tensor:
    """Per-token convex combination ``sum_m alpha[..., m] * adapted[m]``."""
    if alpha.shape[-1] != len(adapted):
        raise DimensionError(f"alpha has {alpha.shape[-1]} teacher weights but {len(adapted)} teachers were given")
    for t in adapted:
        if t.shape[:-1] != alpha.shape[:-1]:
            raise DimensionError(f"teacher tokens {t.shape} do not match alpha {alpha.shape}")
    fused = alpha[..., 0:1] * adapted[0]
    for m in range(1, len(adapted)):
        fused = fused + alpha[..., m : m + 1] * adapted[m]
    return fused


def to_feature_map(tokens: Tensor) -> Tensor:
    """[B, N+1, D] -> [B, D, H', W'] from the patch tokens (class token dropped)."""
    b, t, d = tokens.shape
    n = t - 1
    side = math.isqrt(n)
    if side * side != n:
        raise ConfigError(f"spatial loss needs a square patch grid, got N={n}")
    return tokens[:, 1:, :].reshape(b, side, side, d).transpose(0, 3, 1, 2)


def _kl(student_logits: Tensor, teacher_logits: Tensor, direction: str) -> Tensor:
    if direction == "teacher_first":
        return kl_from_logits(teacher_logits, student_logits)
    return kl_from_logits(student_logits, teacher_logits)


def _check_mask(student_mask, tokens: Tensor) -> np.ndarray:
    mask = np.asarray(student_mask.data if isinstance(student_mask, Tensor) else student_mask)
    if mask.shape != tokens.shape[:2]:
        raise DimensionError(f"student mask {mask.shape} does not match tokens {tokens.shape[:2]}")
    if mask.sum() <= 0:
        raise ContractError("student mask has no visible positions")
    return mask.astype(tokens.dtype)


def token_loss(
    student: Tensor,
    fused: Tensor,
    student_mask,
    phi: ProjectionHead,
    kl_direction: str = "student_first",
) -> Tensor:
    """Mean KL between projected student and fused tokens over student-visible positions."""
    if student.shape != fused.shape:
        raise DimensionError(f"student {student.shape} vs fused {fused.shape}")
    mask = _check_mask(student_mask, student)
    kl = _kl(phi(student), phi(fused, frozen_weights=True), kl_direction)
    return ag.tsum(kl * Tensor(mask)) * (1.0 / float(mask.sum()))


def spatial_loss(student: Tensor, fused: Tensor, psi: ProjectionHead, kl_direction: str = "student_first") -> Tensor:
    """KL along channels at every cell of the patch feature map, averaged over cells and batch."""
    if student.shape != fused.shape:
        raise DimensionError(f"student {student.shape} vs fused {fused.shape}")
    fs = to_feature_map(student).transpose(0, 2, 3, 1)
    ft = to_feature_map(fused).transpose(0, 2, 3, 1)
    return ag.mean(_kl(psi(fs), psi(ft, frozen_weights=True), kl_direction))


def token_mse(student: Tensor, fused: Tensor, student_mask) -> Tensor:
    mask = _check_mask(student_mask, student)
    diff = student - fused
    per_token = ag.mean(diff * diff, axis=-1)
    return ag.tsum(per_token * Tensor(mask)) * (1.0 / float(mask.sum()))


def spatial_mse(student: Tensor, fused: Tensor) -> Tensor:
    diff = to_feature_map(student) - to_feature_map(fused)
    return ag.mean(diff * diff)


def total_loss(
    student: Tensor,
    fused: Tensor,
    student_mask,
    phi: ProjectionHead,
    psi: ProjectionHead,
    cfg: LossConfig = LossConfig(),
    alpha: Tensor | None = None,
) -> tuple[Tensor, LossReport]:
    """Combine the loss terms selected by ``cfg.variant``; returns the graph and a float report."""
    if cfg.variant not in LOSS_VARIANTS:
        raise ConfigError(f"unknown loss variant {cfg.variant!r}")
    if cfg.variant == "dual_mse":
        lt, ls = token_mse(student, fused, student_mask), spatial_mse(student, fused)
    else:
        lt = ls = None
        if cfg.variant in ("dual_kl", "token_only"):
            lt = token_loss(student, fused, student_mask, phi, cfg.kl_direction)
        if cfg.variant in ("dual_kl", "spatial_only"):
            ls = spatial_loss(student, fused, psi, cfg.kl_direction)
    if lt is not None and ls is not None:
        total = lt + ls
    else:
        total = lt if lt is not None else ls
    mask = _check_mask(student_mask, student)
    alpha_mean = [] if alpha is None else [float(v) for v in alpha.data.mean(axis=(0, 1))]
    l_token = float(lt.data) if lt is not None else 0.0
    l_spatial = float(ls.data) if ls is not None else 0.0
    report = LossReport(
        l_token=l_token,
        l_spatial=l_spatial,
        total=float(total.data),
        visible_count=int(mask.sum()),
        alpha_mean=alpha_mean,
    )
    return total, report


__all__ = [
    "LossConfig",
    "LossReport",
    "ProjectionHead",
    "fuse",
    "to_feature_map",
    "token_loss",
    "spatial_loss",
    "token_mse",
    "spatial_mse",
    "total_loss",
]
