"""Parameter-free per-token teacher weighting.

For every (sample, position, teacher):

* affinity ``s``: cosine between the student token and the adapted teacher token,
* consensus ``c``: mean cosine between that teacher token and every other teacher's,
* score ``e``: ``s + c`` (or one of them alone, depending on the variant),
* weight ``alpha``: softmax of ``e / temperature`` over the teacher axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError, NumericError

VARIANTS = ("full", "affinity_only", "consensus_only", "uniform")


@dataclass(frozen=True)
class GatingConfig:
    temperature: float = 0.1
    variant: str = "full"
    differentiable: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"gating.temperature must be > 0, got {self.temperature}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown gating.variant {self.variant!r}; expected one of {VARIANTS}")


@dataclass
class GatingResult:
    s: Tensor
    c: Tensor
    e: Tensor
    alpha: Tensor


def _stack(adapted: Sequence[Tensor]) -> Tensor:
    if len(adapted) == 0:
        raise ConfigError("gating needs at least one teacher")
    shape = adapted[0].shape
    for t in adapted:
        if t.shape != shape:
            raise DimensionError(f"adapted teacher tokens differ in shape: {shape} vs {t.shape}")
    return ag.stack(list(adapted), axis=-2)


def affinity(student: Tensor, adapted: Sequence[Tensor]) -> Tensor:
    """Cosine between each student token and each adapted teacher token: [B, N+1, M]."""
    stacked = _stack(adapted)
    if student.shape != adapted[0].shape:
        raise DimensionError(f"student tokens {student.shape} vs adapted teacher tokens {adapted[0].shape}")
    b = student.reshape(*student.shape[:-1], 1, student.shape[-1])
    return ag.cosine_similarity(b, stacked)


def consensus(adapted: Sequence[Tensor]) -> Tensor:
    """Mean cosine of teacher ``m`` against all other teachers; zeros when M == 1."""
    stacked = _stack(adapted)
    m = len(adapted)
    if m == 1:
        return Tensor(np.zeros(stacked.shape[:-1], dtype=stacked.dtype))
    unit = stacked / ag.clamped_norm(stacked)
    gram = unit @ ag.swap_last(unit)
    off_diag = Tensor((1.0 - np.eye(m)).astype(stacked.dtype))
    return ag.tsum(gram * off_diag, axis=-1) * (1.0 / (m - 1))


def gate(s: Tensor, c: Tensor, cfg: GatingConfig) -> GatingResult:
    if s.shape != c.shape:
        raise DimensionError(f"affinity {s.shape} and consensus {c.shape} differ in shape")
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown gating variant {cfg.variant!r}")
    if cfg.variant == "affinity_only":
        e = s
    elif cfg.variant == "consensus_only":
        e = c
    else:
        e = s + c
    m = s.shape[-1]
    if cfg.variant == "uniform" or m == 1:
        alpha = Tensor(np.full(s.shape, 1.0 / m, dtype=s.dtype))
    else:
        alpha = ag.softmax(e, axis=-1, temperature=cfg.temperature)
        if not cfg.differentiable:
            alpha = alpha.detach()
    return GatingResult(s=s, c=c, e=e, alpha=alpha)


def _unit_norm(x: np.ndarray) -> np.ndarray:
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return np.where(n > ag.COSINE_EPS, n, ag.COSINE_EPS).astype(x.dtype)


def _scores_detached(student: Tensor, adapted: Sequence[Tensor]) -> tuple[np.ndarray, np.ndarray]:
    """Same ``s`` and ``c`` as :func:`affinity` and :func:`consensus`, without building a graph."""
    stacked = _stack([a.detach() for a in adapted]).data
    if student.shape != adapted[0].shape:
        raise DimensionError(f"student tokens {student.shape} vs adapted teacher tokens {adapted[0].shape}")
    z = student.data[..., None, :]
    nt = _unit_norm(stacked)
    s = (z * stacked).sum(axis=-1) / (_unit_norm(z) * nt)[..., 0]
    m = len(adapted)
    if m == 1:
        return s, np.zeros_like(s)
    unit = stacked / nt
    gram = unit @ np.swapaxes(unit, -1, -2)
    c = (gram * (1.0 - np.eye(m, dtype=stacked.dtype))).sum(axis=-1) * stacked.dtype.type(1.0 / (m - 1))
    if not (np.isfinite(s).all() and np.isfinite(c).all()):
        raise NumericError("non-finite gating scores")
    return s, c


def compute_gating(student: Tensor, adapted: Sequence[Tensor], cfg: GatingConfig) -> GatingResult:
    """Affinity, consensus and weights in one call; inputs are detached unless ``cfg.differentiable``."""
    if cfg.differentiable:
        return gate(affinity(student, adapted), consensus(adapted), cfg)
    s, c = _scores_detached(student, adapted)
    return gate(Tensor(s), Tensor(c), cfg)
