"""Asymmetric token masking: one heavy student mask, lighter independent teacher masks.

Masks are ``[B, N+1]`` arrays of 0/1 in the token dtype. Column 0 is the
class token and is always kept. Randomness comes from numpy's PCG64 bit
generator seeded through :class:`numpy.random.SeedSequence`; each
``(seed, step, stream)`` triple gets its own generator so the student
stream and every teacher stream are independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError

STUDENT_STREAM = 0


@dataclass(frozen=True)
class MaskSpec:
    student: float = 0.75
    teachers: tuple[float, ...] = (0.50, 0.40, 0.30)

    def __post_init__(self):
        object.__setattr__(self, "teachers", tuple(float(r) for r in self.teachers))
        for r in (self.student, *self.teachers):
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"mask ratio {r} outside [0, 1)")
        if self.teachers and not self.student > max(self.teachers):
            raise ConfigError(
                f"student mask ratio {self.student} must exceed every teacher ratio "
                f"(max teacher ratio {max(self.teachers)})"
            )

    @property
    def num_teachers(self) -> int:
        return len(self.teachers)

    def subset(self, ids) -> MaskSpec:
        return MaskSpec(self.student, tuple(self.teachers[i] for i in ids))


@dataclass
class MaskSet:
    student: np.ndarray
    teachers: list[np.ndarray] = field(default_factory=list)
    rng_seed: int = 0


def kept_count(ratio: float, n: int) -> int:
    """round((1 - ratio) * n), halves rounded up, never below 1."""
    return max(1, int(np.floor((1.0 - ratio) * n + 0.5)))


def stream_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), step, stream])))


def sample_mask(batch: int, num_patches: int, ratio: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Keep ``kept_count(ratio, N)`` patches per row, uniformly without replacement."""
    if num_patches < 1:
        raise ConfigError(f"need at least one patch, got N={num_patches}")
    k = kept_count(ratio, num_patches)
    order = np.argsort(rng.random((batch, num_patches)), axis=1, kind="stable")
    mask = np.zeros((batch, num_patches + 1), dtype=dtype)
    mask[:, 0] = 1
    np.put_along_axis(mask, order[:, :k] + 1, 1, axis=1)
    return mask


def sample_mask_set(batch: int, num_patches: int, spec: MaskSpec, seed: int, step: int = 0, dtype=np.float32) -> MaskSet:
    """Student mask on stream 0, teacher ``m`` on stream ``m + 1``; deterministic in all arguments."""
    student = sample_mask(batch, num_patches, spec.student, stream_rng(seed, step, STUDENT_STREAM), dtype)
    teachers = [
        sample_mask(batch, num_patches, r, stream_rng(seed, step, m + 1), dtype)
        for m, r in enumerate(spec.teachers)
    ]
    return MaskSet(student, teachers, seed)


def apply_mask(tokens: Tensor, mask) -> Tensor:
    """Zero token rows where ``mask`` is 0; sequence length is unchanged."""
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if mask.shape != tokens.shape[:2]:
        raise DimensionError(f"mask {mask.shape} does not match tokens {tokens.shape[:2]}")
    if not np.isin(mask, (0, 1)).all():
        raise ContractError("mask must contain only 0 and 1")
    return ag.mul(tokens, Tensor(mask[..., None].astype(tokens.dtype)))
