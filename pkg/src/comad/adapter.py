"""Per-teacher adapters mapping teacher tokens (width D_T) into the student width D_S."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, layer_norm, linear, resolve_dtype
from .errors import DimensionError
from .nn import Module, trunc_normal


class Adapter(Module):
    """``LayerNorm(W z + b)`` with ``W`` of shape [D_S, D_T]."""

    def __init__(self, teacher_dim: int, student_dim: int, rng: np.random.Generator | int = 0, dtype="f32"):
        super().__init__()
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        dt = resolve_dtype(dtype)
        self.teacher_dim = teacher_dim
        self.student_dim = student_dim
        self.weight = self.add_param("weight", trunc_normal(rng, (student_dim, teacher_dim), dtype=dt))
        self.bias = self.add_param("bias", np.zeros(student_dim, dtype=dt))
        self.norm_weight = self.add_param("norm.weight", np.ones(student_dim, dtype=dt))
        self.norm_bias = self.add_param("norm.bias", np.zeros(student_dim, dtype=dt))

    def __call__(self, teacher_tokens: Tensor) -> Tensor:
        return adapt(teacher_tokens, self)


def adapt(teacher_tokens: Tensor, adapter: Adapter) -> Tensor:
    if teacher_tokens.shape[-1] != adapter.teacher_dim:
        raise DimensionError(
            f"teacher token width {teacher_tokens.shape[-1]} != adapter input width {adapter.teacher_dim}"
        )
    z = linear(teacher_tokens, adapter.weight, adapter.bias)
    return layer_norm(z, adapter.norm_weight, adapter.norm_bias)
