"""AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .errors import NumericError


def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    return int(round(warmup_fraction * total_steps))


def lr_at(step: int, total_steps: int, lr_peak: float, warmup_fraction: float = 0.05) -> float:
    """Linear ramp from 0 to ``lr_peak`` over the warmup, then half-cosine down to 0 at ``total_steps``."""
    if total_steps <= 0:
        return 0.0
    step = min(max(step, 0), total_steps)
    warm = warmup_steps(total_steps, warmup_fraction)
    if step < warm:
        return lr_peak * step / warm
    if total_steps == warm:
        return lr_peak
    progress = (step - warm) / (total_steps - warm)
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str, param: Tensor) -> bool:
    """Biases, norm affine parameters, positional embeddings and the class token are not decayed."""
    if param.ndim <= 1:
        return False
    return not (name.endswith("pos_embed") or name.endswith("cls_token"))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class AdamW:
    def __init__(
        self,
        params: dict[str, Tensor],
        weight_decay: float = 0.05,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float | None = None,
    ):
        self.params = {k: p for k, p in params.items() if p.requires_grad}
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = OptimizerState(
            m={k: np.zeros_like(p.data) for k, p in self.params.items()},
            v={k: np.zeros_like(p.data) for k, p in self.params.items()},
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in self.params.values() if p.grad is not None))

    def step(self, lr: float) -> None:
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name}")
            grads[name] = g
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / (norm + 1e-6)
                grads = {k: g * scale for k, g in grads.items()}
        b1, b2 = self.betas
        self.state.step += 1
        t = self.state.step
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = grads[name]
            m = self.state.m[name]
            v = self.state.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay and decays(name, p):
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
