"""Parameter containers and initializers shared by the encoder, adapters and heads."""

from __future__ import annotations

import hashlib

import numpy as np

from .autograd import Tensor, gelu, layer_norm, linear, resolve_dtype
from .errors import CheckpointError


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to [-2 std, 2 std] by resampling out-of-range draws."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Module:
    """A flat, ordered mapping of named parameter tensors.

    Subclasses register parameters with :meth:`add_param` and submodules with
    :meth:`add_module`; names are dotted paths (``blocks.0.attn.q.weight``).
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._modules: dict[str, Module] = {}
        self.frozen = False

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_module(self, name: str, module: Module) -> Module:
        self._modules[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, mod in self._modules.items():
            out.update(mod.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def freeze(self) -> Module:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        for mod in self._modules.values():
            mod.frozen = True
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            if p.requires_grad:
                p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise CheckpointError(f"parameter names disagree: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: stored shape {arr.shape} != expected {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> Module:
        dt = resolve_dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dt)
            p.grad = None
        return self

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.named_parameters().values())).dtype

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.weight = self.add_param("weight", trunc_normal(rng, (out_dim, in_dim), dtype=dtype))
        self.bias = self.add_param("bias", np.zeros(out_dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        super().__init__()
        self.weight = self.add_param("weight", np.ones(dim, dtype=dtype))
        self.bias = self.add_param("bias", np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias)


class MLP(Module):
    """Two affine layers with GELU in between."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.fc1 = self.add_module("fc1", Linear(in_dim, hidden, rng, dtype))
        self.fc2 = self.add_module("fc2", Linear(hidden, out_dim, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))
