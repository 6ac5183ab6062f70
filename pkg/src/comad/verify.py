"""Self-check suite: algebraic properties and finite-difference gradients, in f64.

Each check returns a :class:`CheckResult`; :func:`run_checks` runs them all
and never raises for a failing check (an exception inside a check is reported
as a failure with its message).
"""

from __future__ import annotations

import math
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import autograd as ag
from . import losses
from .autograd import Tensor, no_grad
from .checkpoint import load_checkpoint
from .config import Config
from .data import synthetic_dataset
from .gating import GatingConfig, compute_gating
from .masking import MaskSpec, kept_count, sample_mask_set
from .optim import AdamW, lr_at
from .training import CoMADModel, Trainer

FAULTS = ("flip-kl-sign",)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


@contextmanager
def injected_fault(name: str | None) -> Iterator[None]:
    """Temporarily break one piece of the library so the suite can prove it notices."""
    if name is None:
        yield
        return
    if name not in FAULTS:
        raise ValueError(f"unknown fault {name!r}; known: {', '.join(FAULTS)}")
    original = losses.kl_from_logits
    losses.kl_from_logits = lambda p, q, axis=-1: -original(p, q, axis)
    try:
        yield
    finally:
        losses.kl_from_logits = original


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


# -- individual checks ------------------------------------------------------------


def check_matmul() -> str:
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Tensor(np.array([[5.0], [6.0]]))
    out = ag.matmul(a, b).data
    assert np.array_equal(out, [[17.0], [39.0]]), out
    m = np.random.default_rng(0).standard_normal((3, 3))
    assert np.abs(ag.matmul(Tensor(np.eye(3)), Tensor(m)).data - m).max() <= 1e-12
    return "[[1,2],[3,4]]x[[5],[6]] = [[17],[39]]"


def check_softmax() -> str:
    rng = np.random.default_rng(1)
    x = _rand(rng, 200, 7) * 5.0
    rows = ag.softmax(x, temperature=0.1).data.sum(-1)
    err = np.abs(rows - 1).max()
    assert err <= 1e-12, err
    p = ag.softmax(Tensor(np.array([1.0, 0.0])), temperature=0.1).data
    assert abs(p[0] - 0.9999546) < 1e-7 and abs(p[1] - 4.54e-5) < 1e-7, p
    return f"row-sum error {err:.1e}"


def check_kl_nonnegative() -> str:
    """Token and spatial KL terms on random logits, heads and tokens must be >= 0."""
    rng = np.random.default_rng(2)
    worst = math.inf
    for _ in range(200):
        p, q = _rand(rng, 5, 8) * 3, _rand(rng, 5, 8) * 3
        worst = min(worst, float(losses.kl_from_logits(p, q).data.min()))
    phi = losses.ProjectionHead(6, 8, rng, "f64")
    for _ in range(20):
        s, f = _rand(rng, 2, 5, 6), _rand(rng, 2, 5, 6)
        mask = np.ones((2, 5))
        worst = min(worst, float(losses.token_loss(s, f, mask, phi).data))
        worst = min(worst, float(losses.spatial_loss(s, f, phi).data))
    assert worst >= 0.0, f"negative KL {worst:.3e}"
    return f"min KL {worst:.3e}"


def check_kl_identities() -> str:
    p = Tensor(np.array([0.75, 0.25]))
    q = Tensor(np.array([0.5, 0.5]))
    kl = float(ag.kl_divergence(p, q).data)
    expect = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert abs(kl - expect) < 1e-12, kl
    rng = np.random.default_rng(3)
    z = _rand(rng, 4, 9)
    assert np.all(ag.kl_from_logits(z, z).data == 0.0)
    phi = losses.ProjectionHead(6, 8, rng, "f64")
    psi = losses.ProjectionHead(6, 8, rng, "f64")
    s = _rand(rng, 2, 5, 6)
    mask = np.ones((2, 5))
    _, rep = losses.total_loss(s, s, mask, phi, psi)
    assert rep.total == 0.0, rep
    _, rep = losses.total_loss(s, _rand(rng, 2, 5, 6), mask, phi, psi)
    assert rep.total == rep.l_token + rep.l_spatial
    return f"KL(0.75,0.25 | 0.5,0.5) = {kl:.5f}"


def check_masking() -> str:
    spec = MaskSpec(0.75, (0.5, 0.4, 0.3))
    n = 196
    ms = sample_mask_set(8, n, spec, seed=11, step=3, dtype=np.float64)
    for mask, r in [(ms.student, spec.student), *zip(ms.teachers, spec.teachers)]:
        assert np.all(mask[:, 0] == 1)
        assert np.all(mask[:, 1:].sum(1) == kept_count(r, n))
    again = sample_mask_set(8, n, spec, seed=11, step=3, dtype=np.float64)
    assert np.array_equal(ms.student, again.student)
    assert all(np.array_equal(a, b) for a, b in zip(ms.teachers, again.teachers))
    return f"student keeps {kept_count(0.75, n)}/{n}"


def check_gating() -> str:
    rng = np.random.default_rng(4)
    cfg = GatingConfig()
    worst_sum = 0.0
    for _ in range(200):
        m = int(rng.integers(1, 6))
        s = _rand(rng, 2, 3, 5)
        ad = [_rand(rng, 2, 3, 5) for _ in range(m)]
        g = compute_gating(s, ad, cfg)
        worst_sum = max(worst_sum, float(np.abs(g.alpha.data.sum(-1) - 1).max()))
        perm = rng.permutation(m)
        gp = compute_gating(s, [ad[i] for i in perm], cfg)
        assert np.allclose(gp.alpha.data, g.alpha.data[..., perm], atol=1e-12)
        k = int(rng.integers(m))
        scaled = [a * float(rng.uniform(0.1, 10)) if i == k else a for i, a in enumerate(ad)]
        assert np.allclose(compute_gating(s, scaled, cfg).alpha.data, g.alpha.data, atol=1e-9)
    assert worst_sum <= 1e-6, worst_sum
    t = _rand(rng, 1, 1, 5)
    out = compute_gating(t, [t, t, -t], cfg).alpha.data[0, 0]
    assert out[2] < 1 / 3 < min(out[0], out[1]), out
    return f"max |sum(alpha)-1| {worst_sum:.1e}; outlier alpha {out[2]:.2e}"


def check_fusion() -> str:
    rng = np.random.default_rng(5)
    ad = [_rand(rng, 2, 3, 4) for _ in range(3)]
    alpha = ag.softmax(_rand(rng, 2, 3, 3), axis=-1)
    fused = losses.fuse(alpha, ad).data
    stack = np.stack([a.data for a in ad])
    assert np.all(fused >= stack.min(0) - 1e-12) and np.all(fused <= stack.max(0) + 1e-12)
    uni = Tensor(np.full((2, 3, 3), 1 / 3))
    assert np.allclose(losses.fuse(uni, ad).data, stack.mean(0), atol=1e-12)
    one = losses.fuse(Tensor(np.ones((2, 3, 1))), ad[:1]).data
    assert np.array_equal(one, ad[0].data)
    return "convex, uniform = mean, M=1 identity"


def check_schedule_and_adamw() -> str:
    assert lr_at(0, 100, 1.5e-4) == 0.0
    assert lr_at(5, 100, 1.5e-4) == 1.5e-4
    assert lr_at(100, 100, 1.5e-4) == 0.0
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    opt = AdamW({"w": p}, weight_decay=0.05)
    p.grad = np.zeros((2, 2))
    opt.step(0.1)
    assert np.allclose(p.data, 1 - 0.1 * 0.05, atol=1e-15)
    return "warmup/cosine endpoints, decoupled decay"


def _tiny_config(**overrides) -> Config:
    base = {
        "train.dtype": "f64",
        "train.batch_size": 2,
        "data.count": 8,
        "loss.projection_dim": 16,
    }
    base.update(overrides)
    return Config().with_overrides(base)


def composed_grad_check(cfg: Config, samples: int = 32, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4):
    """Finite differences of the full loss at ``samples`` random trainable entries.

    Stop-gradient quantities (the teacher-side head weights, and alpha unless
    ``gating.differentiable``) are constants of the objective, so they are held
    fixed while perturbing; with detached alpha use the uniform variant.

    Returns ``(max relative error, entries checked)``.
    """
    trainer = Trainer(cfg)
    images = trainer.dataset.images[: cfg.train.batch_size]
    params = trainer.model.trainable_parameters()
    names = sorted(params)
    rng = np.random.default_rng(seed)
    picks: dict[str, list[tuple[int, ...]]] = {}
    for _ in range(samples):
        name = names[int(rng.integers(len(names)))]
        shape = params[name].shape
        picks.setdefault(name, []).append(tuple(int(rng.integers(s)) for s in shape))

    def f():
        return trainer.forward(images, step=0).loss

    worst, count = 0.0, 0
    with trainer.model.phi.pinned_target(), trainer.model.psi.pinned_target():
        for name, idx in picks.items():
            for p in params.values():
                p.grad = None
            rep = ag.grad_check(f, params[name], eps=eps, tol=tol, indices=idx)
            worst = max(worst, rep.max_rel_error)
            count += rep.checked
    return worst, count


def check_gradients() -> str:
    worst_full, n_full = composed_grad_check(_tiny_config(**{"gating.differentiable": True}))
    worst_uni, n_uni = composed_grad_check(_tiny_config(**{"gating.variant": "uniform"}), seed=1)
    worst = max(worst_full, worst_uni)
    assert worst <= 1e-4, f"max rel err {worst:.2e}"
    return f"{n_full + n_uni} entries, max rel err {worst:.2e}"


def check_frozen_teachers() -> str:
    cfg = _tiny_config()
    trainer = Trainer(cfg)
    before = trainer.model.teacher_checksums()
    trainer.run(3)
    assert trainer.model.teacher_checksums() == before
    assert all(p.grad is None for p in trainer.model.teacher_parameters().values())
    assert set(trainer.optimizer.state.m) == set(trainer.model.trainable_parameters())
    grads = [trainer.model.adapters[m].weight.grad for m in cfg.active_teachers]
    assert all(g is not None and np.any(g != 0) for g in grads)
    return "teacher checksums unchanged, optimizer keys = trainable set"


def check_checkpoint() -> str:
    cfg = _tiny_config()
    trainer = Trainer(cfg)
    trainer.run(2)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ck.ckpt"
        trainer.save(path)
        restored = Trainer(cfg)
        restored.restore(load_checkpoint(path))
    a = trainer.model.trainable_parameters()
    b = restored.model.trainable_parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    ra = trainer.run(2)
    rb = restored.run(2)
    assert [r.total for r in ra] == [r.total for r in rb]
    return "bitwise round trip and resume"


def check_single_teacher() -> str:
    cfg = _tiny_config(**{"train.teacher_subset": [1]})
    trainer = Trainer(cfg)
    with no_grad():
        out = trainer.forward(trainer.dataset.images[:2], step=0)
    assert np.array_equal(out.fused.data, out.adapted[0].data)
    return "fused == adapted teacher"


CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("matmul", check_matmul),
    ("softmax", check_softmax),
    ("kl_nonnegative", check_kl_nonnegative),
    ("kl_identities", check_kl_identities),
    ("masking", check_masking),
    ("gating", check_gating),
    ("fusion", check_fusion),
    ("schedule_adamw", check_schedule_and_adamw),
    ("gradients", check_gradients),
    ("frozen_teachers", check_frozen_teachers),
    ("single_teacher", check_single_teacher),
    ("checkpoint", check_checkpoint),
]


def run_checks(fault: str | None = None, report: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    results = []
    with injected_fault(fault):
        for name, fn in CHECKS:
            t0 = time.perf_counter()
            try:
                detail, ok = fn(), True
            except Exception as exc:  # a check failing for any reason is a failed check
                detail, ok = f"{type(exc).__name__}: {exc}", False
            res = CheckResult(name, ok, detail, time.perf_counter() - t0)
            results.append(res)
            if report:
                report(res)
    return results
