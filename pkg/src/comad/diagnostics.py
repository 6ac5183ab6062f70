"""Gating weight statistics for a trained distillation checkpoint."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .autograd import no_grad
from .checkpoint import load_checkpoint
from .config import Config
from .data import Dataset
from .errors import ConfigError
from .training import Trainer, load_dataset

HIST_BINS = 16


@dataclass
class TeacherAlphaStats:
    teacher: int
    mean: float
    std: float
    min: float
    max: float
    count: int
    histogram: list[int]
    bin_edges: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def alpha_stats(alphas: np.ndarray, teacher_ids) -> list[TeacherAlphaStats]:
    """``alphas`` is [..., M]; every leading entry counts as one token."""
    flat = alphas.reshape(-1, alphas.shape[-1]).astype(np.float64)
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    out = []
    for j, m in enumerate(teacher_ids):
        col = flat[:, j]
        hist, _ = np.histogram(np.clip(col, 0.0, 1.0), bins=edges)
        out.append(
            TeacherAlphaStats(
                teacher=int(m),
                mean=float(col.mean()),
                std=float(col.std()),
                min=float(col.min()),
                max=float(col.max()),
                count=int(col.size),
                histogram=[int(h) for h in hist],
                bin_edges=[float(e) for e in edges],
            )
        )
    return out


def collect_alphas(trainer: Trainer, n_batches: int) -> np.ndarray:
    """Gating weights over ``n_batches`` consecutive dataset batches, shape [tokens, M]."""
    if n_batches < 1:
        raise ConfigError(f"n_batches must be >= 1, got {n_batches}")
    ds = trainer.dataset
    b = min(trainer.cfg.train.batch_size, len(ds))
    rows = []
    with no_grad():
        for i in range(n_batches):
            idx = (np.arange(b) + i * b) % len(ds)
            out = trainer.forward(ds.images[idx], step=trainer.step + i)
            a = out.gating.alpha.data
            rows.append(a.reshape(-1, a.shape[-1]))
    return np.concatenate(rows)


def inspect_gating(
    checkpoint_path,
    cfg: Config,
    n_batches: int = 4,
    dataset: Dataset | None = None,
    out_path=None,
) -> list[TeacherAlphaStats]:
    """Load a distillation checkpoint and summarize its gating weights per teacher.

    With ``out_path`` set, one JSON object per teacher is written there.
    """
    ckpt = load_checkpoint(checkpoint_path)
    stored = ckpt.extra.get("teacher_count")
    if stored is not None and stored != cfg.teachers.count:
        raise ConfigError(f"checkpoint holds {stored} teachers, config declares {cfg.teachers.count}")
    trainer = Trainer(cfg, dataset=dataset if dataset is not None else load_dataset(cfg))
    trainer.restore(ckpt)
    stats = alpha_stats(collect_alphas(trainer, n_batches), cfg.active_teachers)
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            for s in stats:
                fh.write(json.dumps(s.to_dict()) + "\n")
    return stats
