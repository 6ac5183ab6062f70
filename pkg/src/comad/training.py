"""Distillation loop: frozen teachers, trainable student + adapters + projection heads.

One :meth:`Trainer.train_step` runs, in order: embed every view, sample the
step's masks, apply them, teacher forwards (no graph), student forward,
adapters, gating, fusion, losses, backward, AdamW update.

Every source of randomness is a function of ``(train.seed, step, stream)``
except batch selection, which draws from a generator whose state is saved in
checkpoints, so a resumed run replays the uninterrupted one exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .adapter import Adapter
from .autograd import Tensor, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import Config
from .data import Dataset, color_jitter, normalize_pixels, read_binary_dataset, synthetic_dataset
from .errors import CheckpointError, ConfigError, ContractError, NumericError
from .gating import GatingResult, compute_gating
from .losses import LossReport, ProjectionHead, fuse, total_loss
from .masking import MaskSet, apply_mask, sample_mask, sample_mask_set, stream_rng
from .nn import Linear
from .optim import AdamW, lr_at
from .vit import ViTEncoder, patchify

logger = logging.getLogger(__name__)

# PRNG stream ids mixed into (seed, step, stream); 0..M are the mask streams.
_STREAM_JITTER = 1001
_STREAM_NOISE_TEACHER = 2000
_STREAM_DATA = 3001
_STREAM_INIT = 4001


def load_dataset(cfg: Config, labeled: bool = False) -> Dataset:
    d = cfg.data
    if d.source == "synthetic":
        ds = synthetic_dataset(
            d.count, cfg.student.image_size, cfg.student.in_channels, d.class_count, d.seed, d.noise
        )
    else:
        ds = read_binary_dataset(d.path)
    _, c, h, w = ds.images.shape
    expect = (cfg.student.in_channels, cfg.student.image_size, cfg.student.image_size)
    if (c, h, w) != expect:
        raise ConfigError(f"dataset images are {c}x{h}x{w}, model expects {expect[0]}x{expect[1]}x{expect[2]}")
    if labeled and ds.labels is None:
        raise ConfigError("this command needs a labeled dataset")
    return ds


def _init_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), _STREAM_INIT, *path])))


def build_teachers(cfg: Config) -> list[ViTEncoder]:
    return [
        ViTEncoder(cfg.teacher, np.random.default_rng(cfg.teachers.init_seed + m), cfg.train.dtype).freeze()
        for m in range(cfg.teachers.count)
    ]


class CoMADModel:
    """Student encoder, frozen teachers, one adapter per active teacher, token and spatial heads."""

    def __init__(self, cfg: Config, teachers: list[ViTEncoder] | None = None):
        self.cfg = cfg
        dtype = cfg.train.dtype
        seed = cfg.train.seed
        self.student = ViTEncoder(cfg.student, _init_rng(seed, 0), dtype)
        if teachers is None:
            teachers = build_teachers(cfg)
        if len(teachers) != cfg.teachers.count:
            raise ConfigError(f"got {len(teachers)} teacher encoders, config declares {cfg.teachers.count}")
        self.teachers = [t.astype(dtype).freeze() for t in teachers]
        ds, dt = cfg.student.embed_dim, cfg.teacher.embed_dim
        self.adapters = {m: Adapter(dt, ds, _init_rng(seed, 1, m), dtype) for m in cfg.active_teachers}
        k = cfg.train.loss.projection_dim
        self.phi = ProjectionHead(ds, k, _init_rng(seed, 2), dtype)
        self.psi = ProjectionHead(ds, k, _init_rng(seed, 3), dtype)

    def trainable_parameters(self) -> dict[str, Tensor]:
        out = self.student.named_parameters("student.")
        for m, a in self.adapters.items():
            out.update(a.named_parameters(f"adapter.{m}."))
        out.update(self.phi.named_parameters("phi."))
        out.update(self.psi.named_parameters("psi."))
        return out

    def teacher_parameters(self) -> dict[str, Tensor]:
        out = {}
        for m, t in enumerate(self.teachers):
            out.update(t.named_parameters(f"teacher.{m}."))
        return out

    def teacher_checksums(self) -> list[str]:
        return [t.checksum() for t in self.teachers]


@dataclass
class StepOutputs:
    """Intermediate tensors of one forward pass (kept for inspection and tests)."""

    masks: MaskSet
    student_tokens: Tensor
    teacher_tokens: list[Tensor]
    adapted: list[Tensor]
    gating: GatingResult
    fused: Tensor
    loss: Tensor
    report: LossReport


class Trainer:
    def __init__(self, cfg: Config, model: CoMADModel | None = None, dataset: Dataset | None = None):
        self.cfg = cfg
        self.model = model if model is not None else CoMADModel(cfg)
        self.dataset = dataset if dataset is not None else load_dataset(cfg)
        t = cfg.train
        self.optimizer = AdamW(self.model.trainable_parameters(), t.weight_decay, t.betas, t.eps, t.clip_norm)
        self.step = 0
        self.data_rng = stream_rng(t.seed, 0, _STREAM_DATA)
        self.last_outputs: StepOutputs | None = None
        self.keep_outputs = False

    # -- schedule ----------------------------------------------------------
    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.dataset) // self.cfg.train.batch_size)

    @property
    def total_steps(self) -> int:
        t = self.cfg.train
        return t.steps if t.steps is not None else t.epochs * self.steps_per_epoch

    def lr(self, step: int | None = None) -> float:
        t = self.cfg.train
        return lr_at(self.step if step is None else step, self.total_steps, t.lr_peak, t.warmup_fraction)

    # -- data ----------------------------------------------------------------
    def next_batch(self) -> np.ndarray:
        b = min(self.cfg.train.batch_size, len(self.dataset))
        idx = np.sort(self.data_rng.choice(len(self.dataset), size=b, replace=False))
        return self.dataset.images[idx]

    # -- forward -------------------------------------------------------------
    def _teacher_tokens(self, m: int, patches: Tensor, mask: np.ndarray, step: int) -> Tensor:
        cfg = self.cfg
        if m in cfg.teachers.noise:
            b, n = mask.shape
            rng = stream_rng(cfg.train.seed, step, _STREAM_NOISE_TEACHER + m)
            return Tensor(rng.standard_normal((b, n, cfg.teacher.embed_dim)).astype(ag.resolve_dtype(cfg.train.dtype)))
        teacher = self.model.teachers[m]
        return teacher.forward(apply_mask(teacher.embed(patches), mask))

    def forward(self, images: np.ndarray, step: int | None = None) -> StepOutputs:
        """Build the loss graph for ``images`` using the masks and noise of ``step``."""
        cfg, model = self.cfg, self.model
        step = self.step if step is None else step
        seed = cfg.train.seed
        active = cfg.active_teachers
        b = len(images)
        p = cfg.student.patch_size
        stage = "embed"
        try:
            masks = sample_mask_set(b, cfg.student.num_patches, cfg.active_mask, seed, step, ag.resolve_dtype(cfg.train.dtype))
            patches = patchify(normalize_pixels(images), p)
            student_images = images
            if cfg.train.student_jitter:
                student_images = color_jitter(images, stream_rng(seed, step, _STREAM_JITTER))
            student_images = normalize_pixels(student_images)
            stage = "teacher forward"
            with no_grad():
                teacher_tokens = [self._teacher_tokens(m, patches, masks.teachers[i], step) for i, m in enumerate(active)]
            stage = "student forward"
            student_tokens = model.student.forward(
                apply_mask(model.student.embed(patchify(student_images, p)), masks.student)
            )
            stage = "adapter"
            adapted = [model.adapters[m](tok) for m, tok in zip(active, teacher_tokens)]
            stage = "gating"
            gating = compute_gating(student_tokens, adapted, cfg.train.gating)
            stage = "fusion"
            fused = fuse(gating.alpha, adapted)
            if len(adapted) == 1 and not np.array_equal(fused.data, adapted[0].data):
                raise ContractError("single-teacher fused target differs from the adapted teacher tokens")
            stage = "loss"
            loss, report = total_loss(
                student_tokens, fused, masks.student, model.phi, model.psi, cfg.train.loss, gating.alpha
            )
        except NumericError as exc:
            raise NumericError(f"{stage}: {exc}") from exc
        return StepOutputs(masks, student_tokens, teacher_tokens, adapted, gating, fused, loss, report)

    def train_step(self, images: np.ndarray | None = None) -> LossReport:
        if images is None:
            images = self.next_batch()
        out = self.forward(images)
        self.optimizer.zero_grad()
        try:
            ag.backward(out.loss)
        except NumericError as exc:
            raise NumericError(f"backward: {exc}") from exc
        lr = self.lr()
        self.optimizer.step(lr)
        self.step += 1
        if self.keep_outputs:
            self.last_outputs = out
        self.last_lr = lr
        return out.report

    def run(
        self,
        steps: int | None = None,
        metrics_path=None,
        on_step: Callable[[int, LossReport], None] | None = None,
        log_every: int = 0,
    ) -> list[LossReport]:
        """Train until ``steps`` more steps are done (default: to ``total_steps``)."""
        target = self.total_steps if steps is None else self.step + steps
        reports = []
        fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
        try:
            while self.step < target:
                rep = self.train_step()
                reports.append(rep)
                if fh:
                    fh.write(json.dumps(metrics_record(self.step - 1, self.last_lr, rep)) + "\n")
                if on_step:
                    on_step(self.step - 1, rep)
                if log_every and (self.step % log_every == 0 or self.step == target):
                    logger.info("step %d/%d total %.6f", self.step, target, rep.total)
        finally:
            if fh:
                fh.close()
        return reports

    # -- checkpoints ---------------------------------------------------------
    def to_checkpoint(self) -> Checkpoint:
        tensors = {k: v.data for k, v in self.model.trainable_parameters().items()}
        tensors.update({k: v.data for k, v in self.model.teacher_parameters().items()})
        for k in self.optimizer.params:
            tensors[f"optim.m.{k}"] = self.optimizer.state.m[k]
            tensors[f"optim.v.{k}"] = self.optimizer.state.v[k]
        extra = {
            "kind": "distill",
            "optim_step": self.optimizer.state.step,
            "teacher_count": len(self.model.teachers),
            "active_teachers": list(self.cfg.active_teachers),
        }
        return Checkpoint(tensors, self.cfg.digest(), self.data_rng.bit_generator.state, self.step, extra)

    def save(self, path) -> None:
        save_checkpoint(path, self.to_checkpoint())

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.extra.get("kind") != "distill":
            raise CheckpointError("not a distillation checkpoint")
        stored_teachers = ckpt.extra.get("teacher_count")
        if stored_teachers != self.cfg.teachers.count:
            raise ConfigError(
                f"checkpoint holds {stored_teachers} teachers, config declares {self.cfg.teachers.count}"
            )
        if tuple(ckpt.extra.get("active_teachers", ())) != self.cfg.active_teachers:
            raise ConfigError(
                f"checkpoint was trained on teachers {ckpt.extra.get('active_teachers')}, "
                f"config selects {list(self.cfg.active_teachers)}"
            )
        expected = set(self.model.trainable_parameters()) | set(self.model.teacher_parameters())
        expected |= {f"optim.{s}.{k}" for k in self.optimizer.params for s in ("m", "v")}
        if set(ckpt.tensors) != expected:
            missing = sorted(expected - set(ckpt.tensors))[:5]
            extra = sorted(set(ckpt.tensors) - expected)[:5]
            raise CheckpointError(f"checkpoint tensors disagree with config: missing {missing}, unexpected {extra}")
        params = {**self.model.trainable_parameters(), **self.model.teacher_parameters()}
        for name, p in params.items():
            arr = ckpt.tensors[name]
            if arr.shape != p.shape or arr.dtype != p.dtype:
                raise CheckpointError(f"{name}: stored {arr.dtype}{arr.shape}, config expects {p.dtype}{p.shape}")
            p.data = arr.copy()
        for k in self.optimizer.params:
            self.optimizer.state.m[k] = ckpt.tensors[f"optim.m.{k}"].copy()
            self.optimizer.state.v[k] = ckpt.tensors[f"optim.v.{k}"].copy()
        self.optimizer.state.step = int(ckpt.extra.get("optim_step", ckpt.step))
        self.data_rng.bit_generator.state = ckpt.rng_state
        self.step = ckpt.step

    @classmethod
    def from_checkpoint(cls, path, cfg: Config, dataset: Dataset | None = None) -> Trainer:
        trainer = cls(cfg, dataset=dataset)
        trainer.restore(load_checkpoint(path))
        return trainer


def metrics_record(step: int, lr: float, rep: LossReport) -> dict:
    return {
        "step": step,
        "lr": lr,
        "l_token": rep.l_token,
        "l_spatial": rep.l_spatial,
        "total": rep.total,
        "alpha_mean": rep.alpha_mean,
    }


# ---------------------------------------------------------------------------
# Teacher checkpoints and toy pretraining
# ---------------------------------------------------------------------------


def save_teacher(path, teacher: ViTEncoder, cfg: Config, index: int, mode: str) -> None:
    extra = {"kind": "teacher", "index": index, "mode": mode}
    save_checkpoint(path, Checkpoint(teacher.state_dict(), cfg.digest(), None, 0, extra))


def load_teacher(path, cfg: Config) -> ViTEncoder:
    ckpt = load_checkpoint(path)
    if ckpt.extra.get("kind") != "teacher":
        raise CheckpointError(f"{path}: not a teacher checkpoint")
    enc = ViTEncoder(cfg.teacher, 0, cfg.train.dtype)
    enc.load_state_dict({k: v.astype(enc.dtype) for k, v in ckpt.tensors.items()})
    return enc.freeze()


def load_teachers(directory, cfg: Config) -> list[ViTEncoder]:
    directory = Path(directory)
    paths = [directory / f"teacher_{m}.ckpt" for m in range(cfg.teachers.count)]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise CheckpointError(f"missing teacher checkpoints: {', '.join(missing)}")
    return [load_teacher(p, cfg) for p in paths]


@dataclass
class PretrainResult:
    initial_loss: float
    final_loss: float
    history: list[float]

    @property
    def reduction(self) -> float:
        return 1.0 - self.final_loss / self.initial_loss


def toy_pretrain(
    encoder: ViTEncoder,
    dataset: Dataset,
    steps: int = 300,
    batch_size: int = 32,
    mask_ratio: float = 0.5,
    lr: float = 2e-3,
    seed: int = 0,
) -> PretrainResult:
    """Short masked-reconstruction run that gives a random encoder some structure.

    Masked positions are zeroed as in distillation. Two linear pixel decoders
    are trained with the encoder: one maps each hidden patch's output token to
    that patch, the other maps the class-token output to the whole image, so
    the class token has to summarize the global layout. The loss is measured
    before and after on one fixed evaluation batch with fixed masks.
    """
    cfg = encoder.cfg
    was_frozen = encoder.frozen
    for p in encoder.parameters():
        p.requires_grad = True
    encoder.frozen = False
    n = cfg.num_patches
    token_dec = Linear(cfg.embed_dim, cfg.patch_dim, _init_rng(seed, 9), encoder.dtype)
    global_dec = Linear(cfg.embed_dim, n * cfg.patch_dim, _init_rng(seed, 10), encoder.dtype)
    params = {
        **encoder.named_parameters("enc."),
        **token_dec.named_parameters("token_dec."),
        **global_dec.named_parameters("global_dec."),
    }
    opt = AdamW(params, weight_decay=0.05)
    rng = np.random.default_rng([seed, 17])

    def loss_on(images, mask):
        target = ag.cast(patchify(normalize_pixels(images), cfg.patch_size), encoder.dtype)
        tokens = encoder.forward(apply_mask(encoder.embed(target), mask))
        hidden = Tensor((1.0 - mask[:, 1:, None]).astype(encoder.dtype))
        diff = (token_dec(tokens[:, 1:, :]) - target) * hidden
        local = ag.tsum(diff * diff) * (1.0 / (float(hidden.data.sum()) * cfg.patch_dim))
        whole = global_dec(tokens[:, 0, :]).reshape(target.shape) - target
        return local + ag.mean(whole * whole)

    eval_idx = rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False)
    eval_images = dataset.images[eval_idx]
    eval_mask = sample_mask(len(eval_images), n, mask_ratio, np.random.default_rng([seed, 18]), encoder.dtype)
    with no_grad():
        initial = float(loss_on(eval_images, eval_mask).data)
    history = []
    for step in range(steps):
        idx = rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False)
        mask = sample_mask(len(idx), n, mask_ratio, rng, encoder.dtype)
        loss = loss_on(dataset.images[idx], mask)
        opt.zero_grad()
        ag.backward(loss)
        opt.step(lr_at(step + 1, steps, lr, 0.05))
        history.append(float(loss.data))
    with no_grad():
        final = float(loss_on(eval_images, eval_mask).data)
    if was_frozen:
        encoder.freeze()
    return PretrainResult(initial, final, history)


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------


def class_token_features(encoder: ViTEncoder, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    feats = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            feats.append(encoder.encode(normalize_pixels(images[i : i + batch_size])).data[:, 0, :].astype(np.float64))
    return np.concatenate(feats)


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    class_count: int
    test_count: int

    @property
    def chance(self) -> float:
        return 1.0 / self.class_count


def linear_probe(
    encoder: ViTEncoder,
    dataset: Dataset,
    epochs: int = 200,
    lr: float = 0.1,
    weight_decay: float = 1e-4,
    holdout_fraction: float = 0.25,
    seed: int = 0,
) -> ProbeResult:
    """Fit a softmax classifier on frozen class-token features; report held-out top-1.

    Features are standardized with training-split statistics; the classifier
    starts at zero and runs full-batch gradient descent.
    """
    if dataset.labels is None:
        raise ConfigError("linear probe needs labels")
    k = int(dataset.labels.max()) + 1
    if len(np.unique(dataset.labels)) < 2:
        raise ConfigError("linear probe needs at least two classes")
    train, test = dataset.split(holdout_fraction, seed)
    if len(test) == 0 or len(train) == 0:
        raise ConfigError("probe split left an empty train or test set")
    xtr = class_token_features(encoder, train.images)
    xte = class_token_features(encoder, test.images)
    mu, sd = xtr.mean(axis=0), xtr.std(axis=0) + 1e-6
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    ytr = np.eye(k)[train.labels]
    w = np.zeros((xtr.shape[1], k))
    b = np.zeros(k)
    for _ in range(epochs):
        logits = xtr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - ytr) / len(xtr)
        w -= lr * (xtr.T @ g + weight_decay * w)
        b -= lr * g.sum(axis=0)
    acc = float(np.mean(np.argmax(xte @ w + b, axis=1) == test.labels))
    tr_acc = float(np.mean(np.argmax(xtr @ w + b, axis=1) == train.labels))
    return ProbeResult(acc, tr_acc, k, len(test))


__all__ = [
    "CoMADModel",
    "Trainer",
    "StepOutputs",
    "load_dataset",
    "build_teachers",
    "save_teacher",
    "load_teacher",
    "load_teachers",
    "toy_pretrain",
    "PretrainResult",
    "linear_probe",
    "ProbeResult",
    "class_token_features",
    "metrics_record",
]
