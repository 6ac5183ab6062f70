"""Run configuration as flat dotted keys.

Config files are TOML; nested tables and dotted keys are equivalent, so

    [mask]
    student = 0.75

and ``mask.student = 0.75`` both set the key ``mask.student``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .gating import GatingConfig
from .losses import LossConfig
from .masking import MaskSpec
from .vit import ViTConfig


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 1.5e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = None
    batch_size: int = 32
    epochs: int = 20
    steps: int | None = None
    warmup_fraction: float = 0.05
    seed: int = 0
    teacher_subset: tuple[int, ...] | None = None
    dtype: str = "f32"
    student_jitter: bool = False
    mask: MaskSpec = field(default_factory=MaskSpec)
    gating: GatingConfig = field(default_factory=GatingConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"train.warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if self.steps is not None and self.steps < 1:
            raise ConfigError(f"train.steps must be >= 1, got {self.steps}")
        if self.lr_peak < 0 or self.weight_decay < 0:
            raise ConfigError("optim.lr and optim.weight_decay must be non-negative")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"train.dtype must be f32 or f64, got {self.dtype!r}")

    @property
    def warmup_epochs(self) -> float:
        return self.warmup_fraction * self.epochs


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: str | None = None
    count: int = 512
    class_count: int = 4
    seed: int = 0
    noise: float = 0.3
    holdout_fraction: float = 0.25

    def __post_init__(self):
        if self.source not in ("synthetic", "binary"):
            raise ConfigError(f"data.source must be 'synthetic' or 'binary', got {self.source!r}")
        if self.source == "binary" and not self.path:
            raise ConfigError("data.path is required when data.source = 'binary'")
        if self.count < 1:
            raise ConfigError(f"data.count must be >= 1, got {self.count}")


@dataclass(frozen=True)
class TeacherSetConfig:
    count: int = 3
    noise: tuple[int, ...] = ()
    init_seed: int = 1000

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError(f"teachers.count must be >= 1, got {self.count}")
        for i in self.noise:
            if not 0 <= i < self.count:
                raise ConfigError(f"teachers.noise id {i} outside 0..{self.count - 1}")


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 200
    lr: float = 0.1
    weight_decay: float = 1e-4


@dataclass(frozen=True)
class Config:
    student: ViTConfig = field(default_factory=ViTConfig)
    teacher: ViTConfig = field(default_factory=lambda: ViTConfig(embed_dim=64, depth=4, num_heads=4))
    teachers: TeacherSetConfig = field(default_factory=TeacherSetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        s, t = self.student, self.teacher
        if (s.image_size, s.patch_size, s.in_channels) != (t.image_size, t.patch_size, t.in_channels):
            raise ConfigError("student and teacher must share image_size, patch_size and in_channels")
        if self.train.mask.num_teachers != self.teachers.count:
            raise ConfigError(
                f"mask.teachers lists {self.train.mask.num_teachers} ratios for {self.teachers.count} teachers"
            )
        for i in self.active_teachers:
            if not 0 <= i < self.teachers.count:
                raise ConfigError(f"train.teacher_subset id {i} outside 0..{self.teachers.count - 1}")
        if len(set(self.active_teachers)) != len(self.active_teachers):
            raise ConfigError("train.teacher_subset contains duplicates")

    @property
    def active_teachers(self) -> tuple[int, ...]:
        sub = self.train.teacher_subset
        return tuple(range(self.teachers.count)) if sub is None else tuple(sub)

    @property
    def active_mask(self) -> MaskSpec:
        return self.train.mask.subset(self.active_teachers)

    # -- flat key view -------------------------------------------------
    def to_flat(self) -> dict[str, Any]:
        return {key: getter(self) for key, getter in _KEYS.items()}

    def digest(self) -> bytes:
        blob = json.dumps(self.to_flat(), sort_keys=True, default=list).encode("utf-8")
        return hashlib.sha256(blob).digest()

    def with_overrides(self, overrides: dict[str, Any]) -> Config:
        flat = self.to_flat()
        for key, value in overrides.items():
            if key not in _KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            flat[key] = value
        return Config.from_flat(flat)

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> Config:
        unknown = sorted(set(flat) - set(_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = Config().to_flat()
        values.update(flat)

        def sub(prefix):
            return {k[len(prefix) :]: v for k, v in values.items() if k.startswith(prefix)}

        try:
            model = sub("model.")
            student = ViTConfig(**model, **sub("student."))
            teacher = ViTConfig(**model, **sub("teacher."))
            teachers = TeacherSetConfig(
                count=int(values["teachers.count"]),
                noise=tuple(int(i) for i in values["teachers.noise"]),
                init_seed=int(values["teachers.init_seed"]),
            )
            mask = MaskSpec(float(values["mask.student"]), tuple(values["mask.teachers"]))
            gating = GatingConfig(**sub("gating."))
            loss = LossConfig(**sub("loss."))
            subset = values["train.teacher_subset"]
            clip = values["optim.clip_norm"]
            steps = values["train.steps"]
            train = TrainConfig(
                lr_peak=float(values["optim.lr"]),
                weight_decay=float(values["optim.weight_decay"]),
                betas=tuple(float(b) for b in values["optim.betas"]),
                eps=float(values["optim.eps"]),
                clip_norm=None if clip in (None, 0) else float(clip),
                batch_size=int(values["train.batch_size"]),
                epochs=int(values["train.epochs"]),
                steps=None if steps in (None, 0) else int(steps),
                warmup_fraction=float(values["train.warmup_fraction"]),
                seed=int(values["train.seed"]),
                teacher_subset=None if subset in (None, []) else tuple(int(i) for i in subset),
                dtype=str(values["train.dtype"]),
                student_jitter=bool(values["augment.student_jitter"]),
                mask=mask,
                gating=gating,
                loss=loss,
            )
            data = DataConfig(**sub("data."))
            probe = ProbeConfig(**sub("probe."))
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        return cls(student, teacher, teachers, train, data, probe)


def _vit_keys(section: str, attr: str, names) -> dict:
    return {f"{section}.{n}": (lambda c, n=n: getattr(getattr(c, attr), n)) for n in names}


_KEYS: dict[str, Callable[[Config], Any]] = {
    **_vit_keys("model", "student", ("image_size", "patch_size", "in_channels")),
    **_vit_keys("student", "student", ("embed_dim", "depth", "num_heads", "mlp_ratio")),
    **_vit_keys("teacher", "teacher", ("embed_dim", "depth", "num_heads", "mlp_ratio")),
    "teachers.count": lambda c: c.teachers.count,
    "teachers.noise": lambda c: list(c.teachers.noise),
    "teachers.init_seed": lambda c: c.teachers.init_seed,
    "mask.student": lambda c: c.train.mask.student,
    "mask.teachers": lambda c: list(c.train.mask.teachers),
    "gating.variant": lambda c: c.train.gating.variant,
    "gating.temperature": lambda c: c.train.gating.temperature,
    "gating.differentiable": lambda c: c.train.gating.differentiable,
    "loss.variant": lambda c: c.train.loss.variant,
    "loss.kl_direction": lambda c: c.train.loss.kl_direction,
    "loss.projection_dim": lambda c: c.train.loss.projection_dim,
    "optim.lr": lambda c: c.train.lr_peak,
    "optim.weight_decay": lambda c: c.train.weight_decay,
    "optim.betas": lambda c: list(c.train.betas),
    "optim.eps": lambda c: c.train.eps,
    "optim.clip_norm": lambda c: c.train.clip_norm,
    "train.batch_size": lambda c: c.train.batch_size,
    "train.epochs": lambda c: c.train.epochs,
    "train.steps": lambda c: c.train.steps,
    "train.warmup_fraction": lambda c: c.train.warmup_fraction,
    "train.seed": lambda c: c.train.seed,
    "train.teacher_subset": lambda c: None if c.train.teacher_subset is None else list(c.train.teacher_subset),
    "train.dtype": lambda c: c.train.dtype,
    "augment.student_jitter": lambda c: c.train.student_jitter,
    **{f"data.{f.name}": (lambda c, n=f.name: getattr(c.data, n)) for f in fields(DataConfig)},
    **{f"probe.{f.name}": (lambda c, n=f.name: getattr(c.probe, n)) for f in fields(ProbeConfig)},
}

CONFIG_KEYS = tuple(_KEYS)


def flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(path) -> Config:
    text = Path(path).read_text(encoding="utf-8")
    try:
        tree = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return Config.from_flat(flatten(tree))


def dump_config(cfg: Config) -> str:
    """Render as a flat TOML document of dotted keys (``None`` values are omitted)."""
    lines = []
    for key, value in cfg.to_flat().items():
        if value is None:
            continue
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def replace_train(cfg: Config, **kwargs) -> Config:
    return replace(cfg, train=replace(cfg.train, **kwargs))
