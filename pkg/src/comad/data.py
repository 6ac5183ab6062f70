"""Image datasets: a seeded synthetic generator and a small binary container format.

Binary layout (little-endian)::

    b"CMAD" | u32 version | u32 count | u16 H | u16 W | u8 channels | u8 label_width
    count x ( label_width label bytes | H*W*C pixel bytes, row-major, channel-last )

Pixels are stored as u8 and decoded to float32 in [0, 1], laid out [C, H, W].
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError

MAGIC = b"CMAD"
VERSION = 1
_HEADER = struct.Struct("<4sIIHHBB")

# Fixed pixel standardization applied before patch embedding. Raw [0, 1]
# pixels give every patch the same large DC component, which LayerNorm then
# turns into near-identical tokens.
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def normalize_pixels(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    dtype = images.dtype if images.dtype.kind == "f" else np.float32
    return ((images - PIXEL_MEAN) / PIXEL_STD).astype(dtype)


@dataclass
class Dataset:
    images: np.ndarray  # [count, C, H, W] float32
    labels: np.ndarray | None = None  # [count] int64

    def __len__(self) -> int:
        return len(self.images)

    @property
    def class_count(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def split(self, holdout_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
        n = len(self)
        order = np.random.default_rng(seed).permutation(n)
        k = int(round(n * (1.0 - holdout_fraction)))
        a, b = order[:k], order[k:]
        lab = self.labels
        return (
            Dataset(self.images[a], None if lab is None else lab[a]),
            Dataset(self.images[b], None if lab is None else lab[b]),
        )


def _texture(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.zeros((channels, size, size))
    for _ in range(3):
        fy, fx = rng.integers(0, 3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.cos(2 * np.pi * (fy * yy + fx * xx) / size + phase)
        out += rng.normal(0, 1, size=(channels, 1, 1)) * wave
    return out / 3.0


def synthetic_dataset(
    count: int,
    image_size: int,
    channels: int = 3,
    class_count: int = 4,
    seed: int = 0,
    noise: float = 0.3,
    grid: int = 2,
) -> Dataset:
    """Images built from ``grid x grid`` regions of low-frequency textures.

    Every class uses the same set of textures; the class decides which texture
    sits in which region. Per-sample texture amplitudes, brightness and pixel
    noise are drawn from ``seed``.
    """
    regions = grid * grid
    layouts = list(itertools.permutations(range(regions)))
    if class_count < 1 or class_count > len(layouts):
        raise ConfigError(f"class_count must be in [1, {len(layouts)}] for a {grid}x{grid} layout, got {class_count}")
    if image_size % grid:
        raise ConfigError(f"image_size {image_size} not divisible by layout grid {grid}")
    rng = np.random.default_rng([seed, 0])
    cell = image_size // grid
    textures = np.stack([_texture(rng, cell, channels) for _ in range(regions)])
    if class_count <= regions:
        chosen = [tuple(np.roll(np.arange(regions), k)) for k in range(class_count)]
    else:
        picks = rng.choice(len(layouts), size=class_count, replace=False)
        chosen = [layouts[i] for i in picks]
    sample_rng = np.random.default_rng([seed, 1])
    labels = sample_rng.integers(0, class_count, size=count)
    amps = sample_rng.uniform(0.7, 1.3, size=(count, regions))
    bright = sample_rng.normal(0, 0.1, size=(count, 1, 1, 1))
    images = np.empty((count, channels, image_size, image_size))
    for i in range(count):
        layout = chosen[labels[i]]
        for r in range(regions):
            gy, gx = divmod(r, grid)
            images[i, :, gy * cell : (gy + 1) * cell, gx * cell : (gx + 1) * cell] = amps[i, r] * textures[layout[r]]
    images += bright + sample_rng.normal(0, noise, size=images.shape)
    images = 0.5 + 0.25 * images
    return Dataset(np.clip(images, 0.0, 1.0).astype(np.float32), labels.astype(np.int64))


def write_binary_dataset(path, images: np.ndarray, labels: np.ndarray | None = None, label_width: int = 1) -> None:
    """``images`` is [count, C, H, W]; floats are scaled from [0, 1] and rounded to u8."""
    images = np.asarray(images)
    count, c, h, w = images.shape
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    if labels is None:
        label_width = 0
    if label_width not in (0, 1, 2, 4, 8):
        raise ConfigError(f"label_width must be one of 0, 1, 2, 4, 8, got {label_width}")
    pixels = images.transpose(0, 2, 3, 1).reshape(count, -1)
    if label_width:
        lab = np.asarray(labels, dtype=f"<u{label_width}").reshape(count, 1).view(np.uint8)
        body = np.concatenate([lab, pixels], axis=1)
    else:
        body = pixels
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, count, h, w, c, label_width))
        fh.write(body.tobytes())


def read_binary_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, count, h, w, c, lw = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if lw not in (0, 1, 2, 4, 8):
        raise CheckpointError(f"{path}: invalid label width {lw}")
    rec = lw + h * w * c
    body = raw[_HEADER.size :]
    if len(body) != count * rec:
        raise CheckpointError(f"{path}: expected {count * rec} payload bytes, found {len(body)}")
    table = np.frombuffer(body, dtype=np.uint8).reshape(count, rec)
    labels = None
    if lw:
        labels = np.ascontiguousarray(table[:, :lw]).view(f"<u{lw}").reshape(count).astype(np.int64)
    pixels = table[:, lw:].reshape(count, h, w, c).transpose(0, 3, 1, 2)
    return Dataset((pixels.astype(np.float32) / 255.0), labels)


def color_jitter(images: np.ndarray, rng: np.random.Generator, strength: float = 0.2) -> np.ndarray:
    """Per-sample brightness and per-channel contrast jitter."""
    b, c = images.shape[:2]
    scale = rng.uniform(1 - strength, 1 + strength, size=(b, c, 1, 1))
    shift = rng.uniform(-strength, strength, size=(b, 1, 1, 1)) * 0.5
    mean = images.mean(axis=(2, 3), keepdims=True)
    return np.clip((images - mean) * scale + mean + shift, 0.0, 1.0).astype(images.dtype)
