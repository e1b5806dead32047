"""Datasets for the desk-scale harness.

Two sources: a deterministic synthetic texture task (four classes of
oriented sinusoidal stripes, separable by dominant orientation energy) and
IDX-format binary files (big-endian magic + extent header + raw bytes).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

ORIENTATIONS_DEG = (0.0, 45.0, 90.0, 135.0)


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic-textures"  # "synthetic-textures" | "idx-files"
    image_size: int = 128
    num_classes: int = 4
    num_train: int = 512
    num_val: int = 128
    seed: int = 0
    noise_sigma: float = 0.1
    images_path: str = ""
    labels_path: str = ""

    def validate(self) -> None:
        if self.source not in ("synthetic-textures", "idx-files"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.source == "synthetic-textures":
            if self.num_classes != len(ORIENTATIONS_DEG):
                raise ConfigError(
                    f"synthetic textures define {len(ORIENTATIONS_DEG)} orientation classes, "
                    f"got num_classes={self.num_classes}"
                )
            total = self.num_train + self.num_val
            if total % self.num_classes:
                raise ConfigError(f"total sample count {total} must divide evenly into classes")
        else:
            if not self.images_path or not self.labels_path:
                raise ConfigError("idx-files source requires images_path and labels_path")


@dataclass
class Dataset:
    images: np.ndarray  # (N, S, S, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.labels)


def generate_synthetic(spec: DatasetSpec) -> Dataset:
    """Balanced oriented-stripe images: class k has stripes at k*45 degrees.

    Each image is a sinusoidal grating (random frequency and phase) plus
    Gaussian pixel noise, clipped to [0, 1]. Identical (spec, seed) pairs
    produce identical bytes.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.num_train + spec.num_val
    size = spec.image_size

    labels = np.tile(np.arange(spec.num_classes, dtype=np.int64), n // spec.num_classes)
    rng.shuffle(labels)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    for i, label in enumerate(labels):
        theta = np.deg2rad(ORIENTATIONS_DEG[label]).astype(np.float32)
        freq = rng.uniform(3.0, 8.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = np.sin(
            2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / size + phase
        )
        img = 0.5 + 0.35 * wave
        if spec.noise_sigma > 0:
            img = img + spec.noise_sigma * rng.standard_normal((size, size))
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        images[i] = img[:, :, None]
    return Dataset(images=images, labels=labels)


def split_train_val(ds: Dataset, spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    if len(ds) < spec.num_train + spec.num_val:
        raise ConfigError(
            f"dataset has {len(ds)} samples, need {spec.num_train + spec.num_val}"
        )
    t, v = spec.num_train, spec.num_val
    return (
        Dataset(images=ds.images[:t], labels=ds.labels[:t]),
        Dataset(images=ds.images[t : t + v], labels=ds.labels[t : t + v]),
    )


def classify_by_orientation(images: np.ndarray) -> np.ndarray:
    """Independent oracle: dominant Fourier-peak angle, snapped to the class grid.

    A grating at angle theta concentrates spectral energy at +-freq*(cos,
    sin)(theta); the argmax bin's angle mod 180 degrees identifies the class.
    """
    n = images.shape[0]
    out = np.empty(n, dtype=np.int64)
    class_angles = np.deg2rad(np.asarray(ORIENTATIONS_DEG))
    for i in range(n):
        gray = images[i].mean(axis=-1)
        spectrum = np.abs(np.fft.fft2(gray - gray.mean()))
        spectrum[0, 0] = 0.0
        ky, kx = np.unravel_index(np.argmax(spectrum), spectrum.shape)
        size = gray.shape[0]
        ky = ky - size if ky > size // 2 else ky
        kx = kx - size if kx > size // 2 else kx
        angle = np.arctan2(ky, kx) % np.pi
        diffs = np.abs(angle - class_angles)
        diffs = np.minimum(diffs, np.pi - diffs)
        out[i] = int(np.argmin(diffs))
    return out


# -- IDX binary format -----------------------------------------------------------


def _read_exact(f, n: int, offset: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated IDX file at byte offset {offset}: expected {what}")
    return buf


def _load_idx_array(path: str, expected_magic: int, rank: int) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(4)
        if len(header) < 4:
            raise FormatError(f"{path}: truncated IDX file at byte offset 0: expected magic")
        (magic,) = struct.unpack(">i", header)
        if magic != expected_magic:
            raise FormatError(
                f"{path}: bad IDX magic 0x{magic:08x} at byte offset 0, "
                f"expected 0x{expected_magic:08x}"
            )
        extents = []
        for d in range(rank):
            buf = _read_exact(f, 4, 4 + 4 * d, f"extent {d}")
            extents.append(struct.unpack(">i", buf)[0])
        count = int(np.prod(extents))
        data_offset = 4 + 4 * rank
        raw = f.read(count)
        if len(raw) != count:
            raise FormatError(
                f"{path}: truncated IDX payload at byte offset {data_offset + len(raw)}: "
                f"expected {count} bytes"
            )
        return np.frombuffer(raw, dtype=np.uint8).reshape(extents)


def load_idx(images_path: str, labels_path: str, image_size: int) -> Dataset:
    """Load an IDX image/label pair, rescale to [0, 1], center-pad to size."""
    images = _load_idx_array(images_path, IDX_IMAGES_MAGIC, rank=3)
    labels = _load_idx_array(labels_path, IDX_LABELS_MAGIC, rank=1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"IDX image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    n, h, w = images.shape
    if h > image_size or w > image_size:
        raise ConfigError(f"IDX images {h}x{w} exceed configured input size {image_size}")
    scaled = images.astype(np.float32) / 255.0
    top = (image_size - h) // 2
    left = (image_size - w) // 2
    out = np.zeros((n, image_size, image_size, 3), dtype=np.float32)
    out[:, top : top + h, left : left + w, :] = scaled[:, :, :, None]
    return Dataset(images=out, labels=labels.astype(np.int64))


def save_idx(images: np.ndarray, labels: np.ndarray, images_path: str, labels_path: str) -> None:
    """Write u8 grayscale images (N, H, W) and labels (N,) in IDX format."""
    if images.dtype != np.uint8 or images.ndim != 3:
        raise ConfigError(f"expected u8 (N, H, W) images, got {images.dtype} {images.shape}")
    n, h, w = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABELS_MAGIC, n))
        f.write(labels.astype(np.uint8).tobytes())
