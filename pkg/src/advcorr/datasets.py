"""Dataset acquisition: IDX-format digit files and synthetic generators."""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .network import LabeledDataset

__all__ = ["SyntheticConfig", "load_idx", "make_synthetic"]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def _read_exact(fh, count, path):
    data = fh.read(count)
    if len(data) != count:
        raise DataError(
            f"{path}: truncated file, wanted {count} bytes at offset {fh.tell() - len(data)}"
        )
    return data


def _read_be32(fh, path):
    return struct.unpack(">I", _read_exact(fh, 4, path))[0]


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Parse a big-endian IDX image/label file pair into a dataset.

    Pixel bytes are scaled to [0,1] by division with 255 and images are
    flattened to vectors.
    """
    with open(images_path, "rb") as fh:
        magic = _read_be32(fh, images_path)
        if magic != IDX_IMAGE_MAGIC:
            raise DataError(
                f"{images_path}: bad image magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_IMAGE_MAGIC:08x})"
            )
        count = _read_be32(fh, images_path)
        rows = _read_be32(fh, images_path)
        cols = _read_be32(fh, images_path)
        raw = _read_exact(fh, count * rows * cols, images_path)
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)

    with open(labels_path, "rb") as fh:
        magic = _read_be32(fh, labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise DataError(
                f"{labels_path}: bad label magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_LABEL_MAGIC:08x})"
            )
        n_labels = _read_be32(fh, labels_path)
        labels = np.frombuffer(_read_exact(fh, n_labels, labels_path), dtype=np.uint8)

    if n_labels != count:
        raise DataError(
            f"image count {count} ({images_path}) != label count {n_labels} ({labels_path})"
        )
    return LabeledDataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


@dataclass
class SyntheticConfig:
    kind: str = "gaussian_blobs"
    n_per_class: int = 100
    noise_std: float = 0.05
    seed: int = 0
    input_dim: int = 2
    num_classes: int = 2

    def __post_init__(self):
        if self.kind not in ("gaussian_blobs", "two_moons"):
            raise ConfigError(f"unknown synthetic kind {self.kind!r}")
        if self.n_per_class < 1:
            raise ConfigError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be nonnegative, got {self.noise_std}")
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.kind == "two_moons" and (self.input_dim != 2 or self.num_classes != 2):
            raise ConfigError("two_moons requires input_dim=2 and num_classes=2")


def _squash_unit_box(points):
    lo = points.min()
    hi = points.max()
    if hi == lo:
        return np.full_like(points, 0.5)
    return (points - lo) / (hi - lo)


def make_synthetic(cfg: SyntheticConfig) -> LabeledDataset:
    """Deterministic synthetic dataset, affinely squashed into [0,1]^d."""
    rng = np.random.default_rng(cfg.seed)
    if cfg.kind == "gaussian_blobs":
        centers = rng.uniform(0.0, 1.0, size=(cfg.num_classes, cfg.input_dim))
        noise = rng.normal(size=(cfg.num_classes * cfg.n_per_class, cfg.input_dim))
        labels = np.repeat(np.arange(cfg.num_classes), cfg.n_per_class)
        points = centers[labels] + cfg.noise_std * noise
    else:  # two_moons
        t = rng.uniform(0.0, np.pi, size=cfg.n_per_class)
        outer = np.column_stack([np.cos(t), np.sin(t)])
        t2 = rng.uniform(0.0, np.pi, size=cfg.n_per_class)
        inner = np.column_stack([1.0 - np.cos(t2), 0.5 - np.sin(t2)])
        points = np.concatenate([outer, inner])
        points += cfg.noise_std * rng.normal(size=points.shape)
        labels = np.repeat([0, 1], cfg.n_per_class)
    return LabeledDataset(_squash_unit_box(points), labels)
