"""Datasets: a procedural synthetic task, the CIFAR binary format, and pair batching."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .autodiff.serialize import save_tensor
from .errors import FormatError, InvalidConfigError

CIFAR_PIXELS = 3 * 32 * 32


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # float32 [M, 3, H, W] in [0, 1]
    labels: np.ndarray  # int64 [M]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] == 0:
            raise InvalidConfigError("dataset is empty")
        if self.images.shape[0] != self.labels.shape[0]:
            raise InvalidConfigError("images and labels disagree in length")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InvalidConfigError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)


def class_pattern(c: int, num_classes: int, size: tuple[int, int]) -> np.ndarray:
    """Noise-free template for class ``c``: a class hue modulated by horizontal stripes.

    Both cues survive horizontal flips and small crops, so the standard
    augmentation keeps labels valid.
    """
    h, w = size
    yy = np.linspace(0.0, 1.0, h)[:, None] * np.ones((1, w))
    stripes = 0.5 + 0.5 * np.cos(2.0 * np.pi * (1 + c % 3) * yy)
    rgb = np.array(colorsys.hsv_to_rgb(c / num_classes, 0.8, 0.9))
    img = rgb[:, None, None] * (0.55 + 0.45 * stripes[None])
    return np.clip(img, 0.0, 1.0)


def gen_synthetic(num_classes: int, per_class: int, size: tuple[int, int] | int = 16,
                  noise_sigma: float = 0.1, seed: int = 0, split: str = "train") -> Dataset:
    if isinstance(size, int):
        size = (size, size)
    if num_classes < 2 or per_class < 1 or min(size) < 1 or noise_sigma < 0:
        raise InvalidConfigError("gen_synthetic: arguments must be positive")
    rng = np.random.default_rng(seed)
    templates = np.stack([class_pattern(c, num_classes, size) for c in range(num_classes)])
    labels = np.repeat(np.arange(num_classes), per_class)
    images = templates[labels]
    if noise_sigma > 0:
        images = images + rng.normal(0.0, noise_sigma, images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    order = rng.permutation(labels.size)
    return Dataset(images[order], labels[order].astype(np.int64), num_classes, split)


def load_cifar_binary(path: str | Path, num_classes: int = 10) -> Dataset:
    """Read the CIFAR-10/100 binary distribution.

    CIFAR-10 records are ``<label byte><3072 pixel bytes>``; CIFAR-100 records
    are ``<coarse label><fine label><3072 pixel bytes>`` and the fine label is
    used.  Pixels are channel-major (R plane, G plane, B plane), row-major.
    """
    if num_classes not in (10, 100):
        raise InvalidConfigError(f"num_classes must be 10 or 100, got {num_classes}")
    raw = Path(path).read_bytes()
    label_bytes = 1 if num_classes == 10 else 2
    rec = label_bytes + CIFAR_PIXELS
    if len(raw) == 0:
        raise FormatError(f"{path}: empty file")
    if len(raw) % rec:
        offset = (len(raw) // rec) * rec
        raise FormatError(f"{path}: {len(raw)} bytes is not a multiple of the {rec}-byte record; "
                          f"truncated record at byte offset {offset}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} out of range at byte offset {bad[0] * rec + label_bytes - 1}")
    images = (arr[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return Dataset(images, labels, num_classes, Path(path).stem)


def augment_crop_flip(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop from a zero-padded image plus random horizontal flip, per sample."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


@dataclass
class BatchPair:
    xi: np.ndarray
    yi: np.ndarray
    xj: np.ndarray
    yj: np.ndarray
    index: np.ndarray  # dataset rows of xi
    perm: np.ndarray  # xj = xi[perm]


def batch_pairs(dataset: Dataset, batch_size: int, rng: np.random.Generator,
                augment: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None
                ) -> Iterator[BatchPair]:
    """One epoch of shuffled batches, each paired with a permutation of itself.

    The trailing partial batch is dropped.
    """
    m = len(dataset)
    if not 1 <= batch_size <= m:
        raise InvalidConfigError(f"batch_size {batch_size} must be in [1, {m}]")
    order = rng.permutation(m)
    for start in range(0, m - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        x = dataset.images[idx]
        if augment is not None:
            x = augment(x, rng)
        y = dataset.labels[idx]
        perm = rng.permutation(batch_size)
        yield BatchPair(x, y, x[perm], y[perm], idx, perm)


def export_dataset(dataset: Dataset, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img, lab = out / f"{dataset.split}_images.mskd", out / f"{dataset.split}_labels.mskd"
    save_tensor(img, dataset.images)
    save_tensor(lab, dataset.labels.astype(np.float32))
    return img, lab
