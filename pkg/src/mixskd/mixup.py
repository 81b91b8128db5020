"""Mixup draws and convex interpolation of images, labels, features and logits."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidConfigError, InvalidShapeError


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.4
    per_batch_lambda: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidConfigError(f"alpha must be positive, got {self.alpha}")


def sample_gamma(shape: float, rng: np.random.Generator) -> float:
    """Gamma(shape, 1) by Marsaglia & Tsang; shapes below 1 use the U^(1/a) boost."""
    if shape < 1.0:
        u = rng.random()
        return sample_gamma(shape + 1.0, rng) * u ** (1.0 / shape)
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        z = rng.standard_normal()
        v = 1.0 + c * z
        if v <= 0.0:
            continue
        v = v * v * v
        u = rng.random()
        if u < 1.0 - 0.0331 * z ** 4:
            return d * v
        if math.log(u) < 0.5 * z * z + d * (1.0 - v + math.log(v)):
            return d * v


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    """One draw of Beta(alpha, alpha) as G1 / (G1 + G2)."""
    if not alpha > 0:
        raise InvalidConfigError(f"alpha must be positive, got {alpha}")
    g1 = sample_gamma(alpha, rng)
    g2 = sample_gamma(alpha, rng)
    total = g1 + g2
    if total == 0.0:  # both underflowed; only possible for tiny alpha
        return 0.5
    return g1 / total


def sample_lambdas(alpha: float, n: int, rng: np.random.Generator) -> np.ndarray:
    return np.array([sample_lambda(alpha, rng) for _ in range(n)])


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_lambda(lam) -> None:
    arr = np.asarray(lam, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(np.isnan(arr)):
        raise InvalidConfigError(f"lambda must lie in [0, 1], got {lam}")


def _lambda_for(lam, like: Tensor) -> np.ndarray | float:
    """Broadcastable lambda: a float, or a per-sample vector expanded over trailing axes."""
    if np.ndim(lam) == 0:
        return float(lam)
    lam = np.asarray(lam, dtype=like.dtype)
    if lam.shape != (like.shape[0],):
        raise InvalidShapeError(f"per-sample lambda of shape {lam.shape} for batch {like.shape[0]}")
    return lam.reshape((-1,) + (1,) * (like.ndim - 1))


def mix(a: Tensor, b: Tensor, lam) -> Tensor:
    """``lam * a + (1 - lam) * b``; exact at the endpoints."""
    if a.shape != b.shape:
        raise InvalidShapeError(f"cannot interpolate {a.shape} with {b.shape}")
    _check_lambda(lam)
    if np.ndim(lam) == 0:
        # Skip arithmetic so lam in {0, 1} returns the endpoint bit for bit.
        if lam == 1.0:
            return ad.mul(a, 1.0)
        if lam == 0.0:
            return ad.mul(b, 1.0)
    w = _lambda_for(lam, a)
    return ad.add(ad.mul(a, w), ad.mul(b, 1.0 - w))


@dataclass
class MixBatch:
    xi: Tensor
    xj: Tensor
    yi: np.ndarray
    yj: np.ndarray
    lam: float | np.ndarray
    x_tilde: Tensor
    y_tilde: np.ndarray


def make_mix_batch(xi, xj, yi, yj, lam, num_classes: int) -> MixBatch:
    xi, xj = ad.as_tensor(xi), ad.as_tensor(xj)
    yi, yj = np.asarray(yi, dtype=np.int64), np.asarray(yj, dtype=np.int64)
    if xi.shape != xj.shape or yi.shape != yj.shape or yi.shape != (xi.shape[0],):
        raise InvalidShapeError("make_mix_batch: image/label shapes disagree")
    _check_lambda(lam)
    x_tilde = mix(xi, xj, lam)
    w = float(lam) if np.ndim(lam) == 0 else np.asarray(lam, dtype=np.float64)[:, None]
    y_tilde = w * one_hot(yi, num_classes) + (1.0 - w) * one_hot(yj, num_classes)
    return MixBatch(xi, xj, yi, yj, lam, x_tilde, y_tilde)


def interpolate_features(Fi: Sequence[Tensor], Fj: Sequence[Tensor], lam) -> list[Tensor]:
    if len(Fi) != len(Fj):
        raise InvalidShapeError(f"feature lists differ in length: {len(Fi)} vs {len(Fj)}")
    return [mix(a, b, lam) for a, b in zip(Fi, Fj)]


def interpolate_logits(li: Tensor, lj: Tensor, lam) -> Tensor:
    return mix(li, lj, lam)
