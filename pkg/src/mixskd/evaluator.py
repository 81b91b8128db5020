"""Evaluation protocols on the pruned inference network."""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .errors import InvalidConfigError
from .losses import cross_entropy
from .network import InferenceNet, NetworkGraph, prune_for_inference

DEFAULT_EPSILONS = (1e-4, 1e-3, 1e-2, 1e-1)
DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(11))


def _pruned(net: NetworkGraph | InferenceNet) -> InferenceNet:
    inf = prune_for_inference(net) if isinstance(net, NetworkGraph) else net
    if isinstance(net, NetworkGraph):
        assert inf.num_parameters() == net.num_parameters("backbone") < net.num_parameters()
    return inf


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MIXSKD_THREADS", "1")))
    except ValueError:
        return 1


def predict_logits(net: NetworkGraph | InferenceNet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits in input order; batches may run on MIXSKD_THREADS workers."""
    inf = _pruned(net)
    chunks = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]
    workers = min(_threads(), len(chunks))
    if workers <= 1:
        outs = [inf.infer(c) for c in chunks]
    else:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(inf.infer, chunks))
    return np.concatenate(outs, axis=0)


def top1_accuracy(net: NetworkGraph | InferenceNet, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise InvalidConfigError("empty dataset")
    return _accuracy(net, dataset.images, dataset.labels)


def _accuracy(net, images: np.ndarray, labels: np.ndarray) -> float:
    pred = predict_logits(net, images).argmax(axis=1)
    return float(np.mean(pred == labels))


@dataclass
class MissRateCurve:
    lambdas: list[float]
    miss_rate: list[float]
    endpoint_error_i: float  # top-1 error on the sampled x_i images
    endpoint_error_j: float  # top-1 error on the sampled x_j images


def sample_cross_class_pairs(labels: np.ndarray, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if len(np.unique(labels)) < 2:
        raise InvalidConfigError("cross-class pairs need at least two classes")
    i = rng.integers(0, len(labels), size=n)
    j = rng.integers(0, len(labels), size=n)
    same = labels[i] == labels[j]
    while same.any():
        j[same] = rng.integers(0, len(labels), size=int(same.sum()))
        same = labels[i] == labels[j]
    return i, j


def miss_rate_curve(net, dataset: Dataset, lambda_grid: Sequence[float] = DEFAULT_GRID,
                    pairs_per_point: int = 2000, rng: np.random.Generator | None = None) -> MissRateCurve:
    """Fraction of Mixup-image predictions outside {y_i, y_j}, per lambda.

    One set of cross-class pairs is drawn and reused at every grid point.
    """
    grid = sorted(float(l) for l in lambda_grid)
    if any(l < 0 or l > 1 for l in grid):
        raise InvalidConfigError("lambda grid must lie in [0, 1]")
    rng = rng or np.random.default_rng(0)
    i, j = sample_cross_class_pairs(dataset.labels, pairs_per_point, rng)
    xi, xj = dataset.images[i], dataset.images[j]
    yi, yj = dataset.labels[i], dataset.labels[j]
    rates = []
    for lam in grid:
        if lam == 1.0:
            x = xi
        elif lam == 0.0:
            x = xj
        else:
            x = (lam * xi + (1.0 - lam) * xj).astype(xi.dtype)
        pred = predict_logits(net, x).argmax(axis=1)
        rates.append(float(np.mean((pred != yi) & (pred != yj))))
    err_i = 1.0 - _accuracy(net, xi, yi)
    err_j = 1.0 - _accuracy(net, xj, yj)
    return MissRateCurve(grid, rates, err_i, err_j)


@dataclass
class AttackReport:
    epsilons: list[float]
    accuracy: list[float]
    clean_accuracy: float
    pixel_range: tuple[float, float] = (0.0, 1.0)


def fgsm_examples(net, images: np.ndarray, labels: np.ndarray, eps: float,
                  data_min: float = 0.0, data_max: float = 1.0) -> np.ndarray:
    """``clip(x + eps * sign(dCE/dx))``; sign(0) is 0 and eps=0 returns x unchanged."""
    if eps < 0:
        raise InvalidConfigError(f"epsilon must be >= 0, got {eps}")
    if eps == 0:
        return images
    inf = _pruned(net)
    x = Tensor(images, requires_grad=True)
    loss = cross_entropy(inf.forward(x), labels)
    ad.backward(loss)
    adv = images + eps * np.sign(x.grad)
    return np.clip(adv, data_min, data_max).astype(images.dtype)


def fgsm_attack(net, dataset: Dataset, epsilons: Sequence[float] = DEFAULT_EPSILONS,
                batch_size: int = 256, data_min: float = 0.0, data_max: float = 1.0) -> AttackReport:
    inf = _pruned(net)
    clean = top1_accuracy(inf, dataset)
    accs = []
    for eps in epsilons:
        correct = 0
        for s in range(0, len(dataset), batch_size):
            x, y = dataset.images[s:s + batch_size], dataset.labels[s:s + batch_size]
            adv = fgsm_examples(inf, x, y, float(eps), data_min, data_max)
            correct += int(np.sum(predict_logits(inf, adv).argmax(axis=1) == y))
        accs.append(correct / len(dataset))
    return AttackReport([float(e) for e in epsilons], accs, clean, (data_min, data_max))


@dataclass
class LogProbHistograms:
    edges: list[float]
    predicted_counts: list[int]
    true_counts: list[int]
    n_misclassified: int
    empty: bool
    predicted_logprob: list[float]
    true_logprob: list[float]


def misclassified_mask(net, dataset: Dataset) -> np.ndarray:
    return predict_logits(net, dataset.images).argmax(axis=1) != dataset.labels


def logprob_histogram(net, dataset: Dataset, bins: int = 20, mask: np.ndarray | None = None) -> LogProbHistograms:
    """Histograms of log p(predicted) and log p(true) over misclassified samples.

    ``mask`` restricts the sample set further (e.g. to samples two models
    both get wrong); it is intersected with this model's misclassifications.
    """
    if bins < 1:
        raise InvalidConfigError("bins must be >= 1")
    logits = predict_logits(net, dataset.images)
    lp = ad.log_softmax_t(Tensor(logits.astype(np.float64), dtype=np.float64), 1.0).data
    pred = lp.argmax(axis=1)
    sel = pred != dataset.labels
    if mask is not None:
        sel &= mask
    rows = np.nonzero(sel)[0]
    if rows.size == 0:
        return LogProbHistograms([], [0] * bins, [0] * bins, 0, True, [], [])
    p_lp = lp[rows, pred[rows]]
    t_lp = lp[rows, dataset.labels[rows]]
    lo = float(min(p_lp.min(), t_lp.min()))
    edges = np.linspace(min(lo, -1e-6), 0.0, bins + 1)
    pc, _ = np.histogram(p_lp, bins=edges)
    tc, _ = np.histogram(t_lp, bins=edges)
    return LogProbHistograms(edges.tolist(), pc.tolist(), tc.tolist(), int(rows.size), False,
                             p_lp.tolist(), t_lp.tolist())


# -- report writers ------------------------------------------------------------


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_attack_report(out_dir: Path, rep: AttackReport) -> None:
    write_csv(out_dir / "attack.csv", ["epsilon", "accuracy"], list(zip(rep.epsilons, rep.accuracy)))
    summary = asdict(rep)
    summary["note"] = "epsilon in [0,1] pixel units; adversarial images clamped to pixel_range"
    write_json(out_dir / "attack.json", summary)


def write_missrate_report(out_dir: Path, curve: MissRateCurve, pairs: int) -> None:
    write_csv(out_dir / "missrate.csv", ["lambda", "miss_rate"], list(zip(curve.lambdas, curve.miss_rate)))
    summary = asdict(curve)
    summary["pairs_per_point"] = pairs
    write_json(out_dir / "missrate.json", summary)


def write_histogram_report(out_dir: Path, hist: LogProbHistograms) -> None:
    rows = []
    if not hist.empty:
        for k in range(len(hist.edges) - 1):
            rows.append([hist.edges[k], hist.edges[k + 1], hist.predicted_counts[k], hist.true_counts[k]])
    write_csv(out_dir / "hist.csv", ["bin_lo", "bin_hi", "predicted_count", "true_count"], rows)
    write_json(out_dir / "hist.json", {"n_misclassified": hist.n_misclassified, "empty": hist.empty,
                                       "edges": hist.edges, "predicted_counts": hist.predicted_counts,
                                       "true_counts": hist.true_counts})
