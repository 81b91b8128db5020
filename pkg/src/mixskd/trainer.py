"""SGD training loop for the MixSKD objective."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .data import BatchPair, Dataset, augment_crop_flip, batch_pairs
from .errors import EvaluationError, InvalidShapeError
from .losses import LossReport, combine, compute_losses, cross_entropy, loss_dis, total_loss
from .mixup import make_mix_batch, sample_lambda, sample_lambdas
from .network import NetworkGraph, param_group, prune_for_inference

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def buffer(self, name: str, like: np.ndarray) -> np.ndarray:
        v = self.velocity.get(name)
        if v is None:
            v = np.zeros_like(like)
        return v


def sgd_step(params: Mapping[str, Tensor], state: OptimizerState, lr: float, momentum: float,
             weight_decay: float, grads: Mapping[str, np.ndarray] | None = None) -> None:
    """``v <- momentum*v + grad + wd*param``; ``param <- param - lr*v``.

    Parameters get fresh arrays rather than in-place updates so that arrays
    captured by an old tape are never mutated.
    """
    for name, p in params.items():
        g = p.grad if grads is None else grads[name]
        if g is None:
            continue
        if g.shape != p.shape:
            raise InvalidShapeError(f"sgd_step: grad {g.shape} vs param {name} {p.shape}")
        v = momentum * state.buffer(name, p.data) + g + weight_decay * p.data
        state.velocity[name] = v.astype(p.dtype, copy=False)
        p.data = (p.data - lr * v).astype(p.dtype, copy=False)


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0, then step decay or cosine annealing to 0."""
    spe = max(1, steps_per_epoch)
    warm = config.warmup_epochs * spe
    if step < warm:
        return config.lr * step / warm
    if config.schedule == "cosine":
        span = max(1, config.epochs * spe - warm)
        t = min(1.0, (step - warm) / span)
        return 0.5 * config.lr * (1.0 + math.cos(math.pi * t))
    epoch = step // spe
    passed = sum(epoch >= m for m in config.resolved_milestones())
    return config.lr * config.decay_factor ** passed


def _generator_params(net: NetworkGraph, config: TrainConfig) -> dict[str, Tensor]:
    if config.baseline:
        return net.group("backbone")
    return {k: v for k, v in net.params.items() if param_group(k) != "disc"}


def _draw_lambda(config: TrainConfig, n: int, rng: np.random.Generator):
    if config.per_batch_lambda:
        return sample_lambda(config.alpha, rng)
    return sample_lambdas(config.alpha, n, rng)


def train_step(net: NetworkGraph, opt: OptimizerState, batch: BatchPair, config: TrainConfig,
               rng: np.random.Generator, lr: float | None = None, epoch: int = 0) -> tuple[LossReport, float]:
    """One update; returns the loss report and the lambda used (mean if per-sample).

    Discriminators minimize the feature BCE on detached features; the rest of
    the network minimizes the full objective, with the BCE reaching features
    through a gradient-reversal junction (so features learn to fool the
    discriminators).  In ``joint`` mode one backward pass does both.  In
    ``alternating`` mode even epochs step only the generator side and odd
    epochs only the discriminators.
    """
    lr = config.lr if lr is None else lr
    net.zero_grad()
    gen = _generator_params(net, config)

    if config.baseline:
        logits = prune_for_inference(net).forward(Tensor(batch.xi))
        loss = cross_entropy(logits, batch.yi)
        report = total_loss({"cls_mixup": float(loss.data)}, config.weights,
                            {t: False for t in config.enabled()})
        ad.backward(loss)
        sgd_step(gen, opt, lr, config.momentum, config.weight_decay)
        return report, float("nan")

    lam = _draw_lambda(config, len(batch.yi), rng)
    mix = make_mix_batch(batch.xi, batch.xj, batch.yi, batch.yj, lam, net.num_classes)
    enabled = config.enabled()
    dis_on = enabled["dis"]
    joint = config.adversarial_mode == "joint"
    step_gen = step_disc = True
    if config.adversarial_mode == "alternating" and dis_on:
        step_gen, step_disc = epoch % 2 == 0, epoch % 2 == 1

    graph = compute_losses(net, mix, config.weights, enabled,
                           grl_scale=config.grl_scale if dis_on else None,
                           frozen_disc=not joint,
                           teacher_feature_grad=config.teacher_feature_grad)
    report = total_loss({k: float(v.data) for k, v in graph.terms.items()}, config.weights, enabled)
    total = combine(graph.terms, config.weights, enabled)
    ad.backward(total)

    if dis_on and not joint and config.update_discriminators:
        d_loss = loss_dis(net, [ad.detach(f) for f in graph.F_tilde], [ad.detach(f) for f in graph.F_mix])
        ad.backward(d_loss)

    if step_gen:
        sgd_step(gen, opt, lr, config.momentum, config.weight_decay)
    if dis_on and config.update_discriminators and step_disc:
        sgd_step(net.group("disc"), opt, lr, config.momentum, config.weight_decay)
    return report, float(np.mean(lam))


@dataclass
class FitResult:
    net: NetworkGraph
    steps: list[dict]
    epochs: list[dict]


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for batch order/augmentation and lambda draws."""
    data_ss, mix_ss = np.random.SeedSequence(seed).spawn(2)
    return {"data": np.random.default_rng(data_ss), "mix": np.random.default_rng(mix_ss)}


def fit(net: NetworkGraph, dataset: Dataset, config: TrainConfig, test_set: Dataset | None = None,
        on_step: Callable[[dict], None] | None = None,
        on_epoch: Callable[[int, NetworkGraph, dict], None] | None = None) -> FitResult:
    from .evaluator import top1_accuracy

    if len(dataset) == 0:
        raise EvaluationError("empty dataset")
    streams = rng_streams(config.seed)
    opt = OptimizerState()
    spe = len(dataset) // config.batch_size
    augment = augment_crop_flip if config.data.augment else None
    steps, epochs = [], []
    step = 0
    for epoch in range(config.epochs):
        for batch in batch_pairs(dataset, config.batch_size, streams["data"], augment):
            lr = lr_at(step, config, spe)
            report, lam = train_step(net, opt, batch, config, streams["mix"], lr, epoch)
            rec = report.to_record(step, None if math.isnan(lam) else lam, lr)
            steps.append(rec)
            if on_step:
                on_step(rec)
            step += 1
        inf = prune_for_inference(net)
        metrics = {"epoch": epoch, "train_acc": top1_accuracy(inf, dataset)}
        if test_set is not None:
            metrics["test_acc"] = top1_accuracy(inf, test_set)
        metrics["loss"] = float(np.mean([s["total"] for s in steps[-spe:]])) if spe else float("nan")
        log.info("epoch %d: %s", epoch, metrics)
        epochs.append(metrics)
        if on_epoch:
            on_epoch(epoch, net, metrics)
    return FitResult(net, steps, epochs)
