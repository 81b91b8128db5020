"""Loss terms of the MixSKD objective.

All terms are batch means.  KL terms take the target distribution from the
detached side: ``KL(softmax(target/T) || softmax(student/T))``.  The conventional ``T**2``
rescaling is opt-in via ``t_squared``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EvaluationError, InvalidConfigError, InvalidShapeError
from .mixup import MixBatch, interpolate_features, interpolate_logits, one_hot
from .network import BranchOutputs, NetworkGraph, forward_discriminator, forward_teacher, forward_train

TERMS = ("cls_mixup", "feature", "dis", "b_logit", "cls_h", "f_logit")
SWITCHABLE = TERMS[1:]
CLAMP = 1e-7


@dataclass
class LossWeights:
    beta: float = 1.0
    gamma: float = 1.0
    mu: float = 1.0
    T: float = 3.0
    t_squared: bool = False

    def __post_init__(self):
        if not self.T > 0:
            raise InvalidConfigError(f"temperature must be positive, got {self.T}")
        for name in ("beta", "gamma", "mu"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidConfigError(f"weight {name} must be finite and >= 0, got {v}")

    def coefficient(self, term: str) -> float:
        return {"cls_mixup": 1.0, "feature": self.beta, "dis": self.gamma,
                "b_logit": self.mu, "cls_h": self.mu, "f_logit": self.mu}[term]


@dataclass
class LossReport:
    cls_mixup: float
    feature: float
    dis: float
    b_logit: float
    cls_h: float
    f_logit: float
    total: float

    def components(self) -> dict[str, float]:
        return {t: getattr(self, t) for t in TERMS}

    def to_record(self, step: int, lam: float, lr: float) -> dict:
        rec = {"step": step}
        rec.update(asdict(self))
        rec["lambda"] = lam
        rec["lr"] = lr
        return rec


def all_enabled() -> dict[str, bool]:
    return {t: True for t in SWITCHABLE}


# -- primitives ----------------------------------------------------------------


def _targets(target, logits: Tensor) -> np.ndarray:
    if isinstance(target, Tensor):
        target = target.data
    target = np.asarray(target)
    if target.ndim == 1:
        target = one_hot(target, logits.shape[1])
    if target.shape != logits.shape:
        raise InvalidShapeError(f"target {target.shape} vs logits {logits.shape}")
    return target.astype(logits.dtype)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Batch mean of ``-sum_c t_c log softmax(logits)_c``; hard labels are one-hot encoded."""
    if np.isnan(logits.data).any():
        raise EvaluationError("cross_entropy: NaN in logits")
    t = _targets(target, logits)
    lp = ad.log_softmax_t(logits, 1.0)
    return ad.mul(ad.sum(ad.mul(lp, t)), -1.0 / logits.shape[0])


def kl_div(student: Tensor, teacher: Tensor, T: float, t_squared: bool = False) -> Tensor:
    """``KL(softmax(teacher/T) || softmax(student/T))`` averaged over the batch.

    The teacher is expected to be detached by the caller; if it is not,
    gradient flows into it like any other input.
    """
    if student.shape != teacher.shape:
        raise InvalidShapeError(f"kl_div: student {student.shape} vs teacher {teacher.shape}")
    ls = ad.log_softmax_t(student, T)
    lt = ad.log_softmax_t(teacher, T)
    pt = ad.softmax_t(teacher, T)
    scale = (T * T if t_squared else 1.0) / student.shape[0]
    return ad.mul(ad.sum(ad.mul(pt, ad.sub(lt, ls))), scale)


# -- objective terms -----------------------------------------------------------


def loss_cls_b_f(out: BranchOutputs, target) -> Tensor:
    """Cross-entropy of the backbone plus every auxiliary branch."""
    loss = cross_entropy(out.backbone_logits, target)
    for b in out.branch_logits:
        loss = loss + cross_entropy(b, target)
    return loss


@dataclass
class MixForward:
    out_i: BranchOutputs
    out_j: BranchOutputs
    out_mix: BranchOutputs


def loss_cls_mixup(net: NetworkGraph, mix: MixBatch) -> tuple[Tensor, MixForward]:
    """Task loss over x_i, x_j and the Mixup image; one forward per input."""
    fw = MixForward(forward_train(net, mix.xi), forward_train(net, mix.xj), forward_train(net, mix.x_tilde))
    loss = loss_cls_b_f(fw.out_i, mix.yi) + loss_cls_b_f(fw.out_j, mix.yj) + loss_cls_b_f(fw.out_mix, mix.y_tilde)
    return loss, fw


def loss_feature(F_tilde: Sequence[Tensor], F_mix: Sequence[Tensor]) -> Tensor:
    if len(F_tilde) != len(F_mix):
        raise InvalidShapeError("loss_feature: stage counts differ")
    total = None
    for a, b in zip(F_tilde, F_mix):
        if a.shape != b.shape:
            raise InvalidShapeError(f"loss_feature: {a.shape} vs {b.shape}")
        # mean over N*C*H*W == batch mean of ||.||^2 / (H*W*C)
        term = ad.mean(ad.square(ad.sub(a, b)))
        total = term if total is None else total + term
    return total


def loss_dis(net: NetworkGraph, F_tilde: Sequence[Tensor], F_mix: Sequence[Tensor],
             frozen: bool = False) -> Tensor:
    """Binary cross-entropy: interpolated features are 'real', Mixup features 'fake'."""
    if len(F_tilde) != net.K or len(F_mix) != net.K:
        raise InvalidShapeError(f"loss_dis: need {net.K} feature maps per side")
    total = None
    for k, (a, b) in enumerate(zip(F_tilde, F_mix), start=1):
        d_real = ad.clip(forward_discriminator(net, k, a, frozen=frozen), CLAMP, 1 - CLAMP)
        d_fake = ad.clip(forward_discriminator(net, k, b, frozen=frozen), CLAMP, 1 - CLAMP)
        term = ad.add(ad.log(d_real), ad.log(ad.sub(1.0, d_fake)))
        term = ad.mul(ad.mean(term), -1.0)
        total = term if total is None else total + term
    return total


def loss_b_logit(branch_i: Sequence[Tensor], branch_j: Sequence[Tensor], branch_mix: Sequence[Tensor],
                 lam, T: float, t_squared: bool = False, stop_gradient: bool = True) -> Tensor:
    """Mutual KL between interpolated and Mixup branch logits, each against a fixed copy of the other."""
    if not (len(branch_i) == len(branch_j) == len(branch_mix)) or not branch_i:
        raise InvalidShapeError("loss_b_logit: need equal, non-empty branch lists")
    stop = ad.detach if stop_gradient else (lambda t: t)
    total = None
    for bi, bj, bm in zip(branch_i, branch_j, branch_mix):
        b_tilde = interpolate_logits(bi, bj, lam)
        term = kl_div(b_tilde, stop(bm), T, t_squared) + kl_div(bm, stop(b_tilde), T, t_squared)
        total = term if total is None else total + term
    return total


def loss_cls_h(net: NetworkGraph, F_tilde: Sequence[Tensor], F_mix: Sequence[Tensor], y_tilde,
               feature_grad: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    """Self-teacher cross-entropy on both feature sets; returns (loss, h_tilde, h_mix)."""
    if not feature_grad:
        F_tilde = [ad.detach(f) for f in F_tilde]
        F_mix = [ad.detach(f) for f in F_mix]
    h_tilde = forward_teacher(net, F_tilde)
    h_mix = forward_teacher(net, F_mix)
    loss = cross_entropy(h_tilde, y_tilde) + cross_entropy(h_mix, y_tilde)
    return loss, h_tilde, h_mix


def loss_f_logit(f_i: Tensor, f_j: Tensor, f_mix: Tensor, h_tilde: Tensor, h_mix: Tensor,
                 lam, T: float, t_squared: bool = False, stop_gradient: bool = True) -> Tensor:
    """Teacher-to-backbone KL: h(x~) supervises interpolated f, h(xi,xj) supervises f(x~)."""
    stop = ad.detach if stop_gradient else (lambda t: t)
    f_tilde = interpolate_logits(f_i, f_j, lam)
    return kl_div(f_tilde, stop(h_mix), T, t_squared) + kl_div(f_mix, stop(h_tilde), T, t_squared)


# -- combination ---------------------------------------------------------------


def _is_on(term: str, enabled: Mapping[str, bool] | None) -> bool:
    return term == "cls_mixup" or enabled is None or bool(enabled.get(term, True))


def combine(terms: Mapping[str, Tensor], weights: LossWeights,
            enabled: Mapping[str, bool] | None = None) -> Tensor:
    """Weighted objective as a differentiable tensor."""
    total = None
    for t in TERMS:
        if t not in terms or not _is_on(t, enabled):
            continue
        c = weights.coefficient(t)
        part = terms[t] if c == 1.0 else ad.mul(terms[t], c)
        total = part if total is None else total + part
    return total


def total_loss(components: Mapping[str, float], weights: LossWeights,
               enabled: Mapping[str, bool] | None = None) -> LossReport:
    """LossReport with ``total = cls + beta*feature + gamma*dis + mu*(b_logit + cls_h + f_logit)``.

    Switched-off terms are reported as 0.
    """
    vals = {}
    for t in TERMS:
        v = float(components.get(t, 0.0)) if _is_on(t, enabled) else 0.0
        if math.isnan(v) or math.isinf(v):
            raise EvaluationError(f"loss component {t!r} is not finite ({v})")
        vals[t] = v
    total = (vals["cls_mixup"] + weights.beta * vals["feature"] + weights.gamma * vals["dis"]
             + weights.mu * (vals["b_logit"] + vals["cls_h"] + vals["f_logit"]))
    return LossReport(total=total, **vals)


@dataclass
class LossGraph:
    """Live tensors of one objective evaluation."""
    terms: dict[str, Tensor]
    forward: MixForward
    F_tilde: list[Tensor]
    F_mix: list[Tensor]
    extras: dict = field(default_factory=dict)


def compute_losses(net: NetworkGraph, mix: MixBatch, weights: LossWeights,
                   enabled: Mapping[str, bool] | None = None, grl_scale: float | None = None,
                   frozen_disc: bool = False, teacher_feature_grad: bool = True) -> LossGraph:
    """Evaluate every enabled term from a single forward per input.

    ``grl_scale`` routes the discriminator term into the features through a
    gradient-reversal junction; ``None`` leaves the plain objective, which is
    what the finite-difference checks differentiate.
    """
    cls, fw = loss_cls_mixup(net, mix)
    terms: dict[str, Tensor] = {"cls_mixup": cls}
    F_tilde = interpolate_features(fw.out_i.features, fw.out_j.features, mix.lam)
    F_mix = fw.out_mix.features
    if _is_on("feature", enabled):
        terms["feature"] = loss_feature(F_tilde, F_mix)
    if _is_on("dis", enabled):
        if grl_scale is None:
            a, b = F_tilde, F_mix
        else:
            a = [ad.grad_reverse(f, grl_scale) for f in F_tilde]
            b = [ad.grad_reverse(f, grl_scale) for f in F_mix]
        terms["dis"] = loss_dis(net, a, b, frozen=frozen_disc)
    if _is_on("b_logit", enabled):
        terms["b_logit"] = loss_b_logit(fw.out_i.branch_logits, fw.out_j.branch_logits,
                                        fw.out_mix.branch_logits, mix.lam, weights.T, weights.t_squared)
    if _is_on("cls_h", enabled) or _is_on("f_logit", enabled):
        cls_h, h_tilde, h_mix = loss_cls_h(net, F_tilde, F_mix, mix.y_tilde, teacher_feature_grad)
        if _is_on("cls_h", enabled):
            terms["cls_h"] = cls_h
        if _is_on("f_logit", enabled):
            terms["f_logit"] = loss_f_logit(fw.out_i.backbone_logits, fw.out_j.backbone_logits,
                                            fw.out_mix.backbone_logits, h_tilde, h_mix,
                                            mix.lam, weights.T, weights.t_squared)
    return LossGraph(terms, fw, F_tilde, F_mix)


def report_of(graph: LossGraph, weights: LossWeights, enabled: Mapping[str, bool] | None = None) -> LossReport:
    return total_loss({k: float(v.data) for k, v in graph.terms.items()}, weights, enabled)
