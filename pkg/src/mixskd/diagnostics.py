"""Finite-difference checks over every primitive and every objective term."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import GradcheckReport, Tape, Tensor, finite_diff_gradcheck
from .mixup import make_mix_batch
from .network import StageSpec, build_network

EPS = 1e-5
REL_TOL = 1e-3


def _weighted_sum(out: Tensor, rng: np.random.Generator) -> Tensor:
    # Random projection so every output coordinate contributes a distinct weight.
    return ad.sum(ad.mul(out, rng.standard_normal(out.shape)))


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    """One random instance per primitive: (f, inputs)."""
    r = rng.standard_normal
    R = np.random.default_rng(rng.integers(1 << 31))
    n, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    hw, k = int(rng.integers(3, 7)), int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    T = float(rng.uniform(0.5, 4.0))
    pos = lambda *s: Tensor(rng.uniform(0.2, 2.0, s))  # noqa: E731
    t = lambda *s: Tensor(r(s))  # noqa: E731

    def proj(fn):
        return lambda xs: _weighted_sum(fn(*xs), np.random.default_rng(7))

    return {
        "conv2d": (proj(lambda x, w, b: ad.conv2d(x, w, b, stride=stride, padding=pad)),
                   [t(n, cin, hw, hw), t(cout, cin, k, k), t(cout)]),
        "linear": (proj(ad.linear), [t(n + 1, cin + 2), t(cout, cin + 2), t(cout)]),
        "relu": (proj(ad.relu), [t(3, 4)]),
        "global_avg_pool": (proj(ad.global_avg_pool), [t(n, cin, hw, hw)]),
        "softmax_t": (proj(lambda z: ad.softmax_t(z, T)), [t(3, 4)]),
        "log_softmax_t": (proj(lambda z: ad.log_softmax_t(z, T)), [t(3, 4)]),
        "sigmoid": (proj(ad.sigmoid), [t(5)]),
        "log": (proj(ad.log), [pos(2, 3)]),
        "clip": (proj(lambda z: ad.clip(z, -0.5, 0.5)), [t(4, 3)]),
        "concat": (proj(lambda a, b: ad.concat([a, b], axis=1)), [t(2, 2, 3, 3), t(2, 1, 3, 3)]),
        "reshape": (proj(lambda z: ad.reshape(z, (2, -1))), [t(2, 3, 2)]),
        "add": (proj(ad.add), [t(3, 4), t(4)]),
        "sub": (proj(ad.sub), [t(3, 4), t(3, 1)]),
        "mul": (proj(ad.mul), [t(3, 4), t(3, 4)]),
        "square": (proj(ad.square), [t(3, 4)]),
        "sum_axis": (proj(lambda z: ad.sum_axis(z, 1)), [t(3, 4)]),
        "mean": (lambda xs: ad.mul(ad.mean(ad.square(xs[0])), 1.0), [t(3, 4)]),
        "sum": (lambda xs: ad.sum(ad.square(xs[0])), [t(3, 4)]),
        "cross_entropy": (lambda xs, q=R.dirichlet(np.ones(4), 3): losses.cross_entropy(xs[0], q), [t(3, 4)]),
        "kl_div": (lambda xs: losses.kl_div(xs[0], xs[1], T), [t(3, 4), t(3, 4)]),
    }


def check_primitives(instances: int = 20, seed: int = 0) -> dict[str, GradcheckReport]:
    """Worst report per primitive over ``instances`` random cases (float64)."""
    rng = np.random.default_rng(seed)
    worst: dict[str, GradcheckReport] = {}
    with ad.precision(np.float64):
        for _ in range(instances):
            for name, (f, xs) in _primitive_cases(rng).items():
                rep = finite_diff_gradcheck(f, xs, eps=EPS, rel_tol=REL_TOL)
                if name not in worst or rep.max_rel_error > worst[name].max_rel_error:
                    worst[name] = rep
    return worst


@dataclass
class ToyProblem:
    net: object
    mix: object
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)


KINK_MARGIN = 1e-3


def relu_margin(out: Tensor) -> float:
    """Smallest |input| over the ReLUs that produced ``out``."""
    ins = [e._node.inputs[0].data for e in Tape.from_output(out).entries if e._node.op == "relu"]
    return min((float(np.abs(a).min()) for a in ins), default=np.inf)


def _build_toy(seed: int, lam: float) -> ToyProblem:
    net = build_network([StageSpec(2, 1, False), StageSpec(3, 1, True)], num_classes=3,
                        disc_hidden=4, seed=seed, input_size=(6, 6))
    rng = np.random.default_rng(seed + 1)
    xi, xj = rng.random((2, 3, 6, 6)), rng.random((2, 3, 6, 6))
    return ToyProblem(net, make_mix_batch(xi, xj, [0, 1], [2, 0], lam, 3))


def toy_problem(seed: int = 0, lam: float = 0.3, max_tries: int = 100) -> ToyProblem:
    """2-stage float64 network with a fixed Mixup batch.

    Instances with a ReLU input within ``KINK_MARGIN`` of zero are skipped
    (the next seed is tried): central differences straddling a kink measure
    the kink, not the gradient.
    """
    with ad.precision(np.float64):
        for s in range(seed, seed + max_tries):
            prob = _build_toy(s, lam)
            g = losses.compute_losses(prob.net, prob.mix, prob.weights)
            if relu_margin(losses.combine(g.terms, prob.weights)) >= KINK_MARGIN:
                return prob
    raise RuntimeError(f"no kink-free toy instance in seeds [{seed}, {seed + max_tries})")


def term_function(prob: ToyProblem, term: str) -> Callable:
    def f(_params):
        g = losses.compute_losses(prob.net, prob.mix, prob.weights)
        if term == "total":
            return losses.combine(g.terms, prob.weights)
        return g.terms[term]
    return f


def check_terms(seed: int = 0) -> dict[str, GradcheckReport]:
    """Gradcheck of each objective term and the total w.r.t. all network parameters."""
    prob = toy_problem(seed)
    params = list(prob.net.params.values())
    out = {}
    with ad.precision(np.float64):
        for term in (*losses.TERMS, "total"):
            out[term] = finite_diff_gradcheck(term_function(prob, term), params, eps=EPS, rel_tol=REL_TOL)
    return out


def run_gradcheck(instances: int = 20, seed: int = 0) -> dict[str, dict[str, GradcheckReport]]:
    return {"primitives": check_primitives(instances, seed), "terms": check_terms(seed)}


def format_table(section: dict[str, GradcheckReport]) -> str:
    lines = [f"{'name':<16} {'max_rel_err':>12} {'checked':>8}  result"]
    for name, rep in section.items():
        lines.append(f"{name:<16} {rep.max_rel_error:12.3e} {rep.n_checked:8d}  {'PASS' if rep.passed else 'FAIL'}")
    return "\n".join(lines)
