"""Central finite-difference oracle for analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import EvaluationError
from .tensor import Tensor, backward, detach_log


@dataclass
class GradcheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple[int, int] | None  # (tensor position, flat coordinate)
    n_checked: int
    passed: bool


def _eval(f, x):
    out = f(x)
    val = float(np.asarray(out.data).reshape(-1)[0])
    if not np.isfinite(val):
        raise EvaluationError("function under check returned a non-finite value")
    return out, val


def finite_diff_gradcheck(
    f: Callable,
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    rel_tol: float = 1e-3,
    abs_floor: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckReport:
    """Compare ``backward`` against central differences of ``f`` at ``x``.

    ``x`` is a tensor or a list of tensors; ``f`` is called with the same
    object(s) and must return a scalar tensor.  Relative error per coordinate
    is ``|a - n| / max(|a|, |n|, abs_floor)``.

    Values passed through ``detach`` inside ``f`` are held at their base-point
    values during the numeric probes, so only declared-differentiable paths
    are compared.  Without that, a detached target would contribute a
    nonzero numeric derivative that the analytic gradient (correctly) omits.

    ``max_coords`` caps the number of probed coordinates per tensor (sampled
    with ``rng``); ``None`` probes all of them.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)

    with detach_log() as log:
        out, _ = _eval(f, x)
        backward(out)
        analytic = [t.grad.copy() for t in xs]

        worst_rel, worst_abs, worst_at, n = 0.0, 0.0, None, 0
        for ti, t in enumerate(xs):
            base = t.data
            coords = np.arange(base.size)
            if max_coords is not None and base.size > max_coords:
                coords = (rng or np.random.default_rng(0)).choice(base.size, max_coords, replace=False)
            for c in coords:
                plus = base.copy()
                plus.reshape(-1)[c] += eps
                minus = base.copy()
                minus.reshape(-1)[c] -= eps
                t.data = plus
                with log.replay():
                    _, fp = _eval(f, x)
                t.data = minus
                with log.replay():
                    _, fm = _eval(f, x)
                t.data = base
                num = (fp - fm) / (2 * eps)
                ana = float(analytic[ti].reshape(-1)[c])
                abs_err = abs(ana - num)
                rel = abs_err / max(abs(ana), abs(num), abs_floor)
                n += 1
                if rel > worst_rel:
                    worst_rel, worst_at = rel, (ti, int(c))
                worst_abs = max(worst_abs, abs_err)
    return GradcheckReport(worst_rel, worst_abs, worst_at, n, worst_rel <= rel_tol)
