import numpy as np
import pytest

from mixskd import autodiff as ad
from mixskd import diagnostics, losses
from mixskd.autodiff.tensor import make_result
from mixskd.cli import main


def _doubled_backward(fn):
    def wrapped(*a, **kw):
        out = fn(*a, **kw)
        return make_result(out.data, "faulty", (out,), lambda g: (2.0 * g,))
    return wrapped


def test_primitive_table_covers_engine():
    rep = diagnostics.check_primitives(instances=2, seed=3)
    assert {"conv2d", "linear", "relu", "global_avg_pool", "softmax_t", "cross_entropy", "kl_div"} <= set(rep)
    assert all(r.passed for r in rep.values())


def test_toy_problem_avoids_relu_kinks():
    prob = diagnostics.toy_problem(1)
    g = losses.compute_losses(prob.net, prob.mix, prob.weights)
    assert diagnostics.relu_margin(losses.combine(g.terms, prob.weights)) >= diagnostics.KINK_MARGIN
    assert prob.net.K == 2 and prob.net.params["stem.w"].dtype == np.float64


def test_injected_fault_is_caught_and_named(monkeypatch):
    monkeypatch.setattr(losses, "loss_feature", _doubled_backward(losses.loss_feature))
    prob = diagnostics.toy_problem(0)
    params = list(prob.net.params.values())
    with ad.precision(np.float64):
        bad = ad.finite_diff_gradcheck(diagnostics.term_function(prob, "feature"), params)
        good = ad.finite_diff_gradcheck(diagnostics.term_function(prob, "b_logit"), params)
    assert not bad.passed and bad.max_rel_error == pytest.approx(0.5, rel=1e-3)
    assert good.passed


def test_cli_gradcheck_fault_exit_code(monkeypatch, tmp_path, capsys):
    monkeypatch.setattr(losses, "loss_f_logit", _doubled_backward(losses.loss_f_logit))
    assert main(["gradcheck", "--instances", "1", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "terms/f_logit" in err and "terms/feature" not in err
    table = (tmp_path / "gradcheck.csv").read_text().splitlines()
    term_rows = [r.split(",")[1] for r in table[1:] if r.startswith("terms")]
    assert term_rows == [*losses.TERMS, "total"]


def test_format_table():
    rep = diagnostics.check_primitives(instances=1)
    text = diagnostics.format_table(rep)
    assert text.splitlines()[0].split()[0] == "name" and "PASS" in text
