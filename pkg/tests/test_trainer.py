import math

import numpy as np
import pytest

from mixskd import autodiff as ad
from mixskd import trainer
from mixskd.autodiff import Tensor
from mixskd.config import TrainConfig, apply_overrides
from mixskd.data import batch_pairs, gen_synthetic
from mixskd.errors import EvaluationError, InvalidShapeError
from mixskd.losses import compute_losses, cross_entropy, loss_dis, report_of
from mixskd.mixup import make_mix_batch, sample_lambda
from mixskd.network import build_from_config, forward_train
from mixskd.trainer import OptimizerState, fit, lr_at, rng_streams, sgd_step, train_step

SELF_KD_OFF = {f"enable_{k}": "false" for k in ("feature", "dis", "b_logit", "h", "f_logit")}


def cfg_of(**kw):
    return apply_overrides(TrainConfig(), {k: str(v) for k, v in kw.items()})


def test_sgd_plain_descent():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)}
    sgd_step(p, OptimizerState(), 0.1, 0.0, 0.0, {"w": np.array([0.5, 0.5])})
    np.testing.assert_allclose(p["w"].data, [0.95, -2.05])


def test_sgd_zero_gradient_is_noop():
    p = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)}
    sgd_step(p, OptimizerState(), 0.1, 0.9, 0.0, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])


def test_sgd_two_steps_match_momentum_recursion():
    # f(w) = 0.5 * a * w^2, grad = a*w.  Hand recursion with weight decay.
    a, lr, m, wd, w0 = 3.0, 0.05, 0.9, 0.01, 2.0
    w = Tensor(np.array([w0]), requires_grad=True, dtype=np.float64)
    st = OptimizerState()
    for _ in range(2):
        sgd_step({"w": w}, st, lr, m, wd, {"w": a * w.data})
    v1 = a * w0 + wd * w0
    w1 = w0 - lr * v1
    v2 = m * v1 + a * w1 + wd * w1
    w2 = w1 - lr * v2
    assert abs(w.data[0] - w2) < 1e-7


def test_sgd_shape_mismatch():
    with pytest.raises(InvalidShapeError):
        sgd_step({"w": Tensor(np.zeros(2), requires_grad=True)}, OptimizerState(), 0.1, 0.0, 0.0,
                 {"w": np.zeros(3)})


def test_sgd_never_mutates_old_arrays():
    w = Tensor(np.ones(2), requires_grad=True)
    old = w.data
    sgd_step({"w": w}, OptimizerState(), 0.1, 0.0, 0.0, {"w": np.ones(2, np.float32)})
    np.testing.assert_array_equal(old, [1.0, 1.0])


def test_lr_schedule_step():
    cfg = cfg_of(epochs=10, warmup_epochs=2, lr=0.1, milestones="5,8")
    assert lr_at(0, cfg, 4) == 0.0
    assert lr_at(4, cfg, 4) == pytest.approx(0.05)
    assert lr_at(8, cfg, 4) == 0.1  # end of warmup hits lr exactly
    assert lr_at(7, cfg, 4) == pytest.approx(0.1 * 7 / 8)
    assert lr_at(20, cfg, 4) == pytest.approx(0.01)
    assert lr_at(32, cfg, 4) == pytest.approx(0.001)


def test_lr_continuous_at_warmup_boundary():
    cfg = cfg_of(epochs=10, warmup_epochs=3, lr=0.2, schedule="cosine")
    spe = 50
    assert abs(lr_at(150, cfg, spe) - lr_at(149, cfg, spe)) < 0.2 / 100
    assert lr_at(150, cfg, spe) == pytest.approx(0.2)
    assert lr_at(500, cfg, spe) == pytest.approx(0.0, abs=1e-12)


def _batch(seed=0, n=8):
    d = gen_synthetic(4, 4, 16, 0.35, seed)
    return next(batch_pairs(d, n, np.random.default_rng(seed)))


@pytest.mark.parametrize("seed", range(10))
def test_small_step_decreases_total_loss(seed, monkeypatch):
    cfg = cfg_of(lr=0.001)
    lam = 0.37
    monkeypatch.setattr(trainer, "_draw_lambda", lambda c, n, r: lam)
    net = build_from_config(cfg.network_config(), seed)
    b = _batch(seed, 16)
    mix = make_mix_batch(b.xi, b.xj, b.yi, b.yj, lam, 4)
    before = report_of(compute_losses(net, mix, cfg.weights), cfg.weights).total
    train_step(net, OptimizerState(), b, cfg, np.random.default_rng(0))
    after = report_of(compute_losses(net, mix, cfg.weights), cfg.weights).total
    assert after < before


def test_generator_and_discriminator_updates_are_separate():
    cfg = TrainConfig()
    net = build_from_config(cfg.network_config(), 0)
    b = _batch()
    mix = make_mix_batch(b.xi, b.xj, b.yi, b.yj, 0.4, 4)
    g = compute_losses(net, mix, cfg.weights, grl_scale=1.0, frozen_disc=True)
    ad.backward(g.terms["dis"])
    assert all(not p.grad.any() for p in net.group("disc").values())
    net.zero_grad()
    ad.backward(loss_dis(net, [ad.detach(f) for f in g.F_tilde], [ad.detach(f) for f in g.F_mix]))
    assert all(not p.grad.any() for grp in ("backbone", "branch", "teacher") for p in net.group(grp).values())
    assert any(p.grad.any() for p in net.group("disc").values())


def test_grl_zero_leaves_features_to_other_terms():
    cfg = TrainConfig()
    net = build_from_config(cfg.network_config(), 0)
    b = _batch()
    mix = make_mix_batch(b.xi, b.xj, b.yi, b.yj, 0.4, 4)
    ad.backward(compute_losses(net, mix, cfg.weights, grl_scale=0.0, frozen_disc=True).terms["dis"])
    assert all(not p.grad.any() for p in net.params.values())


def test_baseline_step_touches_only_backbone():
    cfg = cfg_of(baseline="true")
    net = build_from_config(cfg.network_config(), 0)
    before = {k: p.data.copy() for k, p in net.params.items()}
    rep, lam = train_step(net, OptimizerState(), _batch(), cfg, np.random.default_rng(0), 0.01)
    assert math.isnan(lam) and rep.feature == 0.0
    for k, p in net.params.items():
        changed = not np.array_equal(p.data, before[k])
        assert changed == (k.startswith(("stem", "stage", "fc.")))


@pytest.mark.parametrize("epoch,disc_moves", [(0, False), (1, True)])
def test_alternating_mode_steps_one_side_per_epoch(epoch, disc_moves):
    from mixskd.network import param_group
    cfg = cfg_of(adversarial_mode="alternating")
    net = build_from_config(cfg.network_config(), 0)
    before = {k: p.data.copy() for k, p in net.params.items()}
    train_step(net, OptimizerState(), _batch(), cfg, np.random.default_rng(0), 0.01, epoch=epoch)
    for k, p in net.params.items():
        changed = not np.array_equal(p.data, before[k])
        if param_group(k) == "disc":
            assert changed == disc_moves
        elif k.startswith("stem"):
            assert changed != disc_moves


def test_nan_loss_aborts_with_term_name():
    cfg = TrainConfig()
    net = build_from_config(cfg.network_config(), 0)
    net.params["disc1.fc2.b"].data = np.array([np.nan], np.float32)
    with pytest.raises(EvaluationError):
        train_step(net, OptimizerState(), _batch(), cfg, np.random.default_rng(0), 0.01)


def test_zero_epochs_leaves_net_unchanged():
    cfg = cfg_of(epochs=0)
    net = build_from_config(cfg.network_config(), 3)
    before = {k: p.data.tobytes() for k, p in net.params.items()}
    res = fit(net, gen_synthetic(4, 4, 16, 0.3, 0), cfg)
    assert res.steps == [] and res.epochs == []
    assert all(p.data.tobytes() == before[k] for k, p in net.params.items())


def test_fit_is_deterministic():
    cfg = cfg_of(epochs=2, warmup_epochs=1, batch_size=16)
    data = gen_synthetic(4, 8, 16, 0.3, 1)
    runs = []
    for _ in range(2):
        net = build_from_config(cfg.network_config(), cfg.seed)
        res = fit(net, data, cfg, data)
        runs.append((res.steps, res.epochs, b"".join(p.data.tobytes() for p in net.params.values())))
    assert runs[0] == runs[1]


def test_mixup_only_matches_independent_loop():
    """With every self-distillation term off, the trainer is plain Mixup over backbone and branches."""
    cfg = cfg_of(epochs=1, warmup_epochs=0, batch_size=8, lr=0.01, momentum=0.0, weight_decay=0.0,
                 **{**SELF_KD_OFF, "data.augment": "false"})
    data = gen_synthetic(4, 6, 16, 0.3, 2)
    net = build_from_config(cfg.network_config(), 0)
    res = fit(net, data, cfg)

    ref = build_from_config(cfg.network_config(), 0)
    streams = rng_streams(cfg.seed)
    trace = []
    for b in batch_pairs(data, 8, streams["data"]):
        lam = sample_lambda(cfg.alpha, streams["mix"])
        y = lam * np.eye(4)[b.yi] + (1 - lam) * np.eye(4)[b.yj]
        x_mix = Tensor(lam * b.xi + (1 - lam) * b.xj)
        loss = None
        for x, t in ((Tensor(b.xi), b.yi), (Tensor(b.xj), b.yj), (x_mix, y)):
            out = forward_train(ref, x)
            for logits in (out.backbone_logits, *out.branch_logits):
                part = cross_entropy(logits, t)
                loss = part if loss is None else ad.add(loss, part)
        trace.append(float(loss.data))
        ref.zero_grad()
        ad.backward(loss)
        for p in ref.params.values():
            p.data = (p.data - 0.01 * p.grad).astype(p.dtype)
    assert len(trace) == len(res.steps)
    np.testing.assert_allclose([s["cls_mixup"] for s in res.steps], trace, atol=1e-6)
