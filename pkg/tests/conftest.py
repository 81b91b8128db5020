import numpy as np
import pytest

from mixskd import autodiff as ad
from mixskd.config import TrainConfig, apply_overrides
from mixskd.data import gen_synthetic
from mixskd.network import StageSpec, build_from_config, build_network


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def small_net(seed=0, residual=False):
    return build_network([StageSpec(2, 1, False), StageSpec(3, 1, True), StageSpec(4, 1, True)],
                         num_classes=3, disc_hidden=5, seed=seed, input_size=(8, 8), residual=residual)


@pytest.fixture
def net3():
    return small_net()


@pytest.fixture(scope="session")
def trained_toy():
    """Short CE run on the synthetic task; (inference net, graph, test set)."""
    from mixskd.network import prune_for_inference
    from mixskd.trainer import fit

    cfg = apply_overrides(TrainConfig(), {"epochs": "8", "warmup_epochs": "1", "baseline": "true", "lr": "0.02",
                                          "data.per_class": "48", "data.augment": "false"})
    train = gen_synthetic(4, 48, 16, cfg.data.noise_sigma, 5)
    test = gen_synthetic(4, 32, 16, cfg.data.noise_sigma, 6, "test")
    net = build_from_config(cfg.network_config(), 0)
    fit(net, train, cfg)
    return prune_for_inference(net), net, test


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
