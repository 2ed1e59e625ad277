import numpy as np
import pytest

from rdpo import rng as rngs
from rdpo.dynamics import DatasetConfig, Kind, make_dataset
from rdpo.flowmodel import TrainConfig, init_params, train_base
from rdpo.formats import to_f32


@pytest.fixture(scope="session")
def small_dataset():
    return make_dataset(DatasetConfig(counts={k: 60 for k in Kind}, seed=3))


@pytest.fixture(scope="session")
def dataset():
    return make_dataset(DatasetConfig())


@pytest.fixture(scope="session")
def trained(dataset):
    """Base model on the default config (about 15 s)."""
    params, rows = train_base(dataset, TrainConfig(), seed=0)
    return params, rows


@pytest.fixture(scope="session")
def quick_model(small_dataset):
    params, _ = train_base(small_dataset, TrainConfig(width=32, depth=2, steps=400, eval_every=200, warmup=20),
                           seed=1)
    return params


def random_net(seed, width=8, depth=2, frames=16, T=50, out_scale=0.3):
    """Small net with a nonzero output head so every tensor carries gradient."""
    g = rngs.stream(seed, 99)
    p = init_params(width, depth, 8, frames, T, g)
    t = dict(p.tensors)
    t["out.W"] = g.standard_normal(t["out.W"].shape) * out_scale
    t["out.b"] = g.standard_normal(t["out.b"].shape) * out_scale
    for k in t:
        if k.endswith(".b"):
            t[k] = t[k] + 0.1 * g.standard_normal(t[k].shape)
    return p.replace({k: to_f32(v) for k, v in t.items()})


def random_batch(seed, n=4, frames=16, dim=4):
    g = np.random.default_rng(seed)
    x0 = g.standard_normal((n, frames * dim))
    c = np.zeros((n, 8))
    c[np.arange(n), g.integers(0, 4, n)] = 1.0
    c[:, 4:] = g.standard_normal((n, 4))
    return x0, c


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
