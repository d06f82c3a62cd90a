import numpy as np
import pytest

from mrgnn.graphs import NodeSet, assemble_graph_set
from mrgnn.model.network import ModelConfig, init_model


def random_node_sets(rng, sizes):
    return {
        m: NodeSet(m, [f"{m[0]}{i}" for i in range(n)], rng.uniform(0, 2000, (n, 2)))
        for m, n in sizes.items()
    }


def random_graph_set(rng, sizes, target="bike", bins=40, k=3):
    ns = random_node_sets(rng, sizes)
    demand = {m: rng.uniform(0, 10, (bins, n, 2)) for m, n in sizes.items()}
    return assemble_graph_set(target, ns, demand, k=k)


def jitter(model, rng, scale=0.1):
    """Move parameters off their init values so biases and LN terms are generic."""
    for v in model.params.values():
        v += rng.normal(0, scale, v.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_setup(rng):
    sizes = {"bike": 6, "subway": 4, "ridehail": 3}
    gs = random_graph_set(rng, sizes)
    cfg = ModelConfig(tuple(gs.modes), T=6, channels=(8, 8), kt=2, head_hidden=8, dropout=0.0)
    model = jitter(init_model(cfg, seed=3), rng)
    x = {m: rng.uniform(0, 1, (3, 6, n, 2)) for m, n in sizes.items()}
    y = {m: rng.uniform(0, 1, (3, n, 2)) for m, n in sizes.items()}
    return gs, model, x, y


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE_LINES = []


def acceptance_line(number, title, passed, detail=""):
    """Record one PASS/FAIL line; it is echoed now and repeated in the terminal summary."""
    line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
