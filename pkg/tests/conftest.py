from __future__ import annotations

import sys

import numpy as np
import pytest

from transferlab.data import make_rng
from transferlab.nnet import Network, init_network


def random_net(rng, dims, activation="tanh", bias_scale=0.3, final_activation="identity") -> Network:
    net = init_network(dims, activation, rng, final_activation=final_activation)
    return net.with_params([(w, bias_scale * rng.normal(size=b.shape)) for w, b in net.params()])


def fd_grad(func, x, h=1e-4):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (func(x + e) - func(x - e)) / (2 * h)
    return g


@pytest.fixture
def rng():
    return make_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
