from __future__ import annotations

import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_net
from transferlab.data import EmpiricalDataset, make_rng, one_hot
from transferlab.nnet import Network, predict
from transferlab.robustness import AttackConfig, pgd_attack, robust_accuracy, robust_accuracy_curve


def loss(net, x, y):
    return float(np.sum((predict(net, x) - y) ** 2))


class TestAttackConfig:
    def test_defaults(self):
        cfg = AttackConfig(0.25)
        assert cfg.steps == 20 and cfg.alpha == pytest.approx(0.25 / 8) and not cfg.random_start

    def test_warns_when_unreachable(self):
        with pytest.warns(UserWarning, match="cannot reach"):
            AttackConfig(1.0, steps=2, step_size=0.1)

    @pytest.mark.parametrize("kw", [{"epsilon": -1.0}, {"epsilon": 0.1, "steps": -1}, {"epsilon": 0.1, "norm": "l1"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            AttackConfig(**kw)


class TestPgd:
    def test_zero_epsilon_identity(self):
        net = random_net(make_rng(0), [3, 4, 2])
        x = np.array([0.1, -0.2, 0.3])
        assert np.array_equal(pgd_attack(net, x, np.array([1.0, 0.0]), AttackConfig(0.0)), x)

    def test_zero_steps_identity(self):
        net = random_net(make_rng(0), [3, 4, 2])
        x = np.array([0.1, -0.2, 0.3])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cfg = AttackConfig(0.5, steps=0)
        assert np.array_equal(pgd_attack(net, x, np.array([1.0, 0.0]), cfg), x)

    def test_linear_closed_form(self):
        w = np.array([[2.0, -3.0]])
        net = Network.linear(w, np.zeros(1))
        x = np.array([0.5, 0.5])
        y = np.array([-5.0])  # below the prediction, so the loss grows with w·x
        xa = pgd_attack(net, x, y, AttackConfig(0.1))
        np.testing.assert_allclose(xa, x + 0.1 * np.sign(w[0]), atol=1e-15)

    def test_l2_ball(self):
        net = random_net(make_rng(3), [4, 6, 2])
        X = make_rng(4).normal(size=(10, 4))
        Y = one_hot(np.arange(10) % 2, 2)
        Xa = pgd_attack(net, X, Y, AttackConfig(0.3, norm="l2"))
        assert np.all(np.linalg.norm(Xa - X, axis=1) <= 0.3 * (1 + 1e-12))

    def test_random_start_seeded(self):
        net = random_net(make_rng(3), [4, 6, 2])
        X = make_rng(4).normal(size=(5, 4))
        Y = one_hot(np.arange(5) % 2, 2)
        cfg = AttackConfig(0.2, random_start=True, seed=9)
        assert np.array_equal(pgd_attack(net, X, Y, cfg), pgd_attack(net, X, Y, cfg))


class TestRobustAccuracy:
    @pytest.fixture
    def setup(self):
        rng = make_rng(7)
        net = random_net(rng, [2, 8, 3], activation="relu")
        X = rng.normal(size=(60, 2))
        data = EmpiricalDataset(X, one_hot(np.argmax(predict(net, X) + 0.3 * rng.normal(size=(60, 3)), axis=1), 3))
        return net, data

    def test_zero_eps_equals_clean(self, setup):
        net, data = setup
        clean = float(np.mean(np.argmax(predict(net, data.inputs), axis=1) == data.labels()))
        assert robust_accuracy(net, data, AttackConfig(0.0)) == clean

    def test_curve_monotone(self, setup):
        net, data = setup
        curve = robust_accuracy_curve(net, data, [0.0, 0.05, 0.1, 0.25, 1.0], AttackConfig(0.1))
        assert all(b <= a for a, b in zip(curve, curve[1:]))

    def test_constant_model(self, setup):
        _, data = setup
        const = Network.linear(np.zeros((3, 2)), np.array([0.0, 1.0, 0.0]))
        clean = float(np.mean(data.labels() == 1))
        assert robust_accuracy(const, data, AttackConfig(10.0)) == clean

    def test_huge_eps_linear_classifier(self):
        # the squared loss is convex in x, so its maximum over the box sits at a corner
        w = np.array([[1.0, 0.5], [-1.0, -0.5]])
        net = Network.linear(w, np.zeros(2))
        X = make_rng(2).normal(size=(20, 2))
        data = EmpiricalDataset(X, one_hot(np.argmax(X @ w.T, axis=1), 2))
        eps = 10.0
        corners = np.array(list(itertools.product([-eps, eps], repeat=2)))
        hits = []
        for x, y in zip(X, data.targets):
            P = (x + corners) @ w.T
            worst = np.argmax(np.sum((P - y) ** 2, axis=1))
            hits.append(np.argmax(P[worst]) == np.argmax(y))
        acc = robust_accuracy(net, data, AttackConfig(eps))
        assert acc <= 1.0  # clean accuracy is 1 by construction
        assert acc == pytest.approx(np.mean(hits), abs=1e-12)

    def test_grid_must_increase(self, setup):
        net, data = setup
        with pytest.raises(ValueError):
            robust_accuracy_curve(net, data, [0.1, 0.0], AttackConfig(0.1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 1.0), st.sampled_from(["linf", "l2"]))
def test_feasible_and_loss_nondecreasing(seed, eps, norm):
    rng = make_rng(seed)
    net = random_net(rng, [3, 5, 2], activation="relu")
    X = rng.normal(size=(6, 3))
    Y = one_hot(rng.integers(0, 2, size=6), 2)
    Xa = pgd_attack(net, X, Y, AttackConfig(eps, norm=norm))
    if norm == "linf":
        assert np.max(np.abs(Xa - X)) <= eps + 1e-15 * (1 + np.abs(X).max())
    else:
        assert np.all(np.linalg.norm(Xa - X, axis=1) <= eps * (1 + 1e-12) + 1e-15 * (1 + np.abs(X).max()))
    for x, xa, y in zip(X, Xa, Y):
        assert loss(net, xa, y) >= loss(net, x, y)
