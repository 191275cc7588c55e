from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_net
from transferlab.data import EmpiricalDataset, make_rng
from transferlab.nnet import Network
from transferlab.pseudometric import (
    FunctionClassSample,
    check_emp_bound,
    check_transfer_bound,
    concentration_term,
    estimate_pseudometric,
    inf_finetune_loss,
    lipschitz_estimate,
    loss_grid,
    rademacher_exact,
    rademacher_from_losses,
    rademacher_mc,
    relative_transfer_loss,
    tv_discrete,
    wasserstein_exact,
    zero_one_pseudometric,
)
from transferlab.train import TrainedModel, fine_tune_linear

X3 = np.array([[-1.0], [0.0], [1.0]])


def random_class(rng, k=4, dims=(2, 5, 3)):
    return FunctionClassSample(tuple(random_net(rng, list(dims), final_activation="tanh") for _ in range(k)))


def random_data(rng, n=12, d_in=2, d_out=2, shift=0.0):
    return EmpiricalDataset(rng.normal(size=(n, d_in)) + shift, rng.normal(size=(n, d_out)))


def grid_oracle(F, y, intercept):
    """Brute-force minimum of the mean squared loss over a fine (w, b) grid, refined once."""
    best = (np.inf, 0.0, 0.0)
    w_grid = np.linspace(-2, 2, 401)
    b_grid = np.linspace(-2, 2, 401) if intercept else np.array([0.0])
    for w, b in itertools.product(w_grid, b_grid):
        v = np.mean((F * w + b - y) ** 2)
        if v < best[0]:
            best = (v, w, b)
    return best[0]


class TestInfFinetune:
    def test_identity_linear_exact(self):
        data = EmpiricalDataset(X3, 2 * X3)
        assert inf_finetune_loss(Network.identity(1), data) == pytest.approx(0.0, abs=1e-28)

    def test_square_targets_with_intercept(self):
        data = EmpiricalDataset(X3, X3**2)
        assert inf_finetune_loss(Network.identity(1), data) == pytest.approx(2 / 9, abs=1e-14)
        assert grid_oracle(X3[:, 0], X3[:, 0] ** 2, True) == pytest.approx(2 / 9, abs=1e-4)

    def test_square_targets_without_intercept(self):
        data = EmpiricalDataset(X3, X3**2)
        assert inf_finetune_loss(Network.identity(1), data, intercept=False) == pytest.approx(2 / 3, abs=1e-14)
        assert grid_oracle(X3[:, 0], X3[:, 0] ** 2, False) == pytest.approx(2 / 3, abs=1e-4)

    def test_zero_targets(self, rng):
        f = random_net(rng, [2, 4, 3])
        data = EmpiricalDataset(rng.normal(size=(7, 2)), np.zeros((7, 2)))
        assert inf_finetune_loss(f, data) == pytest.approx(0.0, abs=1e-28)


class TestPseudometric:
    def test_weak_zero(self, rng):
        cls, D = random_class(rng), random_data(rng)
        assert estimate_pseudometric(cls, D, D).value == 0.0

    def test_identity_opposite_slopes(self):
        cls = FunctionClassSample((Network.identity(1),))
        assert estimate_pseudometric(cls, EmpiricalDataset(X3, 2 * X3), EmpiricalDataset(X3, -2 * X3)).value < 1e-28

    def test_identity_linear_vs_square(self):
        cls = FunctionClassSample((Network.identity(1),))
        est = estimate_pseudometric(cls, EmpiricalDataset(X3, 2 * X3), EmpiricalDataset(X3, X3**2))
        assert est.value == pytest.approx(2 / 9, abs=1e-14)

    def test_value_is_max_gap(self, rng):
        cls = random_class(rng, k=6)
        est = estimate_pseudometric(cls, random_data(rng), random_data(rng, shift=1.0))
        gaps = [abs(s - t) for s, t in est.per_extractor]
        assert est.value == max(gaps) and est.argmax_extractor == int(np.argmax(gaps))

    def test_class_monotone(self, rng):
        cls = random_class(rng, k=6)
        A, B = random_data(rng), random_data(rng, shift=0.5)
        full = estimate_pseudometric(cls, A, B).value
        for idx in ([0], [1, 3], [0, 2, 4, 5]):
            assert estimate_pseudometric(cls.subset(idx), A, B).value <= full

    def test_mixed_feature_dims_rejected(self, rng):
        with pytest.raises(ValueError, match="feature dimension"):
            FunctionClassSample((random_net(rng, [2, 3]), random_net(rng, [2, 4])))


class TestTransferBound:
    def test_same_distribution(self, rng):
        cls, D = random_class(rng), random_data(rng)
        head, _ = fine_tune_linear(cls.extractors[1], D)
        rep = check_transfer_bound(TrainedModel(cls.extractors[1], head), cls, D, D)
        assert rep.tau <= 1e-12 and rep.d == 0.0 and rep.holds

    def test_not_member(self, rng):
        cls, D = random_class(rng), random_data(rng)
        other = random_net(rng, [2, 5, 3])
        head, _ = fine_tune_linear(other, D)
        with pytest.raises(ValueError, match="not a member"):
            check_transfer_bound(TrainedModel(other, head), cls, D, D)

    def test_suboptimal_head_lowers_tau(self, rng):
        cls, S, T = random_class(rng), random_data(rng), random_data(rng, shift=1.0)
        f = cls.extractors[0]
        head, _ = fine_tune_linear(f, S)
        worse = type(head)(head.weight + 0.5, head.bias)
        t_opt = relative_transfer_loss(TrainedModel(f, head), S, T)
        t_bad = relative_transfer_loss(TrainedModel(f, worse), S, T)
        assert t_bad < t_opt
        assert check_transfer_bound(TrainedModel(f, worse), cls, S, T).holds


class TestRademacher:
    def test_singleton_vanishes(self, rng):
        L = rng.normal(size=(1, 10))
        est = rademacher_from_losses(L, 20_000, make_rng(1))
        assert abs(est.value) <= 4 * est.stderr
        assert rademacher_exact(L) == pytest.approx(0.0, abs=1e-15)

    def test_symmetric_pair_exact(self, rng):
        h = rng.normal(size=8)
        bits = np.array(list(itertools.product([-1.0, 1.0], repeat=8)))
        oracle = np.mean(np.abs(bits @ h)) / 8
        assert rademacher_exact(np.stack([h, -h])) == pytest.approx(oracle, rel=1e-14)
        est = rademacher_from_losses(np.stack([h, -h]), 20_000, make_rng(2))
        assert abs(est.value - oracle) <= 4 * est.stderr

    def test_exact_limit(self):
        with pytest.raises(ValueError):
            rademacher_exact(np.zeros((1, 13)))

    def test_class_monotone_same_draws(self, rng):
        cls, D = random_class(rng, k=5), random_data(rng)
        full = rademacher_mc(cls, D, 200, n_heads=8, seed=3)
        sub = rademacher_mc(cls.subset([0, 2]), D, 200, n_heads=8, seed=3)
        assert sub.value <= full.value

    def test_subclass_grid_rows(self, rng):
        cls, D = random_class(rng, k=3), random_data(rng)
        full = loss_grid(cls, D, 5, seed=1)
        np.testing.assert_array_equal(loss_grid(cls.subset([2, 0]), D, 5, seed=1), full[np.r_[10:15, 0:5]])


class TestDistances:
    def test_wasserstein_identical(self, rng):
        D = random_data(rng)
        assert wasserstein_exact(D, D) == 0.0

    def test_wasserstein_single_pair(self):
        A = EmpiricalDataset([[0.0]], [[0.0]])
        B = EmpiricalDataset([[3.0]], [[4.0]])
        assert wasserstein_exact(A, B) == pytest.approx(5.0)

    def test_wasserstein_1d_sorted_oracle(self, rng):
        a, b = rng.normal(size=40), rng.normal(size=40) + 0.7
        A = EmpiricalDataset(a[:, None], np.zeros((40, 1)))
        B = EmpiricalDataset(b[:, None], np.zeros((40, 1)))
        assert wasserstein_exact(A, B) == pytest.approx(np.mean(np.abs(np.sort(a) - np.sort(b))), rel=1e-12)

    def test_wasserstein_brute_force(self, rng):
        A, B = random_data(rng, n=6), random_data(rng, n=6)
        JA, JB = np.hstack([A.inputs, A.targets]), np.hstack([B.inputs, B.targets])
        brute = min(np.mean(np.linalg.norm(JA - JB[list(p)], axis=1)) for p in itertools.permutations(range(6)))
        assert wasserstein_exact(A, B) == pytest.approx(brute, rel=1e-12)

    def test_wasserstein_unequal(self, rng):
        with pytest.raises(ValueError, match="unequal"):
            wasserstein_exact(random_data(rng, n=4), random_data(rng, n=5))

    def test_lipschitz_bound(self, rng):
        for _ in range(5):
            cls = random_class(rng, k=3)
            A, B = random_data(rng, n=15), random_data(rng, n=15, shift=0.3)
            d = estimate_pseudometric(cls, A, B).value
            assert d <= lipschitz_estimate(cls, A, B) * wasserstein_exact(A, B)

    def test_tv(self):
        assert tv_discrete([0.5, 0.5], [0.5, 0.5]) == 0.0
        assert tv_discrete([1.0, 0.0], [0.0, 1.0]) == 1.0
        assert tv_discrete([0.5, 0.5], [0.9, 0.1]) == pytest.approx(0.4)
        with pytest.raises(ValueError):
            tv_discrete([0.5, 0.4], [0.5, 0.5])

    def test_zero_one_bounded_by_tv(self, rng):
        for _ in range(50):
            n_s = 5
            preds = rng.integers(0, 3, size=(4, 6, n_s))
            labels = rng.integers(0, 3, size=n_s)
            P, Q = rng.dirichlet(np.ones(n_s)), rng.dirichlet(np.ones(n_s))
            assert zero_one_pseudometric(preds, labels, P, Q) <= tv_discrete(P, Q) + 1e-15


class TestEmpiricalBound:
    def test_assembly(self, rng):
        cls = random_class(rng, k=3)
        S, T = random_data(rng, n=10), random_data(rng, n=10, shift=0.2)
        head, _ = fine_tune_linear(cls.extractors[0], S)
        model = TrainedModel(cls.extractors[0], head)
        rep = check_emp_bound(model, cls, S, T, delta=0.05, c=1e3, n_sigma_draws=50, n_heads=8)
        assert rep.concentration == pytest.approx(9e3 * np.sqrt(np.log(160) / 20))
        assert rep.rhs == pytest.approx(rep.d + 2 * rep.rad_T + 4 * rep.rad_S + rep.concentration)
        assert rep.holds and rep.concentration > rep.d

    def test_c_doubles_term(self):
        assert concentration_term(2.0, 0.05, 30) == pytest.approx(2 * concentration_term(1.0, 0.05, 30))

    def test_loss_exceeds_c(self, rng):
        cls = random_class(rng, k=2)
        S = random_data(rng, n=10)
        head, _ = fine_tune_linear(cls.extractors[0], S)
        with pytest.raises(ValueError, match="exceeds"):
            check_emp_bound(TrainedModel(cls.extractors[0], head), cls, S, S, 0.05, c=1e-6, n_heads=4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_pseudometric_axioms(seed):
    rng = make_rng(seed)
    cls = random_class(rng, k=3)
    A, B, C = (random_data(rng, n=8, shift=s) for s in (0.0, 0.5, -0.5))
    dab = estimate_pseudometric(cls, A, B).value
    assert dab == estimate_pseudometric(cls, B, A).value
    assert estimate_pseudometric(cls, A, C).value <= dab + estimate_pseudometric(cls, B, C).value + 1e-9
