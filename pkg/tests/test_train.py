from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transferlab.augment import AugmentationSpec, BDist
from transferlab.data import EmpiricalDataset, SyntheticSpec, generate_synthetic, make_rng
from transferlab.nnet import DimensionError, Network, jacobian_batch
from transferlab.train import (
    ArchSpec,
    LinearHead,
    RegularizerSpec,
    TrainConfig,
    TrainedModel,
    TrainingDiverged,
    augmented_objective,
    evaluate,
    fine_tune_linear,
    fit_linear_head,
    init_model,
    sgd_train,
)


@pytest.fixture
def blobs():
    return generate_synthetic(SyntheticSpec("gaussian-blobs", 3, 2, n_source=64, n_target=64, seed=4))[0]


ARCH = ArchSpec(3, (6,), 2, "tanh")


class TestSpecs:
    def test_arch_needs_hidden(self):
        with pytest.raises(ValueError):
            ArchSpec(2, (), 1)

    def test_negative_strength(self):
        with pytest.raises(ValueError):
            RegularizerSpec("wd", -1.0)

    def test_unknown_regularizer(self):
        with pytest.raises(ValueError):
            RegularizerSpec("dropout", 0.1)

    @pytest.mark.parametrize("kw", [{"lr": 0.0}, {"momentum": 1.0}, {"momentum": -0.1}])
    def test_train_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestSgdTrain:
    def test_realizable_linear_teacher(self):
        src, _ = generate_synthetic(SyntheticSpec("linear-teacher", 3, 3, n_source=40, n_target=40, seed=1))
        arch = ArchSpec(3, (3,), 3, "identity")
        model = sgd_train(TrainConfig(epochs=500, batch_size=8, lr=0.01, momentum=0.9), src, arch)
        assert evaluate(model, src) < 1e-6

    def test_deterministic(self, blobs):
        cfg = TrainConfig(epochs=5, seed=3, lr=0.02)
        a, b = sgd_train(cfg, blobs, ARCH), sgd_train(cfg, blobs, ARCH)
        assert a.dumps() == b.dumps()

    @pytest.mark.parametrize("kind", ["wd", "jr", "llr"])
    def test_zero_strength_equals_plain(self, blobs, kind):
        base = TrainConfig(epochs=4, seed=2, lr=0.02)
        reg = dataclasses.replace(base, regularizer=RegularizerSpec(kind, 0.0))
        assert sgd_train(base, blobs, ARCH).dumps() == sgd_train(reg, blobs, ARCH).dumps()

    def test_weight_decay_shrinks_extractor(self, blobs):
        base = TrainConfig(epochs=20, seed=0, lr=0.02)
        wd = dataclasses.replace(base, regularizer=RegularizerSpec("wd", 10.0))
        norm = lambda m: sum(np.sum(l.weight**2) for l in m.extractor.layers)  # noqa: E731
        assert norm(sgd_train(wd, blobs, ARCH)) < norm(sgd_train(base, blobs, ARCH))

    def test_jr_reduces_jacobian(self, blobs):
        base = TrainConfig(epochs=20, seed=0, lr=0.02)
        jr = dataclasses.replace(base, regularizer=RegularizerSpec("jr", 1.0))
        J = lambda m: np.mean(np.sum(jacobian_batch(m.extractor, blobs.inputs) ** 2, axis=(1, 2)))  # noqa: E731
        assert J(sgd_train(jr, blobs, ARCH)) < J(sgd_train(base, blobs, ARCH))

    def test_ll_norm_projection(self, blobs):
        cfg = TrainConfig(epochs=3, lr=0.02, regularizer=RegularizerSpec("ll-norm", target_norm=0.7))
        model = sgd_train(cfg, blobs, ARCH)
        assert np.linalg.norm(model.head.weight) == pytest.approx(0.7, rel=1e-12)

    def test_adversarial_training_runs(self, blobs):
        cfg = TrainConfig(epochs=2, lr=0.02, regularizer=RegularizerSpec("adv", epsilon=0.1, steps=8))
        model = sgd_train(cfg, blobs, ARCH)
        assert len(model.history) == 2 and np.isfinite(model.history[-1].loss)

    def test_augmented_training_runs(self, blobs):
        aug = AugmentationSpec(b_dist=BDist("gaussian-iso", sigma=0.1))
        cfg = TrainConfig(epochs=2, lr=0.02, augmentation=aug)
        model = sgd_train(cfg, blobs, ARCH)
        assert model.history[0].epoch == 0 and model.history[1].epoch == 1

    def test_divergence_reported(self, blobs):
        with pytest.raises(TrainingDiverged, match=r"epoch \d+, step \d+"):
            sgd_train(TrainConfig(epochs=50, lr=5.0), blobs, ArchSpec(3, (6,), 2, "identity"))

    def test_dim_mismatch(self, blobs):
        with pytest.raises(DimensionError):
            sgd_train(TrainConfig(), blobs, ArchSpec(3, (4,), 5))

    def test_lr_decay_applied(self, blobs):
        # zero lr after epoch 1 freezes the parameters
        cfg = TrainConfig(epochs=3, lr=0.02, lr_decay_epochs=(1,), decay_factor=0.0, momentum=0.0)
        frozen = sgd_train(cfg, blobs, ARCH)
        one = sgd_train(dataclasses.replace(cfg, epochs=1), blobs, ARCH)
        assert frozen.extractor.equals(one.extractor)


class TestFineTune:
    def test_identity_extractor_exact(self):
        x = np.linspace(-1, 1, 9)[:, None]
        data = EmpiricalDataset(x, 2 * x)
        head, loss = fine_tune_linear(Network.identity(1), data)
        np.testing.assert_allclose(head.weight, [[2.0]], atol=1e-12)
        np.testing.assert_allclose(head.bias, [0.0], atol=1e-12)
        assert loss == pytest.approx(0.0, abs=1e-24)

    def test_constant_features(self):
        y = np.array([[1.0], [-1.0], [3.0], [-3.0]])
        head, loss = fit_linear_head(np.ones((4, 2)), y)
        np.testing.assert_allclose(head(np.ones((1, 2))), [[0.0]], atol=1e-12)
        assert loss == pytest.approx(np.var(y))

    def test_huge_ridge_shrinks(self):
        rng = make_rng(0)
        F, Y = rng.normal(size=(20, 3)), rng.normal(size=(20, 2))
        head, loss = fit_linear_head(F, Y, ridge=1e12)
        assert np.abs(head.weight).max() < 1e-9
        assert loss == pytest.approx(np.mean(np.sum(Y**2, axis=1)), rel=1e-6)

    def test_ls_beats_random_heads(self):
        rng = make_rng(1)
        F, Y = rng.normal(size=(30, 4)), rng.normal(size=(30, 2))
        _, best = fit_linear_head(F, Y)
        for _ in range(100):
            h = LinearHead(rng.normal(size=(2, 4)), rng.normal(size=2))
            assert best <= np.mean(np.sum((h(F) - Y) ** 2, axis=1))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fit_linear_head(np.zeros((0, 2)), np.zeros((0, 1)))


class TestEvaluate:
    def test_zero_model_one_hot(self):
        data = EmpiricalDataset(np.zeros((3, 1)), np.eye(3))
        zero = Network.linear(np.zeros((3, 1)), np.zeros(3))
        assert evaluate(zero, data) == pytest.approx(1.0)

    def test_tie_goes_to_lowest_index(self):
        data = EmpiricalDataset(np.zeros((1, 1)), [[1.0, 0.0]])
        tie = Network.linear(np.zeros((2, 1)), np.array([0.5, 0.5]))
        assert evaluate(tie, data, "argmax_accuracy") == 1.0

    def test_perfect(self):
        data = EmpiricalDataset(np.eye(2), np.eye(2))
        assert evaluate(Network.identity(2), data) == 0.0
        assert evaluate(Network.identity(2), data, "argmax_accuracy") == 1.0

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            evaluate(Network.identity(1), EmpiricalDataset([[0.0]], [[0.0]]), "f1")


class TestSerialization:
    def test_round_trip(self, blobs, tmp_path):
        model = sgd_train(TrainConfig(epochs=2, lr=0.02), blobs, ARCH)
        path = tmp_path / "m.txt"
        model.save(path)
        back = TrainedModel.load(path)
        assert back.dumps() == model.dumps()
        np.testing.assert_array_equal(back.predict(blobs.inputs), model.predict(blobs.inputs))
        assert back.history == model.history


class TestAugmentedObjective:
    def test_linear_gaussian_identity(self):
        # linear model: E||A(x + σξ) + c - y||² = plain + σ²||A||_F²
        rng = make_rng(5)
        X, Y = rng.normal(size=(10, 3)), rng.normal(size=(10, 2))
        ext = Network.linear(rng.normal(size=(4, 3)), rng.normal(size=4))
        head = LinearHead(rng.normal(size=(2, 4)), rng.normal(size=2))
        model = TrainedModel(ext, head)
        data = EmpiricalDataset(X, Y)
        sigma = 0.3
        val, se = augmented_objective(model, data, AugmentationSpec(b_dist=BDist("gaussian-iso", sigma=sigma)), 4000)
        AW = head.weight @ ext.layers[0].weight
        expected = evaluate(model, data) + sigma**2 * np.sum(AW**2)
        assert abs(val - expected) <= 4 * se


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(3, 12), st.integers(0, 2**31))
def test_least_squares_normal_equations(p, k, n, seed):
    rng = make_rng(seed)
    F, Y = rng.normal(size=(n, p)), rng.normal(size=(n, k))
    head, loss = fit_linear_head(F, Y)
    R = head(F) - Y
    Phi = np.hstack([F, np.ones((n, 1))])
    np.testing.assert_allclose(Phi.T @ R, 0.0, atol=1e-9 * (1 + np.abs(Phi).max() * np.abs(Y).max() * n))
    assert loss == pytest.approx(np.mean(np.sum(R**2, axis=1)), rel=1e-9, abs=1e-12)


def test_init_model_shapes():
    m = init_model(ArchSpec(3, (5, 4), 2), seed=0)
    assert m.extractor.out_dim == 4 and m.head.weight.shape == (2, 4)
    assert m.extractor.layers[-1].activation == "relu"
