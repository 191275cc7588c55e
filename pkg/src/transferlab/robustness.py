"""PGD attacks on the squared loss and robust accuracy."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from transferlab.data import EmpiricalDataset, make_rng
from transferlab.nnet import Network, input_gradient, predict

NORMS = ("linf", "l2")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 20
    step_size: float | None = None
    random_start: bool = False
    seed: int = 0
    norm: str = "linf"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.epsilon > 0 and self.steps * self.alpha < self.epsilon:
            warnings.warn("steps * step_size < epsilon: the attack cannot reach the boundary", stacklevel=2)

    @property
    def alpha(self) -> float:
        return self.epsilon / 8.0 if self.step_size is None else self.step_size

    def with_epsilon(self, eps: float) -> "AttackConfig":
        return AttackConfig(eps, self.steps, self.step_size, self.random_start, self.seed, self.norm)


def as_network(model) -> Network:
    if isinstance(model, Network):
        return model
    net = getattr(model, "network", None)
    if isinstance(net, Network):
        return net
    raise TypeError(f"cannot attack object of type {type(model).__name__}")


def _project(delta: np.ndarray, eps: float, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    nrm = np.linalg.norm(delta, axis=1, keepdims=True)
    scale = np.minimum(1.0, eps / np.maximum(nrm, 1e-300))
    return delta * scale


def _step(grad: np.ndarray, alpha: float, norm: str) -> np.ndarray:
    if norm == "linf":
        return alpha * np.sign(grad)
    nrm = np.linalg.norm(grad, axis=1, keepdims=True)
    return alpha * np.where(nrm > 0, grad / np.maximum(nrm, 1e-300), 0.0)


def _per_example_loss(net: Network, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    r = predict(net, X) - Y
    return np.sum(r * r, axis=1)


def pgd_iterates(model, X: np.ndarray, Y: np.ndarray, cfg: AttackConfig):
    """Yield every PGD iterate (the starting point first) for a batch."""
    net = as_network(model)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    eps, alpha = cfg.epsilon, cfg.alpha
    delta = np.zeros_like(X)
    if cfg.random_start and eps > 0:
        rng = make_rng(cfg.seed, 11)
        if cfg.norm == "linf":
            delta = rng.uniform(-eps, eps, size=X.shape)
        else:
            d = rng.normal(size=X.shape)
            d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
            delta = d * eps * rng.random((X.shape[0], 1)) ** (1.0 / X.shape[1])
    yield X + delta
    if eps == 0:
        return
    for _ in range(cfg.steps):
        Xa = X + delta
        g = input_gradient(net, Xa, 2.0 * (predict(net, Xa) - Y))
        delta = _project(delta + _step(g, alpha, cfg.norm), eps, cfg.norm)
        yield X + delta


def pgd_attack(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Adversarial inputs maximizing the squared loss inside the ``epsilon`` ball.

    The highest-loss iterate is returned, so without random start the loss never
    drops below the clean loss. Accepts a single vector or a batch of rows.
    """
    net = as_network(model)
    single = np.ndim(x) == 1
    X = np.atleast_2d(np.asarray(x, dtype=float))
    Y = np.atleast_2d(np.asarray(y, dtype=float))
    best, best_loss = None, None
    for Xa in pgd_iterates(net, X, Y, cfg):
        loss = _per_example_loss(net, Xa, Y)
        if best is None:
            best, best_loss = Xa.copy(), loss
        else:
            better = loss > best_loss
            best[better] = Xa[better]
            best_loss = np.where(better, loss, best_loss)
    return best[0] if single else best


def _broken(net: Network, data: EmpiricalDataset, cfg: AttackConfig) -> np.ndarray:
    """Points misclassified cleanly or at any PGD iterate."""
    labels = data.labels()
    broken = np.argmax(predict(net, data.inputs), axis=1) != labels
    for Xa in pgd_iterates(net, data.inputs, data.targets, cfg):
        broken |= np.argmax(predict(net, Xa), axis=1) != labels
    return broken


def robust_accuracy(model, data: EmpiricalDataset, cfg: AttackConfig) -> float:
    """Fraction of points classified correctly at the clean input and at every attack iterate."""
    net = as_network(model)
    return float(1.0 - np.mean(_broken(net, data, cfg)))


def robust_accuracy_curve(model, data: EmpiricalDataset, epsilons: Sequence[float], cfg: AttackConfig) -> list[float]:
    """Robust accuracy over an increasing radius grid.

    A point broken at some radius also counts as broken at every larger radius,
    which makes the curve non-increasing by construction.
    """
    eps = [float(e) for e in epsilons]
    if any(b < a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilon grid must be non-decreasing")
    net = as_network(model)
    broken = np.zeros(len(data), dtype=bool)
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for e in eps:
            broken |= _broken(net, data, cfg.with_epsilon(e))
            out.append(float(1.0 - np.mean(broken)))
    return out
