"""Closed-form toy transfer curve and the constructive tight target distribution."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from transferlab.data import EmpiricalDataset, ToyInstance
from transferlab.pseudometric import (
    FunctionClassSample,
    class_inf_losses,
    estimate_pseudometric,
    inf_finetune_loss,
)
from transferlab.train import TrainedModel, evaluate


@dataclass(frozen=True)
class ToyPoint:
    c: float
    loss_S: float
    loss_T: float
    relative: float


def toy_curve(instance: ToyInstance, c_grid: Sequence[float]) -> list[ToyPoint]:
    """Evaluate the norm-constrained source minimizer ``f_c = y_S min(1, c/||y_S||)`` on a grid.

    Losses are unsquared distribution norms ``||f - y||_D``.
    """
    grid = [float(c) for c in c_grid]
    if any(c < 0 for c in grid):
        raise ValueError("c values must be >= 0")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("c grid must be sorted ascending")
    nS = instance.norm_yS
    out = []
    for c in grid:
        scale = 1.0 if nS == 0 else min(1.0, c / nS)
        f = scale * instance.yS
        loss_S = float(np.mean(np.linalg.norm(f - instance.yS, axis=1)))
        loss_T = float(np.mean(np.linalg.norm(f - instance.yT, axis=1)))
        out.append(ToyPoint(c, loss_S, loss_T, loss_T - loss_S))
    return out


@dataclass(frozen=True)
class TightnessConstruction:
    radius: float
    atoms: np.ndarray
    weights: np.ndarray

    @property
    def gradient_balance(self) -> np.ndarray:
        """``Σ c_i ∇ℓ(0, y_i)`` for squared loss, which must vanish."""
        return -2.0 * (self.weights @ self.atoms)


def tightness_construct(
    D_S: EmpiricalDataset, marginal_X: np.ndarray | None = None
) -> tuple[TightnessConstruction, EmpiricalDataset]:
    """Antipodal atoms ``±r e_1`` with ``r² = ℓ_{D_S}(0)``, attached to every input of ``marginal_X``.

    When the source targets are all zero, ``r = 1`` keeps the atoms distinct.
    """
    if len(D_S) == 0:
        raise ValueError("empty source dataset")
    X = D_S.inputs if marginal_X is None else np.atleast_2d(np.asarray(marginal_X, dtype=float))
    if X.shape[1] != D_S.input_dim:
        raise ValueError(f"marginal inputs have dim {X.shape[1]}, source has {D_S.input_dim}")
    d = D_S.target_dim
    r = float(np.sqrt(np.mean(np.sum(D_S.targets**2, axis=1))))
    if r == 0.0:
        r = 1.0
    e = np.zeros(d)
    e[0] = 1.0
    atoms = np.stack([r * e, -r * e])
    weights = np.array([0.5, 0.5])
    inputs = np.repeat(X, 2, axis=0)
    targets = np.tile(atoms, (X.shape[0], 1))
    return TightnessConstruction(r, atoms, weights), EmpiricalDataset(inputs, targets)


@dataclass(frozen=True)
class TightnessReport:
    tau: float
    d: float
    eps_opt: float
    gap: float

    @property
    def within(self) -> bool:
        return -1e-9 <= self.gap <= self.eps_opt + 1e-9


def tightness_verify(
    cls: FunctionClassSample,
    model: TrainedModel,
    D_S: EmpiricalDataset,
    D_T: EmpiricalDataset,
) -> TightnessReport:
    """Both sides of ``τ ≤ d ≤ τ + ε`` on a constructed target; ``gap = d - τ``."""
    cls.index_of(model.extractor)
    src_loss = evaluate(model, D_S)
    eps_opt = src_loss - float(np.min(class_inf_losses(cls, D_S)))
    tau = inf_finetune_loss(model.extractor, D_T, cls.ridge) - src_loss
    d = estimate_pseudometric(cls, D_S, D_T).value
    return TightnessReport(tau, d, eps_opt, d - tau)
