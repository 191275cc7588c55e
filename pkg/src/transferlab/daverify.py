"""Augmented objectives versus plain objective plus explicit Ω regularizers.

Transforms act as ``x* = W*^T x + b*`` at both levels, so the deviation is
``Δ = (W* - I)^T z + b*`` for ``z = x`` (data level) or ``z = f(x)`` (feature level).
The head is scalar, ``g(z) = w·z + c``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from transferlab.augment import (
    AugmentationSpec,
    TransformRng,
    apply_transform,
    delta_moment_parts,
    sample_transforms,
    scaled,
    transform_atoms,
)
from transferlab.data import EmpiricalDataset
from transferlab.nnet import hessians_input_fd, jacobian_batch, predict
from transferlab.train import TrainedModel


@dataclass(frozen=True)
class OmegaBreakdown:
    plain: float
    omega: float
    omega_P: float
    omega_W: float
    omega_b: float
    omega_cross: float
    hessian_skipped: bool

    @property
    def rhs(self) -> float:
        return self.plain + self.omega


@dataclass(frozen=True)
class OmegaReport:
    s: float
    lhs_mc: float
    stderr: float
    rhs_exact: float
    residual: float
    n_mc: int
    exact: bool
    breakdown: OmegaBreakdown


@dataclass(frozen=True)
class DAVerification:
    reports: tuple[OmegaReport, ...]
    slope: float


def _check_model(model: TrainedModel, data: EmpiricalDataset) -> np.ndarray:
    if model.head.weight.shape[0] != 1 or data.target_dim != 1:
        raise ValueError("Ω identities are stated for a scalar head; got output dim "
                         f"{model.head.weight.shape[0]} and target dim {data.target_dim}")
    return model.head.weight[0]


def omega_exact(model: TrainedModel, data: EmpiricalDataset, spec: AugmentationSpec, h: float = 1e-3) -> OmegaBreakdown:
    """Closed-form Ω for the spec; Hessians by finite differences at step ``h``.

    For non-smooth (relu) extractors the Hessian term is set to 0 and flagged.
    """
    w = _check_model(model, data)
    X, y = data.inputs, data.targets[:, 0]
    F = predict(model.extractor, X)
    resid = F @ w + model.head.bias[0] - y
    plain = float(np.mean(resid**2))
    n = len(data)

    if spec.level == "feature":
        ow = ob = oc = 0.0
        for i in range(n):
            mw, sw, mb, sb = delta_moment_parts(spec, F[i])
            ow += w @ sw @ w
            ob += w @ sb @ w
            oc += 2.0 * (w @ mw) * (w @ mb)
        ow, ob, oc = ow / n, ob / n, oc / n
        return OmegaBreakdown(plain, ow + ob + oc, 0.0, ow, ob, oc, False)

    J = jacobian_batch(model.extractor, X)
    smooth = model.extractor.is_smooth
    op = ow = ob = oc = 0.0
    for i in range(n):
        mw, sw, mb, sb = delta_moment_parts(spec, X[i])
        cross = np.outer(mw, mb)
        second = sw + sb + cross + cross.T
        if smooth and np.any(second != 0):
            H = hessians_input_fd(model.extractor, X[i], h)
            op += resid[i] * float(np.einsum("k,kab,ba->", w, H, second))
        u = J[i].T @ w
        ow += u @ sw @ u
        ob += u @ sb @ u
        oc += 2.0 * (u @ mw) * (u @ mb)
    op, ow, ob, oc = op / n, ow / n, ob / n, oc / n
    if spec.algorithm == "prediction-averaging":
        return OmegaBreakdown(plain, op, op, 0.0, 0.0, 0.0, not smooth)
    return OmegaBreakdown(plain, op + ow + ob + oc, op, ow, ob, oc, not smooth)


def _base_points(model: TrainedModel, data: EmpiricalDataset, spec: AugmentationSpec) -> np.ndarray:
    return predict(model.extractor, data.inputs) if spec.level == "feature" else data.inputs


def _predict_from(model: TrainedModel, Z: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    out = model.head(Z) if spec.level == "feature" else model.predict(Z)
    return out[:, 0]


def mc_da_loss(
    model: TrainedModel,
    data: EmpiricalDataset,
    spec: AugmentationSpec,
    n_mc: int = 10_000,
    seed: int = 0,
    max_atoms: int = 64,
    chunk: int = 2048,
) -> tuple[float, float, bool]:
    """Augmented objective as ``(value, stderr, exact)``.

    Finite transform supports with at most ``max_atoms`` atoms are enumerated
    exactly (stderr 0). Otherwise each point gets its own Monte Carlo draws;
    prediction averaging subtracts the ``var/n_mc`` bias of the squared mean.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    _check_model(model, data)
    Z = _base_points(model, data, spec)
    y = data.targets[:, 0]
    n, dim = Z.shape
    atoms = transform_atoms(spec, dim, max_atoms)
    if atoms is not None:
        Ws, bs, prob = atoms
        preds = np.stack([_predict_from(model, apply_transform(W, b, Z), spec) for W, b in zip(Ws, bs)])
        if spec.algorithm == "prediction-averaging":
            return float(np.mean((prob @ preds - y) ** 2)), 0.0, True
        return float(prob @ np.mean((preds - y) ** 2, axis=1)), 0.0, True

    rng = TransformRng.from_seed(seed, 5)
    s1, s2 = np.zeros(n), np.zeros(n)
    per_draw = []
    done = 0
    while done < n_mc:
        c = min(chunk, n_mc - done)
        W, b = sample_transforms(spec, dim, c * n, rng)
        Zs = apply_transform(W, b, np.tile(Z, (c, 1)))
        P = _predict_from(model, Zs, spec).reshape(c, n)
        if spec.algorithm == "prediction-averaging":
            s1 += P.sum(0)
            s2 += (P * P).sum(0)
        else:
            per_draw.append(np.mean((P - y) ** 2, axis=1))
        done += c
    if spec.algorithm == "prediction-averaging":
        pbar = s1 / n_mc
        var = np.maximum(s2 / n_mc - pbar**2, 0.0) * n_mc / max(n_mc - 1, 1)
        value = float(np.mean((pbar - y) ** 2 - var / n_mc))
        se = float(np.sqrt(np.sum(4.0 * (pbar - y) ** 2 * var / n_mc)) / n)
        return value, se, False
    v = np.concatenate(per_draw)
    se = float(v.std(ddof=1) / np.sqrt(n_mc)) if n_mc > 1 else float("inf")
    return float(v.mean()), se, False


def loglog_slope(s: Sequence[float], residuals: Sequence[float]) -> float:
    """Least-squares slope of ``log residual`` against ``log s``; NaN if any residual is 0."""
    s, r = np.asarray(s, dtype=float), np.asarray(residuals, dtype=float)
    if np.any(r <= 0):
        return float("nan")
    return float(np.polyfit(np.log(s), np.log(r), 1)[0])


def verify_da_identity(
    model: TrainedModel,
    data: EmpiricalDataset,
    spec: AugmentationSpec,
    s_grid: Sequence[float],
    n_mc: int = 10_000,
    seed: int = 0,
    max_atoms: int = 64,
) -> DAVerification:
    """Compare the augmented objective with ``ℓ + Ω`` over a descending geometric magnitude grid."""
    grid = [float(s) for s in s_grid]
    if len(grid) < 4:
        raise ValueError("slope test needs at least 4 magnitudes")
    if any(s <= 0 for s in grid) or any(b >= a for a, b in zip(grid, grid[1:])):
        raise ValueError("s grid must be positive and strictly descending")
    ratios = np.array(grid[1:]) / np.array(grid[:-1])
    if not np.allclose(ratios, ratios[0], rtol=1e-9):
        raise ValueError("s grid must be geometric")
    reports = []
    for s in grid:
        sp = scaled(spec, s)
        lhs, se, exact = mc_da_loss(model, data, sp, n_mc, seed, max_atoms)
        br = omega_exact(model, data, sp)
        reports.append(OmegaReport(s, lhs, se, br.rhs, abs(lhs - br.rhs), n_mc, exact, br))
    slope = loglog_slope(grid, [r.residual for r in reports])
    return DAVerification(tuple(reports), slope)
