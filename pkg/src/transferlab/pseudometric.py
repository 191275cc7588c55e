"""Empirical (G, F)-pseudometric over finite extractor classes, Rademacher estimates and distance bounds.

``G`` is always a linear head class (optionally ridge-penalized), so every
inner infimum is a least-squares problem on ``[f(x); 1]``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from transferlab.data import EmpiricalDataset, make_rng
from transferlab.nnet import Network, input_gradient, predict
from transferlab.train import LinearHead, TrainedModel, evaluate, fit_linear_head


@dataclass(frozen=True)
class FunctionClassSample:
    extractors: tuple[Network, ...]
    finetune_class: str = "linear"
    ridge: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "extractors", tuple(self.extractors))
        if not self.extractors:
            raise ValueError("function class needs at least one extractor")
        dims = {f.out_dim for f in self.extractors}
        if len(dims) != 1:
            raise ValueError(f"extractors disagree on feature dimension: {sorted(dims)}")
        ins = {f.in_dim for f in self.extractors}
        if len(ins) != 1:
            raise ValueError(f"extractors disagree on input dimension: {sorted(ins)}")
        if self.finetune_class not in ("linear", "linear-ridge"):
            raise ValueError(f"unknown fine-tune class {self.finetune_class!r}")
        if self.finetune_class == "linear" and self.ridge != 0:
            raise ValueError("ridge must be 0 for the plain linear class")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")

    def __len__(self) -> int:
        return len(self.extractors)

    def subset(self, idx: Sequence[int]) -> "FunctionClassSample":
        return FunctionClassSample(tuple(self.extractors[i] for i in idx), self.finetune_class, self.ridge)

    def index_of(self, extractor: Network) -> int:
        for i, f in enumerate(self.extractors):
            if f.equals(extractor):
                return i
        raise ValueError("extractor is not a member of the function class")


@dataclass(frozen=True)
class PseudometricEstimate:
    value: float
    argmax_extractor: int
    per_extractor: tuple[tuple[float, float], ...]


def inf_finetune_loss(f: Network, data: EmpiricalDataset, ridge: float = 0.0, intercept: bool = True) -> float:
    """Smallest mean squared loss of a linear head on the features ``f(x)``.

    With ``ridge > 0`` the minimizer is the ridge solution and the returned value
    is its plain (unpenalized) loss.
    """
    feats = predict(f, data.inputs)
    if intercept:
        return fit_linear_head(feats, data.targets, ridge)[1]
    Y = data.targets
    if ridge == 0:
        coef = np.linalg.lstsq(feats, Y, rcond=None)[0]
    else:
        n = feats.shape[0]
        coef = np.linalg.solve(feats.T @ feats / n + ridge * np.eye(feats.shape[1]), feats.T @ Y / n)
    r = feats @ coef - Y
    return float(np.sum(r * r) / feats.shape[0])


def class_inf_losses(cls: FunctionClassSample, data: EmpiricalDataset) -> np.ndarray:
    return np.array([inf_finetune_loss(f, data, cls.ridge) for f in cls.extractors])


def estimate_pseudometric(
    cls: FunctionClassSample, D_S: EmpiricalDataset, D_T: EmpiricalDataset
) -> PseudometricEstimate:
    if D_S.input_dim != D_T.input_dim or D_S.target_dim != D_T.target_dim:
        raise ValueError("source and target datasets have different shapes")
    ls, lt = class_inf_losses(cls, D_S), class_inf_losses(cls, D_T)
    gaps = np.abs(ls - lt)
    k = int(np.argmax(gaps))
    return PseudometricEstimate(float(gaps[k]), k, tuple(zip(ls.tolist(), lt.tolist())))


# --- Bound checks -------------------------------------------------------------------------


@dataclass(frozen=True)
class TransferBoundReport:
    tau: float
    d: float
    holds: bool
    extractor_index: int


def relative_transfer_loss(model: TrainedModel, D_S: EmpiricalDataset, D_T: EmpiricalDataset, ridge: float = 0.0) -> float:
    """Best target loss over refit heads minus the source loss of the trained head."""
    return inf_finetune_loss(model.extractor, D_T, ridge) - evaluate(model, D_S)


def check_transfer_bound(
    model: TrainedModel, cls: FunctionClassSample, D_S: EmpiricalDataset, D_T: EmpiricalDataset
) -> TransferBoundReport:
    idx = cls.index_of(model.extractor)
    tau = relative_transfer_loss(model, D_S, D_T, cls.ridge)
    d = estimate_pseudometric(cls, D_S, D_T).value
    return TransferBoundReport(tau, d, tau <= d + 1e-9, idx)


# --- Rademacher complexity ---------------------------------------------------------------


@dataclass(frozen=True)
class RademacherEstimate:
    value: float
    stderr: float
    n_draws: int
    n_functions: int


def rademacher_from_losses(losses: np.ndarray, n_draws: int, rng: np.random.Generator) -> RademacherEstimate:
    """MC estimate of ``E_ξ sup_h (1/n) Σ ξ_i h_i`` for a finite loss matrix ``(n_functions, n)``."""
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    L = np.atleast_2d(np.asarray(losses, dtype=float))
    n = L.shape[1]
    xi = rng.choice(np.array([-1.0, 1.0]), size=(n_draws, n))
    sups = np.max(xi @ L.T, axis=1) / n
    se = float(sups.std(ddof=1) / np.sqrt(n_draws)) if n_draws > 1 else float("nan")
    return RademacherEstimate(float(sups.mean()), se, n_draws, L.shape[0])


def rademacher_exact(losses: np.ndarray) -> float:
    """Exact expectation by enumerating all ``2^n`` sign vectors (``n <= 12``)."""
    L = np.atleast_2d(np.asarray(losses, dtype=float))
    n = L.shape[1]
    if n > 12:
        raise ValueError("exact enumeration is limited to n <= 12")
    bits = (np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1
    xi = 2.0 * bits - 1.0
    return float(np.mean(np.max(xi @ L.T, axis=1)) / n)


def _param_key(f: Network) -> int:
    h = hashlib.sha256()
    for layer in f.layers:
        h.update(layer.activation.encode())
        h.update(np.ascontiguousarray(layer.weight).tobytes())
        h.update(np.ascontiguousarray(layer.bias).tobytes())
    return int.from_bytes(h.digest()[:4], "little")


def loss_grid(
    cls: FunctionClassSample, data: EmpiricalDataset, n_heads: int = 64, seed: int = 0, scale: float = 0.5
) -> np.ndarray:
    """Per-sample losses for each extractor paired with sampled heads.

    Heads are the least-squares head plus Gaussian perturbations; head 0 is
    the unperturbed one. The head stream is keyed by the extractor's parameters,
    so the rows of any sub-class are exactly a subset of the rows of the full class.
    """
    rows = []
    for f in cls.extractors:
        feats = predict(f, data.inputs)
        head, _ = fit_linear_head(feats, data.targets, cls.ridge)
        rng = make_rng(seed, 21, _param_key(f))
        size = max(float(np.linalg.norm(head.weight)) / np.sqrt(head.weight.size), 1.0)
        for k in range(n_heads):
            if k == 0:
                W, b = head.weight, head.bias
            else:
                W = head.weight + scale * size * rng.normal(size=head.weight.shape)
                b = head.bias + scale * size * rng.normal(size=head.bias.shape)
            r = feats @ W.T + b - data.targets
            rows.append(np.sum(r * r, axis=1))
    return np.array(rows)


def rademacher_mc(
    cls: FunctionClassSample,
    data: EmpiricalDataset,
    n_sigma_draws: int,
    n_heads: int = 64,
    seed: int = 0,
    losses: np.ndarray | None = None,
) -> RademacherEstimate:
    """Monte Carlo Rademacher complexity of the sampled loss grid (a lower bound on the class value)."""
    L = loss_grid(cls, data, n_heads, seed) if losses is None else losses
    return rademacher_from_losses(L, n_sigma_draws, make_rng(seed, 22))


# --- distribution distances ----------------------------------------------------------------


def _joint(data: EmpiricalDataset) -> np.ndarray:
    return np.hstack([data.inputs, data.targets])


def wasserstein_exact(D_A: EmpiricalDataset, D_B: EmpiricalDataset) -> float:
    """W1 between equal-weight empirical measures on ``(x, y)`` with the Euclidean metric."""
    A, B = _joint(D_A), _joint(D_B)
    if A.shape[0] != B.shape[0]:
        raise ValueError(f"unequal sample counts {A.shape[0]} and {B.shape[0]}; resample upstream")
    if A.shape[1] != B.shape[1]:
        raise ValueError("datasets have different (x, y) dimensions")
    if A.shape[0] > 256:
        raise ValueError("exact assignment is capped at n = 256")
    C = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(C)
    return float(C[rows, cols].mean())


def optimal_matching(D_A: EmpiricalDataset, D_B: EmpiricalDataset) -> np.ndarray:
    A, B = _joint(D_A), _joint(D_B)
    C = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=2)
    return linear_sum_assignment(C)[1]


def _loss_grad_norm(f: Network, head: LinearHead, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Norm of the gradient of ``||g(f(x)) - y||^2`` in the joint variable ``(x, y)``."""
    r = head(predict(f, X)) - Y
    gx = input_gradient(f, X, 2.0 * r @ head.weight)
    return np.sqrt(np.sum(gx * gx, axis=1) + np.sum(4.0 * r * r, axis=1))


def lipschitz_estimate(
    cls: FunctionClassSample,
    D_A: EmpiricalDataset,
    D_B: EmpiricalDataset,
    n_points: int = 64,
    safety: float = 1.5,
) -> float:
    """Largest loss-gradient norm seen along optimally matched segments, times ``safety``.

    The losses considered are those of each extractor paired with its optimal
    head on either dataset, which are the functions the bound argument uses.
    """
    perm = optimal_matching(D_A, D_B)
    XA, YA = D_A.inputs, D_A.targets
    XB, YB = D_B.inputs[perm], D_B.targets[perm]
    ts = np.linspace(0.0, 1.0, n_points)
    best = 0.0
    for f in cls.extractors:
        heads = [fit_linear_head(predict(f, D.inputs), D.targets, cls.ridge)[0] for D in (D_A, D_B)]
        for t in ts:
            X = (1 - t) * XA + t * XB
            Y = (1 - t) * YA + t * YB
            for head in heads:
                best = max(best, float(np.max(_loss_grad_norm(f, head, X, Y))))
    return safety * best


def tv_discrete(P: Sequence[float], Q: Sequence[float]) -> float:
    p, q = np.asarray(P, dtype=float), np.asarray(Q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("P and Q must share the same support")
    for name, m in (("P", p), ("Q", q)):
        if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
            raise ValueError(f"{name} masses must be non-negative and sum to 1 (got {m.sum()!r})")
    return float(0.5 * np.abs(p - q).sum())


def zero_one_pseudometric(predictions: np.ndarray, labels: np.ndarray, P: Sequence[float], Q: Sequence[float]) -> float:
    """Pseudometric under 0-1 loss on a finite support.

    ``predictions[f, g, s]`` is the label predicted by extractor ``f`` with head
    ``g`` at support point ``s``; heads are the finite class ``G``.
    """
    pred = np.asarray(predictions)
    if pred.ndim != 3:
        raise ValueError("predictions must have shape (n_extractors, n_heads, n_support)")
    wrong = (pred != np.asarray(labels)[None, None, :]).astype(float)
    p, q = np.asarray(P, dtype=float), np.asarray(Q, dtype=float)
    risk_p = np.min(wrong @ p, axis=1)
    risk_q = np.min(wrong @ q, axis=1)
    return float(np.max(np.abs(risk_p - risk_q)))


# --- empirical bound -------------------------------------------------------------------------


@dataclass(frozen=True)
class EmpiricalBoundReport:
    tau: float
    d: float
    rad_S: float
    rad_T: float
    rad_S_se: float
    rad_T_se: float
    concentration: float
    rhs: float
    slack: float
    holds: bool
    estimate_based: bool = True


def concentration_term(c: float, delta: float, n: int) -> float:
    return 9.0 * c * np.sqrt(np.log(8.0 / delta) / (2.0 * n))


def check_emp_bound(
    model: TrainedModel,
    cls: FunctionClassSample,
    D_S: EmpiricalDataset,
    D_T: EmpiricalDataset,
    delta: float,
    c: float,
    n_sigma_draws: int = 200,
    n_heads: int = 64,
    seed: int = 0,
) -> EmpiricalBoundReport:
    """Assemble both sides of the finite-sample transfer bound with estimated Rademacher terms.

    Raises:
        ValueError: if ``delta`` is outside (0, 1) or any loss in use exceeds ``c``.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    cls.index_of(model.extractor)
    LS = loss_grid(cls, D_S, n_heads, seed)
    LT = loss_grid(cls, D_T, n_heads, seed + 1)
    model_losses = np.sum((model.predict(D_S.inputs) - D_S.targets) ** 2, axis=1)
    worst = max(float(LS.max()), float(LT.max()), float(model_losses.max()))
    if worst > c:
        raise ValueError(f"observed loss {worst:.6g} exceeds the bound c={c:.6g}")
    rs = rademacher_mc(cls, D_S, n_sigma_draws, n_heads, seed, losses=LS)
    rt = rademacher_mc(cls, D_T, n_sigma_draws, n_heads, seed + 1, losses=LT)
    tau = relative_transfer_loss(model, D_S, D_T, cls.ridge)
    d = estimate_pseudometric(cls, D_S, D_T).value
    conc = concentration_term(c, delta, min(len(D_S), len(D_T)))
    rhs = d + 2.0 * rt.value + 4.0 * rs.value + conc
    return EmpiricalBoundReport(tau, d, rs.value, rt.value, rs.stderr, rt.stderr, conc, rhs, rhs - tau, tau <= rhs)
