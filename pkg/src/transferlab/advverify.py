"""Activation regions, adversarial/Jacobian equivalence and nesting of Jacobian-regularized classes.

The regularized objective of a model ``h = g ∘ f`` is

    J_λ(h) = R̂(h) + (λ ε / n) Σ_i ||J_h(x_i)||_2

with squared loss and the spectral norm. The zero function has
``J_λ(0) = mean ||y_i||²`` for every ``λ``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from transferlab.data import EmpiricalDataset, make_rng
from transferlab.nnet import Layer, Network, forward_batch, input_gradient, jacobian_batch, jacobian_input, predict


# --- activation regions ----------------------------------------------------------------------


@dataclass(frozen=True)
class ActivationPattern:
    bits: tuple[np.ndarray, ...]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ActivationPattern)
            and len(self.bits) == len(other.bits)
            and all(np.array_equal(a, b) for a, b in zip(self.bits, other.bits))
        )

    def __hash__(self) -> int:
        return hash(tuple(tuple(b.tolist()) for b in self.bits))


def _require_relu_hidden(net: Network) -> None:
    for j, layer in enumerate(net.layers[:-1]):
        if layer.activation != "relu":
            raise ValueError(f"hidden layer {j} uses {layer.activation!r}; activation patterns need relu")


def activation_pattern(net: Network, x: np.ndarray) -> ActivationPattern:
    """Indicator ``z > 0`` of every hidden preactivation (strict inequality)."""
    _require_relu_hidden(net)
    pres, _ = forward_batch(net, np.asarray(x, dtype=float).reshape(1, -1))
    return ActivationPattern(tuple((z[0] > 0).astype(np.int8) for z in pres[:-1]))


@dataclass(frozen=True)
class RegionRadius:
    radius: float
    skipped_units: int


def region_radius(net: Network, x: np.ndarray, norm: str = "l2") -> RegionRadius:
    """Radius of the largest l2 ball around ``x`` on which the activation pattern is constant.

    Inside the region every hidden preactivation is affine in ``x``, so each unit
    contributes the distance ``|z| / ||∇z||`` to its own zero set. Units with a
    zero gradient never switch and are skipped (counted in ``skipped_units``).
    """
    if norm != "l2":
        raise ValueError("only the l2 region radius is supported")
    _require_relu_hidden(net)
    x = np.asarray(x, dtype=float).reshape(-1)
    hidden = Network(net.layers[:-1]) if net.depth > 1 else None
    if hidden is None:
        return RegionRadius(float("inf"), 0)
    best, skipped = float("inf"), 0
    m = x.shape[0]
    M = np.eye(m)
    a = x
    for layer in hidden.layers:
        z = layer.weight @ a + layer.bias
        G = layer.weight @ M  # rows: gradients of z w.r.t. x
        gn = np.linalg.norm(G, axis=1)
        live = gn > 0
        skipped += int(np.sum(~live))
        if np.any(live):
            best = min(best, float(np.min(np.abs(z[live]) / gn[live])))
        d = (z > 0).astype(float)
        M = d[:, None] * G
        a = np.maximum(z, 0.0)
    return RegionRadius(best, skipped)


def spectral_norm_power(M: np.ndarray, iters: int = 1000, tol: float = 1e-15, seed: int = 0) -> tuple[float, np.ndarray]:
    """Largest singular value and right singular vector by power iteration on ``M^T M``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.any(M):
        v = np.zeros(M.shape[1])
        v[0] = 1.0
        return 0.0, v
    v = make_rng(seed, 31).normal(size=M.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    G = M.T @ M
    for _ in range(iters):
        w = G @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            break
        v_new = w / nw
        s_new = float(np.linalg.norm(M @ v_new))
        done = abs(s_new - sigma) <= tol * max(s_new, 1e-300) and np.linalg.norm(v_new - v) < 1e-12
        v, sigma = v_new, s_new
        if done:
            break
    return sigma, v


@dataclass(frozen=True)
class EquivalenceReport:
    epsilon: float
    sup_dev: float
    eps_times_opnorm: float
    rel_gap: float


def verify_jacobian_equivalence(
    net: Network, x: np.ndarray, n_probe: int = 8, ascent_steps: int = 50, seed: int = 0
) -> EquivalenceReport:
    """Largest output deviation on the region ball versus ``ε σ_max(J)``.

    The deviation is measured on actual network evaluations: the top singular
    direction plus ``n_probe`` random starts refined by projected gradient ascent
    on the sphere of radius ``ε``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    eps = region_radius(net, x).radius
    if eps == float("inf"):
        eps = 1.0
    if eps == 0.0:
        return EquivalenceReport(0.0, 0.0, 0.0, float("nan"))
    J = jacobian_input(net, x)
    sigma, v = spectral_norm_power(J, seed=seed)
    fx = predict(net, x[None, :])[0]

    def dev(D: np.ndarray) -> np.ndarray:
        return np.linalg.norm(predict(net, x[None, :] + D) - fx, axis=1)

    rng = make_rng(seed, 32)
    starts = rng.normal(size=(n_probe, x.shape[0]))
    starts = np.vstack([v[None, :], -v[None, :], starts])
    D = eps * starts / np.linalg.norm(starts, axis=1, keepdims=True)
    best = float(np.max(dev(D)))
    step = 0.5 * eps
    for _ in range(ascent_steps):
        r = predict(net, x[None, :] + D) - fx
        g = input_gradient(net, x[None, :] + D, r)
        D = D + step * g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
        D = eps * D / np.maximum(np.linalg.norm(D, axis=1, keepdims=True), 1e-300)
        best = max(best, float(np.max(dev(D))))
    rhs = eps * sigma
    gap = abs(best - rhs) / rhs if rhs > 0 else (0.0 if best == 0 else float("inf"))
    return EquivalenceReport(eps, best, rhs, gap)


# --- regularized objective -------------------------------------------------------------------


@dataclass(frozen=True)
class AobjConfig:
    lam: float
    epsilon: float = 0.1
    jac_norm: str = "spectral"

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and >= 0")
        if not np.isfinite(self.epsilon) or self.epsilon <= 0:
            raise ValueError("epsilon must be finite and > 0")
        if self.jac_norm != "spectral":
            raise ValueError("only the spectral Jacobian norm is supported")

    def with_lam(self, lam: float) -> "AobjConfig":
        return AobjConfig(lam, self.epsilon, self.jac_norm)


def aobj_zero(data: EmpiricalDataset) -> float:
    return float(np.mean(np.sum(data.targets**2, axis=1)))


def _head_matrix(head) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(head, "weight"):
        return np.atleast_2d(head.weight), np.asarray(head.bias, dtype=float)
    G = np.atleast_2d(np.asarray(head, dtype=float))
    return G, np.zeros(G.shape[0])


def _aobj_parts(G: np.ndarray, bias: np.ndarray, feats: np.ndarray, Jf: np.ndarray, Y: np.ndarray):
    r = feats @ G.T + bias - Y
    risk = float(np.mean(np.sum(r * r, axis=1)))
    jn = np.linalg.norm(np.einsum("dk,nkm->ndm", G, Jf), ord=2, axis=(1, 2))
    return risk, float(np.mean(jn))


def aobj_eval(head, extractor: Network, data: EmpiricalDataset, cfg: AobjConfig) -> float:
    """``J_λ(g ∘ f)``; ``head`` is a matrix ``(d, k)`` or an object with ``weight``/``bias``."""
    G, bias = _head_matrix(head)
    feats = predict(extractor, data.inputs)
    risk, jmean = _aobj_parts(G, bias, feats, jacobian_batch(extractor, data.inputs), data.targets)
    return risk + cfg.lam * cfg.epsilon * jmean


# --- class membership --------------------------------------------------------------------------


@dataclass(frozen=True)
class Membership:
    member: bool
    best_head: np.ndarray
    best_obj: float
    zero_obj: float


def _project_columns(G: np.ndarray, delta: float) -> np.ndarray:
    G = G.copy()
    norms = np.linalg.norm(G, axis=0)
    for j, nj in enumerate(norms):
        if nj == 0:
            G[:, j] = 0.0
            G[0, j] = delta
        elif nj < delta:
            G[:, j] *= delta / nj
    return G


def _objective_and_grad(G, feats, Jf, Y, lam_eps):
    n = feats.shape[0]
    r = feats @ G.T - Y
    risk = float(np.mean(np.sum(r * r, axis=1)))
    grad = 2.0 * r.T @ feats / n
    M = np.einsum("dk,nkm->ndm", G, Jf)
    U, S, Vt = np.linalg.svd(M)
    jn = S[:, 0]
    if lam_eps > 0:
        # d sigma_max(G J) / dG = u v^T J^T
        gj = np.einsum("nd,nm,nkm->dk", U[:, :, 0], Vt[:, 0, :], Jf) / n
        grad = grad + lam_eps * gj
    return risk + lam_eps * float(np.mean(jn)), grad


def _solve_head(feats, Jf, Y, lam_eps, delta, starts, steps):
    lip = 2.0 * float(np.linalg.eigvalsh(feats.T @ feats / feats.shape[0])[-1]) + 1e-12
    lr = 1.0 / lip
    best_G, best_obj = None, np.inf
    for G0 in starts:
        G = _project_columns(G0, delta)
        for _ in range(steps + 1):
            obj, grad = _objective_and_grad(G, feats, Jf, Y, lam_eps)
            if obj < best_obj:
                best_obj, best_G = obj, G.copy()
            G = _project_columns(G - lr * grad, delta)
    return best_G, best_obj


def class_membership(
    extractor: Network,
    data: EmpiricalDataset,
    cfg: AobjConfig,
    delta: float,
    steps: int = 500,
    warm_start: np.ndarray | None = None,
) -> Membership:
    """Whether some head with every column norm ``>= delta`` reaches ``J_λ(0)``.

    The inner infimum starts from the least-squares head (and ``warm_start`` if
    given), projected to the norm floor, refined by projected gradient descent.
    """
    if delta <= 0:
        raise ValueError("delta must be > 0")
    feats = predict(extractor, data.inputs)
    Jf = jacobian_batch(extractor, data.inputs)
    Y = data.targets
    ls = np.linalg.lstsq(feats, Y, rcond=None)[0].T
    starts = [ls] + ([np.atleast_2d(warm_start)] if warm_start is not None else [])
    G, obj = _solve_head(feats, Jf, Y, cfg.lam * cfg.epsilon, delta, starts, steps)
    z = aobj_zero(data)
    return Membership(obj <= z + 1e-9, G, obj, z)


def membership_path(
    extractor: Network, data: EmpiricalDataset, lambdas: Sequence[float], cfg: AobjConfig, delta: float, steps: int = 500
) -> list[Membership]:
    """Membership over a λ grid, solved from the largest λ down with warm starts.

    Each smaller λ starts from the previous best head, and since the objective
    is non-decreasing in λ the best value found can only go down. The result is
    returned in the order of ``lambdas``.
    """
    order = np.argsort(-np.asarray(lambdas, dtype=float), kind="stable")
    out: dict[int, Membership] = {}
    warm = None
    for idx in order:
        mem = class_membership(extractor, data, cfg.with_lam(float(lambdas[idx])), delta, steps, warm)
        out[int(idx)] = mem
        warm = mem.best_head
    return [out[i] for i in range(len(lambdas))]


# --- witness constructions ----------------------------------------------------------------------


def witness_network(input_dim: int, alpha: float, c: float, depth: int = 2, width: int = 4) -> Network:
    """Rank-one relu extractor with a scalar feature ``relu(α x_1 + c)``.

    Layer 1 has a single nonzero weight ``α`` and bias ``c e_1``; later hidden
    layers are ``e_1 e_1^T``; the last layer keeps only the first unit.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if depth == 1:
        W = np.zeros((1, input_dim))
        W[0, 0] = alpha
        return Network((Layer(W, [c], "relu"),))
    W1 = np.zeros((width, input_dim))
    W1[0, 0] = alpha
    b1 = np.zeros(width)
    b1[0] = c
    layers = [Layer(W1, b1, "relu")]
    E = np.zeros((width, width))
    E[0, 0] = 1.0
    for _ in range(depth - 2):
        layers.append(Layer(E, np.zeros(width), "relu"))
    last = np.zeros((1, width))
    last[0, 0] = 1.0
    layers.append(Layer(last, [0.0], "relu"))
    return Network(tuple(layers))


@dataclass(frozen=True)
class WitnessSolution:
    value: float
    head: np.ndarray  # (d, 1)


def witness_inner(beta: np.ndarray, Y: np.ndarray, lam_eps_alpha: float, delta: float) -> WitnessSolution:
    """Exact ``inf_{||w|| >= δ} mean ||β_i w - y_i||² + κ ||w||`` for scalar features ``β``.

    For a fixed norm ``r`` the best direction is along ``m = mean(β_i y_i)``, which
    leaves a convex quadratic in ``r`` clipped at ``δ``.
    """
    A = float(np.mean(beta**2))
    m = (beta[:, None] * Y).mean(axis=0)
    mn = float(np.linalg.norm(m))
    y2 = float(np.mean(np.sum(Y * Y, axis=1)))
    if mn == 0:
        u = np.zeros(Y.shape[1])
        u[0] = 1.0
    else:
        u = m / mn
    r = delta if A == 0 else max(delta, (2.0 * mn - lam_eps_alpha) / (2.0 * A))
    value = A * r * r - 2.0 * mn * r + lam_eps_alpha * r + y2
    return WitnessSolution(value, (r * u)[:, None])


@dataclass(frozen=True)
class NestingRow:
    lam1: float
    lam2: float
    witness_T: float
    alpha: float
    c: float
    J0: float
    obj_lam1: float
    obj_lam2: float
    member_lam1: bool
    member_lam2: bool
    B_found: float | None
    B_doublings: int
    B_certified: bool


@dataclass(frozen=True)
class NestingReport:
    rows: tuple[NestingRow, ...]

    @property
    def all_flip(self) -> bool:
        return all(r.member_lam1 and not r.member_lam2 for r in self.rows)


def data_bound(data: EmpiricalDataset) -> float:
    return float(max(np.max(np.abs(data.inputs)), np.max(np.linalg.norm(data.targets, axis=1))))


def _witness_value(data: EmpiricalDataset, alpha: float, c: float, lam: float, cfg: AobjConfig, delta: float):
    beta = np.maximum(alpha * data.inputs[:, 0] + c, 0.0)
    return witness_inner(beta, data.targets, lam * cfg.epsilon * alpha, delta)


def find_witness(
    data: EmpiricalDataset, lam: float, cfg: AobjConfig, delta: float, tol: float = 1e-10, t_max: float = 1e6
) -> tuple[float, float, float]:
    """Parameters ``(α, c, T)`` of a witness whose best regularized objective at ``lam`` equals ``J(0)``.

    Starts from ``c0 = ||ȳ||/δ`` and a small ``α0`` with ``c0 > α0 R`` where the
    witness strictly beats the zero function, then scales both by ``1 + t`` and
    bisects on ``t``. The returned point satisfies ``value <= J(0)``.
    """
    ybar = data.targets.mean(axis=0)
    if not np.any(ybar):
        raise ValueError("witness construction needs a nonzero target mean")
    J0 = aobj_zero(data)
    R = max(data_bound(data), 1e-12)
    c0 = float(np.linalg.norm(ybar)) / delta
    alpha0 = c0 / (2.0 * R)
    for _ in range(200):
        if _witness_value(data, alpha0, c0, lam, cfg, delta).value < J0:
            break
        alpha0 *= 0.5
    else:
        raise RuntimeError("could not find a witness that beats the zero function")

    def U(t):
        return _witness_value(data, (1 + t) * alpha0, (1 + t) * c0, lam, cfg, delta).value - J0

    lo, hi = 0.0, 1.0
    while U(hi) <= 0:
        lo, hi = hi, 2.0 * hi
        if hi > t_max:
            raise RuntimeError(f"no bisection bracket in t ∈ [0, {t_max:g}]; U({lo:g}) = {U(lo):.3e}")
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if U(mid) <= 0:
            lo = mid
        else:
            hi = mid
        if -U(lo) <= tol:
            break
    return (1 + lo) * alpha0, (1 + lo) * c0, lo


def b_doubling(
    data: EmpiricalDataset, lam: float, cfg: AobjConfig, delta: float, max_doublings: int = 60
) -> tuple[float | None, int, bool]:
    """Scale ``B`` of the extractor ``f(x) = B (x + R 1)`` until no admissible head beats ``J(0)``.

    Every admissible head ``g`` has ``||B g||_2 >= B δ``, so ``λ ε B δ`` lower-bounds
    the objective. With ``λ = 0`` the bound is only certified for scalar inputs,
    where the inner problem is solved exactly.

    Returns ``(B, doublings, certified)``; ``B`` is ``None`` if not found.
    """
    J0 = aobj_zero(data)
    R = data_bound(data)
    m = data.input_dim
    B = 1.0
    for k in range(max_doublings + 1):
        if lam > 0:
            if lam * cfg.epsilon * B * delta > J0:
                return B, k, True
        elif m == 1:
            beta = B * (data.inputs[:, 0] + R)
            if witness_inner(beta, data.targets, 0.0, delta).value > J0:
                return B, k, True
        B *= 2.0
    return None, max_doublings, False


def b_network(input_dim: int, B: float, R: float) -> Network:
    """``f(x) = B · relu(x + R 1)``, which equals ``B (x + R 1)`` on ``||x||_∞ <= R``."""
    return Network(
        (
            Layer(np.eye(input_dim), np.full(input_dim, R), "relu"),
            Layer(B * np.eye(input_dim), np.zeros(input_dim), "identity"),
        )
    )


def verify_nesting(
    data: EmpiricalDataset, lambda_grid: Sequence[float], delta: float, cfg: AobjConfig, depth: int = 2, width: int = 4
) -> NestingReport:
    """Membership flips for a witness built at each ``λ1`` and the B-scaled non-member."""
    grid = [float(v) for v in lambda_grid]
    if len(grid) < 2:
        raise ValueError("lambda grid needs at least two values")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("lambda grid must be strictly ascending")
    if not np.any(data.targets.mean(axis=0)):
        raise ValueError("nesting witnesses need a nonzero target mean")
    J0 = aobj_zero(data)
    rows = []
    for lam1, lam2 in zip(grid, grid[1:]):
        alpha, c, T = find_witness(data, lam1, cfg, delta)
        net = witness_network(data.input_dim, alpha, c, depth, width)
        s1 = _witness_value(data, alpha, c, lam1, cfg, delta)
        s2 = _witness_value(data, alpha, c, lam2, cfg, delta)
        # evaluate the exact heads on the real network as a cross-check
        obj1 = aobj_eval(s1.head, net, data, cfg.with_lam(lam1))
        obj2 = aobj_eval(s2.head, net, data, cfg.with_lam(lam2))
        B, k, cert = b_doubling(data, lam1, cfg, delta)
        rows.append(
            NestingRow(lam1, lam2, T, alpha, c, J0, obj1, obj2, obj1 <= J0 + 1e-9, obj2 <= J0 + 1e-9, B, k, cert)
        )
    return NestingReport(tuple(rows))
