"""Affine augmentation distributions ``x* = W*^T x + b*`` and checks of their moment conditions."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from transferlab.data import make_rng

W_KINDS = ("identity", "rademacher-diagonal", "fixed-plane-rotation")
B_KINDS = ("zero", "gaussian-iso", "fixed-shift")
LEVELS = ("feature", "data")
ALGORITHMS = ("loss-averaging", "prediction-averaging")


@dataclass(frozen=True)
class WDist:
    kind: str = "identity"
    s: float = 0.0
    theta: float = 0.0
    p: float = 1.0

    def __post_init__(self):
        if self.kind not in W_KINDS:
            raise ValueError(f"unknown W distribution {self.kind!r}")
        if self.s < 0:
            raise ValueError("s must be >= 0")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")


@dataclass(frozen=True)
class BDist:
    kind: str = "zero"
    sigma: float = 0.0
    v: tuple[float, ...] = ()
    p: float = 1.0

    def __post_init__(self):
        if self.kind not in B_KINDS:
            raise ValueError(f"unknown b distribution {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        object.__setattr__(self, "v", tuple(float(t) for t in np.ravel(self.v)))


@dataclass(frozen=True)
class AugmentationSpec:
    """Transform distribution plus where and how it is applied.

    With ``independent=False`` the shift is coupled to the matrix draw through
    ``b* += diag(W*) - 1``, which breaks independence on purpose.
    """

    level: str = "data"
    algorithm: str = "loss-averaging"
    w_dist: WDist = field(default_factory=WDist)
    b_dist: BDist = field(default_factory=BDist)
    independent: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.level == "feature" and self.algorithm != "loss-averaging":
            raise ValueError("feature-level augmentation supports loss-averaging only")

    @property
    def is_trivial(self) -> bool:
        return self.w_dist.kind == "identity" and self.b_dist.kind == "zero"


_DIST_RE = re.compile(r"^\s*([a-z-]+)\s*(?:\((.*)\))?\s*$")


def parse_w_dist(text: str) -> WDist:
    """Parse ``identity``, ``rademacher-diagonal(s)`` or ``fixed-plane-rotation(theta, p)``."""
    kind, args = _split(text)
    if kind == "identity":
        return WDist()
    if kind == "rademacher-diagonal":
        return WDist(kind, s=args[0])
    if kind == "fixed-plane-rotation":
        return WDist(kind, theta=args[0], p=args[1] if len(args) > 1 else 1.0)
    raise ValueError(f"unknown W distribution {text!r}")


def parse_b_dist(text: str) -> BDist:
    """Parse ``zero``, ``gaussian-iso(sigma)`` or ``fixed-shift(v0 v1 ..., p)``."""
    m = _DIST_RE.match(text)
    if m is None:
        raise ValueError(f"cannot parse distribution {text!r}")
    kind = m.group(1)
    if kind == "zero":
        return BDist()
    if kind == "gaussian-iso":
        return BDist(kind, sigma=_split(text)[1][0])
    if kind == "fixed-shift":
        parts = [t.strip() for t in (m.group(2) or "").split(";")]
        v = tuple(float(t) for t in parts[0].split())
        p = float(parts[1]) if len(parts) > 1 else 1.0
        return BDist(kind, v=v, p=p)
    raise ValueError(f"unknown b distribution {text!r}")


def _split(text: str) -> tuple[str, list[float]]:
    m = _DIST_RE.match(text)
    if m is None:
        raise ValueError(f"cannot parse distribution {text!r}")
    raw = m.group(2)
    args = [float(t) for t in re.split(r"[,;\s]+", raw.strip()) if t] if raw else []
    return m.group(1), args


@dataclass
class TransformRng:
    """Two independent Philox streams, one for W* and one for b*."""

    w: np.random.Generator
    b: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int, stream: int = 0) -> "TransformRng":
        return cls(make_rng(seed, stream, 0), make_rng(seed, stream, 1))


def rotation_matrix(dim: int, theta: float) -> np.ndarray:
    """Rotation by ``theta`` in the plane of the first two coordinates."""
    if dim < 2:
        raise ValueError("plane rotation needs dim >= 2")
    R = np.eye(dim)
    c, s = np.cos(theta), np.sin(theta)
    R[:2, :2] = [[c, -s], [s, c]]
    return R


def _shift_vector(b: BDist, dim: int) -> np.ndarray:
    v = np.asarray(b.v, dtype=float)
    if v.size == 1:
        v = np.full(dim, v[0])
    if v.size != dim:
        raise ValueError(f"shift vector has length {v.size}, expected {dim}")
    return v


def sample_transforms(
    spec: AugmentationSpec, dim: int, n: int, rng: TransformRng
) -> tuple[np.ndarray, np.ndarray]:
    """``n`` draws of ``(W*, b*)`` with shapes ``(n, dim, dim)`` and ``(n, dim)``."""
    wd, bd = spec.w_dist, spec.b_dist
    W = np.broadcast_to(np.eye(dim), (n, dim, dim)).copy()
    if wd.kind == "rademacher-diagonal":
        eta = rng.w.choice(np.array([-1.0, 1.0]), size=(n, dim))
        idx = np.arange(dim)
        W[:, idx, idx] += wd.s * eta
    elif wd.kind == "fixed-plane-rotation":
        on = rng.w.random(n) < wd.p
        W[on] = rotation_matrix(dim, wd.theta)

    if bd.kind == "gaussian-iso":
        b = bd.sigma * rng.b.standard_normal((n, dim))
    elif bd.kind == "fixed-shift":
        on = (rng.b.random(n) < bd.p) if bd.p < 1.0 else np.ones(n, dtype=bool)
        b = np.where(on[:, None], _shift_vector(bd, dim)[None, :], 0.0)
    else:
        b = np.zeros((n, dim))

    if not spec.independent:
        b = b + (np.diagonal(W, axis1=1, axis2=2) - 1.0)
    return W, b


def sample_transform(spec: AugmentationSpec, dim: int, rng: TransformRng) -> tuple[np.ndarray, np.ndarray]:
    W, b = sample_transforms(spec, dim, 1, rng)
    return W[0], b[0]


def apply_transform(W: np.ndarray, b: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Row-wise ``x* = W^T x + b``; ``W``/``b`` may be single or batched per row."""
    if W.ndim == 2:
        return X @ W + b
    return np.einsum("nij,ni->nj", W, X) + b


def delta_moment_parts(
    spec: AugmentationSpec, z: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Exact means and second moments of the two parts of ``Δ = x* - x`` at ``z``.

    Returns ``(mean_w, sec_w, mean_b, sec_b)`` for ``Δ_W = (W* - I)^T z`` and ``b*``.
    Only defined for independent specs.
    """
    if not spec.independent:
        raise ValueError("closed-form moments need an independent spec")
    z = np.asarray(z, dtype=float).reshape(-1)
    m = z.shape[0]
    wd, bd = spec.w_dist, spec.b_dist
    mean_w, sec_w = np.zeros(m), np.zeros((m, m))
    if wd.kind == "rademacher-diagonal":
        sec_w = np.diag(wd.s**2 * z**2)
    elif wd.kind == "fixed-plane-rotation":
        u = (rotation_matrix(m, wd.theta) - np.eye(m)).T @ z
        mean_w, sec_w = wd.p * u, wd.p * np.outer(u, u)
    mean_b, sec_b = np.zeros(m), np.zeros((m, m))
    if bd.kind == "gaussian-iso":
        sec_b = bd.sigma**2 * np.eye(m)
    elif bd.kind == "fixed-shift":
        v = _shift_vector(bd, m)
        mean_b, sec_b = bd.p * v, bd.p * np.outer(v, v)
    return mean_w, sec_w, mean_b, sec_b


def delta_moments(spec: AugmentationSpec, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and full second moment ``E[ΔΔ^T]`` of ``Δ = x* - x`` at ``z``."""
    mean_w, sec_w, mean_b, sec_b = delta_moment_parts(spec, z)
    cross = np.outer(mean_w, mean_b)
    return mean_w + mean_b, sec_w + sec_b + cross + cross.T


def transform_atoms(spec: AugmentationSpec, dim: int, max_atoms: int = 64):
    """Finite support of ``(W*, b*)`` as ``(W, b, prob)`` arrays, or ``None`` if unavailable.

    Returns ``None`` for continuous distributions or when the support exceeds ``max_atoms``.
    """
    wd, bd = spec.w_dist, spec.b_dist
    if bd.kind == "gaussian-iso" and bd.sigma > 0:
        return None
    if wd.kind == "rademacher-diagonal" and wd.s > 0:
        if 2**dim > max_atoms:
            return None
        bits = (np.arange(2**dim)[:, None] >> np.arange(dim)[None, :]) & 1
        eta = 2.0 * bits - 1.0
        Ws = np.zeros((2**dim, dim, dim))
        idx = np.arange(dim)
        Ws[:, idx, idx] = 1.0 + wd.s * eta
        pw = np.full(2**dim, 0.5**dim)
    elif wd.kind == "fixed-plane-rotation" and wd.p > 0:
        Ws = np.stack([np.eye(dim), rotation_matrix(dim, wd.theta)])
        pw = np.array([1.0 - wd.p, wd.p])
    else:
        Ws, pw = np.eye(dim)[None], np.ones(1)
    if bd.kind == "fixed-shift":
        bs = np.stack([np.zeros(dim), _shift_vector(bd, dim)])
        pb = np.array([1.0 - bd.p, bd.p])
    else:
        bs, pb = np.zeros((1, dim)), np.ones(1)
    if Ws.shape[0] * bs.shape[0] > max_atoms:
        return None
    W = np.repeat(Ws, bs.shape[0], axis=0)
    b = np.tile(bs, (Ws.shape[0], 1))
    if not spec.independent:
        b = b + (np.diagonal(W, axis1=1, axis2=2) - 1.0)
    prob = np.outer(pw, pb).ravel()
    keep = prob > 0
    return W[keep], b[keep], prob[keep]


def scaled(spec: AugmentationSpec, s: float) -> AugmentationSpec:
    """Same family with every magnitude parameter set by ``s`` (shift vectors are multiplied by ``s``)."""
    wd, bd = spec.w_dist, spec.b_dist
    if wd.kind == "rademacher-diagonal":
        wd = WDist(wd.kind, s=s)
    elif wd.kind == "fixed-plane-rotation":
        wd = WDist(wd.kind, theta=s, p=wd.p)
    if bd.kind == "gaussian-iso":
        bd = BDist(bd.kind, sigma=s)
    elif bd.kind == "fixed-shift":
        bd = BDist(bd.kind, v=tuple(s * t for t in bd.v), p=bd.p)
    return AugmentationSpec(spec.level, spec.algorithm, wd, bd, spec.independent, spec.seed)


# --- condition check ----------------------------------------------------------


@dataclass(frozen=True)
class ConditionReport:
    mean_W_dev: float
    mean_W_se: float
    mean_b_dev: float
    mean_b_se: float
    W_nonconstant: bool
    independent: bool
    max_cross_cov: float
    mean_W_pass: bool
    mean_b_pass: bool
    n_mc: int

    @property
    def conditions_pass(self) -> bool:
        return self.mean_W_pass and self.mean_b_pass and self.independent


def _aggregate_z_pass(dev: np.ndarray, var: np.ndarray, n: int, nsig: float) -> bool:
    """Deviation test at ``nsig`` sigma on a chi-square aggregate of per-entry z-scores.

    Entries with zero sample variance are constant and must match exactly.
    """
    const = var <= 1e-300
    if np.any(np.abs(dev[const]) > 1e-12):
        return False
    k = int(np.sum(~const))
    if k == 0:
        return True
    z2 = dev[~const] ** 2 / (var[~const] / n)
    return bool((np.sum(z2) - k) / np.sqrt(2.0 * k) <= nsig)


def condition_check(
    spec: AugmentationSpec, dim: int, n_mc: int = 100_000, nsig: float = 3.0, chunk: int = 4096
) -> ConditionReport:
    """Monte Carlo check of ``E[W*] = I``, ``E[b*] = 0``, independence and non-constancy."""
    if n_mc < 1000:
        raise ValueError("n_mc must be >= 1000")
    rng = TransformRng.from_seed(spec.seed, 7)
    k = dim * dim
    sw, sww = np.zeros(k), np.zeros(k)
    sb, sbb = np.zeros(dim), np.zeros(dim)
    swb = np.zeros((k, dim))
    w_first = None
    w_varies = False
    done = 0
    while done < n_mc:
        c = min(chunk, n_mc - done)
        W, b = sample_transforms(spec, dim, c, rng)
        Wf = W.reshape(c, k)
        if w_first is None:
            w_first = Wf[0].copy()
        w_varies = w_varies or bool(np.any(Wf != w_first))
        sw += Wf.sum(0)
        sww += (Wf * Wf).sum(0)
        sb += b.sum(0)
        sbb += (b * b).sum(0)
        swb += Wf.T @ b
        done += c
    n = float(n_mc)
    mw, mb = sw / n, sb / n
    vw = np.maximum(sww / n - mw * mw, 0.0) * n / (n - 1)
    vb = np.maximum(sbb / n - mb * mb, 0.0) * n / (n - 1)
    dev_w = mw - np.eye(dim).ravel()
    cov = swb / n - np.outer(mw, mb)
    se_cov = np.sqrt(np.outer(vw, vb) / n)
    indep = _aggregate_z_pass(cov.ravel(), (se_cov**2 * n).ravel(), n_mc, nsig)
    return ConditionReport(
        mean_W_dev=float(np.linalg.norm(dev_w)),
        mean_W_se=float(np.sqrt(vw.sum() / n)),
        mean_b_dev=float(np.linalg.norm(mb)),
        mean_b_se=float(np.sqrt(vb.sum() / n)),
        W_nonconstant=w_varies,
        independent=indep,
        max_cross_cov=float(np.max(np.abs(cov))) if cov.size else 0.0,
        mean_W_pass=_aggregate_z_pass(dev_w, vw, n_mc, nsig),
        mean_b_pass=_aggregate_z_pass(mb, vb, n_mc, nsig),
        n_mc=n_mc,
    )
