"""Empirical datasets, synthetic source/target generators, CSV I/O and the toy instance.

Random streams come from numpy's Philox (a 64-bit-keyed counter-based
generator), so a seed pins down every generated sample.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SYNTHETIC_KINDS = ("gaussian-blobs", "low-dim-manifold", "linear-teacher")


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and an optional stream path."""
    ss = np.random.SeedSequence(int(seed) % 2**64, spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class EmpiricalDataset:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        X = np.array(self.inputs, dtype=float)
        Y = np.array(self.targets, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.ndim != 2 or Y.ndim != 2:
            raise ValueError("inputs and targets must be 2-D arrays")
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs but {Y.shape[0]} targets")
        if X.shape[0] < 1:
            raise ValueError("dataset needs at least one row")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("dataset contains non-finite values")
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", Y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def target_dim(self) -> int:
        return self.targets.shape[1]

    def subset(self, idx) -> "EmpiricalDataset":
        return EmpiricalDataset(self.inputs[idx], self.targets[idx])

    def split(self, n_first: int) -> tuple["EmpiricalDataset", "EmpiricalDataset"]:
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))

    def labels(self) -> np.ndarray:
        """Class indices for one-hot targets (argmax, ties to the lowest index)."""
        return np.argmax(self.targets, axis=1)

    def equals(self, other: "EmpiricalDataset") -> bool:
        return (
            self.inputs.shape == other.inputs.shape
            and self.targets.shape == other.targets.shape
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.targets, other.targets)
        )


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass(frozen=True)
class SyntheticSpec:
    """Declarative description of a synthetic source/target pair.

    ``label_map`` selects how target labels differ from the source:

    * ``same`` -- identical labelling rule in both domains.
    * ``negate`` -- linear-teacher only: target teacher is the negated source one.
    * ``square`` -- linear-teacher only: target is the elementwise square of x.
    * ``permute`` -- blobs: target classes are a cyclic shift of source classes.
    * ``rotate-means`` -- blobs: target class means are drawn independently.

    ``shift`` is added to every target input.
    """

    kind: str
    input_dim: int
    output_dim: int
    n_source: int = 200
    n_target: int = 200
    shift: tuple[float, ...] | None = None
    label_map: str = "same"
    seed: int = 0
    separation: float = 3.0
    noise: float = 1.0
    manifold_dim: int = 1
    teacher_scale: float = 2.0
    extra: dict = field(default_factory=dict)


def _shift_vec(spec: SyntheticSpec) -> np.ndarray:
    if spec.shift is None:
        return np.zeros(spec.input_dim)
    v = np.asarray(spec.shift, dtype=float).reshape(-1)
    if v.shape[0] == 1 and spec.input_dim > 1:
        v = np.full(spec.input_dim, v[0])
    if v.shape[0] != spec.input_dim:
        raise ValueError(f"shift has length {v.shape[0]}, input_dim is {spec.input_dim}")
    return v


def generate_synthetic(spec: SyntheticSpec) -> tuple[EmpiricalDataset, EmpiricalDataset]:
    if spec.kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {spec.kind!r}; expected one of {SYNTHETIC_KINDS}")
    if spec.input_dim < 1 or spec.output_dim < 1:
        raise ValueError("dimensions must be >= 1")
    if spec.n_source < 2 or spec.n_target < 2:
        raise ValueError("need at least two samples per domain")
    shift = _shift_vec(spec)
    if spec.kind == "gaussian-blobs":
        return _blobs(spec, shift)
    if spec.kind == "low-dim-manifold":
        return _manifold(spec, shift)
    return _teacher(spec, shift)


def _blobs(spec: SyntheticSpec, shift: np.ndarray):
    k, m = spec.output_dim, spec.input_dim
    rng_means = make_rng(spec.seed, 0)
    means_s = rng_means.normal(size=(k, m))
    means_s *= spec.separation / np.linalg.norm(means_s, axis=1, keepdims=True)
    if spec.label_map == "rotate-means":
        means_t = rng_means.normal(size=(k, m))
        means_t *= spec.separation / np.linalg.norm(means_t, axis=1, keepdims=True)
    elif spec.label_map == "permute":
        means_t = np.roll(means_s, 1, axis=0)
    elif spec.label_map == "same":
        means_t = means_s
    else:
        raise ValueError(f"label_map {spec.label_map!r} not valid for gaussian-blobs")

    def draw(means, n, stream):
        rng = make_rng(spec.seed, stream)
        labels = rng.integers(0, k, size=n)
        X = means[labels] + spec.noise * rng.normal(size=(n, m))
        return X, one_hot(labels, k)

    Xs, Ys = draw(means_s, spec.n_source, 1)
    Xt, Yt = draw(means_t, spec.n_target, 2)
    return EmpiricalDataset(Xs, Ys), EmpiricalDataset(Xt + shift, Yt)


def _manifold(spec: SyntheticSpec, shift: np.ndarray):
    m, q = spec.input_dim, spec.manifold_dim
    if not 1 <= q < m:
        raise ValueError("manifold_dim must satisfy 1 <= manifold_dim < input_dim")
    rng = make_rng(spec.seed, 0)
    basis, _ = np.linalg.qr(rng.normal(size=(m, q)))
    offset = rng.normal(size=m)
    teacher_s = rng.normal(size=(spec.output_dim, q))
    teacher_t = teacher_s if spec.label_map == "same" else rng.normal(size=(spec.output_dim, q))

    def draw(n, stream, teacher):
        r = make_rng(spec.seed, stream)
        coords = r.normal(size=(n, q))
        return offset + coords @ basis.T, coords @ teacher.T

    Xs, Ys = draw(spec.n_source, 1, teacher_s)
    Xt, Yt = draw(spec.n_target, 2, teacher_t)
    return EmpiricalDataset(Xs, Ys), EmpiricalDataset(Xt + shift, Yt)


def _teacher(spec: SyntheticSpec, shift: np.ndarray):
    m, d = spec.input_dim, spec.output_dim
    rng = make_rng(spec.seed, 0)
    A = spec.teacher_scale * np.eye(d, m) if spec.extra.get("diagonal", True) else rng.normal(size=(d, m))

    def label(X, which):
        if which == "source" or spec.label_map == "same":
            return X @ A.T
        if spec.label_map == "negate":
            return -(X @ A.T)
        if spec.label_map == "square":
            return (X**2)[:, :d] if m >= d else np.tile(X**2, (1, d))[:, :d]
        raise ValueError(f"label_map {spec.label_map!r} not valid for linear-teacher")

    def draw(n, stream):
        r = make_rng(spec.seed, stream)
        half = r.normal(size=((n + 1) // 2, m))
        # symmetric sample: every point comes with its mirror image
        return np.concatenate([half, -half])[:n]

    Xs = draw(spec.n_source, 1)
    Xt = draw(spec.n_target, 2) + shift
    return EmpiricalDataset(Xs, label(Xs, "source")), EmpiricalDataset(Xt, label(Xt, "target"))


# --- CSV ------------------------------------------------------------------------


def dataset_to_csv(dataset: EmpiricalDataset) -> str:
    buf = io.StringIO()
    header = [f"x{j}" for j in range(dataset.input_dim)] + [f"y{j}" for j in range(dataset.target_dim)]
    buf.write(",".join(header) + "\n")
    for x, y in zip(dataset.inputs, dataset.targets):
        buf.write(",".join(f"{v:.17g}" for v in np.concatenate([x, y])) + "\n")
    return buf.getvalue()


def dataset_from_csv(text: str) -> EmpiricalDataset:
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError("no rows")
    header = [c.strip() for c in rows[0]]
    m = sum(1 for c in header if c.startswith("x"))
    d = sum(1 for c in header if c.startswith("y"))
    expected = [f"x{j}" for j in range(m)] + [f"y{j}" for j in range(d)]
    if header != expected or m == 0 or d == 0:
        raise ValueError(f"line 1: header must be x0..x{{m-1}},y0..y{{d-1}}, got {header}")
    if len(rows) == 1:
        raise ValueError("no rows")
    values = np.empty((len(rows) - 1, m + d))
    for i, row in enumerate(rows[1:]):
        lineno = i + 2
        if len(row) != m + d:
            raise ValueError(f"line {lineno}: expected {m + d} cells, got {len(row)}")
        try:
            values[i] = [float(c) for c in row]
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric cell") from None
    return EmpiricalDataset(values[:, :m], values[:, m:])


def csv_io(path: str | Path, direction: str, dataset: EmpiricalDataset | None = None):
    """Read or write a dataset CSV (header ``x0..,y0..``, LF newlines)."""
    path = Path(path)
    if direction == "write":
        if dataset is None:
            raise ValueError("write requires a dataset")
        with open(path, "w", newline="\n") as fh:
            fh.write(dataset_to_csv(dataset))
        return None
    if direction == "read":
        return dataset_from_csv(path.read_text())
    raise ValueError(f"direction must be 'read' or 'write', got {direction!r}")


# --- toy instance -------------------------------------------------------------------


@dataclass(frozen=True)
class ToyInstance:
    """Equal-mass atoms with source/target values; norms use the Euclidean norm."""

    atoms: np.ndarray
    yS: np.ndarray
    yT: np.ndarray
    norm_yS: float
    norm_yT: float
    norm_diff: float


def _dist_norm(values: np.ndarray) -> float:
    return float(np.mean(np.linalg.norm(values, axis=1)))


def make_toy_instance(atoms: Sequence, yS: Sequence, yT: Sequence) -> ToyInstance:
    atoms = np.asarray(atoms, dtype=float)
    yS = np.atleast_2d(np.asarray(yS, dtype=float))
    yT = np.atleast_2d(np.asarray(yT, dtype=float))
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    if atoms.shape[0] == 0:
        raise ValueError("toy instance needs at least one atom")
    if not (atoms.shape[0] == yS.shape[0] == yT.shape[0]):
        raise ValueError("atoms, yS and yT must have equal lengths")
    if yS.shape != yT.shape:
        raise ValueError("yS and yT must have the same shape")
    return ToyInstance(atoms, yS, yT, _dist_norm(yS), _dist_norm(yT), _dist_norm(yS - yT))
