"""Momentum SGD for ``g ∘ f`` with regularizers, augmentation and adversarial training.

The model is split into an extractor ``f`` (all hidden layers, activation
included) and a linear head ``g(z) = A z + c``. Training minimizes the mean
squared loss over mini-batches plus the configured penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from transferlab.augment import AugmentationSpec, TransformRng, apply_transform, sample_transforms
from transferlab.data import EmpiricalDataset, make_rng
from transferlab.nnet import (
    ACTIVATIONS,
    DimensionError,
    Layer,
    Network,
    backward_batch,
    forward_batch,
    init_network,
    jacobian_penalty_and_grad,
    network_lines,
    predict,
    read_network,
    _fmt,
    _parse_floats,
)
from transferlab.robustness import AttackConfig, pgd_attack

REG_KINDS = ("none", "wd", "jr", "llr", "ll-norm", "adv")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    """``input_dim -> hidden[0] -> ... -> hidden[-1] -> output_dim``; the last hidden layer is the feature."""

    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden:
            raise ValueError("need at least one hidden layer (the feature layer)")
        if min((self.input_dim, self.output_dim) + self.hidden) < 1:
            raise ValueError("all widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1]


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "none"
    strength: float = 0.0
    target_norm: float = 1.0
    epsilon: float = 0.0
    steps: int = 20
    step_size: float | None = None
    norm: str = "linf"

    def __post_init__(self):
        if self.kind not in REG_KINDS:
            raise ValueError(f"unknown regularizer {self.kind!r}; expected one of {REG_KINDS}")
        if self.strength < 0 or self.epsilon < 0:
            raise ValueError("regularizer strengths must be >= 0")
        if self.kind == "ll-norm" and self.target_norm <= 0:
            raise ValueError("ll-norm target_norm must be > 0")

    @property
    def active(self) -> bool:
        if self.kind in ("wd", "jr", "llr"):
            return self.strength > 0
        if self.kind == "adv":
            return self.epsilon > 0 and self.steps > 0
        return self.kind == "ll-norm"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 0.1
    seed: int = 0
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    augmentation: AugmentationSpec | None = None
    aug_draws: int = 4

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.aug_draws < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and aug_draws >= 1 required")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float


@dataclass(frozen=True)
class LinearHead:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.array(self.weight, dtype=float, ndmin=2)
        b = np.array(self.bias, dtype=float).reshape(-1)
        if b.shape[0] != w.shape[0]:
            raise DimensionError(f"head bias length {b.shape[0]} != weight rows {w.shape[0]}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z) @ self.weight.T + self.bias

    def as_network(self) -> Network:
        return Network.linear(self.weight, self.bias)


@dataclass(frozen=True)
class TrainedModel:
    extractor: Network
    head: LinearHead
    history: tuple[EpochRecord, ...] = ()

    def __post_init__(self):
        if self.head.weight.shape[1] != self.extractor.out_dim:
            raise DimensionError(
                f"head expects {self.head.weight.shape[1]} features, extractor gives {self.extractor.out_dim}"
            )

    @property
    def network(self) -> Network:
        return self.extractor.then(self.head.as_network())

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.head(predict(self.extractor, X))

    def with_head(self, head: LinearHead) -> "TrainedModel":
        return TrainedModel(self.extractor, head, self.history)

    def dumps(self) -> str:
        lines = list(network_lines(self.extractor))
        d, k = self.head.weight.shape
        lines.append(f"head dims={d} {k}")
        lines += [_fmt(row) for row in self.head.weight]
        lines.append(_fmt(self.head.bias))
        lines.append("history=" + " ".join(f"{r.epoch}:{r.loss:.17g}" for r in self.history))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "TrainedModel":
        lines = text.splitlines()
        extractor, i = read_network(lines, 0)
        if i >= len(lines) or not lines[i].startswith("head dims="):
            raise ValueError(f"line {i + 1}: expected 'head dims=<out> <in>'")
        try:
            d, k = (int(t) for t in lines[i][len("head dims=") :].split())
        except ValueError:
            raise ValueError(f"line {i + 1}: malformed head header") from None
        if i + d + 1 >= len(lines):
            raise ValueError("truncated head block")
        W = np.stack([_parse_floats(lines[i + 1 + r], k, i + 2 + r) for r in range(d)])
        b = _parse_floats(lines[i + 1 + d], d, i + 2 + d)
        history: list[EpochRecord] = []
        j = i + 2 + d
        if j < len(lines) and lines[j].startswith("history="):
            for tok in lines[j][len("history=") :].split():
                e, v = tok.split(":")
                history.append(EpochRecord(int(e), float(v)))
        return cls(extractor, LinearHead(W, b), tuple(history))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        return cls.loads(Path(path).read_text())


def init_model(arch: ArchSpec, seed: int) -> TrainedModel:
    rng = make_rng(seed, 0)
    dims = [arch.input_dim, *arch.hidden, arch.output_dim]
    full = init_network(dims, arch.activation, rng)
    extractor = Network(full.layers[:-1])
    last = full.layers[-1]
    return TrainedModel(extractor, LinearHead(last.weight, last.bias))


# --- training ------------------------------------------------------------------------------


def _augment_inputs(spec: AugmentationSpec, X: np.ndarray, rng: TransformRng) -> np.ndarray:
    W, b = sample_transforms(spec, X.shape[1], X.shape[0], rng)
    return apply_transform(W, b, X)


def _batch_objective(
    params: list[tuple[np.ndarray, np.ndarray]],
    kinds: Sequence[str],
    Xb: np.ndarray,
    Yb: np.ndarray,
    config: TrainConfig,
    aug_rng: TransformRng | None,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean squared loss (plus penalty) on one batch and its parameter gradient."""
    reg = config.regularizer
    n_ext = len(kinds)
    ext = Network(tuple(Layer(w, b, a) for (w, b), a in zip(params[:n_ext], kinds)))
    A, c = params[n_ext]
    n = Xb.shape[0]
    aug = config.augmentation
    use_aug = aug is not None and not aug.is_trivial

    if reg.kind == "adv" and reg.active:
        cfg = AttackConfig(reg.epsilon, reg.steps, reg.step_size, norm=reg.norm)
        Xb = pgd_attack(ext.then(Network.linear(A, c)), Xb, Yb, cfg)

    # draws: list of (input batch, feature-level transform or None)
    k = config.aug_draws if use_aug and aug.algorithm == "prediction-averaging" else 1
    traces = []
    for _ in range(k):
        Xi = Xb
        if use_aug and aug.level == "data":
            Xi = _augment_inputs(aug, Xb, aug_rng)
        pres, acts = forward_batch(ext, Xi)
        feats = acts[-1]
        Wf = bf = None
        if use_aug and aug.level == "feature":
            Wf, bf = sample_transforms(aug, feats.shape[1], n, aug_rng)
            feats = apply_transform(Wf, bf, feats)
        traces.append((pres, acts, feats, Wf))
    preds = [f @ A.T + c for _, _, f, _ in traces]
    pbar = sum(preds) / k
    r = pbar - Yb
    loss = float(np.sum(r * r) / n)
    grad_out = 2.0 * r / n / k

    gA, gc = np.zeros_like(A), np.zeros_like(c)
    gext = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params[:n_ext]]
    for pres, acts, feats, Wf in traces:
        gA += grad_out.T @ feats
        gc += grad_out.sum(axis=0)
        gfeat = grad_out @ A
        if Wf is not None:
            gfeat = np.einsum("nij,nj->ni", Wf, gfeat)
        g, _ = backward_batch(ext, pres, acts, gfeat)
        gext = [(a + gw, b + gb) for (a, b), (gw, gb) in zip(gext, g)]

    if reg.active:
        if reg.kind == "wd":
            gext = [(gw + reg.strength * w, gb) for (gw, gb), (w, _) in zip(gext, params[:n_ext])]
            loss += 0.5 * reg.strength * sum(float(np.sum(w * w)) for w, _ in params[:n_ext])
        elif reg.kind == "jr":
            pen, gpen = jacobian_penalty_and_grad(ext, Xb)
            loss += reg.strength * pen
            gext = [(gw + reg.strength * pw, gb + reg.strength * pb) for (gw, gb), (pw, pb) in zip(gext, gpen)]
        elif reg.kind == "llr":
            nrm = float(np.linalg.norm(A))
            loss += reg.strength * nrm
            if nrm > 0:
                gA = gA + reg.strength * A / nrm
    return loss, gext + [(gA, gc)]


def _project_head(A: np.ndarray, target: float) -> np.ndarray:
    nrm = np.linalg.norm(A)
    if nrm == 0:
        out = np.zeros_like(A)
        out.flat[0] = target
        return out
    return A * (target / nrm)


def sgd_train(
    config: TrainConfig,
    data: EmpiricalDataset,
    arch: ArchSpec,
    init: TrainedModel | None = None,
) -> TrainedModel:
    """Train ``g ∘ f`` with momentum SGD (``v = μ v + g``, ``θ -= lr v``).

    Mini-batches come from a seeded per-epoch shuffle. The run is fully
    determined by ``config.seed``.

    Raises:
        TrainingDiverged: when the batch objective becomes NaN or infinite.
    """
    if arch.output_dim != data.target_dim:
        raise DimensionError(f"arch output dim {arch.output_dim} != target dim {data.target_dim}")
    if arch.input_dim != data.input_dim:
        raise DimensionError(f"arch input dim {arch.input_dim} != data input dim {data.input_dim}")
    model = init if init is not None else init_model(arch, config.seed)
    reg = config.regularizer
    params = [(l.weight.copy(), l.bias.copy()) for l in model.extractor.layers]
    params.append((model.head.weight.copy(), model.head.bias.copy()))
    n_ext = model.extractor.depth
    kinds = [l.activation for l in model.extractor.layers]
    if reg.kind == "ll-norm":
        params[-1] = (_project_head(params[-1][0], reg.target_norm), params[-1][1])
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]
    shuffle_rng = make_rng(config.seed, 1)
    aug_rng = TransformRng.from_seed(config.seed, 2) if config.augmentation is not None else None
    n = len(data)
    lr = config.lr
    history = []
    X, Y = data.inputs, data.targets
    for epoch in range(config.epochs):
        if epoch in config.lr_decay_epochs:
            lr *= config.decay_factor
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            loss, grads = _batch_objective(params, kinds, X[idx], Y[idx], config, aug_rng)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for pair in grads for g in pair):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            velocity = [
                (config.momentum * vw + gw, config.momentum * vb + gb)
                for (vw, vb), (gw, gb) in zip(velocity, grads)
            ]
            params = [(w - lr * vw, b - lr * vb) for (w, b), (vw, vb) in zip(params, velocity)]
            if reg.kind == "ll-norm":
                params[-1] = (_project_head(params[-1][0], reg.target_norm), params[-1][1])
            total += loss * len(idx)
            count += len(idx)
        history.append(EpochRecord(epoch, total / max(count, 1)))
    ext = model.extractor.with_params(params[:n_ext])
    return TrainedModel(ext, LinearHead(*params[-1]), tuple(history))


# --- closed-form fine-tuning and evaluation -----------------------------------------------


def _design(features: np.ndarray) -> np.ndarray:
    return np.hstack([features, np.ones((features.shape[0], 1))])


def fit_linear_head(features: np.ndarray, targets: np.ndarray, ridge: float = 0.0) -> tuple[LinearHead, float]:
    """Least-squares head on ``[φ; 1]``; ``ridge`` penalizes every head parameter, bias included."""
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    Phi = _design(np.asarray(features, dtype=float))
    Y = np.asarray(targets, dtype=float)
    n = Phi.shape[0]
    if n == 0:
        raise ValueError("cannot fit a head on an empty dataset")
    if ridge == 0:
        coef = np.linalg.lstsq(Phi, Y, rcond=None)[0]
    else:
        gram = Phi.T @ Phi / n + ridge * np.eye(Phi.shape[1])
        coef = np.linalg.solve(gram, Phi.T @ Y / n)
    head = LinearHead(coef[:-1].T, coef[-1])
    r = Phi @ coef - Y
    return head, float(np.sum(r * r) / n)


def fine_tune_linear(extractor: Network, data: EmpiricalDataset, ridge: float = 0.0) -> tuple[LinearHead, float]:
    """Refit only the linear head on frozen extractor features; returns the head and its mean loss."""
    return fit_linear_head(predict(extractor, data.inputs), data.targets, ridge)


def evaluate(model, data: EmpiricalDataset, mode: str = "squared_loss") -> float:
    """Mean squared loss or argmax accuracy (ties go to the lowest index)."""
    if isinstance(model, TrainedModel):
        P = model.predict(data.inputs)
    elif isinstance(model, Network):
        P = predict(model, data.inputs)
    else:
        P = np.asarray(model(data.inputs), dtype=float)
    P = np.atleast_2d(P)
    if P.shape != data.targets.shape:
        raise DimensionError(f"prediction shape {P.shape} != target shape {data.targets.shape}")
    if mode == "squared_loss":
        r = P - data.targets
        return float(np.mean(np.sum(r * r, axis=1)))
    if mode == "argmax_accuracy":
        return float(np.mean(np.argmax(P, axis=1) == np.argmax(data.targets, axis=1)))
    raise ValueError(f"unknown evaluation mode {mode!r}")


def augmented_objective(
    model: TrainedModel, data: EmpiricalDataset, spec: AugmentationSpec, n_mc: int, seed: int = 0
) -> tuple[float, float]:
    """Monte Carlo loss-averaging objective and its standard error."""
    rng = TransformRng.from_seed(seed, 3)
    per_draw = np.empty(n_mc)
    for t in range(n_mc):
        if spec.level == "data":
            P = model.predict(_augment_inputs(spec, data.inputs, rng))
        else:
            F = predict(model.extractor, data.inputs)
            P = model.head(_augment_inputs(spec, F, rng))
        r = P - data.targets
        per_draw[t] = np.mean(np.sum(r * r, axis=1))
    return float(per_draw.mean()), float(per_draw.std(ddof=1) / np.sqrt(n_mc))
