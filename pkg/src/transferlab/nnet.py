"""Dense fully-connected networks with exact forward/backward passes.

Everything here is plain numpy on float64. Batched entry points take inputs of
shape ``(n, in_dim)``; the single-vector functions (:func:`forward`,
:func:`jacobian_input`) are thin wrappers used by the verification modules.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterator, Sequence

import numpy as np

if TYPE_CHECKING:
    from transferlab.data import EmpiricalDataset

ACTIVATIONS = ("relu", "tanh", "identity")

Grads = list[tuple[np.ndarray, np.ndarray]]


class DimensionError(ValueError):
    pass


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _dact(kind: str, z: np.ndarray) -> np.ndarray:
    # relu'(0) = 0: the activation pattern uses a strict inequality
    if kind == "relu":
        return (z > 0).astype(float)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


def _ddact(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(z)
        return -2.0 * t * (1.0 - t * t)
    return np.zeros_like(z)


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        w = np.array(self.weight, dtype=float)
        b = np.array(self.bias, dtype=float).reshape(-1)
        if w.ndim != 2:
            raise DimensionError(f"weight must be a matrix, got shape {w.shape}")
        if b.shape[0] != w.shape[0]:
            raise DimensionError(f"bias length {b.shape[0]} != weight rows {w.shape[0]}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("non-finite layer parameters")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class Network:
    """An ordered stack of affine layers, each followed by its activation.

    Full models end in an identity layer. Feature extractors produced by the
    trainer may end in a hidden activation; the head is stored separately.
    """

    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a network needs at least one layer")
        for j in range(1, len(layers)):
            if layers[j].in_dim != layers[j - 1].out_dim:
                raise DimensionError(
                    f"layer {j} expects input dim {layers[j].in_dim}, "
                    f"previous layer outputs {layers[j - 1].out_dim}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def hidden_widths(self) -> list[int]:
        return [layer.out_dim for layer in self.layers[:-1]]

    @property
    def n_hidden_units(self) -> int:
        """Length of the activation pattern: hidden units of layers 1..L-1."""
        return sum(self.hidden_widths)

    @property
    def is_smooth(self) -> bool:
        return all(layer.activation != "relu" for layer in self.layers)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return predict(self, X)

    def then(self, other: "Network") -> "Network":
        """Composition ``other ∘ self``."""
        return Network(self.layers + other.layers)

    @classmethod
    def identity(cls, dim: int) -> "Network":
        return cls((Layer(np.eye(dim), np.zeros(dim), "identity"),))

    @classmethod
    def linear(cls, A, b=None) -> "Network":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.zeros(A.shape[0]) if b is None else b
        return cls((Layer(A, b, "identity"),))

    def with_params(self, params: Sequence[tuple[np.ndarray, np.ndarray]]) -> "Network":
        return Network(
            tuple(Layer(w, b, layer.activation) for (w, b), layer in zip(params, self.layers))
        )

    def params(self) -> Grads:
        return [(layer.weight.copy(), layer.bias.copy()) for layer in self.layers]

    def equals(self, other: "Network") -> bool:
        if self.depth != other.depth:
            return False
        return all(
            a.activation == b.activation
            and a.weight.shape == b.weight.shape
            and np.array_equal(a.weight, b.weight)
            and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers)
        )


@dataclass
class ForwardTrace:
    preactivations: list[np.ndarray]
    activations: list[np.ndarray]
    output: np.ndarray = field(init=False)

    def __post_init__(self):
        self.output = self.activations[-1]


def init_network(
    dims: Sequence[int],
    activation: str,
    rng: np.random.Generator,
    final_activation: str = "identity",
) -> Network:
    """He-style uniform init, bound sqrt(6 / fan_in), zero biases."""
    if len(dims) < 2:
        raise ValueError("dims needs at least input and output sizes")
    layers = []
    for j in range(len(dims) - 1):
        fan_in, fan_out = dims[j], dims[j + 1]
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        act = final_activation if j == len(dims) - 2 else activation
        layers.append(Layer(w, np.zeros(fan_out), act))
    return Network(tuple(layers))


def _check_input(net: Network, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != net.in_dim:
        raise DimensionError(f"input dim {X.shape[1]} != network input dim {net.in_dim}")
    return X


def forward_batch(net: Network, X: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Preactivations and activations for a batch; ``acts[0]`` is the input."""
    X = _check_input(net, X)
    pres, acts = [], [X]
    a = X
    for layer in net.layers:
        z = a @ layer.weight.T + layer.bias
        a = _act(layer.activation, z)
        pres.append(z)
        acts.append(a)
    return pres, acts


def predict(net: Network, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    _, acts = forward_batch(net, X)
    return acts[-1][0] if single else acts[-1]


def forward(net: Network, x: np.ndarray) -> ForwardTrace:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != net.in_dim:
        raise DimensionError(f"input dim {x.shape[0]} != network input dim {net.in_dim}")
    pres, acts = forward_batch(net, x[None, :])
    trace = ForwardTrace([z[0] for z in pres], [a[0] for a in acts[1:]])
    if not np.all(np.isfinite(trace.output)):
        raise FloatingPointError("non-finite network output")
    return trace


def backward_batch(
    net: Network,
    pres: list[np.ndarray],
    acts: list[np.ndarray],
    grad_out: np.ndarray,
) -> tuple[Grads, np.ndarray]:
    """Backprop ``grad_out`` (d loss / d output, per row) to params and inputs.

    Parameter gradients are summed over the batch rows.
    """
    grads: Grads = [None] * net.depth  # type: ignore[list-item]
    g = grad_out
    for j in range(net.depth - 1, -1, -1):
        layer = net.layers[j]
        gz = g * _dact(layer.activation, pres[j])
        grads[j] = (gz.T @ acts[j], gz.sum(axis=0))
        g = gz @ layer.weight
    return grads, g


def squared_loss_and_grad(net: Network, X: np.ndarray, Y: np.ndarray) -> tuple[float, Grads]:
    """Mean squared loss ``1/n Σ ||h(x_i) - y_i||²`` and its parameter gradient."""
    pres, acts = forward_batch(net, X)
    Y = np.asarray(Y, dtype=float).reshape(acts[-1].shape)
    n = Y.shape[0]
    resid = acts[-1] - Y
    loss = float(np.sum(resid * resid) / n)
    grads, _ = backward_batch(net, pres, acts, 2.0 * resid / n)
    return loss, grads


def grad_params(net: Network, dataset: "EmpiricalDataset") -> Grads:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.target_dim != net.out_dim:
        raise DimensionError(
            f"target dim {dataset.target_dim} != network output dim {net.out_dim}"
        )
    _, grads = squared_loss_and_grad(net, dataset.inputs, dataset.targets)
    return grads


def input_gradient(net: Network, X: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product with respect to each input row."""
    pres, acts = forward_batch(net, X)
    _, gx = backward_batch(net, pres, acts, grad_out)
    return gx


def jacobian_batch(net: Network, X: np.ndarray) -> np.ndarray:
    """Input Jacobians, shape ``(n, out_dim, in_dim)``, by forward-mode products."""
    pres, _ = forward_batch(net, X)
    n = pres[0].shape[0]
    M = np.broadcast_to(np.eye(net.in_dim), (n, net.in_dim, net.in_dim))
    for layer, z in zip(net.layers, pres):
        M = _dact(layer.activation, z)[:, :, None] * np.einsum("oi,nij->noj", layer.weight, M)
    return M


def jacobian_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != net.in_dim:
        raise DimensionError(f"input dim {x.shape[0]} != network input dim {net.in_dim}")
    return jacobian_batch(net, x[None, :])[0]


def jacobian_penalty_and_grad(net: Network, X: np.ndarray) -> tuple[float, Grads]:
    """``1/n Σ ||J(x_i)||_F²`` and its exact gradient in the parameters.

    The Jacobian is carried forward as ``M_j = D_j W_j M_{j-1}`` and the penalty
    is differentiated through both ``M`` and the preactivations feeding ``D_j``.
    """
    pres, acts = forward_batch(net, X)
    n = X.shape[0] if np.ndim(X) == 2 else 1
    Ms, Ts = [np.broadcast_to(np.eye(net.in_dim), (n, net.in_dim, net.in_dim))], []
    for layer, z in zip(net.layers, pres):
        T = np.einsum("oi,nij->noj", layer.weight, Ms[-1])
        Ts.append(T)
        Ms.append(_dact(layer.activation, z)[:, :, None] * T)
    J = Ms[-1]
    penalty = float(np.sum(J * J) / n)

    grads: Grads = [None] * net.depth  # type: ignore[list-item]
    G = 2.0 * J / n  # d penalty / d M_L
    gz_next = None  # gradient w.r.t. preactivation z_{j+1} via the value path
    for j in range(net.depth - 1, -1, -1):
        layer = net.layers[j]
        z = pres[j]
        gT = _dact(layer.activation, z)[:, :, None] * G
        gz = _ddact(layer.activation, z) * np.sum(G * Ts[j], axis=2)
        if gz_next is not None:
            nxt = net.layers[j + 1]
            gz = gz + (gz_next @ nxt.weight) * _dact(layer.activation, z)
        dW = np.einsum("noj,nij->oi", gT, Ms[j]) + gz.T @ acts[j]
        grads[j] = (dW, gz.sum(axis=0))
        G = np.einsum("oi,noj->nij", layer.weight, gT)
        gz_next = gz
    return penalty, grads


def hessian_fd(func: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Symmetrized central second-difference Hessian of a scalar function."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float).reshape(-1)
    m = x.shape[0]
    H = np.zeros((m, m))
    f0 = func(x)
    E = np.eye(m) * h
    for i in range(m):
        H[i, i] = (func(x + E[i]) - 2.0 * f0 + func(x - E[i])) / (h * h)
        for j in range(i + 1, m):
            H[i, j] = (
                func(x + E[i] + E[j])
                - func(x + E[i] - E[j])
                - func(x - E[i] + E[j])
                + func(x - E[i] - E[j])
            ) / (4.0 * h * h)
            H[j, i] = H[i, j]
    return 0.5 * (H + H.T)


def hessian_input_fd(net: Network, x: np.ndarray, out_index: int, h: float = 1e-3) -> np.ndarray:
    if not net.is_smooth:
        raise ValueError("Hessian undefined at kinks; use tanh")
    if not 0 <= out_index < net.out_dim:
        raise IndexError(f"output index {out_index} out of range for dim {net.out_dim}")
    return hessian_fd(lambda v: float(predict(net, v)[out_index]), x, h)


def hessians_input_fd(net: Network, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """All output-component Hessians at once, shape ``(out_dim, in_dim, in_dim)``."""
    if not net.is_smooth:
        raise ValueError("Hessian undefined at kinks; use tanh")
    x = np.asarray(x, dtype=float).reshape(-1)
    m = x.shape[0]
    E = np.eye(m) * h
    # one batched forward pass over every stencil point
    pts = [x]
    for i in range(m):
        pts += [x + E[i], x - E[i]]
        for j in range(i + 1, m):
            pts += [x + E[i] + E[j], x + E[i] - E[j], x - E[i] + E[j], x - E[i] - E[j]]
    vals = predict(net, np.array(pts))
    f0 = vals[0]
    H = np.zeros((net.out_dim, m, m))
    k = 1
    diag_pairs = {}
    for i in range(m):
        diag_pairs[i] = (vals[k], vals[k + 1])
        k += 2
        for j in range(i + 1, m):
            pp, pm, mp, mm = vals[k : k + 4]
            H[:, i, j] = H[:, j, i] = (pp - pm - mp + mm) / (4.0 * h * h)
            k += 4
        fp, fm = diag_pairs[i]
        H[:, i, i] = (fp - 2.0 * f0 + fm) / (h * h)
    return 0.5 * (H + np.transpose(H, (0, 2, 1)))


# --- parameter vector helpers -------------------------------------------------


def flatten(params: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in params])


def unflatten(net: Network, vec: np.ndarray) -> Grads:
    out, k = [], 0
    for layer in net.layers:
        nw, nb = layer.weight.size, layer.bias.size
        out.append(
            (vec[k : k + nw].reshape(layer.weight.shape).copy(), vec[k + nw : k + nw + nb].copy())
        )
        k += nw + nb
    return out


# --- text serialization ---------------------------------------------------------


def _fmt(values: np.ndarray) -> str:
    return " ".join(f"{v:.17g}" for v in np.asarray(values).ravel())


def network_lines(net: Network) -> Iterator[str]:
    yield f"layers={net.depth}"
    for layer in net.layers:
        yield f"dims={layer.out_dim} {layer.in_dim} act={layer.activation}"
        for row in layer.weight:
            yield _fmt(row)
        yield _fmt(layer.bias)


def dumps_network(net: Network) -> str:
    return "\n".join(network_lines(net)) + "\n"


def _parse_floats(line: str, expected: int, lineno: int) -> np.ndarray:
    try:
        vals = np.array([float(tok) for tok in line.split()], dtype=float)
    except ValueError as exc:
        raise ValueError(f"line {lineno}: non-numeric entry ({exc})") from None
    if vals.shape[0] != expected:
        raise ValueError(f"line {lineno}: expected {expected} values, got {vals.shape[0]}")
    return vals


def read_network(lines: list[str], start: int = 0) -> tuple[Network, int]:
    """Parse a network block beginning at ``lines[start]``; return it and the next index."""
    i = start
    head = lines[i].strip()
    if not head.startswith("layers="):
        raise ValueError(f"line {i + 1}: expected 'layers=<L>', got {head!r}")
    n_layers = int(head.split("=", 1)[1])
    i += 1
    layers = []
    for _ in range(n_layers):
        parts = lines[i].split()
        if len(parts) != 3 or not parts[0].startswith("dims=") or not parts[2].startswith("act="):
            raise ValueError(f"line {i + 1}: expected 'dims=<out> <in> act=<name>'")
        out_dim, in_dim = int(parts[0][5:]), int(parts[1])
        act = parts[2][4:]
        i += 1
        w = np.empty((out_dim, in_dim))
        for r in range(out_dim):
            w[r] = _parse_floats(lines[i], in_dim, i + 1)
            i += 1
        b = _parse_floats(lines[i], out_dim, i + 1)
        i += 1
        layers.append(Layer(w, b, act))
    return Network(tuple(layers)), i


def loads_network(text: str) -> Network:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    net, _ = read_network(lines)
    return net


def save_network(net: Network, path: str | Path) -> None:
    Path(path).write_text(dumps_network(net))


def load_network(path: str | Path) -> Network:
    return loads_network(Path(path).read_text())
