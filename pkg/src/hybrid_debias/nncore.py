"""Dense ReLU classifier with hand-written backprop and Adam, in float64 numpy."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datagen import FormatError


class DimensionError(ValueError):
    pass


@dataclass
class Mlp:
    layer_dims: list[int]
    weights: list[np.ndarray]  # weights[l] has shape (layer_dims[l], layer_dims[l+1])
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise DimensionError("need at least an input and an output dimension")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise DimensionError("one weight matrix and bias per layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[l], self.layer_dims[l + 1]) or b.shape != (self.layer_dims[l + 1],):
                raise DimensionError(f"layer {l} parameters do not match layer_dims")

    @classmethod
    def init(cls, layer_dims: Sequence[int], seed: int) -> "Mlp":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(list(layer_dims), weights, biases)

    @classmethod
    def zeros(cls, layer_dims: Sequence[int]) -> "Mlp":
        return cls(list(layer_dims),
                   [np.zeros((a, b)) for a, b in zip(layer_dims[:-1], layer_dims[1:])],
                   [np.zeros(b) for b in layer_dims[1:]])

    @property
    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "Mlp":
        return Mlp(list(self.layer_dims), [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def num_params(self) -> int:
        return sum(p.size for p in self.params)


def default_dims(input_dim: int, num_classes: int, hidden: Sequence[int] = (100, 100, 100)) -> list[int]:
    return [input_dim, *hidden, num_classes]


def _as_batch(model: Mlp, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise DimensionError(f"batch shape {x.shape} does not match input dim {model.layer_dims[0]}")
    return x


def forward(model: Mlp, batch, return_activations: bool = False):
    """Logits of shape (n, num_classes).

    With ``return_activations`` also returns the list of layer inputs
    [x, h1, ..., h_last] that :func:`backward` can reuse.
    """
    h = _as_batch(model, batch)
    acts = [h]
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        h = z if l == last else np.maximum(z, 0.0)
        if l != last:
            acts.append(h)
    return (h, acts) if return_activations else h


def hidden_features(model: Mlp, batch) -> np.ndarray:
    """Activations of the last hidden layer."""
    _, acts = forward(model, batch, return_activations=True)
    return acts[-1]


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with the max subtracted for stability."""
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any():
        raise ValueError("softmax received NaN logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def backward(model: Mlp, batch, grad_logits, activations=None) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients (dW per layer, db per layer) given dLoss/dLogits."""
    if activations is None:
        _, activations = forward(model, batch, return_activations=True)
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != (activations[0].shape[0], model.layer_dims[-1]):
        raise DimensionError(f"upstream gradient shape {g.shape} does not match logits")
    n_layers = len(model.weights)
    dws: list[np.ndarray] = [None] * n_layers
    dbs: list[np.ndarray] = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        a = activations[l]
        dws[l] = a.T @ g
        dbs[l] = g.sum(axis=0)
        if l > 0:
            g = (g @ model.weights[l].T) * (a > 0)
    return dws, dbs


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_model(cls, model: Mlp, lr: float = 1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in model.params], [np.zeros_like(p) for p in model.params], lr=lr, **kw)


def adam_step(model: Mlp, grads, state: AdamState) -> tuple[Mlp, AdamState]:
    """One bias-corrected Adam update, applied in place."""
    dws, dbs = grads
    flat = [*dws, *dbs]
    params = model.params
    if len(flat) != len(params) or any(g.shape != p.shape for g, p in zip(flat, params)):
        raise DimensionError("gradient shapes do not match model parameters")
    if not all(np.isfinite(g).all() for g in flat):
        raise FloatingPointError("non-finite gradient passed to adam_step")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, flat, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return model, state


# A loss function maps logits to (scalar loss, dLoss/dLogits).
LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def _relu_pattern(model: Mlp, x: np.ndarray) -> list[np.ndarray]:
    _, acts = forward(model, x, return_activations=True)
    return [a > 0 for a in acts[1:]]


def grad_check(model: Mlp, loss_fn: LossFn, batch, n_samples: int = 200, h: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between backprop and central differences over
    ``n_samples`` randomly drawn parameters.

    A parameter whose +h / -h evaluations see different ReLU on/off patterns
    straddles a kink where the loss is not differentiable; it is redrawn.
    """
    x = _as_batch(model, batch)
    logits, acts = forward(model, x, return_activations=True)
    _, g = loss_fn(logits)
    dws, dbs = backward(model, x, g, acts)
    analytic = [*dws, *dbs]
    params = model.params
    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params])
    worst = 0.0
    checked = attempts = 0
    while checked < n_samples and attempts < 20 * n_samples:
        attempts += 1
        which = int(rng.choice(len(params), p=sizes / sizes.sum()))
        p = params[which].reshape(-1)  # view
        j = int(rng.integers(p.size))
        orig = p[j]
        p[j] = orig + h
        up = loss_fn(forward(model, x))[0]
        pattern_up = _relu_pattern(model, x)
        p[j] = orig - h
        down = loss_fn(forward(model, x))[0]
        pattern_down = _relu_pattern(model, x)
        p[j] = orig
        if any((a != b).any() for a, b in zip(pattern_up, pattern_down)):
            continue
        checked += 1
        numeric = (up - down) / (2 * h)
        a = analytic[which].reshape(-1)[j]
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst


# Checkpoint: "DBMW" | version u32 | n_dims u32 | dims u32[n_dims] | per layer W f32, b f32
_CKPT_MAGIC = b"DBMW"


def save_model(model: Mlp, path) -> None:
    dims = model.layer_dims
    out = [_CKPT_MAGIC, struct.pack("<II", 1, len(dims)), np.asarray(dims, dtype="<u4").tobytes()]
    for w, b in zip(model.weights, model.biases):
        out.append(np.asarray(w, dtype="<f4").tobytes())
        out.append(np.asarray(b, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)


def load_model(path) -> Mlp:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise FormatError("truncated checkpoint header", len(buf))
    if buf[:4] != _CKPT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    version, n_dims = struct.unpack_from("<II", buf, 4)
    if version != 1:
        raise FormatError(f"unsupported version {version}", 4)
    pos = 12
    if len(buf) < pos + 4 * n_dims:
        raise FormatError("truncated layer dims", len(buf))
    dims = [int(d) for d in np.frombuffer(buf, dtype="<u4", count=n_dims, offset=pos)]
    pos += 4 * n_dims
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        for shape in ((a, b), (b,)):
            count = int(np.prod(shape))
            if len(buf) < pos + 4 * count:
                raise FormatError("truncated parameter blob", pos)
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float64)
            (weights if len(shape) == 2 else biases).append(arr)
            pos += 4 * count
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return Mlp(dims, weights, biases)
