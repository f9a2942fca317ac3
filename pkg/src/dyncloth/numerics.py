"""Small dense MLP core: forward, analytic backward, Adam and soft target updates.

Parameters live in one flat float64 vector; per-layer weights and biases are
views into it, so the optimizer, target blending and checkpoints all operate
on a single array. Weights are stored ``(fan_in, fan_out)`` and inputs are
row vectors, i.e. ``z = x @ W + b``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def _layout(layer_sizes):
    """Offsets of ``(W, b)`` for every layer inside the flat vector."""
    out, off = [], 0
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = (off, off + n_in * n_out, (n_in, n_out))
        off += n_in * n_out
        b = (off, off + n_out)
        off += n_out
        out.append((w, b))
    return out, off


def _check_sizes(layer_sizes):
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ConfigError("layer_sizes needs at least an input and an output size")
    if any(s <= 0 for s in sizes) or any(s != f for s, f in zip(sizes, layer_sizes)):
        raise ConfigError(f"layer sizes must be positive integers, got {list(layer_sizes)}")
    return tuple(sizes)


@dataclass
class ParamSet:
    layer_sizes: tuple[int, ...]
    theta: np.ndarray
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    weights: list = field(init=False, repr=False)
    biases: list = field(init=False, repr=False)

    def __post_init__(self):
        self.layer_sizes = _check_sizes(self.layer_sizes)
        for act in (self.hidden_activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")
        layout, n = _layout(self.layer_sizes)
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.shape != (n,):
            raise ShapeError(f"expected {n} parameters, got shape {self.theta.shape}")
        self.weights = [self.theta[w0:w1].reshape(shape) for (w0, w1, shape), _ in layout]
        self.biases = [self.theta[b0:b1] for _, (b0, b1) in layout]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def size(self) -> int:
        return self.theta.size

    def copy(self) -> ParamSet:
        return ParamSet(self.layer_sizes, self.theta.copy(), self.hidden_activation,
                        self.output_activation)

    def with_theta(self, theta: np.ndarray) -> ParamSet:
        return ParamSet(self.layer_sizes, theta, self.hidden_activation, self.output_activation)

    def activation(self, layer: int) -> str:
        return self.output_activation if layer == self.n_layers - 1 else self.hidden_activation


def n_params(layer_sizes) -> int:
    return _layout(_check_sizes(layer_sizes))[1]


def mlp_init(layer_sizes, hidden_activation: str = "relu", output_activation: str = "identity",
             rng: np.random.Generator | None = None, final_scale: float = 1.0) -> ParamSet:
    """Fan-in uniform weights ``U(-1/sqrt(n_in), 1/sqrt(n_in))``, zero biases.

    ``final_scale`` shrinks the last layer (1e-2 for the actor so early
    actions start near zero).
    """
    sizes = _check_sizes(layer_sizes)
    if rng is None:
        raise ConfigError("mlp_init needs an explicit rng")
    p = ParamSet(sizes, np.zeros(n_params(sizes)), hidden_activation, output_activation)
    for i, w in enumerate(p.weights):
        bound = 1.0 / np.sqrt(w.shape[0])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        if i == p.n_layers - 1:
            w *= final_scale
    return p


@dataclass
class ForwardTrace:
    """``inputs[l]`` feeds layer ``l``; ``pre[l]`` is its pre-activation."""

    inputs: list
    pre: list
    squeeze: bool = False

    @property
    def depth(self) -> int:
        return len(self.pre)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a, g):
    if name == "relu":
        return g * (z > 0.0)
    if name == "tanh":
        return g * (1.0 - a * a)
    return g


def forward(params: ParamSet, x) -> tuple[np.ndarray, ForwardTrace]:
    """Evaluate on one input vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.layer_sizes[0]:
        raise ShapeError(f"input of width {params.layer_sizes[0]} expected, got shape {x.shape}")
    inputs, pre = [], []
    h = x
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = _act(params.activation(l), z)
    inputs.append(h)
    return (h[0] if squeeze else h), ForwardTrace(inputs, pre, squeeze)


def predict(params: ParamSet, x) -> np.ndarray:
    """Forward pass without keeping the trace."""
    h = np.asarray(x, dtype=np.float64)
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = _act(params.activation(l), h @ w + b)
    return h


def backward(params: ParamSet, trace: ForwardTrace, output_gradient) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``L = sum(output_gradient * output)`` (summed over the batch).

    Returns ``(flat parameter gradient, input gradient)``; the flat gradient
    shares the layout of ``params.theta``.
    """
    if trace.depth != params.n_layers:
        raise ShapeError(f"trace depth {trace.depth} != network depth {params.n_layers}")
    g = np.asarray(output_gradient, dtype=np.float64)
    if trace.squeeze and g.ndim == 1:
        g = g[None, :]
    out = trace.inputs[-1]
    if g.shape != out.shape:
        raise ShapeError(f"output gradient shape {g.shape} != output shape {out.shape}")
    grad = params.with_theta(np.zeros_like(params.theta))
    for l in range(params.n_layers - 1, -1, -1):
        g = _act_grad(params.activation(l), trace.pre[l], trace.inputs[l + 1], g)
        np.matmul(trace.inputs[l].T, g, out=grad.weights[l])
        grad.biases[l][...] = g.sum(axis=0)
        g = g @ params.weights[l].T
    return grad.theta, (g[0] if trace.squeeze else g)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParamSet, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
        return cls(np.zeros(params.size), np.zeros(params.size), 0, beta1, beta2, eps)

    def copy(self) -> AdamState:
        return AdamState(self.m.copy(), self.v.copy(), self.step, self.beta1, self.beta2, self.eps)


def adam_step(params: ParamSet, gradients: np.ndarray, state: AdamState,
              learning_rate: float) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam step; returns fresh parameter and state objects."""
    g = np.asarray(gradients, dtype=np.float64)
    if g.shape != params.theta.shape or state.m.shape != g.shape:
        raise ShapeError("gradient/moment shapes do not match the parameters")
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NumericError(f"non-finite gradient entry at flat index {bad}")
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    theta = params.theta - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_theta(theta), AdamState(m, v, t, b1, b2, state.eps)


def soft_update(target: ParamSet, online: ParamSet, tau: float) -> ParamSet:
    """``(1 - tau) * target + tau * online``, elementwise."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    if target.layer_sizes != online.layer_sizes:
        raise ShapeError("target and online networks differ in shape")
    return target.with_theta((1.0 - tau) * target.theta + tau * online.theta)


# -- checkpoint files --------------------------------------------------------
#
# Little-endian binary:
#   b"DCKP"  u32 version  u32 n_records
#   per record:
#     u16 name_len, name (utf-8), u8 kind (0 = network, 1 = plain array)
#     network: u32 n_sizes, u32 sizes..., u8 hidden, u8 output, f64 theta...
#     array:   u32 ndim, u32 shape..., f64 data...

MAGIC = b"DCKP"
VERSION = 1


def _write_u32s(fh, vals):
    fh.write(struct.pack(f"<{len(vals)}I", *vals))


def _read(fh, fmt):
    size = struct.calcsize(fmt)
    buf = fh.read(size)
    if len(buf) != size:
        raise ShapeError("truncated checkpoint")
    return struct.unpack(fmt, buf)


def _read_f64(fh, n):
    buf = fh.read(8 * n)
    if len(buf) != 8 * n:
        raise ShapeError("truncated checkpoint")
    return np.frombuffer(buf, dtype="<f8").astype(np.float64)


def save_checkpoint(path, records: dict) -> None:
    """Write named ParamSets and/or float arrays to ``path``."""
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        _write_u32s(fh, [VERSION, len(records)])
        for name, obj in records.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            if isinstance(obj, ParamSet):
                fh.write(struct.pack("<B", 0))
                _write_u32s(fh, [len(obj.layer_sizes), *obj.layer_sizes])
                fh.write(struct.pack("<BB", ACTIVATIONS.index(obj.hidden_activation),
                                     ACTIVATIONS.index(obj.output_activation)))
                fh.write(obj.theta.astype("<f8").tobytes())
            else:
                arr = np.asarray(obj, dtype=np.float64)
                fh.write(struct.pack("<B", 1))
                _write_u32s(fh, [arr.ndim, *arr.shape])
                fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict:
    with open(Path(path), "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ShapeError(f"{path}: not a checkpoint file")
        version, count = _read(fh, "<II")
        if version != VERSION:
            raise ShapeError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (n,) = _read(fh, "<H")
            name = fh.read(n).decode("utf-8")
            (kind,) = _read(fh, "<B")
            if kind == 0:
                (k,) = _read(fh, "<I")
                sizes = _read(fh, f"<{k}I")
                hid, outp = _read(fh, "<BB")
                theta = _read_f64(fh, n_params(sizes))
                out[name] = ParamSet(sizes, theta, ACTIVATIONS[hid], ACTIVATIONS[outp])
            elif kind == 1:
                (ndim,) = _read(fh, "<I")
                shape = _read(fh, f"<{ndim}I") if ndim else ()
                out[name] = _read_f64(fh, int(np.prod(shape))).reshape(shape)
            else:
                raise ShapeError(f"{path}: unknown record kind {kind}")
        return out
