"""Minimal float64 neural networks: conv, max-pool, dense, activations, SGD."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"ABLNET1\n"


class ShapeMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class MaxPool:
    size: int = 2


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class Activation:
    kind: str  # relu | sigmoid | softmax

    def __post_init__(self):
        if self.kind not in ("relu", "sigmoid", "softmax"):
            raise ValueError(f"unknown activation {self.kind!r}")


Layer = Union[Conv2D, MaxPool, Dense, Activation]
_LAYER_TYPES = {c.__name__: c for c in (Conv2D, MaxPool, Dense, Activation)}


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple
    seed: int = 0
    n_classes: int | None = None

    def to_json(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [{"type": type(l).__name__, **asdict(l)} for l in self.layers],
            "seed": self.seed,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_json(cls, d: dict) -> "NetworkSpec":
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            layers.append(_LAYER_TYPES[ld.pop("type")](**ld))
        return cls(tuple(d["input_shape"]), tuple(layers), d.get("seed", 0), d.get("n_classes"))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 10
    minibatch: int = 32
    seed: int = 0
    l2: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")


def perception_spec(seed: int = 0, size: int = 16, classes: int = 4) -> NetworkSpec:
    return NetworkSpec(
        (1, size, size),
        (Conv2D(8, 3), Activation("relu"), MaxPool(2),
         Conv2D(16, 3), Activation("relu"), MaxPool(2),
         Dense(64), Activation("relu"), Dense(classes), Activation("softmax")),
        seed=seed, n_classes=classes)


def decision_spec(n_features: int, seed: int = 0) -> NetworkSpec:
    return NetworkSpec((n_features,), (Dense(16), Activation("relu"), Dense(2), Activation("softmax")),
                       seed=seed, n_classes=2)


def _shapes(spec: NetworkSpec) -> list[tuple]:
    """Output shape after each layer; validates compatibility."""
    shape = tuple(spec.input_shape)
    out = []
    for i, layer in enumerate(spec.layers):
        if i > 0 and isinstance(spec.layers[i - 1], Activation) and spec.layers[i - 1].kind == "softmax":
            raise ShapeMismatch(f"layer {i} follows a softmax output layer")
        if isinstance(layer, Conv2D):
            if len(shape) != 3:
                raise ShapeMismatch(f"Conv2D needs (C,H,W) input, got {shape}")
            c, h, w = shape
            k, s = layer.kernel, layer.stride
            if h < k or w < k:
                raise ShapeMismatch(f"kernel {k} larger than input {h}x{w}")
            shape = (layer.filters, (h - k) // s + 1, (w - k) // s + 1)
        elif isinstance(layer, MaxPool):
            if len(shape) != 3:
                raise ShapeMismatch(f"MaxPool needs (C,H,W) input, got {shape}")
            c, h, w = shape
            if h < layer.size or w < layer.size:
                raise ShapeMismatch("pool larger than input")
            shape = (c, h // layer.size, w // layer.size)
        elif isinstance(layer, Dense):
            shape = (layer.units,)
        elif isinstance(layer, Activation):
            if layer.kind == "softmax" and i != len(spec.layers) - 1:
                raise ShapeMismatch("softmax is only allowed as the final layer")
        else:
            raise ShapeMismatch(f"unknown layer {layer!r}")
        out.append(shape)
    if spec.n_classes is not None and (not out or out[-1] != (spec.n_classes,)):
        raise ShapeMismatch(f"final output {out[-1] if out else None} does not match {spec.n_classes} classes")
    return out


@dataclass
class Network:
    spec: NetworkSpec
    params: list = field(default_factory=list)  # per layer: list of arrays ([] if none)

    def copy(self) -> "Network":
        return Network(self.spec, [[p.copy() for p in ps] for ps in self.params])

    def n_params(self) -> int:
        return sum(p.size for ps in self.params for p in ps)

    def flat(self) -> np.ndarray:
        arrs = [p.ravel() for ps in self.params for p in ps]
        return np.concatenate(arrs) if arrs else np.zeros(0)

    @property
    def output_dim(self) -> int:
        return int(np.prod(_shapes(self.spec)[-1]))


def init_network(spec: NetworkSpec) -> Network:
    """Glorot-uniform weights from a seeded generator, zero biases."""
    shapes = _shapes(spec)
    rng = np.random.default_rng(spec.seed)
    params = []
    prev = tuple(spec.input_shape)
    for layer, shape in zip(spec.layers, shapes):
        if isinstance(layer, Conv2D):
            c = prev[0]
            k = layer.kernel
            fan_in, fan_out = c * k * k, layer.filters * k * k
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params.append([rng.uniform(-a, a, size=(layer.filters, c, k, k)), np.zeros(layer.filters)])
        elif isinstance(layer, Dense):
            fan_in = int(np.prod(prev))
            a = np.sqrt(6.0 / (fan_in + layer.units))
            params.append([rng.uniform(-a, a, size=(fan_in, layer.units)), np.zeros(layer.units)])
        else:
            params.append([])
        prev = shape
    return Network(spec, params)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _conv_forward(x, W, b, stride):
    n, c, h, w = x.shape
    f, _, k, _ = W.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ W.reshape(f, -1).T + b
    return out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, x_shape, cols, W, stride):
    n, c, h, w = x_shape
    f, _, k, _ = W.shape
    ho, wo = dout.shape[2], dout.shape[3]
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dW = (dflat.T @ cols).reshape(W.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ W.reshape(f, -1)).reshape(n, ho, wo, c, k, k)
    dx = np.zeros(x_shape)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dW, db


def _pool_forward(x, p):
    n, c, h, w = x.shape
    ho, wo = h // p, w // p
    xc = x[:, :, :ho * p, :wo * p].reshape(n, c, ho, p, wo, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, p * p)
    idx = xc.argmax(axis=-1)
    out = np.take_along_axis(xc, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, x_shape, idx, p):
    n, c, h, w = x_shape
    ho, wo = dout.shape[2], dout.shape[3]
    g = np.zeros((n, c, ho, wo, p * p))
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    g = g.reshape(n, c, ho, wo, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * p, wo * p)
    dx = np.zeros(x_shape)
    dx[:, :, :ho * p, :wo * p] = g
    return dx


def _run(net: Network, x: np.ndarray, keep: bool):
    """Forward to the final pre-softmax output; returns (output, caches, softmax_final)."""
    x = np.asarray(x, dtype=np.float64)
    want = tuple(net.spec.input_shape)
    if x.shape[1:] != want:
        raise ShapeMismatch(f"batch shape {x.shape[1:]} does not match input {want}")
    caches = []
    softmax_final = False
    for layer, ps in zip(net.spec.layers, net.params):
        if isinstance(layer, Conv2D):
            out, cols = _conv_forward(x, ps[0], ps[1], layer.stride)
            caches.append((x.shape, cols) if keep else None)
        elif isinstance(layer, MaxPool):
            out, idx = _pool_forward(x, layer.size)
            caches.append((x.shape, idx) if keep else None)
        elif isinstance(layer, Dense):
            xf = x.reshape(x.shape[0], -1)
            out = xf @ ps[0] + ps[1]
            caches.append((x.shape, xf) if keep else None)
        else:
            if layer.kind == "softmax":
                softmax_final = True
                caches.append(None)
                out = x
            elif layer.kind == "relu":
                out = np.maximum(x, 0.0)
                caches.append(x > 0 if keep else None)
            else:
                out = 1.0 / (1.0 + np.exp(-x))
                caches.append(out if keep else None)
        x = out
    return x, caches, softmax_final


def forward(net: Network, batch) -> np.ndarray:
    """Network output; rows are probability vectors when the last layer is softmax."""
    out, _, sm = _run(net, batch, keep=False)
    return _softmax(out) if sm else out


def loss_and_grads(net: Network, inputs, labels, l2: float = 0.0):
    """Mean cross-entropy (+ l2/2 * ||W||^2) and gradients for every parameter."""
    logits, caches, sm = _run(net, inputs, keep=True)
    if not sm:
        raise ShapeMismatch("cross-entropy training needs a softmax output layer")
    labels = np.asarray(labels, dtype=int)
    n = logits.shape[0]
    p = _softmax(logits)
    loss = -np.mean(np.log(np.clip(p[np.arange(n), labels], 1e-300, None)))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    grads: list = [[] for _ in net.params]
    for i in range(len(net.spec.layers) - 1, -1, -1):
        layer, ps, cache = net.spec.layers[i], net.params[i], caches[i]
        if isinstance(layer, Conv2D):
            x_shape, cols = cache
            grad, dW, db = _conv_backward(grad, x_shape, cols, ps[0], layer.stride)
            grads[i] = [dW + l2 * ps[0], db]
        elif isinstance(layer, MaxPool):
            x_shape, idx = cache
            grad = _pool_backward(grad, x_shape, idx, layer.size)
        elif isinstance(layer, Dense):
            x_shape, xf = cache
            grads[i] = [xf.T @ grad + l2 * ps[0], grad.sum(axis=0)]
            grad = (grad @ ps[0].T).reshape(x_shape)
        elif layer.kind == "relu":
            grad = grad * cache
        elif layer.kind == "sigmoid":
            grad = grad * cache * (1.0 - cache)
    if l2:
        loss += 0.5 * l2 * sum(float(np.sum(ps[0] ** 2)) for ps in net.params if ps)
    return float(loss), grads


def train_supervised(net: Network, inputs, labels, cfg: TrainConfig):
    """Minibatch SGD on cross-entropy; returns (trained copy, per-epoch mean loss)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if len(inputs) != len(labels) or len(inputs) == 0:
        raise ValueError("inputs and labels must be nonempty and of equal length")
    net = net.copy()
    rng = np.random.default_rng(cfg.seed)
    trace = []
    n = len(inputs)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            loss, grads = loss_and_grads(net, inputs[idx], labels[idx], cfg.l2)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss}; lower the learning rate")
            total += loss * len(idx)
            for ps, gs in zip(net.params, grads):
                for p, g in zip(ps, gs):
                    p -= cfg.learning_rate * g
        trace.append(total / n)
    return net, trace


def gradient_check(net: Network, inputs, labels, step: float = 1e-5) -> float:
    """Max relative error between backprop and central differences over all parameters."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape == tuple(net.spec.input_shape):
        inputs = inputs[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    net = net.copy()
    _, grads = loss_and_grads(net, inputs, labels)
    worst = 0.0
    for ps, gs in zip(net.params, grads):
        for p, g in zip(ps, gs):
            flat, gflat = p.reshape(-1), g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                lp, _ = loss_and_grads(net, inputs, labels)
                flat[j] = orig - step
                lm, _ = loss_and_grads(net, inputs, labels)
                flat[j] = orig
                num = (lp - lm) / (2 * step)
                denom = max(abs(num) + abs(gflat[j]), 1e-8)
                worst = max(worst, abs(num - gflat[j]) / denom)
    return worst


def accuracy(net: Network, inputs, labels) -> float:
    pred = forward(net, inputs).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


# --------------------------------------------------------------------------
# model file: magic, one JSON manifest line, little-endian float64 parameters

def dumps(net: Network) -> bytes:
    manifest = {
        "spec": net.spec.to_json(),
        "params": [[list(p.shape) for p in ps] for ps in net.params],
    }
    head = MAGIC + json.dumps(manifest, sort_keys=True).encode() + b"\n"
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for ps in net.params for p in ps)
    return head + body


def loads(data: bytes) -> Network:
    if not data.startswith(MAGIC):
        raise FormatError("bad magic: not an ABLNET1 file")
    nl = data.find(b"\n", len(MAGIC))
    if nl < 0:
        raise FormatError("missing manifest line")
    try:
        manifest = json.loads(data[len(MAGIC):nl])
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt manifest: {e}") from None
    spec = NetworkSpec.from_json(manifest["spec"])
    pos = nl + 1
    params = []
    for shapes in manifest["params"]:
        layer = []
        for shape in shapes:
            count = int(np.prod(shape))
            chunk = data[pos:pos + 8 * count]
            if len(chunk) != 8 * count:
                raise FormatError("truncated parameter block")
            layer.append(np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape))
            pos += 8 * count
        params.append(layer)
    if pos != len(data):
        raise FormatError("trailing bytes after parameters")
    _shapes(spec)
    return Network(spec, params)


def save_network(net: Network, path) -> None:
    Path(path).write_bytes(dumps(net))


def load_network(path) -> Network:
    return loads(Path(path).read_bytes())
