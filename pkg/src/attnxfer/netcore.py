"""Small differentiable convolutional network in numpy.

Layers are described by lightweight dataclasses and evaluated over batches of
shape ``(N, *input_shape)``. Everything runs in float64 so that analytic
gradients can be checked against finite differences.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

NETWORK_MAGIC = b"ATNW"
NETWORK_VERSION = 1


class ShapeError(ValueError):
    """Input or parameter shapes do not fit the network description."""


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite during optimisation."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


# --------------------------------------------------------------------------
# Layer descriptors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    kind: str = field(default="conv2d", init=False)


@dataclass(frozen=True)
class ReLU:
    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2
    stride: int = 2
    kind: str = field(default="maxpool", init=False)


@dataclass(frozen=True)
class GlobalAvgPool:
    kind: str = field(default="global_avg_pool", init=False)


@dataclass(frozen=True)
class Dense:
    out_dim: int
    kind: str = field(default="dense", init=False)


Layer = Union[Conv2D, ReLU, MaxPool, GlobalAvgPool, Dense]

_LAYER_TYPES = {
    "conv2d": Conv2D,
    "relu": ReLU,
    "maxpool": MaxPool,
    "global_avg_pool": GlobalAvgPool,
    "dense": Dense,
}


def _layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("kind")
    try:
        cls = _LAYER_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(**d)


def _layer_output_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Conv2D):
        if len(shape) != 3:
            raise ShapeError(f"conv2d expects (C, H, W), got {shape}")
        _, h, w = shape
        hp, wp = h + 2 * layer.padding, w + 2 * layer.padding
        if hp < layer.kernel or wp < layer.kernel:
            raise ShapeError(f"conv kernel {layer.kernel} larger than input {shape}")
        ho = (hp - layer.kernel) // layer.stride + 1
        wo = (wp - layer.kernel) // layer.stride + 1
        return (layer.out_channels, ho, wo)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise ShapeError(f"maxpool expects (C, H, W), got {shape}")
        c, h, w = shape
        if h < layer.kernel or w < layer.kernel:
            raise ShapeError(f"pool kernel {layer.kernel} larger than input {shape}")
        return (c, (h - layer.kernel) // layer.stride + 1, (w - layer.kernel) // layer.stride + 1)
    if isinstance(layer, GlobalAvgPool):
        if len(shape) != 3:
            raise ShapeError(f"global_avg_pool expects (C, H, W), got {shape}")
        return (shape[0],)
    if isinstance(layer, Dense):
        return (layer.out_dim,)
    raise TypeError(f"not a layer: {layer!r}")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus the index of the layer whose output is used as
    the attention feature maps (``last_conv``)."""

    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]
    last_conv: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("network needs at least one layer")
        if not 0 <= self.last_conv < len(self.layers):
            raise ValueError(f"last_conv index {self.last_conv} out of range")
        if not isinstance(self.layers[-1], Dense):
            raise ValueError("final layer must be dense (raw class scores)")
        # validates composition
        shapes = self.shapes()
        if len(shapes[self.last_conv + 1]) != 3:
            raise ValueError("designated last-conv layer must output a spatial (C, H, W) map")
        if not any(isinstance(l, Conv2D) for l in self.layers[: self.last_conv + 1]):
            raise ValueError("no convolution at or before the designated last-conv layer")

    def shapes(self) -> list[tuple[int, ...]]:
        """Activation shapes, starting with the input and ending with the logits."""
        out = [self.input_shape]
        for layer in self.layers:
            out.append(_layer_output_shape(layer, out[-1]))
        return out

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        """(K, h, w) of the last-conv feature maps."""
        return self.shapes()[self.last_conv + 1]

    def to_json(self) -> str:
        payload = {
            "input_shape": list(self.input_shape),
            "layers": [asdict(l) for l in self.layers],
            "last_conv": self.last_conv,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        d = json.loads(text)
        return cls(tuple(d["input_shape"]), tuple(_layer_from_dict(l) for l in d["layers"]), d["last_conv"])


def default_spec(n_classes: int, image_size: int = 24, channels: int = 8, in_channels: int = 1) -> NetworkSpec:
    """conv3 -> relu -> maxpool2 -> conv3/2 -> relu -> gap -> dense.

    The rectified output of the second convolution is the attention feature
    map; on 24x24 inputs it is 8 x 5 x 5.
    """
    layers = (
        Conv2D(channels, 3, 1, 0),
        ReLU(),
        MaxPool(2, 2),
        Conv2D(channels, 3, 2, 0),
        ReLU(),
        GlobalAvgPool(),
        Dense(n_classes),
    )
    return NetworkSpec((in_channels, image_size, image_size), layers, last_conv=4)


# --------------------------------------------------------------------------
# Parameters, traces, gradients
# --------------------------------------------------------------------------


@dataclass
class NetworkParams:
    weights: list  # per layer: ndarray or None
    biases: list
    seed: int | None = None

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            [None if w is None else w.copy() for w in self.weights],
            [None if b is None else b.copy() for b in self.biases],
            self.seed,
        )

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            if w is not None:
                out.extend([w, b])
        return out

    def equal(self, other: "NetworkParams") -> bool:
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class ForwardTrace:
    activations: list  # activations[0] is the input batch, activations[-1] the logits
    pool_argmax: dict  # layer index -> flat argmax inside each pooling window
    batched: bool

    @property
    def logits(self) -> np.ndarray:
        return self.activations[-1] if self.batched else self.activations[-1][0]

    def features(self, spec: NetworkSpec) -> np.ndarray:
        """Last-conv feature maps A^k."""
        a = self.activations[spec.last_conv + 1]
        return a if self.batched else a[0]


@dataclass
class GradientSet:
    weights: list
    biases: list
    last_conv: np.ndarray | None = None

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            if w is not None:
                out.extend([w, b])
        return out


def init_params(spec: NetworkSpec, seed: int) -> NetworkParams:
    """Glorot-uniform weights, zero biases; reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    shapes = spec.shapes()
    weights, biases = [], []
    for layer, in_shape in zip(spec.layers, shapes[:-1]):
        if isinstance(layer, Conv2D):
            c = in_shape[0]
            k = layer.kernel
            limit = np.sqrt(6.0 / (c * k * k + layer.out_channels * k * k))
            weights.append(rng.uniform(-limit, limit, size=(layer.out_channels, c, k, k)))
            biases.append(np.zeros(layer.out_channels))
        elif isinstance(layer, Dense):
            fan_in = int(np.prod(in_shape))
            limit = np.sqrt(6.0 / (fan_in + layer.out_dim))
            weights.append(rng.uniform(-limit, limit, size=(layer.out_dim, fan_in)))
            biases.append(np.zeros(layer.out_dim))
        else:
            weights.append(None)
            biases.append(None)
    return NetworkParams(weights, biases, seed)


def _check_params(spec: NetworkSpec, params: NetworkParams) -> None:
    if len(params.weights) != len(spec.layers):
        raise ShapeError("parameter list does not match layer count")
    shapes = spec.shapes()
    for i, (layer, in_shape) in enumerate(zip(spec.layers, shapes[:-1])):
        w = params.weights[i]
        if isinstance(layer, Conv2D):
            expected = (layer.out_channels, in_shape[0], layer.kernel, layer.kernel)
        elif isinstance(layer, Dense):
            expected = (layer.out_dim, int(np.prod(in_shape)))
        else:
            if w is not None:
                raise ShapeError(f"layer {i} ({layer.kind}) has no parameters")
            continue
        if w is None or w.shape != expected or params.biases[i].shape != expected[:1]:
            raise ShapeError(f"layer {i} parameters do not have shape {expected}")


# --------------------------------------------------------------------------
# Layer kernels
# --------------------------------------------------------------------------


def _conv_forward(x, w, b, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    k = w.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def _conv_backward(x, w, g, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    k = w.shape[-1]
    ho, wo = g.shape[2:]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, k, k)
    db = g.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))  # (N, Ho, Wo, C)
            dx[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dw, db, dx


def _pool_forward(x, kernel, stride):
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(win.shape[:4] + (kernel * kernel,))
    # argmax returns the first maximum in row-major window order
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(x_shape, idx, g, kernel, stride):
    dx = np.zeros(x_shape)
    ho, wo = g.shape[2:]
    for i in range(kernel):
        for j in range(kernel):
            hit = idx == i * kernel + j
            dx[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += g * hit
    return dx


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


def _as_batch(spec: NetworkSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        return x[None], False
    if x.ndim == len(spec.input_shape) + 1 and x.shape[1:] == spec.input_shape:
        return x, True
    raise ShapeError(f"input shape {x.shape} does not match network input {spec.input_shape}")


def forward(spec: NetworkSpec, params: NetworkParams, x) -> ForwardTrace:
    """Run the network on one input or a batch and keep every activation.

    ``x`` may have shape ``spec.input_shape`` or ``(N, *spec.input_shape)``.
    The returned logits are raw (pre-softmax) class scores.
    """
    _check_params(spec, params)
    a, batched = _as_batch(spec, x)
    acts = [a]
    pool_idx = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv2D):
            a = _conv_forward(a, params.weights[i], params.biases[i], layer.stride, layer.padding)
        elif isinstance(layer, ReLU):
            a = np.maximum(a, 0.0)
        elif isinstance(layer, MaxPool):
            a, pool_idx[i] = _pool_forward(a, layer.kernel, layer.stride)
        elif isinstance(layer, GlobalAvgPool):
            a = a.mean(axis=(2, 3))
        elif isinstance(layer, Dense):
            a = a.reshape(a.shape[0], -1) @ params.weights[i].T + params.biases[i]
        acts.append(a)
    return ForwardTrace(acts, pool_idx, batched)


def _backward(spec, params, trace, grad_logits, stop: int = -1, need_params: bool = True):
    """Reverse pass from the logits down to (but excluding) layer ``stop``.

    Returns (weight grads, bias grads, grad wrt output of the last-conv layer).
    """
    g = np.asarray(grad_logits, dtype=np.float64)
    if not trace.batched:
        g = g[None]
    if g.shape != trace.activations[-1].shape:
        raise ShapeError(f"grad_logits shape {g.shape[1:]} does not match logits")
    n = len(spec.layers)
    dws, dbs = [None] * n, [None] * n
    g_feat = None
    for i in range(n - 1, stop, -1):
        layer = spec.layers[i]
        x = trace.activations[i]
        y = trace.activations[i + 1]
        if isinstance(layer, Dense):
            xf = x.reshape(x.shape[0], -1)
            if need_params:
                dws[i] = g.T @ xf
                dbs[i] = g.sum(axis=0)
            g = (g @ params.weights[i]).reshape(x.shape)
        elif isinstance(layer, GlobalAvgPool):
            h, w = x.shape[2:]
            g = np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy()
        elif isinstance(layer, ReLU):
            g = g * (y > 0)
        elif isinstance(layer, MaxPool):
            g = _pool_backward(x.shape, trace.pool_argmax[i], g, layer.kernel, layer.stride)
        elif isinstance(layer, Conv2D):
            dw, db, dx = _conv_backward(x, params.weights[i], g, layer.stride, layer.padding)
            if need_params:
                dws[i], dbs[i] = dw, db
            g = dx
        if i - 1 == spec.last_conv:
            g_feat = g
    return dws, dbs, g_feat


def backward(spec: NetworkSpec, params: NetworkParams, trace: ForwardTrace, grad_logits) -> GradientSet:
    """Backpropagate ``grad_logits`` through the whole network.

    For a batched trace the parameter gradients are summed over the batch.
    """
    if len(trace.activations) != len(spec.layers) + 1:
        raise ShapeError("trace was not produced by this network")
    _check_params(spec, params)
    dws, dbs, g_feat = _backward(spec, params, trace, grad_logits)
    if not trace.batched:
        g_feat = g_feat[0]
    return GradientSet(dws, dbs, g_feat)


def feature_gradient(spec: NetworkSpec, params: NetworkParams, trace: ForwardTrace, grad_logits) -> np.ndarray:
    """Gradient w.r.t. the last-conv activations only (skips earlier layers)."""
    _, _, g_feat = _backward(spec, params, trace, grad_logits, stop=spec.last_conv, need_params=False)
    return g_feat if trace.batched else g_feat[0]


def softmax_cross_entropy(logits, label):
    """Softmax cross-entropy and its gradient w.r.t. the logits.

    Accepts a single logit vector with an integer label, or a batch
    ``(N, n)`` with ``N`` labels; the batch loss is the mean and the gradient
    is scaled accordingly.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None] if single else z
    labels = np.atleast_1d(np.asarray(label))
    if labels.shape != (zb.shape[0],):
        raise ValueError("one label per logit row required")
    if np.any(labels < 0) or np.any(labels >= zb.shape[1]):
        raise ValueError(f"label out of range for {zb.shape[1]} classes")
    shifted = zb - zb.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(zb.shape[0])
    losses = log_z - shifted[rows, labels]
    probs = np.exp(shifted - log_z[:, None])
    grad = probs
    grad[rows, labels] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / zb.shape[0]


def sgd_step(params, grads, lr: float, weight_decay: float = 0.0):
    """Plain SGD with L2 weight decay on weights (never on biases).

    Works on :class:`NetworkParams` / :class:`GradientSet` pairs and also on
    any object exposing parallel ``weights``/``biases`` lists. Returns a new
    parameter object; the input is not modified.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if weight_decay < 0:
        raise ValueError("weight decay must be non-negative")
    for i, (gw, gb) in enumerate(zip(grads.weights, grads.biases)):
        if gw is None:
            continue
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            bad = int(np.sum(~np.isfinite(gw)) + np.sum(~np.isfinite(gb)))
            raise TrainingDiverged(f"non-finite gradient in layer {i} ({bad} entries)")
    new = params.copy()
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if w is None:
            continue
        new.weights[i] = w - lr * (grads.weights[i] + weight_decay * w)
        new.biases[i] = b - lr * grads.biases[i]
    return new


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 20
    batch: int = 32
    lr: float = 0.05
    wd: float = 5e-4
    seed: int = 0
    hflip: bool = True


@dataclass
class TrainResult:
    params: NetworkParams
    epoch_losses: list


def train_classifier(spec: NetworkSpec, images, labels, config: TrainConfig,
                     init: NetworkParams | None = None) -> TrainResult:
    """Mini-batch SGD on labelled images with optional random horizontal flips.

    Deterministic given ``config.seed``: the same seed initialises the weights
    (unless ``init`` is given) and drives shuffling and flipping.
    """
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty training set")
    if len(x) != len(y):
        raise ValueError("images and labels differ in length")
    if np.any(y < 0) or np.any(y >= spec.n_classes):
        raise ValueError(f"labels must lie in [0, {spec.n_classes})")
    _as_batch(spec, x)
    params = init.copy() if init is not None else init_params(spec, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        total, count = 0.0, 0
        for start in range(0, len(x), config.batch):
            idx = order[start : start + config.batch]
            xb = x[idx]
            if config.hflip:
                flip = rng.random(len(idx)) < 0.5
                xb = np.where(flip[:, None, None, None], xb[..., ::-1], xb)
            trace = forward(spec, params, xb)
            loss, g = softmax_cross_entropy(trace.logits, y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch}", epoch)
            grads = backward(spec, params, trace, g)
            try:
                params = sgd_step(params, grads, config.lr, config.wd)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", epoch) from None
            total += loss * len(idx)
            count += len(idx)
        losses.append(total / count)
        logger.debug("epoch %d loss %.5f", epoch, losses[-1])
    return TrainResult(params, losses)


def predict(spec: NetworkSpec, params: NetworkParams, images, batch: int = 256) -> np.ndarray:
    """Raw logits for a batch of images, evaluated in chunks."""
    x = np.asarray(images, dtype=np.float64)
    out = [forward(spec, params, x[i : i + batch]).logits for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros((0, spec.n_classes))


# --------------------------------------------------------------------------
# Checkpoint format
# --------------------------------------------------------------------------


def dumps_network(spec: NetworkSpec, params: NetworkParams) -> bytes:
    _check_params(spec, params)
    buf = io.BytesIO()
    spec_bytes = spec.to_json().encode("utf-8")
    seed = params.seed if params.seed is not None else 0
    buf.write(NETWORK_MAGIC)
    buf.write(struct.pack("<IQI", NETWORK_VERSION, seed, len(spec_bytes)))
    buf.write(spec_bytes)
    for arr in params.arrays():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_network(data: bytes) -> tuple[NetworkSpec, NetworkParams]:
    if data[:4] != NETWORK_MAGIC:
        raise ValueError("not a network checkpoint (bad magic)")
    version, seed, n = struct.unpack_from("<IQI", data, 4)
    if version != NETWORK_VERSION:
        raise ValueError(f"unsupported network checkpoint version {version}")
    off = 4 + struct.calcsize("<IQI")
    spec = NetworkSpec.from_json(data[off : off + n].decode("utf-8"))
    off += n
    template = init_params(spec, 0)
    weights, biases = [], []
    for w, b in zip(template.weights, template.biases):
        if w is None:
            weights.append(None)
            biases.append(None)
            continue
        for shape, dest in ((w.shape, weights), (b.shape, biases)):
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
            dest.append(arr)
            off += 8 * count
    if off != len(data):
        raise ValueError("trailing bytes in network checkpoint")
    return spec, NetworkParams(weights, biases, seed)


def save_network(path, spec: NetworkSpec, params: NetworkParams) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_network(spec, params))


def load_network(path) -> tuple[NetworkSpec, NetworkParams]:
    with open(path, "rb") as fh:
        return loads_network(fh.read())
