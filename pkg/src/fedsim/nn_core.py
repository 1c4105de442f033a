"""Small float64 neural-net engine with exact analytic gradients.

Every model parameter lives in a single flat vector (ParamVector) so that
client updates can be aggregated coordinate-wise by the server. Layers are
declared as frozen dataclasses in a ModelSpec; the forward/backward passes
walk the layer list and cache activations. Gradients are exact (checked
against central finite differences in the test suite), and every source of
randomness (dropout masks, minibatch order) comes from an injected
numpy Generator so training is reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# ---------------------------------------------------------------------------
# layer declarations


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Conv2d:
    """Valid convolution, stride 1, square kernel."""

    in_channels: int
    out_channels: int
    kernel: int


@dataclass(frozen=True)
class MaxPool2d:
    size: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Dropout:
    """Inverted dropout: kept activations are scaled by 1/(1-rate)."""

    rate: float


@dataclass(frozen=True)
class Flatten:
    pass


def _walk_shapes(input_shape, layers, num_classes):
    """Propagate the activation shape through the layer list, or raise."""
    shape = tuple(input_shape)
    if len(shape) not in (2, 3):
        raise ConfigError(f"input_shape must be (H, W) or (C, H, W), got {shape}")
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv2d):
            if len(shape) != 3:
                raise ConfigError(f"layer {i} (Conv2d) needs (C, H, W) input, got {shape}")
            c, h, w = shape
            if c != layer.in_channels:
                raise ConfigError(
                    f"layer {i} (Conv2d) expects {layer.in_channels} channels, got {c}"
                )
            if h < layer.kernel or w < layer.kernel:
                raise ConfigError(f"layer {i} (Conv2d) kernel {layer.kernel} exceeds input {shape}")
            shape = (layer.out_channels, h - layer.kernel + 1, w - layer.kernel + 1)
        elif isinstance(layer, MaxPool2d):
            if len(shape) != 3:
                raise ConfigError(f"layer {i} (MaxPool2d) needs (C, H, W) input, got {shape}")
            c, h, w = shape
            if h % layer.size or w % layer.size:
                raise ConfigError(
                    f"layer {i} (MaxPool2d) size {layer.size} does not divide input {shape}"
                )
            shape = (c, h // layer.size, w // layer.size)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Dense):
            if len(shape) != 1 or shape[0] != layer.in_dim:
                raise ConfigError(
                    f"layer {i} (Dense) expects flat input of {layer.in_dim}, got {shape}"
                )
            shape = (layer.out_dim,)
        elif isinstance(layer, Relu):
            pass
        elif isinstance(layer, Dropout):
            if not 0.0 <= layer.rate < 1.0:
                raise ConfigError(f"layer {i} (Dropout) rate must be in [0, 1), got {layer.rate}")
        else:
            raise ConfigError(f"layer {i}: unknown layer type {type(layer).__name__}")
    if shape != (num_classes,):
        raise ConfigError(f"final activation shape {shape} != (num_classes={num_classes},)")


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    layers: tuple
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        _walk_shapes(self.input_shape, self.layers, self.num_classes)

    def shape_spec(self):
        """Ordered (name, shape) pairs for every parameter tensor."""
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                out.append((f"dense{i}.w", (layer.in_dim, layer.out_dim)))
                out.append((f"dense{i}.b", (layer.out_dim,)))
            elif isinstance(layer, Conv2d):
                out.append(
                    (f"conv{i}.w", (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel))
                )
                out.append((f"conv{i}.b", (layer.out_channels,)))
        return tuple(out)

    def num_params(self):
        return sum(int(np.prod(s)) for _, s in self.shape_spec())


def mlp_spec(input_shape=(28, 28), hidden=(128, 64), num_classes=10, dropout=0.25):
    """Fully-connected net with ReLU hiddens and dropout before the head."""
    dims = [int(np.prod(input_shape))] + list(hidden)
    layers = [Flatten()]
    for a, b in zip(dims[:-1], dims[1:]):
        layers += [Dense(a, b), Relu()]
    if dropout > 0:
        layers.append(Dropout(dropout))
    layers.append(Dense(dims[-1], num_classes))
    return ModelSpec(tuple(input_shape), tuple(layers), num_classes)


def cnn_spec(input_shape=(1, 28, 28), num_classes=10, dropout=0.5):
    """Two 3x3 conv layers (32, 64), 2x2 max-pool, 128-wide head."""
    c, h, w = input_shape
    h2, w2 = (h - 4) // 2, (w - 4) // 2
    layers = (
        Conv2d(c, 32, 3),
        Relu(),
        Conv2d(32, 64, 3),
        Relu(),
        MaxPool2d(2),
        Flatten(),
        Dense(64 * h2 * w2, 128),
        Relu(),
        Dropout(dropout),
        Dense(128, num_classes),
    )
    return ModelSpec(tuple(input_shape), layers, num_classes)


# ---------------------------------------------------------------------------
# flat parameter storage


@dataclass
class ParamVector:
    """All parameters of one model, flattened to one float64 vector."""

    values: np.ndarray
    shape_spec: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ConfigError(f"ParamVector values must be 1-d, got shape {self.values.shape}")
        want = sum(int(np.prod(s)) for _, s in self.shape_spec)
        if self.values.size != want:
            raise ConfigError(
                f"ParamVector has {self.values.size} values, shape_spec wants {want}"
            )

    def copy(self):
        return ParamVector(self.values.copy(), self.shape_spec)

    def norm(self):
        return float(np.linalg.norm(self.values))


def unflatten(pv: ParamVector):
    """Views into pv.values, one array per parameter tensor."""
    out = []
    off = 0
    for _, shape in pv.shape_spec:
        n = int(np.prod(shape))
        out.append(pv.values[off : off + n].reshape(shape))
        off += n
    return out


def flatten(tensors, shape_spec) -> ParamVector:
    """Inverse of unflatten; bit-exact round trip."""
    if len(tensors) != len(shape_spec):
        raise ConfigError(f"flatten got {len(tensors)} tensors for {len(shape_spec)} slots")
    parts = []
    for t, (name, shape) in zip(tensors, shape_spec):
        t = np.asarray(t, dtype=np.float64)
        if t.shape != tuple(shape):
            raise ConfigError(f"tensor for {name} has shape {t.shape}, want {tuple(shape)}")
        parts.append(t.reshape(-1))
    return ParamVector(np.concatenate(parts) if parts else np.zeros(0), shape_spec)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """He-style init: W ~ N(0, 2/fan_in), biases zero."""
    tensors = []
    for name, shape in spec.shape_spec():
        if name.endswith(".b"):
            tensors.append(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            tensors.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape))
    return flatten(tensors, spec.shape_spec())


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    inputs: np.ndarray  # [B, *input_shape], values in [0, 1]
    labels: np.ndarray  # [B] integer class ids

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)


def _check_batch(spec: ModelSpec, batch: Batch):
    x, y = batch.inputs, batch.labels
    want = tuple(spec.input_shape)
    if x.ndim == len(want) + 1 and x.shape[1:] == want:
        pass
    elif len(want) == 3 and want[0] == 1 and x.ndim == 3 and x.shape[1:] == want[1:]:
        x = x[:, None, :, :]  # grayscale [B,H,W] -> [B,1,H,W]
    else:
        raise ConfigError(f"batch inputs {x.shape} do not match input_shape {want}")
    if y.ndim != 1 or y.shape[0] != x.shape[0]:
        raise ConfigError(f"batch labels {y.shape} do not match inputs {x.shape}")
    if y.size and (y.min() < 0 or y.max() >= spec.num_classes):
        raise ConfigError(f"batch labels outside [0, {spec.num_classes})")
    return x, y


# ---------------------------------------------------------------------------
# forward / backward


def _layer_forward(layer, x, train_mode, rng):
    """Returns (output, cache). cache holds what backward needs."""
    if isinstance(layer, _BoundDense):
        out = x @ layer.w + layer.b
        return out, x
    if isinstance(layer, _BoundConv):
        cols = _im2col(x, layer.spec.kernel)
        out = np.tensordot(cols, layer.w, axes=([1, 2, 3], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + layer.b[None, :, None, None]
        return out, (x.shape, cols)
    if isinstance(layer, Relu):
        mask = x > 0
        return x * mask, mask
    if isinstance(layer, Dropout):
        if not train_mode or layer.rate == 0.0:
            return x, None
        if rng is None:
            raise ConfigError("dropout in train mode needs an rng")
        keep = (rng.random(x.shape) >= layer.rate) / (1.0 - layer.rate)
        return x * keep, keep
    if isinstance(layer, MaxPool2d):
        s = layer.size
        b, c, h, w = x.shape
        xr = (
            x.reshape(b, c, h // s, s, w // s, s)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h // s, w // s, s * s)
        )
        idx = xr.argmax(axis=-1)  # first max wins on ties
        out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), x.shape
    raise ConfigError(f"unknown layer {layer!r}")


def _layer_backward(layer, dout, cache):
    """Returns (dinput, dparams or None)."""
    if isinstance(layer, _BoundDense):
        x = cache
        return dout @ layer.w.T, (x.T @ dout, dout.sum(axis=0))
    if isinstance(layer, _BoundConv):
        x_shape, cols = cache
        k = layer.spec.kernel
        dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 4, 5]))
        db = dout.sum(axis=(0, 2, 3))
        dx = np.zeros(x_shape)
        ho, wo = dout.shape[2], dout.shape[3]
        for di in range(k):
            for dj in range(k):
                # dout [B,O,Ho,Wo] x W[:, :, di, dj] [O,C] -> [B,Ho,Wo,C]
                contrib = np.tensordot(dout, layer.w[:, :, di, dj], axes=([1], [0]))
                dx[:, :, di : di + ho, dj : dj + wo] += contrib.transpose(0, 3, 1, 2)
        return dx, (dw, db)
    if isinstance(layer, Relu):
        return dout * cache, None
    if isinstance(layer, Dropout):
        return (dout if cache is None else dout * cache), None
    if isinstance(layer, MaxPool2d):
        x_shape, idx = cache
        s = layer.size
        b, c, h, w = x_shape
        dxr = np.zeros((b, c, h // s, w // s, s * s))
        np.put_along_axis(dxr, idx[..., None], dout[..., None], axis=-1)
        dx = (
            dxr.reshape(b, c, h // s, w // s, s, s)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h, w)
        )
        return dx, None
    if isinstance(layer, Flatten):
        return dout.reshape(cache), None
    raise ConfigError(f"unknown layer {layer!r}")


class _BoundDense:
    """Dense layer with its weight views attached for one pass."""

    __slots__ = ("spec", "w", "b")

    def __init__(self, spec, w, b):
        self.spec, self.w, self.b = spec, w, b


class _BoundConv:
    __slots__ = ("spec", "w", "b")

    def __init__(self, spec, w, b):
        self.spec, self.w, self.b = spec, w, b


def _im2col(x, k):
    """[B,C,H,W] -> [B,C,k,k,H',W'] patch tensor (copies, no aliasing)."""
    b, c, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    cols = np.empty((b, c, k, k, ho, wo))
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = x[:, :, di : di + ho, dj : dj + wo]
    return cols


def _bind_layers(params: ParamVector, spec: ModelSpec):
    """Attach parameter views to the parameterized layers, in spec order."""
    tensors = unflatten(params)
    if params.shape_spec != spec.shape_spec():
        raise ConfigError("ParamVector shape_spec does not match ModelSpec")
    bound = []
    ti = 0
    for layer in spec.layers:
        if isinstance(layer, Dense):
            bound.append(_BoundDense(layer, tensors[ti], tensors[ti + 1]))
            ti += 2
        elif isinstance(layer, Conv2d):
            bound.append(_BoundConv(layer, tensors[ti], tensors[ti + 1]))
            ti += 2
        else:
            bound.append(layer)
    return bound


def _run_forward(params, spec, batch, train_mode, rng):
    x, y = _check_batch(spec, batch)
    bound = _bind_layers(params, spec)
    caches = []
    for layer in bound:
        x, cache = _layer_forward(layer, x, train_mode, rng)
        caches.append(cache)
    return bound, caches, x, y


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient wrt logits (already /B)."""
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    logp = logits - m - np.log(z)
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    dlogits = e / z
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def forward(params: ParamVector, spec: ModelSpec, batch: Batch, train_mode=False, rng=None):
    """Returns (mean loss, logits [B, num_classes])."""
    _, _, logits, y = _run_forward(params, spec, batch, train_mode, rng)
    loss, _ = softmax_xent(logits, y)
    return loss, logits


def loss_and_grad(params, spec, batch, train_mode=True, rng=None):
    """One forward+backward pass sharing dropout masks; returns (loss, grad)."""
    bound, caches, logits, y = _run_forward(params, spec, batch, train_mode, rng)
    loss, d = softmax_xent(logits, y)
    grads = [None] * len(bound)
    for i in range(len(bound) - 1, -1, -1):
        d, gp = _layer_backward(bound[i], d, caches[i])
        grads[i] = gp
    tensors = []
    for g in grads:
        if g is not None:
            tensors.extend(g)
    return loss, flatten(tensors, spec.shape_spec())


def backward(params, spec, batch, train_mode=True, rng=None) -> ParamVector:
    """Gradient of the mean cross-entropy wrt every parameter."""
    return loss_and_grad(params, spec, batch, train_mode, rng)[1]


# ---------------------------------------------------------------------------
# local training


@dataclass
class Update:
    """One agent's contribution for a round: delta = w_local - w_global."""

    agent_id: int
    delta: ParamVector
    num_samples: int


def local_train(
    start: ParamVector,
    spec: ModelSpec,
    inputs: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    batch_size: int,
    lr_local: float,
    clip_radius=None,
    negate_loss=False,
    rng=None,
    agent_id=0,
) -> Update:
    """SGD from `start`, returning the resulting delta as an Update.

    clip_radius, if given, bounds ||w - start||_2 after every step by
    rescaling the displacement (projected descent); clip_radius=0 pins the
    model to its start. negate_loss ascends the objective instead of
    descending it, which models an adversary maximizing its own loss.
    """
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if lr_local <= 0:
        raise ConfigError(f"lr_local must be > 0, got {lr_local}")
    if clip_radius is not None and clip_radius < 0:
        raise ConfigError(f"clip_radius must be >= 0, got {clip_radius}")
    n = len(labels)
    if n == 0:
        raise ConfigError("local_train needs a non-empty dataset")
    if rng is None:
        rng = np.random.default_rng()
    w = start.copy()
    sign = 1.0 if negate_loss else -1.0
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            sel = order[lo : lo + batch_size]
            batch = Batch(inputs[sel], labels[sel])
            _, grad = loss_and_grad(w, spec, batch, train_mode=True, rng=rng)
            w.values += sign * lr_local * grad.values
            if clip_radius is not None:
                disp = w.values - start.values
                nrm = np.linalg.norm(disp)
                if nrm > clip_radius:
                    scale = clip_radius / nrm if nrm > 0 else 0.0
                    w.values = start.values + disp * scale
    delta = ParamVector(w.values - start.values, start.shape_spec)
    return Update(agent_id=agent_id, delta=delta, num_samples=n)
