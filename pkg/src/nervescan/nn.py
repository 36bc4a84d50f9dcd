"""Small convolutional network with hand-written backpropagation and SGD.

Tensors are plain float64 numpy arrays. The public functions take
``(N, C, H, W)`` batches or single ``(C, H, W)`` patches; layers work on
channels-last ``(N, H, W, C)`` activations internally. The default stack is

    Conv3x3(1->8)  MaxPool2 ReLU
    Conv3x3(8->16) MaxPool2 ReLU
    Conv3x3(16->32) MaxPool2 ReLU
    Flatten  Dense(2048->128) ReLU Dropout(0.5)  Dense(128->2)  softmax

so a 64x64 patch reaches an 8x8 map before flattening.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError, ShapeError

NUM_CLASSES = 2
MAGIC = b"SNTR1"


def softmax(logits):
    """Numerically stable softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise InvalidInputError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax input must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def glorot_uniform(rng, shape, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


# ---------------------------------------------------------------- layers
#
# Layers operate on channels-last batches (N, H, W, C) internally; the public
# entry points accept and document channels-first (C, H, W) patches.


class Layer:
    tag = 0
    name = "layer"

    def params(self):
        return []

    def output_shape(self, shape):
        return shape

    def forward(self, x, train=False, rng=None):
        return self.forward_cached(x, train, rng)[0]

    def forward_cached(self, x, train, rng):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError

    def __repr__(self):
        return self.name


class Conv2D(Layer):
    """3x3 cross-correlation, stride 1, zero 'same' padding.

    ``weights`` has shape ``(out_channels, in_channels, 3, 3)``.
    """

    tag = 1
    name = "conv"
    k = 3

    def __init__(self, in_channels, out_channels, weights=None, bias=None):
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        shape = (self.out_channels, self.in_channels, self.k, self.k)
        self.weights = np.zeros(shape) if weights is None else np.array(weights, dtype=np.float64)
        self.bias = np.zeros(self.out_channels) if bias is None else np.array(bias, dtype=np.float64)
        if self.weights.shape != shape or self.bias.shape != (self.out_channels,):
            raise ShapeError(f"conv parameters do not match {shape}")

    def params(self):
        return [self.weights, self.bias]

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ShapeError(
                f"{self!r} expects {self.in_channels} input channels, got shape {tuple(shape)}")
        return (self.out_channels, shape[1], shape[2])

    def _matrix(self):
        # rows ordered (c, ki, kj) to match the column layout of _im2col
        return self.weights.reshape(self.out_channels, -1).T

    @staticmethod
    def _im2col(xp):
        n, hp, wp, c = xp.shape
        return sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(n * (hp - 2) * (wp - 2), c * 9)

    def valid(self, xp):
        """Unpadded correlation of an already padded ``(N, H+2, W+2, C)`` batch."""
        n, hp, wp, _ = xp.shape
        out = self._im2col(xp) @ self._matrix()
        out += self.bias
        return out.reshape(n, hp - 2, wp - 2, self.out_channels)

    def forward(self, x, train=False, rng=None):
        return self.valid(np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0))))

    def forward_cached(self, x, train, rng):
        n, h, w, _ = x.shape
        cols = self._im2col(np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0))))
        out = cols @ self._matrix()
        out += self.bias
        return out.reshape(n, h, w, self.out_channels), (x.shape, cols)

    def backward(self, dout, cache):
        shape, cols = cache
        n, h, w, c = shape
        d = dout.reshape(n * h * w, self.out_channels)
        dw = (cols.T @ d).T.reshape(self.weights.shape)
        db = d.sum(axis=0)
        dcols = (d @ self._matrix().T).reshape(n, h, w, c, 3, 3)
        dxp = np.zeros((n, h + 2, w + 2, c))
        for i in range(3):
            for j in range(3):
                dxp[:, i:i + h, j:j + w, :] += dcols[..., i, j]
        return dxp[:, 1:-1, 1:-1, :], [dw, db]

    def __repr__(self):
        return f"conv({self.in_channels}->{self.out_channels})"


class MaxPool2D(Layer):
    tag = 2
    name = "maxpool"
    size = 2

    def output_shape(self, shape):
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise ShapeError(f"{self!r} needs an even (C, H, W) map, got {tuple(shape)}")
        return (shape[0], shape[1] // 2, shape[2] // 2)

    @staticmethod
    def _quads(x):
        return x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]

    def forward(self, x, train=False, rng=None):
        a, b, c, d = self._quads(x)
        return np.maximum(np.maximum(a, b), np.maximum(c, d))

    def forward_cached(self, x, train, rng):
        out = self.forward(x)
        # gradient goes to the first maximal entry of each 2x2 block
        taken = np.zeros(out.shape, dtype=bool)
        masks = []
        for q in self._quads(x):
            m = (q == out) & ~taken
            taken |= m
            masks.append(m)
        return out, (x.shape, masks)

    def backward(self, dout, cache):
        shape, masks = cache
        dx = np.zeros(shape)
        dx[:, 0::2, 0::2] = dout * masks[0]
        dx[:, 0::2, 1::2] = dout * masks[1]
        dx[:, 1::2, 0::2] = dout * masks[2]
        dx[:, 1::2, 1::2] = dout * masks[3]
        return dx, []


class ReLU(Layer):
    tag = 3
    name = "relu"

    def forward(self, x, train=False, rng=None):
        return np.maximum(x, 0.0)

    def forward_cached(self, x, train, rng):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, cache):
        return dout * cache, []


class Flatten(Layer):
    """Flattens in (C, H, W) row-major order."""

    tag = 4
    name = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward_cached(self, x, train, rng):
        return x.transpose(0, 3, 1, 2).reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        n, h, w, c = cache
        return dout.reshape(n, c, h, w).transpose(0, 2, 3, 1), []


class Dense(Layer):
    tag = 5
    name = "dense"

    def __init__(self, in_size, out_size, weights=None, bias=None):
        self.in_size = int(in_size)
        self.out_size = int(out_size)
        shape = (self.in_size, self.out_size)
        self.weights = np.zeros(shape) if weights is None else np.array(weights, dtype=np.float64)
        self.bias = np.zeros(self.out_size) if bias is None else np.array(bias, dtype=np.float64)
        if self.weights.shape != shape or self.bias.shape != (self.out_size,):
            raise ShapeError(f"dense parameters do not match {shape}")

    def params(self):
        return [self.weights, self.bias]

    def output_shape(self, shape):
        if tuple(shape) != (self.in_size,):
            raise ShapeError(f"{self!r} expects a flat input of {self.in_size}, got {tuple(shape)}")
        return (self.out_size,)

    def forward_cached(self, x, train, rng):
        return x @ self.weights + self.bias, x

    def backward(self, dout, cache):
        return dout @ self.weights.T, [cache.T @ dout, dout.sum(axis=0)]

    def __repr__(self):
        return f"dense({self.in_size}->{self.out_size})"


class Dropout(Layer):
    """Inverted dropout: identity at inference, scaled mask in training."""

    tag = 6
    name = "dropout"

    def __init__(self, rate=0.5):
        if not 0.0 <= rate < 1.0:
            raise InvalidInputError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward_cached(self, x, train, rng):
        if not train or self.rate == 0.0:
            return x, None
        if rng is None:
            raise InvalidInputError("train-mode dropout needs an rng")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, dout, cache):
        return (dout if cache is None else dout * cache), []

    def __repr__(self):
        return f"dropout({self.rate})"


LAYER_TAGS = {cls.tag: cls for cls in (Conv2D, MaxPool2D, ReLU, Flatten, Dense, Dropout)}


# ---------------------------------------------------------------- network


class Network:
    """An ordered layer stack ending in a K-way softmax."""

    def __init__(self, layers, input_shape=(1, 64, 64)):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer!r}): {exc}") from None
        if len(shape) != 1:
            raise ShapeError(f"network output must be a flat vector, got {shape}")
        self.num_classes = shape[0]

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def copy(self):
        return copy.deepcopy(self)

    def __repr__(self):
        return f"Network({' '.join(map(repr, self.layers))})"


def build_network(seed=0, widths=(8, 16, 32), hidden=128, dropout=0.5,
                  input_size=64, num_classes=NUM_CLASSES):
    """Default patch classifier with Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    c = 1
    for width in widths:
        w = glorot_uniform(rng, (width, c, 3, 3), c * 9, width * 9)
        layers += [Conv2D(c, width, w), MaxPool2D(), ReLU()]
        c = width
    side = input_size // 2 ** len(widths)
    flat = c * side * side
    layers += [
        Flatten(),
        Dense(flat, hidden, glorot_uniform(rng, (flat, hidden), flat, hidden)),
        ReLU(),
        Dropout(dropout),
        Dense(hidden, num_classes, glorot_uniform(rng, (hidden, num_classes), hidden, num_classes)),
    ]
    return Network(layers, (1, input_size, input_size))


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        return x[None], True
    if x.ndim == 4 and x.shape[1:] == net.input_shape:
        return x, False
    raise ShapeError(f"layer 0 ({net.layers[0]!r}): input shape {x.shape} does not match "
                     f"network input {net.input_shape}")


def _logits(net, xb, train, rng, keep_caches=False):
    caches = []
    h = xb.transpose(0, 2, 3, 1)
    for layer in net.layers:
        if keep_caches:
            h, cache = layer.forward_cached(h, train, rng)
            caches.append(cache)
        else:
            h = layer.forward(h, train, rng)
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("non-finite logits")
    return h, caches


def forward(net, x, mode="infer", rng=None):
    """Class probabilities for one patch ``(C, H, W)`` or a batch ``(N, C, H, W)``.

    ``mode="train"`` applies dropout drawn from ``rng``; ``"infer"`` is
    deterministic.
    """
    if mode not in ("train", "infer"):
        raise InvalidInputError(f"unknown mode {mode!r}")
    xb, single = _as_batch(net, x)
    logits, _ = _logits(net, xb, mode == "train", rng)
    p = softmax(logits)
    return p[0] if single else p


def predict_proba(net, patches, batch_size=256):
    """Inference-mode probabilities for a large ``(N, C, H, W)`` array, chunked."""
    patches = np.asarray(patches)
    out = np.empty((len(patches), net.num_classes))
    for start in range(0, len(patches), batch_size):
        chunk = patches[start:start + batch_size].astype(np.float64)
        out[start:start + batch_size] = forward(net, chunk)
    return out


def loss_and_grads(net, xb, targets, mode="infer", rng=None):
    """Mean cross-entropy over a batch and the matching parameter gradients."""
    xb, _ = _as_batch(net, xb)
    targets = np.atleast_1d(np.asarray(targets))
    if targets.shape != (len(xb),):
        raise ShapeError(f"expected {len(xb)} targets, got {targets.shape}")
    if np.any((targets < 0) | (targets >= net.num_classes)) or not np.issubdtype(targets.dtype, np.integer):
        raise InvalidInputError(f"target classes must be integers in [0, {net.num_classes})")
    logits, caches = _logits(net, xb, mode == "train", rng, keep_caches=True)
    p = softmax(logits)
    n = len(xb)
    rows = np.arange(n)
    # log-sum-exp form keeps the loss finite when p_target underflows
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z[rows, targets] - np.log(np.exp(z).sum(axis=1))
    loss = float(-logp.mean())
    d = p.copy()
    d[rows, targets] -= 1.0
    d /= n
    grads = []
    for layer, cache in zip(reversed(net.layers), reversed(caches)):
        d, g = layer.backward(d, cache)
        grads = g + grads
    return loss, grads


def backward(net, x, target_class, mode="infer", rng=None):
    """Gradients of ``-log p[target_class]`` for a single patch.

    Returns ``(grads, loss)`` with one array per entry of ``net.params()``.
    """
    if not (isinstance(target_class, (int, np.integer)) and 0 <= target_class < net.num_classes):
        raise InvalidInputError(f"target class {target_class!r} out of range [0, {net.num_classes})")
    loss, grads = loss_and_grads(net, x, np.array([target_class]), mode, rng)
    return grads, loss


def sgd_step(net, grads, learning_rate):
    """Return a new network with ``w - learning_rate * g`` applied to every parameter."""
    new = net.copy()
    _sgd_inplace(new, grads, learning_rate)
    return new


def _sgd_inplace(net, grads, learning_rate):
    params = net.params()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ShapeError("gradient set is not aligned with network parameters")
    for p, g in zip(params, grads):
        p -= learning_rate * g


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 16
    epochs: int = 50
    dropout_rate: float = 0.5
    rng_seed: int = 0

    def validate(self):
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive", "learning_rate")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be positive", "batch_size")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be positive", "epochs")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidInputError("dropout_rate must be in [0, 1)", "dropout_rate")


def train(net, patches, labels, cfg=None, log=None):
    """Minibatch SGD on cross-entropy. Returns ``(trained_net, epoch_losses)``.

    Shuffling and dropout draw from one generator seeded by ``cfg.rng_seed``;
    the input network is left untouched.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    patches = np.asarray(patches, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(patches) == 0:
        raise InvalidInputError("empty training set")
    if len(patches) != len(labels):
        raise InvalidInputError("patches and labels differ in length")
    if np.any((labels < 0) | (labels >= net.num_classes)):
        raise InvalidInputError("labels out of range")
    net = net.copy()
    for layer in net.layers:
        if isinstance(layer, Dropout):
            layer.rate = cfg.dropout_rate
    rng = np.random.default_rng(cfg.rng_seed)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(patches))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(net, patches[idx], labels[idx], "train", rng)
            _sgd_inplace(net, grads, cfg.learning_rate)
            total += loss * len(idx)
        history.append(total / len(patches))
        if log is not None:
            log(epoch, history[-1])
    return net, history


def accuracy(net, patches, labels):
    pred = predict_proba(net, patches).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


# ---------------------------------------------------------------- serialization


def _shape_ints(layer):
    if isinstance(layer, Conv2D):
        return [layer.in_channels, layer.out_channels, layer.k]
    if isinstance(layer, Dense):
        return [layer.in_size, layer.out_size]
    if isinstance(layer, MaxPool2D):
        return [layer.size]
    return []


_NUM_SHAPE_INTS = {1: 3, 2: 1, 3: 0, 4: 0, 5: 2, 6: 0}


def dumps(net):
    """Binary form: magic, input shape, then per layer tag/shape ints/float64 params."""
    out = [MAGIC, struct.pack("<B", len(net.input_shape)),
           struct.pack(f"<{len(net.input_shape)}i", *net.input_shape)]
    for layer in net.layers:
        ints = _shape_ints(layer)
        out.append(struct.pack("<B", layer.tag))
        out.append(struct.pack(f"<{len(ints)}i", *ints))
        values = [p.ravel() for p in layer.params()]
        if isinstance(layer, Dropout):
            values = [np.array([layer.rate])]
        for v in values:
            out.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return b"".join(out)


def loads(data):
    if not data.startswith(MAGIC):
        raise InvalidInputError("not a network file (bad magic)")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise InvalidInputError("truncated network file")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    def floats(count):
        nonlocal pos
        if pos + 8 * count > len(data):
            raise InvalidInputError("truncated network file")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        return arr

    (ndim,) = take("<B")
    input_shape = take(f"<{ndim}i")
    layers = []
    while pos < len(data):
        (tag,) = take("<B")
        if tag not in _NUM_SHAPE_INTS:
            raise InvalidInputError(f"unknown layer tag {tag}")
        ints = take(f"<{_NUM_SHAPE_INTS[tag]}i")
        if tag == Conv2D.tag:
            cin, cout, k = ints
            w = floats(cout * cin * k * k).reshape(cout, cin, k, k)
            layers.append(Conv2D(cin, cout, w, floats(cout)))
        elif tag == Dense.tag:
            nin, nout = ints
            w = floats(nin * nout).reshape(nin, nout)
            layers.append(Dense(nin, nout, w, floats(nout)))
        elif tag == Dropout.tag:
            layers.append(Dropout(float(floats(1)[0])))
        else:
            layers.append(LAYER_TAGS[tag]())
    return Network(layers, input_shape)


def save(net, path):
    with open(path, "wb") as f:
        f.write(dumps(net))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
