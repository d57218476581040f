"""A small piecewise-linear convolutional classifier written directly in numpy.

The network is a plain sequence of layers. Every nonlinearity is a ReLU or a
2x2 max-pool, so once the gate pattern of an input is recorded (which ReLUs
are on, which pool slot won) the whole map from pixels to logits is affine.
That pattern is what :func:`local_affine_output` and friends freeze.

Conventions
-----------
* Inputs are float64 arrays shaped ``(batch, channels, height, width)``; a
  single image may be passed without the batch axis.
* Class labels are 0-based indices (MNIST digit ``d`` is class ``d``).
* ReLU'(0) is 0 and max-pool ties go to the first slot in row-major order.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

U_MIN, U_MAX = 0.0, 1.0


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    kind = "layer"
    params: dict

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        """Return ``(out, gate)``; ``gate`` is whatever backward needs."""
        raise NotImplementedError

    def forward_frozen(self, x, gate):
        """Apply the layer with the nonlinearity fixed to ``gate``."""
        return self.forward(x)[0]

    def backward(self, g, gate):
        """Vector-Jacobian product w.r.t. the layer input.

        ``g`` may carry extra leading axes in front of the batch axis; gates
        broadcast over them.
        """
        raise NotImplementedError

    def param_grads(self, x, g):
        return {}


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, weight, bias):
        self.params = {"weight": np.asarray(weight, np.float64), "bias": np.asarray(bias, np.float64)}

    @property
    def k(self):
        return self.params["weight"].shape[-1]

    def out_shape(self, in_shape):
        c, h, w = in_shape
        o, ci, k, _ = self.params["weight"].shape
        if c != ci:
            raise ShapeError(f"conv expects {ci} channels, got {c}")
        return (o, h - k + 1, w - k + 1)

    def forward(self, x):
        win = sliding_window_view(x, (self.k, self.k), axis=(-2, -1))
        # win: (..., C, Ho, Wo, k, k)
        out = np.tensordot(win, self.params["weight"], axes=([-5, -2, -1], [1, 2, 3]))
        out = np.moveaxis(out, -1, -3) + self.params["bias"][:, None, None]
        return out, None

    def backward(self, g, gate):
        k = self.k
        pad = [(0, 0)] * (g.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
        gp = np.pad(g, pad)
        win = sliding_window_view(gp, (k, k), axis=(-2, -1))
        flipped = self.params["weight"][:, :, ::-1, ::-1]
        dx = np.tensordot(win, flipped, axes=([-5, -2, -1], [0, 2, 3]))
        return np.moveaxis(dx, -1, -3)

    def param_grads(self, x, g):
        win = sliding_window_view(x, (self.k, self.k), axis=(-2, -1))
        dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        return {"weight": dw, "bias": g.sum(axis=(0, 2, 3))}


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        self.params = {}

    def forward(self, x):
        gate = x > 0
        return x * gate, gate

    def forward_frozen(self, x, gate):
        return x * gate

    def backward(self, g, gate):
        return g * gate


class MaxPool2(Layer):
    kind = "max_pool"

    def __init__(self):
        self.params = {}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ShapeError("max_pool needs even spatial dims")
        return (c, h // 2, w // 2)

    @staticmethod
    def _blocks(x):
        *lead, h, w = x.shape
        b = x.reshape(*lead, h // 2, 2, w // 2, 2)
        b = np.moveaxis(b, -3, -2)
        return b.reshape(*lead, h // 2, w // 2, 4)

    def forward(self, x):
        b = self._blocks(x)
        idx = np.argmax(b, axis=-1)
        return np.take_along_axis(b, idx[..., None], axis=-1)[..., 0], idx

    def forward_frozen(self, x, gate):
        b = self._blocks(x)
        return np.take_along_axis(b, gate[..., None], axis=-1)[..., 0]

    def backward(self, g, gate):
        *lead, h2, w2 = g.shape
        idx = np.broadcast_to(gate, g.shape)
        out = np.zeros((*lead, h2, w2, 4))
        np.put_along_axis(out, idx[..., None], g[..., None], axis=-1)
        out = out.reshape(*lead, h2, w2, 2, 2)
        out = np.moveaxis(out, -2, -3)
        return out.reshape(*lead, h2 * 2, w2 * 2)


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        self.params = {}
        self._in = None

    def out_shape(self, in_shape):
        self._in = tuple(in_shape)
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(*x.shape[:-3], -1), x.shape[-3:]

    def backward(self, g, gate):
        return g.reshape(*g.shape[:-1], *gate)


class Dense(Layer):
    kind = "dense"

    def __init__(self, weight, bias):
        self.params = {"weight": np.asarray(weight, np.float64), "bias": np.asarray(bias, np.float64)}

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.params["weight"].shape[1]:
            raise ShapeError(f"dense expects ({self.params['weight'].shape[1]},), got {in_shape}")
        return (self.params["weight"].shape[0],)

    def forward(self, x):
        return x @ self.params["weight"].T + self.params["bias"], None

    def backward(self, g, gate):
        return g @ self.params["weight"]

    def param_grads(self, x, g):
        return {"weight": g.T @ x, "bias": g.sum(axis=0)}


LAYER_KINDS = {c.kind: c for c in (Conv2D, ReLU, MaxPool2, Flatten, Dense)}


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


@dataclass
class Network:
    """Sequential classifier.

    ``feature_layer`` is the index of the layer whose *output* is the feature
    vector h(x); the layers after it must be a single :class:`Dense` producing
    the logits.
    """

    layers: list
    input_shape: tuple
    feature_layer: int
    hist_layer: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.out_shape(shape)
            self.shapes.append(shape)
        tail = self.layers[self.feature_layer + 1 :]
        if len(tail) != 1 or not isinstance(tail[0], Dense):
            raise ShapeError("exactly one dense layer must follow the feature layer")

    @property
    def n_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def n_features(self) -> int:
        return self.shapes[self.feature_layer + 1][0]

    @property
    def n_pixels(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def head(self) -> Dense:
        return self.layers[-1]

    def batchify(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape or x.shape == (self.n_pixels,):
            x = x.reshape(1, *self.input_shape)
        elif x.ndim == 2 and x.shape[1] == self.n_pixels:
            x = x.reshape(-1, *self.input_shape)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected input {self.input_shape}, got {x.shape}")
        return x

    def run(self, x, stop=None):
        """Forward pass recording every layer input and gate."""
        x = self.batchify(x)
        acts, gates = [x], []
        stop = len(self.layers) if stop is None else stop
        for layer in self.layers[:stop]:
            x, gate = layer.forward(x)
            acts.append(x)
            gates.append(gate)
        return acts, gates

    def backprop(self, g, gates, start=None):
        """Push cotangent ``g`` from the output of layer ``start-1`` back to the input."""
        start = len(self.layers) if start is None else start
        for layer, gate in zip(self.layers[:start][::-1], gates[:start][::-1]):
            g = layer.backward(g, gate)
        return g

    def copy(self):
        layers = []
        for layer in self.layers:
            cls = type(layer)
            if layer.params:
                layers.append(cls(**{k: v.copy() for k, v in layer.params.items()}))
            else:
                layers.append(cls())
        return Network(layers, self.input_shape, self.feature_layer, self.hist_layer, dict(self.meta))


def lenet(n_classes=10, input_shape=(1, 28, 28), seed=0) -> Network:
    """LeNet-5 shaped net: conv6@5 - pool - conv16@5 - pool - 120 - 84 - N."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    flat = 16 * (((h - 4) // 2 - 4) // 2) * (((w - 4) // 2 - 4) // 2)
    layers = [
        Conv2D(he((6, c, 5, 5), c * 25), np.zeros(6)),
        ReLU(),
        MaxPool2(),
        Conv2D(he((16, 6, 5, 5), 150), np.zeros(16)),
        ReLU(),
        MaxPool2(),
        Flatten(),
        Dense(he((120, flat), flat), np.zeros(120)),
        ReLU(),
        Dense(he((84, 120), 120), np.zeros(84)),
        ReLU(),
        Dense(he((n_classes, 84), 84) * 0.5, np.zeros(n_classes)),
    ]
    return Network(layers, input_shape, feature_layer=10, hist_layer=0)


def affine_net(weight, bias, input_shape=None) -> Network:
    """A single dense layer classifier, handy as a closed-form test subject."""
    weight = np.asarray(weight, np.float64)
    m = weight.shape[1]
    input_shape = input_shape or (1, 1, m)
    return Network([Flatten(), Dense(weight, bias)], input_shape, feature_layer=0)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def forward(net: Network, x, batch_size=1000) -> np.ndarray:
    """Logits f(x), shape ``(batch, N)``."""
    x = net.batchify(x)
    out = [net.run(x[i : i + batch_size])[0][-1] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.n_classes))


def predict(net, x, batch_size=1000) -> np.ndarray:
    return np.argmax(forward(net, x, batch_size), axis=1)


def feature(net: Network, x, batch_size=1000) -> np.ndarray:
    """Feature vector h(x): the activation entering the final dense layer."""
    x = net.batchify(x)
    out = [net.run(x[i : i + batch_size], stop=net.feature_layer + 1)[0][-1] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.n_features))


def layer_output(net: Network, x, layer: int) -> np.ndarray:
    x = net.batchify(x)
    return net.run(x, stop=layer + 1)[0][-1]


def cross_entropy(logits, labels) -> np.ndarray:
    logits = np.atleast_2d(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    return logz - z[np.arange(len(z)), labels]


def grad_input(net: Network, x, label) -> np.ndarray:
    """Gradient of softmax cross-entropy J(f(x), label) w.r.t. the pixels.

    ``label`` is a scalar or one label per image. Returns an array shaped like
    the batched input.
    """
    x = net.batchify(x)
    labels = np.broadcast_to(np.asarray(label), (len(x),))
    acts, gates = net.run(x)
    g = softmax(acts[-1])
    g[np.arange(len(x)), labels] -= 1.0
    return net.backprop(g, gates)


def loss_and_grad_input(net, x, label):
    x = net.batchify(x)
    labels = np.broadcast_to(np.asarray(label), (len(x),))
    acts, gates = net.run(x)
    logits = acts[-1]
    g = softmax(logits)
    g[np.arange(len(x)), labels] -= 1.0
    return cross_entropy(logits, labels), logits, net.backprop(g, gates)


# ---------------------------------------------------------------------------
# local affine maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LocalAffineMap:
    """y = a @ x + d, valid on the gate region of ``anchor``.

    Arrays carry a leading batch axis: ``a`` is ``(B, N, m)``, ``d`` is
    ``(B, N)``, ``anchor`` is ``(B, m)`` and ``y`` the logits at the anchor.
    """

    a: np.ndarray
    d: np.ndarray
    anchor: np.ndarray
    y: np.ndarray

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, np.float64).reshape(len(self.a), -1)
        return np.einsum("bnm,bm->bn", self.a, x) + self.d


FeatureAffineMap = LocalAffineMap


def _jacobian(net, x, upto):
    """Rows of d(layer ``upto`` output)/dx with gates frozen at x. Returns (J, out, gates)."""
    acts, gates = net.run(x, stop=upto + 1)
    out = acts[-1]
    n_out = out.shape[1]
    eye = np.broadcast_to(np.eye(n_out)[:, None, :], (n_out, len(x), n_out))
    jac = net.backprop(eye, gates, start=upto + 1)  # (n_out, B, C, H, W)
    jac = np.moveaxis(jac.reshape(n_out, len(x), -1), 0, 1)
    return jac, out, gates


def _affine(net, x, upto, chunk):
    x = net.batchify(x)
    a_parts, y_parts = [], []
    for i in range(0, len(x), chunk):
        jac, out, _ = _jacobian(net, x[i : i + chunk], upto)
        a_parts.append(jac)
        y_parts.append(out)
    a = np.concatenate(a_parts)
    y = np.concatenate(y_parts)
    flat = x.reshape(len(x), -1)
    d = y - np.einsum("bnm,bm->bn", a, flat)
    return LocalAffineMap(a=a, d=d, anchor=flat, y=y)


def local_affine_output(net: Network, x, chunk=100) -> LocalAffineMap:
    """(A, d) with f(x) = A x + d on the gate region of x; one row per logit."""
    return _affine(net, x, len(net.layers) - 1, chunk)


def local_affine_feature(net: Network, x, chunk=50) -> FeatureAffineMap:
    """(W, b) with h(x) = W x + b on the gate region of x."""
    return _affine(net, x, net.feature_layer, chunk)


def forward_frozen(net: Network, x, gates) -> np.ndarray:
    """Logits with every nonlinearity pinned to ``gates`` (from :meth:`Network.run`)."""
    x = net.batchify(x)
    for layer, gate in zip(net.layers, gates):
        x = layer.forward_frozen(x, gate)
    return x


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 5
    batch: int = 64
    seed: int = 0


def _batch_grads(net, x, y):
    acts, gates = net.run(x)
    logits = acts[-1]
    g = softmax(logits)
    loss = cross_entropy(logits, y).mean()
    g[np.arange(len(x)), y] -= 1.0
    g /= len(x)
    grads = []
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.params:
            grads.append((layer, layer.param_grads(acts[i], g)))
        if i > 0:
            g = layer.backward(g, gates[i])
    return loss, logits, grads


def accuracy(net, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(net, x) == np.asarray(y)))


def train_victim(x, y, cfg: TrainConfig = TrainConfig(), net: Network | None = None, log=None):
    """Train a LeNet on ``(x, y)`` with SGD + momentum. Deterministic for a fixed seed.

    Returns the trained network and the list of per-epoch mean losses.
    """
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.int64)
    if len(x) == 0:
        raise ValueError("training set is empty")
    n_classes = max(int(y.max()) + 1, 2)
    if net is None:
        shape = x.shape[1:] if x.ndim == 4 else (1, 28, 28)
        net = lenet(n_classes=n_classes, input_shape=shape, seed=cfg.seed)
    x = net.batchify(x)
    rng = np.random.default_rng(cfg.seed + 1)
    velocity = {}
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        losses = []
        for i in range(0, len(x), cfg.batch):
            idx = order[i : i + cfg.batch]
            loss, _, grads = _batch_grads(net, x[idx], y[idx])
            losses.append(loss)
            for layer, pg in grads:
                for name, gval in pg.items():
                    key = (id(layer), name)
                    v = velocity.get(key)
                    v = gval if v is None else cfg.momentum * v + gval
                    velocity[key] = v
                    layer.params[name] -= cfg.lr * v
        history.append(float(np.mean(losses)))
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {history[-1]:.4f}")
    return net, history


@dataclass
class RetrainConfig:
    lr: float = 0.5
    iters: int = 300
    l2: float = 0.0


def retrain_last_layer(feats, labels, n_classes, init: Dense | None = None, cfg: RetrainConfig = RetrainConfig()) -> Dense:
    """Softmax regression on feature vectors by full-batch gradient descent.

    Starts from ``init`` (a copy; the original is untouched) or from zeros.
    """
    f = np.asarray(feats, np.float64)
    y = np.asarray(labels, np.int64)
    if len(f) == 0:
        raise ValueError("no feature vectors")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError("label out of range")
    if init is not None:
        w = init.params["weight"].copy()
        b = init.params["bias"].copy()
    else:
        w = np.zeros((n_classes, f.shape[1]))
        b = np.zeros(n_classes)
    # step size normalised by the feature scale so the lr is dimensionless
    scale = max(float(np.mean(np.sum(f * f, axis=1))), 1e-12)
    lr = cfg.lr / scale
    onehot = np.eye(n_classes)[y]
    for _ in range(cfg.iters):
        p = softmax(f @ w.T + b)
        g = (p - onehot) / len(f)
        w -= lr * (g.T @ f + cfg.l2 * w)
        b -= cfg.lr * g.sum(axis=0)
    return Dense(w, b)


# ---------------------------------------------------------------------------
# persistence ("ADVF" container)
# ---------------------------------------------------------------------------

class ModelFormatError(ValueError):
    """Raised for malformed or truncated model containers."""


MODEL_MAGIC = b"ADVF"
MODEL_VERSION = 1


def _pack_blob(arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def _unpack_blob(buf):
    (ndim,) = struct.unpack("<I", buf.read(4))
    shape = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim))
    n = int(np.prod(shape)) if ndim else 1
    data = buf.read(8 * n)
    if len(data) != 8 * n:
        raise ModelFormatError("truncated parameter blob")
    return np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)


def _pack_str(s):
    b = s.encode()
    return struct.pack("<H", len(b)) + b


def _unpack_str(buf):
    (n,) = struct.unpack("<H", buf.read(2))
    return buf.read(n).decode()


def dumps_model(net: Network, aux: dict | None = None) -> bytes:
    """Serialise ``net`` plus optional named auxiliary sections of float arrays."""
    out = io.BytesIO()
    out.write(MODEL_MAGIC)
    out.write(struct.pack("<I", MODEL_VERSION))
    out.write(struct.pack("<3I", *net.input_shape))
    out.write(struct.pack("<iiI", net.feature_layer, net.hist_layer, len(net.layers)))
    for layer in net.layers:
        out.write(_pack_str(layer.kind))
        names = sorted(layer.params)
        out.write(struct.pack("<I", len(names)))
        for name in names:
            out.write(_pack_str(name))
            out.write(_pack_blob(layer.params[name]))
    aux = aux or {}
    out.write(struct.pack("<I", len(aux)))
    for section in sorted(aux):
        out.write(_pack_str(section))
        arrays = aux[section]
        out.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            out.write(_pack_str(name))
            out.write(_pack_blob(np.asarray(arrays[name], np.float64)))
    return out.getvalue()


def loads_model(data: bytes):
    """Inverse of :func:`dumps_model`; returns ``(net, aux)``."""
    try:
        return _loads_model(data)
    except (struct.error, KeyError, UnicodeDecodeError, TypeError) as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from None


def _loads_model(data: bytes):
    buf = io.BytesIO(data)
    if buf.read(4) != MODEL_MAGIC:
        raise ModelFormatError("not an ADVF model file")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    input_shape = struct.unpack("<3I", buf.read(12))
    feature_layer, hist_layer, n_layers = struct.unpack("<iiI", buf.read(12))
    layers = []
    for _ in range(n_layers):
        kind = _unpack_str(buf)
        (n_params,) = struct.unpack("<I", buf.read(4))
        params = {}
        for _ in range(n_params):
            name = _unpack_str(buf)
            params[name] = _unpack_blob(buf)
        layers.append(LAYER_KINDS[kind](**params))
    aux = {}
    raw = buf.read(4)
    if raw:
        (n_sec,) = struct.unpack("<I", raw)
        for _ in range(n_sec):
            section = _unpack_str(buf)
            (n_arr,) = struct.unpack("<I", buf.read(4))
            aux[section] = {}
            for _ in range(n_arr):
                name = _unpack_str(buf)
                aux[section][name] = _unpack_blob(buf)
    net = Network(layers, input_shape, feature_layer, hist_layer)
    return net, aux


def save_model(path, net, aux=None):
    with open(path, "wb") as fh:
        fh.write(dumps_model(net, aux))


def load_model(path):
    with open(path, "rb") as fh:
        return loads_model(fh.read())
