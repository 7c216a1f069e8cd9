"""A small convolutional classifier with explicit forward/backward passes.

Tensors are channel-last, ``(N, H, W, C)``, float64 throughout. Each layer
exposes ``forward(x) -> (out, cache)`` and ``backward(dout, cache) ->
(dx, grads)``; :class:`Model` chains them and adds softmax / cross-entropy.
"""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolationError, CorruptInputError, InvalidParameterError, TrainingFailureError

PROB_FLOOR = 1e-12


class Layer:
    code = 0
    params: dict

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError


class Center(Layer):
    """Fixed input map x -> 2x - 1 (images in [0, 1] become zero-centred)."""
    code = 6

    def __init__(self):
        self.params = {}

    def forward(self, x):
        return 2.0 * x - 1.0, None

    def backward(self, dout, cache):
        return 2.0 * dout, {}


class Conv2D(Layer):
    """3x3 (or k x k) convolution, stride 1, zero 'same' padding."""
    code = 1

    def __init__(self, weight, bias):
        self.params = {"W": np.asarray(weight, np.float64), "b": np.asarray(bias, np.float64)}

    @classmethod
    def init(cls, rng, c_in, c_out, k=3):
        std = np.sqrt(2.0 / (k * k * c_in))
        return cls(rng.normal(0.0, std, (k, k, c_in, c_out)), np.zeros(c_out))

    def forward(self, x):
        W, b = self.params["W"], self.params["b"]
        k = W.shape[0]
        p = k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N, H, W, C, k, k)
        out = np.tensordot(win, W, axes=([3, 4, 5], [2, 0, 1])) + b
        return out, (x, win)

    def backward(self, dout, cache):
        x, win = cache
        W = self.params["W"]
        k = W.shape[0]
        p = k // 2
        dW = np.tensordot(win, dout, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        db = dout.sum(axis=(0, 1, 2))
        dp = np.pad(dout, ((0, 0), (p, p), (p, p), (0, 0)))
        dwin = sliding_window_view(dp, (k, k), axis=(1, 2))  # (N, H, W, O, k, k)
        dx = np.tensordot(dwin, W[::-1, ::-1], axes=([3, 4, 5], [3, 0, 1]))
        return dx, {"W": dW, "b": db}


class ReLU(Layer):
    code = 2

    def __init__(self):
        self.params = {}

    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, dout, cache):
        return np.where(cache > 0, dout, 0.0), {}


class MaxPool2(Layer):
    """2x2 max pooling with stride 2; ties route the gradient to the first
    element in row-major window order."""
    code = 3

    def __init__(self):
        self.params = {}

    def forward(self, x):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ContractViolationError("max pooling needs even spatial dimensions")
        blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    def backward(self, dout, cache):
        shape, arg = cache
        n, h, w, c = shape
        grad = np.zeros(arg.shape + (4,))
        np.put_along_axis(grad, arg[..., None], dout[..., None], axis=-1)
        dx = grad.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)
        return dx, {}


class Flatten(Layer):
    code = 4

    def __init__(self):
        self.params = {}

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache), {}


class Dense(Layer):
    code = 5

    def __init__(self, weight, bias):
        self.params = {"W": np.asarray(weight, np.float64), "b": np.asarray(bias, np.float64)}

    @classmethod
    def init(cls, rng, d_in, d_out):
        return cls(rng.normal(0.0, np.sqrt(1.0 / d_in), (d_in, d_out)), np.zeros(d_out))

    def forward(self, x):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, dout, cache):
        return dout @ self.params["W"].T, {"W": cache.T @ dout, "b": dout.sum(axis=0)}


_LAYER_TYPES = {cls.code: cls for cls in (Center, Conv2D, ReLU, MaxPool2, Flatten, Dense)}


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, label):
    """-log p[label] with the probability floored at 1e-12. Works on a single
    distribution or a batch (returns one value per row)."""
    probs = np.asarray(probs, dtype=np.float64)
    label = np.asarray(label)
    if probs.ndim == 1:
        return float(-np.log(max(probs[int(label)], PROB_FLOOR)))
    picked = probs[np.arange(len(probs)), label]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def onehot(labels, k):
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


@dataclass(eq=False)
class Model:
    layers: list
    class_names: list
    input_shape: tuple = (64, 64, 3)
    meta: dict = field(default_factory=dict)

    @property
    def n_classes(self):
        return len(self.class_names)

    def _batch(self, images):
        x = np.asarray(images, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != tuple(self.input_shape):
            raise ContractViolationError(f"input shape {x.shape[1:]} != model input {tuple(self.input_shape)}")
        return x, single

    def _forward(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def _backward(self, dlogits, caches, want_params=True):
        grads = [None] * len(self.layers)
        d = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            d, g = self.layers[i].backward(d, caches[i])
            grads[i] = g if want_params else None
        return d, grads

    def logits(self, images):
        x, single = self._batch(images)
        out, _ = self._forward(x)
        return out[0] if single else out

    def forward(self, images):
        """Class probabilities for one image (H, W, 3) or a batch (N, H, W, 3)."""
        return softmax(self.logits(images))

    def predict(self, images):
        return np.argmax(self.logits(images), axis=-1)

    def backward_input(self, images, label=None, dlogits=None):
        """Gradient of the loss with respect to the input image(s).

        Pass ``label`` for the cross-entropy of each image (summed over a
        batch), or ``dlogits`` for an arbitrary upstream gradient on the logits.
        """
        x, single = self._batch(images)
        logits, caches = self._forward(x)
        if dlogits is None:
            labels = np.broadcast_to(np.asarray(label), (len(x),))
            dlogits = softmax(logits) - onehot(labels, self.n_classes)
        else:
            dlogits = np.asarray(dlogits, dtype=np.float64).reshape(logits.shape)
        dx, _ = self._backward(dlogits, caches, want_params=False)
        return dx[0] if single else dx

    def loss_and_grads(self, images, labels):
        """Mean cross-entropy over a batch and its parameter gradients."""
        x, _ = self._batch(images)
        logits, caches = self._forward(x)
        probs = softmax(logits)
        loss = float(np.mean(cross_entropy(probs, labels)))
        dlogits = (probs - onehot(labels, self.n_classes)) / len(x)
        _, grads = self._backward(dlogits, caches)
        return loss, probs, grads

    def copy(self):
        return copy.deepcopy(self)


def build_model(class_names, input_shape=(64, 64, 3), channels=(8, 16, 32), seed=0) -> Model:
    """Input centring, conv3x3-relu-maxpool blocks, then a dense layer to one logit per class."""
    rng = np.random.default_rng(seed)
    h, w, c = input_shape
    layers = [Center()]
    for ch in channels:
        layers += [Conv2D.init(rng, c, ch), ReLU(), MaxPool2()]
        c, h, w = ch, h // 2, w // 2
    layers += [Flatten(), Dense.init(rng, h * w * c, len(class_names))]
    return Model(layers, list(class_names), tuple(input_shape))


# --------------------------------------------------------------------------
# training

@dataclass
class TrainReport:
    train_accuracy: float
    val_accuracy: float
    epochs: int
    loss_history: list

    def to_dict(self):
        return {"train_accuracy": self.train_accuracy, "val_accuracy": self.val_accuracy,
                "epochs": self.epochs, "loss_history": list(self.loss_history)}


def accuracy(model: Model, images, labels, batch=128) -> float:
    if len(images) == 0:
        return float("nan")
    preds = np.concatenate([model.predict(images[i:i + batch]) for i in range(0, len(images), batch)])
    return float(np.mean(preds == labels))


def train(model: Model, dataset, epochs=30, lr=0.02, batch=32, seed=0, momentum=0.9,
          weight_decay=1e-4, log=None) -> tuple[Model, TrainReport]:
    """Minibatch SGD with momentum on the cross-entropy. Returns a trained copy."""
    x_train, y_train = dataset.split_arrays("train")
    x_val, y_val = dataset.split_arrays("val")
    if len(x_train) == 0:
        raise InvalidParameterError("training split is empty")
    model = model.copy()
    rng = np.random.default_rng(seed)
    velocity = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in model.layers]
    history = []
    for epoch in range(int(epochs)):
        order = rng.permutation(len(x_train))
        total = 0.0
        for s in range(0, len(order), batch):
            idx = order[s:s + batch]
            loss, _, grads = model.loss_and_grads(x_train[idx], y_train[idx])
            if not np.isfinite(loss):
                raise TrainingFailureError(f"training diverged at epoch {epoch} (loss {loss})")
            total += loss * len(idx)
            for layer, g, vel in zip(model.layers, grads, velocity):
                for k, p in layer.params.items():
                    vel[k] = momentum * vel[k] - lr * (g[k] + weight_decay * p)
                    p += vel[k]
        history.append(total / len(order))
        if log:
            log(f"epoch {epoch + 1}/{epochs} loss {history[-1]:.4f}")
    report = TrainReport(accuracy(model, x_train, y_train), accuracy(model, x_val, y_val), int(epochs), history)
    return model, report


# --------------------------------------------------------------------------
# checkpoint file
#
# Little-endian binary layout:
#   8 bytes   magic b"PFMODEL1"
#   u32       number of classes, then per class: u16 byte length + UTF-8 name
#   3 x u32   input height, width, channels
#   u32       number of layers, then per layer:
#               u8 layer code (1 conv, 2 relu, 3 maxpool, 4 flatten, 5 dense, 6 centre)
#               u8 number of arrays, then per array:
#                 u8 ndim, ndim x u32 dims, float64 data in row-major order

MAGIC = b"PFMODEL1"
_ARRAY_ORDER = {Conv2D.code: ("W", "b"), Dense.code: ("W", "b")}


def save_model(model: Model, path):
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(model.class_names))
    for name in model.class_names:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
    out += struct.pack("<3I", *model.input_shape)
    out += struct.pack("<I", len(model.layers))
    for layer in model.layers:
        keys = _ARRAY_ORDER.get(layer.code, ())
        out += struct.pack("<BB", layer.code, len(keys))
        for k in keys:
            arr = np.ascontiguousarray(layer.params[k], dtype="<f8")
            out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += arr.tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        if data[:8] != MAGIC:
            raise CorruptInputError(f"{path}: not a model checkpoint")
        pos = 8

        def take(fmt):
            nonlocal pos
            vals = struct.unpack_from(fmt, data, pos)
            pos += struct.calcsize(fmt)
            return vals

        (k,) = take("<I")
        names = []
        for _ in range(k):
            (n,) = take("<H")
            names.append(data[pos:pos + n].decode("utf-8"))
            pos += n
        shape = take("<3I")
        (n_layers,) = take("<I")
        layers = []
        for _ in range(n_layers):
            code, n_arr = take("<BB")
            arrays = []
            for _ in range(n_arr):
                (ndim,) = take("<B")
                dims = take(f"<{ndim}I")
                size = int(np.prod(dims)) * 8
                arrays.append(np.frombuffer(data, "<f8", int(np.prod(dims)), pos).reshape(dims).astype(np.float64))
                pos += size
            cls = _LAYER_TYPES[code]
            layers.append(cls(*arrays) if arrays else cls())
    except (struct.error, KeyError, ValueError) as exc:
        raise CorruptInputError(f"{path}: corrupt checkpoint ({exc})") from None
    return Model(layers, names, tuple(shape))
