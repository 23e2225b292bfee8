"""Layer kinds understood by the graph engine.

Sequence tensors are laid out as ``(batch, length, channels)``; dense
tensors as ``(batch, features)``. Every layer exposes a forward pass, a
backward pass returning input and parameter gradients, and a static shape
rule used for graph validation.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

KINDS = (
    "Conv1D",
    "MaxPool1D",
    "Dense",
    "ReLU",
    "Sigmoid",
    "Dropout",
    "GlobalAvgPool1D",
    "ElementwiseMultiply",
    "ResidualAdd",
)


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# conv primitives (shared with the relevance rules)
# ---------------------------------------------------------------------------

def conv_out_length(length: int, kernel: int, stride: int, pad: tuple[int, int]) -> int:
    return (length + pad[0] + pad[1] - kernel) // stride + 1


def same_padding(kernel: int) -> tuple[int, int]:
    return ((kernel - 1) // 2, kernel // 2)


def _im2col(x, kernel, stride, pad):
    xp = np.pad(x, ((0, 0), pad, (0, 0))) if pad != (0, 0) else x
    win = sliding_window_view(xp, kernel, axis=1)[:, ::stride]  # (B, Lout, Cin, K)
    b, lout = win.shape[:2]
    return np.ascontiguousarray(win).reshape(b * lout, -1), lout


def conv1d(x: np.ndarray, weight: np.ndarray, stride: int = 1, pad=(0, 0)) -> np.ndarray:
    """Bias-free 1D convolution (cross-correlation). ``weight`` is (Cout, Cin, K)."""
    cout, cin, k = weight.shape
    cols, lout = _im2col(x, k, stride, pad)
    y = cols @ weight.reshape(cout, cin * k).T
    return y.reshape(x.shape[0], lout, cout)


def conv1d_transpose(g: np.ndarray, weight: np.ndarray, in_length: int,
                     stride: int = 1, pad=(0, 0)) -> np.ndarray:
    """Adjoint of :func:`conv1d` with respect to its input."""
    cout, cin, k = weight.shape
    b, lout, _ = g.shape
    dcols = (g.reshape(b * lout, cout) @ weight.reshape(cout, cin * k)).reshape(b, lout, cin, k)
    padded = np.zeros((b, in_length + pad[0] + pad[1], cin), dtype=g.dtype)
    span = stride * (lout - 1) + 1
    for j in range(k):
        padded[:, j:j + span:stride, :] += dcols[:, :, :, j]
    return padded[:, pad[0]:pad[0] + in_length, :]


def conv1d_weight_grad(x: np.ndarray, g: np.ndarray, kernel: int,
                       stride: int = 1, pad=(0, 0)) -> np.ndarray:
    cols, lout = _im2col(x, kernel, stride, pad)
    cout = g.shape[-1]
    dw = g.reshape(-1, cout).T @ cols
    return dw.reshape(cout, x.shape[-1], kernel)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    kind: str = ""
    n_inputs = 1

    def __init__(self, id: str):
        self.id = id
        self.params: dict[str, np.ndarray] = {}

    def hyper(self) -> dict:
        """Hyperparameters that define the architecture (used for fingerprints)."""
        return {}

    def out_shape(self, in_shapes: list[tuple]) -> tuple:
        return in_shapes[0]

    def forward(self, inputs, training=False, rng=None):
        """Return ``(output, cache)``."""
        raise NotImplementedError

    def backward(self, inputs, output, cache, grad):
        """Return ``(input_grads, param_grads)``."""
        raise NotImplementedError

    def __repr__(self):
        return f"{self.kind}({self.id!r}, {self.hyper()})"


class Conv1D(Layer):
    kind = "Conv1D"

    def __init__(self, id, in_channels, out_channels, kernel_size, stride=1, padding="same"):
        super().__init__(id)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        if padding == "same":
            self.pad = same_padding(kernel_size) if stride == 1 else (0, 0)
        elif padding == "valid":
            self.pad = (0, 0)
        else:
            self.pad = tuple(padding)
        self.params = {
            "weight": np.zeros((out_channels, in_channels, kernel_size)),
            "bias": np.zeros(out_channels),
        }

    def hyper(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride, "pad": list(self.pad)}

    def out_shape(self, in_shapes):
        (shape,) = in_shapes
        if len(shape) != 2 or shape[1] != self.in_channels:
            raise ShapeError(f"{self.id}: expected (L, {self.in_channels}), got {shape}")
        lout = conv_out_length(shape[0], self.kernel_size, self.stride, self.pad)
        if lout < 1:
            raise ShapeError(f"{self.id}: input length {shape[0]} too short")
        return (lout, self.out_channels)

    def forward(self, inputs, training=False, rng=None):
        (x,) = inputs
        w = self.params["weight"]
        y = conv1d(x, w, self.stride, self.pad) + self.params["bias"]
        return y, None

    def backward(self, inputs, output, cache, grad):
        (x,) = inputs
        w = self.params["weight"]
        dx = conv1d_transpose(grad, w, x.shape[1], self.stride, self.pad)
        dw = conv1d_weight_grad(x, grad, self.kernel_size, self.stride, self.pad)
        db = grad.sum(axis=(0, 1))
        return [dx], {"weight": dw, "bias": db}


class Dense(Layer):
    """Fully connected layer; inputs with more than one feature axis are flattened."""

    kind = "Dense"

    def __init__(self, id, in_features, out_features):
        super().__init__(id)
        self.in_features = in_features
        self.out_features = out_features
        self.params = {
            "weight": np.zeros((in_features, out_features)),
            "bias": np.zeros(out_features),
        }

    def hyper(self):
        return {"in_features": self.in_features, "out_features": self.out_features}

    def out_shape(self, in_shapes):
        (shape,) = in_shapes
        if int(np.prod(shape)) != self.in_features:
            raise ShapeError(f"{self.id}: expected {self.in_features} features, got shape {shape}")
        return (self.out_features,)

    def forward(self, inputs, training=False, rng=None):
        (x,) = inputs
        flat = x.reshape(x.shape[0], -1)
        return flat @ self.params["weight"] + self.params["bias"], None

    def backward(self, inputs, output, cache, grad):
        (x,) = inputs
        flat = x.reshape(x.shape[0], -1)
        dx = (grad @ self.params["weight"].T).reshape(x.shape)
        return [dx], {"weight": flat.T @ grad, "bias": grad.sum(axis=0)}


class MaxPool1D(Layer):
    """Non-overlapping max pooling; a trailing partial window is dropped.

    Ties go to the lowest index in the window.
    """

    kind = "MaxPool1D"

    def __init__(self, id, pool_size):
        super().__init__(id)
        self.pool_size = pool_size

    def hyper(self):
        return {"pool_size": self.pool_size}

    def out_shape(self, in_shapes):
        (shape,) = in_shapes
        lout = shape[0] // self.pool_size
        if lout < 1:
            raise ShapeError(f"{self.id}: input length {shape[0]} shorter than pool {self.pool_size}")
        return (lout, shape[1])

    def windows(self, x):
        b, length, c = x.shape
        lout = length // self.pool_size
        return x[:, :lout * self.pool_size].reshape(b, lout, self.pool_size, c)

    def forward(self, inputs, training=False, rng=None):
        (x,) = inputs
        win = self.windows(x)
        idx = win.argmax(axis=2)
        out = np.take_along_axis(win, idx[:, :, None, :], axis=2)[:, :, 0, :]
        return out, idx

    def route(self, x_shape, idx, values):
        """Scatter ``values`` (shaped like the output) back onto argmax positions."""
        b, length, c = x_shape
        lout = idx.shape[1]
        win = np.zeros((b, lout, self.pool_size, c), dtype=values.dtype)
        np.put_along_axis(win, idx[:, :, None, :], values[:, :, None, :], axis=2)
        full = np.zeros(x_shape, dtype=values.dtype)
        full[:, :lout * self.pool_size] = win.reshape(b, lout * self.pool_size, c)
        return full

    def backward(self, inputs, output, cache, grad):
        (x,) = inputs
        return [self.route(x.shape, cache, grad)], {}


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, inputs, training=False, rng=None):
        (x,) = inputs
        return np.maximum(x, 0), None

    def backward(self, inputs, output, cache, grad):
        (x,) = inputs
        return [grad * (x > 0)], {}


class Sigmoid(Layer):
    kind = "Sigmoid"

    def forward(self, inputs, training=False, rng=None):
        (x,) = inputs
        return expit(x), None

    def backward(self, inputs, output, cache, grad):
        return [grad * output * (1 - output)], {}


class Dropout(Layer):
    """Inverted dropout; identity unless ``training`` is set."""

    kind = "Dropout"

    def __init__(self, id, rate=0.0):
        super().__init__(id)
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def hyper(self):
        return {"rate": self.rate}

    def forward(self, inputs, training=False, rng=None):
        (x,) = inputs
        if not training or self.rate == 0:
            return x, None
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        mask = (rng.random(x.shape) >= self.rate) / (1 - self.rate)
        return x * mask, mask.astype(x.dtype)

    def backward(self, inputs, output, cache, grad):
        return [grad if cache is None else grad * cache], {}


class GlobalAvgPool1D(Layer):
    kind = "GlobalAvgPool1D"

    def out_shape(self, in_shapes):
        (shape,) = in_shapes
        return (shape[1],)

    def forward(self, inputs, training=False, rng=None):
        (x,) = inputs
        return x.mean(axis=1), None

    def backward(self, inputs, output, cache, grad):
        (x,) = inputs
        return [np.broadcast_to(grad[:, None, :] / x.shape[1], x.shape).copy()], {}


class ElementwiseMultiply(Layer):
    """Gating node: ``signal * gate``. A per-channel gate broadcasts over time."""

    kind = "ElementwiseMultiply"
    n_inputs = 2
    tags = ("signal", "gate")

    def out_shape(self, in_shapes):
        sig, gate = in_shapes
        if gate != sig and gate != (sig[-1],):
            raise ShapeError(f"{self.id}: gate shape {gate} does not fit signal {sig}")
        return sig

    @staticmethod
    def _expand(gate, signal):
        return gate[:, None, :] if gate.ndim < signal.ndim else gate

    def forward(self, inputs, training=False, rng=None):
        sig, gate = inputs
        return sig * self._expand(gate, sig), None

    def backward(self, inputs, output, cache, grad):
        sig, gate = inputs
        dsig = grad * self._expand(gate, sig)
        dgate = grad * sig
        if gate.ndim < sig.ndim:
            dgate = dgate.sum(axis=1)
        return [dsig, dgate], {}


class ResidualAdd(Layer):
    kind = "ResidualAdd"
    n_inputs = 2
    tags = ("main", "skip")

    def out_shape(self, in_shapes):
        a, b = in_shapes
        if a != b:
            raise ShapeError(f"{self.id}: branch shapes differ {a} vs {b}")
        return a

    def forward(self, inputs, training=False, rng=None):
        a, b = inputs
        return a + b, None

    def backward(self, inputs, output, cache, grad):
        return [grad, grad], {}


LAYER_TYPES = {cls.kind: cls for cls in (Conv1D, MaxPool1D, Dense, ReLU, Sigmoid, Dropout,
                                         GlobalAvgPool1D, ElementwiseMultiply, ResidualAdd)}
