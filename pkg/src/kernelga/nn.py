"""Dense numpy layers with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. Every layer keeps
what its backward pass needs from the most recent forward call, so a layer
instance must not be shared between concurrent computations.
"""

from __future__ import annotations

import json
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataFormatError, InfeasibleArchitectureError, NumericError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv_output_side(side: int, kernel: int, stride: int, pad: int) -> int:
    return (side + 2 * pad - kernel) // stride + 1


def pool_output_side(side: int, window: int = 2) -> int:
    return side // window


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {where}")
    return x


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    """Base layer. ``params`` and ``grads`` share keys; buffers are non-trained state."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def state_arrays(self):
        return [*self.params.items(), *self.buffers.items()]


class Conv2D(Layer):
    def __init__(self, in_channels, out_channels, kernel, stride, pad, rng=None, dtype=np.float64):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.pad = kernel, stride, pad
        fan_in = in_channels * kernel * kernel
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = he_normal(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
        self.params["b"] = np.zeros(out_channels, dtype=dtype)
        self._cache = None

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv expects (N, {self.in_channels}, H, W), got {x.shape}")
        n, c, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = conv_output_side(h, k, s, p), conv_output_side(w, k, s, p)
        if ho < 1 or wo < 1:
            raise InfeasibleArchitectureError(f"conv k={k} s={s} p={p} on side {h}x{w}")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        # (N, Ho, Wo, C, k, k) rows, one per output pixel
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        wmat = self.params["W"].reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.params["b"]
        self._cache = (cols, x.shape, xp.shape, ho, wo)
        return out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad):
        cols, x_shape, xp_shape, ho, wo = self._cache
        n, c, h, w = x_shape
        k, s, p = self.kernel, self.stride, self.pad
        g = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        wmat = self.params["W"].reshape(self.out_channels, -1)
        self.grads["W"] = (g.T @ cols).reshape(self.params["W"].shape)
        self.grads["b"] = g.sum(axis=0)
        dcols = (g @ wmat).reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros(xp_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, :, i, j]
        return dxp[:, :, p:p + h, p:p + w] if p else dxp


class MaxPool2D(Layer):
    """2x2 max pooling with stride 2; an odd trailing row/column is dropped."""

    window = 2

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        if h < 2 or w < 2:
            raise ShapeError(f"max pooling needs side >= 2, got {h}x{w}")
        ho, wo = h // 2, w // 2
        blocks = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
        flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
        arg = flat.argmax(axis=-1)
        self._cache = (x.shape, arg)
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        (n, c, h, w), arg = self._cache
        ho, wo = grad.shape[2:]
        routed = np.zeros((n, c, ho, wo, 4), dtype=grad.dtype)
        np.put_along_axis(routed, arg[..., None], grad[..., None], axis=-1)
        dx = np.zeros((n, c, h, w), dtype=grad.dtype)
        dx[:, :, :2 * ho, :2 * wo] = (
            routed.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        )
        return dx


class BatchNorm2D(Layer):
    def __init__(self, channels, eps=BN_EPS, momentum=BN_MOMENTUM, dtype=np.float64):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"batch norm expects (N, {self.channels}, H, W), got {x.shape}")
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if not train:
            mean = self.buffers["running_mean"][None, :, None, None]
            var = self.buffers["running_var"][None, :, None, None]
            return (x - mean) / np.sqrt(var + self.eps) * gamma + beta
        if x.shape[0] < 2:
            raise ShapeError("batch norm in train mode needs a batch of at least 2")
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        mom = self.momentum
        self.buffers["running_mean"] = (1 - mom) * self.buffers["running_mean"] + mom * mean
        # running variance tracks the unbiased estimate
        self.buffers["running_var"] = (1 - mom) * self.buffers["running_var"] + mom * var * m / max(m - 1, 1)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, m)
        return xhat * gamma + beta

    def backward(self, grad):
        xhat, inv_std, m = self._cache
        self.grads["gamma"] = (grad * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = grad.sum(axis=(0, 2, 3))
        dxhat = grad * self.params["gamma"][None, :, None, None]
        sum_d = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return inv_std[None, :, None, None] / m * (m * dxhat - sum_d - xhat * sum_dx)


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return grad * self._mask


class Flatten(Layer):
    """Channel-major (C, H, W) flattening."""

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Linear(Layer):
    """y = W x + b with W of shape (out, in)."""

    def __init__(self, in_features, out_features, rng=None, dtype=np.float64):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = he_normal(rng, (out_features, in_features), in_features, dtype)
        self.params["b"] = np.zeros(out_features, dtype=dtype)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"linear expects (N, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, grad):
        self.grads["W"] = grad.T @ self._x
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"]


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval mode is the identity."""

    def __init__(self, rate=0.5, rng=None):
        super().__init__()
        if not 0 <= rate < 1:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = None

    def forward(self, x, train=False):
        if not train or self.rate == 0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._mask = keep.astype(x.dtype) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(labels, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy of softmax(logits) against one-hot targets.

    Returns ``(loss, grad_logits)`` with ``grad_logits = (p - y) / N``.
    """
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    if not (np.all((targets == 0) | (targets == 1)) and np.all(targets.sum(axis=1) == 1)):
        raise ShapeError("targets must be one-hot rows")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    loss = float(-(targets * log_p).sum() / n)
    grad = (np.exp(log_p) - targets) / n
    return loss, grad


def infer_shapes(spec, batch_shape) -> dict:
    """Walk an architecture spec with the shape rules and tabulate every output shape.

    Returns ``{"columns": [[(kind, shape), ...], ...], "fc_in": [...],
    "concat": (N, width), "logits": (N, Z)}``. Only kernel, stride and padding
    of each conv entry are read; sides are recomputed, not copied.
    """
    n, c, h, w = batch_shape
    if c != 1 or h != w:
        raise ShapeError(f"expected (N, 1, S, S) input, got {batch_shape}")
    columns, fc_in = [], []
    for ci, col in enumerate(spec.columns):
        side, channels, rows = h, c, []
        for layer in col.layers:
            if layer.kind == "conv":
                side = conv_output_side(side, layer.kernel, layer.stride, layer.pad)
                channels = layer.out_channels
                if side < 1:
                    raise InfeasibleArchitectureError(f"column {ci}: conv output side {side}")
            elif layer.kind == "pool":
                if side < 2:
                    raise InfeasibleArchitectureError(f"column {ci}: pool input side {side}")
                side = pool_output_side(side)
            rows.append((layer.kind, (n, channels, side, side)))
        flat = channels * side * side
        rows.append(("flatten", (n, flat)))
        rows.append(("fc", (n, col.fc_width)))
        columns.append(rows)
        fc_in.append(flat)
    width = sum(col.fc_width for col in spec.columns)
    return {"columns": columns, "fc_in": fc_in, "concat": (n, width), "logits": (n, spec.num_classes)}


# Parameter checkpoint: b"KGA1", u32 version, u32 header length, JSON header,
# u32 array count, then per array: u8 dtype code, u32 ndim, u32 dims, LE data.
MAGIC = b"KGA1"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def save_arrays(path, arrays, header=None) -> None:
    meta = json.dumps(header or {}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            a = np.asarray(a)
            code = _CODES.get(a.dtype)
            if code is None:
                raise ShapeError(f"unsupported dtype {a.dtype}")
            f.write(struct.pack("<BI", code, a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes())


def load_arrays(path):
    """Read a parameter checkpoint; returns ``(arrays, header)``."""
    with open(path, "rb") as f:
        buf = f.read()
    pos = 0

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise DataFormatError("truncated checkpoint", offset=pos)
        chunk = buf[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if take(4) != MAGIC:
        raise DataFormatError("bad checkpoint magic", offset=0)
    version, meta_len = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", offset=4)
    try:
        header = json.loads(take(meta_len).decode() or "{}")
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError("corrupt checkpoint header", offset=12) from exc
    (count,) = struct.unpack("<I", take(4))
    arrays = []
    for _ in range(count):
        at = pos
        code, ndim = struct.unpack("<BI", take(5))
        if code not in _DTYPES:
            raise DataFormatError(f"unknown dtype code {code}", offset=at)
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays.append(np.frombuffer(take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("=")))
    if pos != len(buf):
        raise DataFormatError("trailing bytes in checkpoint", offset=pos)
    return arrays, header
