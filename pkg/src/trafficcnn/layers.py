"""Layer forward/backward kernels.

Every kernel is a pure function.  ``*_forward`` returns ``(output, cache)``
and ``*_backward`` consumes the upstream gradient together with that cache.
Images are NHWC, conv weights are ``[kh, kw, in_ch, filters]`` and dense
weights ``[in, units]``.  Convolution is stride 1 with an im2col/matmul
core; pooling stride equals the pool size and trailing rows/cols that do not
fill a window are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError

ACTIVATIONS = ("relu", "tanh", "softmax", "linear")
LOG_EPS = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    """Description of one layer of a sequential model.

    ``kind`` is one of ``conv2d``, ``maxpool2d``, ``flatten``, ``dense``.
    Fields that do not apply to a kind are left at their defaults.
    """

    kind: str
    name: str
    filters: int = 0
    kernel: tuple[int, int] = (3, 3)
    padding: str = "same"
    activation: str = "linear"
    pool: tuple[int, int] = (2, 2)
    units: int = 0

    def __post_init__(self):
        if self.kind not in ("conv2d", "maxpool2d", "flatten", "dense"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"{self.name}: unknown activation {self.activation!r}")
        if self.kind == "conv2d":
            if self.filters < 1 or min(self.kernel) < 1:
                raise ValueError(f"{self.name}: filters and kernel must be >= 1")
            if self.padding not in ("same", "valid"):
                raise ValueError(f"{self.name}: padding must be 'same' or 'valid'")
            if self.activation == "softmax":
                raise ValueError(f"{self.name}: softmax is only allowed on a dense layer")
        elif self.kind == "dense":
            if self.units < 1:
                raise ValueError(f"{self.name}: units must be >= 1")
        elif self.kind == "maxpool2d":
            if min(self.pool) < 1:
                raise ValueError(f"{self.name}: pool must be >= 1")

    @property
    def parameterized(self) -> bool:
        return self.kind in ("conv2d", "dense")

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape for per-sample input shape ``in_shape``."""
        if self.kind == "conv2d":
            h, w, _ = in_shape
            if self.padding == "valid":
                h, w = h - self.kernel[0] + 1, w - self.kernel[1] + 1
                if h < 1 or w < 1:
                    raise ShapeError(f"{self.name}: input {in_shape} smaller than kernel")
            return (h, w, self.filters)
        if self.kind == "maxpool2d":
            h, w, c = in_shape
            oh, ow = h // self.pool[0], w // self.pool[1]
            if oh < 1 or ow < 1:
                raise ShapeError(f"{self.name}: input {in_shape} smaller than pool")
            return (oh, ow, c)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        if len(in_shape) != 1:
            raise ShapeError(f"{self.name}: dense layer needs flat input, got {in_shape}")
        return (self.units,)

    def param_shapes(self, in_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
        if self.kind == "conv2d":
            return [(self.kernel[0], self.kernel[1], in_shape[-1], self.filters), (self.filters,)]
        if self.kind == "dense":
            return [(in_shape[0], self.units), (self.units,)]
        return []


def param_count(shapes: list[tuple[int, ...]]) -> int:
    return sum(int(np.prod(s, dtype=np.int64)) for s in shapes)


# -- activations ------------------------------------------------------------

def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def activation_forward(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0)
    if activation == "tanh":
        return np.tanh(z)
    if activation == "softmax":
        return softmax(z)
    if activation == "linear":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def activation_backward(dy: np.ndarray, z: np.ndarray, y: np.ndarray, activation: str) -> np.ndarray:
    """Gradient w.r.t. pre-activation ``z`` given output ``y``.  relu'(0) = 0."""
    if activation == "relu":
        return dy * (z > 0)
    if activation == "tanh":
        return dy * (1 - y * y)
    if activation == "softmax":
        s = (dy * y).sum(axis=-1, keepdims=True)
        return y * (dy - s)
    if activation == "linear":
        return dy
    raise ValueError(f"unknown activation {activation!r}")


# -- convolution --------------------------------------------------------------

def _same_pads(k: int) -> tuple[int, int]:
    total = k - 1
    return total // 2, total - total // 2


def im2col(x: np.ndarray, kh: int, kw: int, padding: str) -> tuple[np.ndarray, tuple]:
    """Unroll NHWC input into rows of ``kh*kw*c`` patch values (kh, kw, c order)."""
    n, h, w, c = x.shape
    if padding == "same":
        (pt, pb), (pl, pr) = _same_pads(kh), _same_pads(kw)
        if pt or pb or pl or pr:
            x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    else:
        pt = pl = 0
    oh, ow = x.shape[1] - kh + 1, x.shape[2] - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # n, oh, ow, c, kh, kw
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)
    return cols, (n, h, w, c, oh, ow, pt, pl, x.shape[1], x.shape[2])


def col2im(dcols: np.ndarray, kh: int, kw: int, geom: tuple) -> np.ndarray:
    n, h, w, c, oh, ow, pt, pl, ph, pw = geom
    d = dcols.reshape(n, oh, ow, kh, kw, c)
    dxp = np.zeros((n, ph, pw, c), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + oh, j:j + ow, :] += d[:, :, :, i, j, :]
    return dxp[:, pt:pt + h, pl:pl + w, :]


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                   padding: str = "same", activation: str = "linear",
                   keep_cache: bool = True) -> tuple[np.ndarray, Any]:
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got {x.shape}")
    kh, kw, cin, f = weights.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[3]} channels, weights expect {cin}")
    cols, geom = im2col(x, kh, kw, padding)
    z = cols @ weights.reshape(kh * kw * cin, f)
    z += bias
    n, oh, ow = geom[0], geom[4], geom[5]
    z = z.reshape(n, oh, ow, f)
    y = activation_forward(z, activation)
    cache = (cols, geom, weights, z, y, activation) if keep_cache else None
    return y, cache


def conv2d_backward(dy: np.ndarray, cache, need_input_grad: bool = True):
    """Returns ``(d_input, d_weights, d_bias)``; ``d_input`` is None when not requested."""
    cols, geom, weights, z, y, activation = cache
    if dy.shape != y.shape:
        raise ShapeError(f"conv2d backward: upstream {dy.shape} != output {y.shape}")
    kh, kw, cin, f = weights.shape
    dz = activation_backward(dy, z, y, activation).reshape(-1, f)
    dw = (cols.T @ dz).reshape(weights.shape)
    db = dz.sum(axis=0)
    dx = None
    if need_input_grad:
        dcols = dz @ weights.reshape(kh * kw * cin, f).T
        dx = col2im(dcols, kh, kw, geom)
    return dx, dw, db


# -- pooling ------------------------------------------------------------------

def maxpool_forward(x: np.ndarray, pool: tuple[int, int] = (2, 2)) -> tuple[np.ndarray, Any]:
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    ph, pw = pool
    oh, ow = h // ph, w // pw
    if oh < 1 or ow < 1:
        raise ShapeError(f"maxpool: input {x.shape} smaller than pool {pool}")
    xc = x[:, :oh * ph, :ow * pw, :]
    win = xc.reshape(n, oh, ph, ow, pw, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, ph * pw)
    idx = win.argmax(axis=-1)  # first maximum in row-major window order
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, (x.shape, pool, idx)


def maxpool_backward(dy: np.ndarray, cache) -> np.ndarray:
    shape, (ph, pw), idx = cache
    n, h, w, c = shape
    oh, ow = idx.shape[1], idx.shape[2]
    if dy.shape != idx.shape:
        raise ShapeError(f"maxpool backward: upstream {dy.shape} != output {idx.shape}")
    win = np.zeros((n, oh, ow, c, ph * pw), dtype=dy.dtype)
    np.put_along_axis(win, idx[..., None], dy[..., None], axis=-1)
    dxc = win.reshape(n, oh, ow, c, ph, pw).transpose(0, 1, 4, 2, 5, 3).reshape(n, oh * ph, ow * pw, c)
    if oh * ph == h and ow * pw == w:
        return dxc
    dx = np.zeros(shape, dtype=dy.dtype)
    dx[:, :oh * ph, :ow * pw, :] = dxc
    return dx


# -- flatten / dense ------------------------------------------------------------

def flatten_forward(x: np.ndarray) -> tuple[np.ndarray, Any]:
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(dy: np.ndarray, cache) -> np.ndarray:
    return dy.reshape(cache)


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                  activation: str = "linear", keep_cache: bool = True) -> tuple[np.ndarray, Any]:
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weights {weights.shape}")
    z = x @ weights
    z += bias
    y = activation_forward(z, activation)
    return y, ((x, weights, z, y, activation) if keep_cache else None)


def dense_backward(dy: np.ndarray, cache, need_input_grad: bool = True):
    x, weights, z, y, activation = cache
    if dy.shape != y.shape:
        raise ShapeError(f"dense backward: upstream {dy.shape} != output {y.shape}")
    dz = activation_backward(dy, z, y, activation)
    dw = x.T @ dz
    db = dz.sum(axis=0)
    dx = dz @ weights.T if need_input_grad else None
    return dx, dw, db


# -- loss -----------------------------------------------------------------------

def _check_onehot(onehot: np.ndarray) -> None:
    ok = np.all((onehot == 0) | (onehot == 1), axis=1) & (onehot.sum(axis=1) == 1)
    if not np.all(ok):
        bad = int(np.flatnonzero(~ok)[0])
        raise ValueError(f"row {bad} of targets is not a valid one-hot vector")


def cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    """Mean over the batch of ``-sum(y * log(p + 1e-12))``."""
    if probs.shape != onehot.shape:
        raise ShapeError(f"cross_entropy: {probs.shape} vs {onehot.shape}")
    _check_onehot(onehot)
    n = probs.shape[0]
    return float(-(onehot * np.log(probs + LOG_EPS)).sum() / n)


def cross_entropy_backward(probs: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    """Gradient of the mean loss w.r.t. the probabilities."""
    return -onehot / (probs + LOG_EPS) / probs.shape[0]


def softmax_cross_entropy_backward(probs: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logits of softmax followed by mean cross-entropy."""
    return (probs - onehot) / probs.shape[0]


def one_hot(labels: np.ndarray, classes: int = 3, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), classes), dtype=dtype)
    out[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 1
    return out
