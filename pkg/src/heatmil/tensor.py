"""Dense-tensor primitives with hand-written backward passes.

Tensors are plain numpy arrays laid out channel-first: ``(C, H, W)`` for a
single feature map or ``(N, C, H, W)`` for a stack of patches.  Every
primitive comes as a forward function plus a ``*_backward`` partner that
maps the upstream gradient to gradients of each input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError, OracleError

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values produced by {where}")
    return x


@dataclass
class GradPair:
    """A parameter tensor together with its additive gradient buffer."""

    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"gradient shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0

    def accumulate(self, g: np.ndarray):
        self.grad += g


@dataclass
class ConvLayer:
    """Stride-1, same-padded 2-D convolution weights.

    ``kernel`` has shape ``(out_ch, in_ch, k, k)`` with odd ``k``.
    """

    kernel: np.ndarray
    bias: np.ndarray
    padding: int = field(init=False)

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise DimensionError(f"kernel must be (out, in, k, k), got {self.kernel.shape}")
        k = self.kernel.shape[2]
        if k % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {k}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise DimensionError(f"bias shape {self.bias.shape} does not match {self.kernel.shape[0]} outputs")
        self.padding = (k - 1) // 2

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def size(self) -> int:
        return self.kernel.shape[2]


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected a (C, H, W) or (N, C, H, W) tensor, got shape {x.shape}")


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Channel-last patch matrix of shape ``(N*H*W, k*k*C)``, ordered (di, dj, c)."""
    n, c, h, w = x.shape
    xh = x.transpose(0, 2, 3, 1)
    if pad:
        xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.concatenate([xh[:, i:i + h, j:j + w, :] for i in range(k) for j in range(k)], axis=-1)
    return cols.reshape(n * h * w, k * k * c)


def _kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    o = kernel.shape[0]
    return kernel.transpose(0, 2, 3, 1).reshape(o, -1)


def conv2d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    return conv2d_with_cols(x, layer)[0]


def conv2d_with_cols(x: np.ndarray, layer: ConvLayer):
    """Forward convolution that also returns the patch matrix for reuse in backward."""
    xb, squeeze = _as_batch(x)
    n, c, h, w = xb.shape
    if c != layer.in_channels:
        raise DimensionError(f"input has {c} channels, layer expects {layer.in_channels}")
    if h < 1 or w < 1:
        raise DimensionError("spatial extents must be positive")
    cols = _im2col(xb, layer.size, layer.padding)
    out = cols @ _kernel_matrix(layer.kernel).T
    out += layer.bias
    check_finite(out, "conv2d")
    # channel-first view over channel-last storage
    out = out.reshape(n, h, w, -1).transpose(0, 3, 1, 2)
    return (out[0] if squeeze else out), cols


def conv2d_backward(dout: np.ndarray, x: np.ndarray, layer: ConvLayer, cols: np.ndarray | None = None):
    """Return ``(dx, dkernel, dbias)`` for ``out = conv2d(x, layer)``."""
    xb, squeeze = _as_batch(x)
    db_, _ = _as_batch(dout)
    n, c, h, w = xb.shape
    o, k, pad = layer.out_channels, layer.size, layer.padding
    dmat = db_.transpose(0, 2, 3, 1).reshape(n * h * w, o)
    dbias = dmat.sum(axis=0)
    if cols is None:
        cols = _im2col(xb, k, pad)
    dkernel = (dmat.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
    dcols = (dmat @ _kernel_matrix(layer.kernel)).reshape(n, h, w, k, k, c)
    if k == 1:
        dxh = dcols[:, :, :, 0, 0, :]
    else:
        dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
        dxh = dxp[:, pad:pad + h, pad:pad + w, :]
    dx = dxh.transpose(0, 3, 1, 2)
    return (dx[0] if squeeze else dx), np.ascontiguousarray(dkernel), dbias


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _channel_axis(x: np.ndarray) -> int:
    if x.ndim not in (3, 4):
        raise DimensionError(f"layer_norm expects (C, H, W) or (N, C, H, W), got {x.shape}")
    return x.ndim - 3


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1,) * (ndim - 3) + (-1, 1, 1))


def layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray, eps: float = LN_EPS):
    """Normalize across channels at every spatial site.

    The variance is floored at ``eps`` rather than offset by it, so inputs
    that are already unit-variance pass through unchanged.

    Returns ``(out, cache)``; pass ``cache`` to :func:`layer_norm_backward`.
    """
    ax = _channel_axis(x)
    if gain.shape != (x.shape[ax],) or shift.shape != (x.shape[ax],):
        raise DimensionError("gain/shift must have one entry per channel")
    mu = x.mean(axis=ax, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    floored = var < eps
    inv = 1.0 / np.sqrt(np.maximum(var, eps))
    xhat = xc * inv
    out = xhat * _bcast(gain, x.ndim) + _bcast(shift, x.ndim)
    return out, (xhat, inv, floored, gain, ax)


def layer_norm_backward(dout: np.ndarray, cache):
    """Return ``(dx, dgain, dshift)``."""
    xhat, inv, floored, gain, ax = cache
    red = tuple(i for i in range(dout.ndim) if i != ax)
    dgain = (dout * xhat).sum(axis=red)
    dshift = dout.sum(axis=red)
    dxhat = dout * _bcast(gain, dout.ndim)
    m1 = dxhat.mean(axis=ax, keepdims=True)
    # where the variance floor is active the scale is constant
    m2 = np.where(floored, 0.0, (dxhat * xhat).mean(axis=ax, keepdims=True))
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgain, dshift


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, clamped so the result stays strictly inside (0, 1)."""
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    x = x.astype(dtype, copy=False)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(dtype, copy=False)
    fi = np.finfo(dtype)
    return np.clip(out, fi.tiny, np.nextafter(dtype.type(1), dtype.type(0)))


def sigmoid_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    return dout * out * (1.0 - out)


def finite_difference_gradient(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    eps: float = 1e-5,
    indices: Iterable[tuple] | None = None,
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``x`` is perturbed in place and restored.  When ``indices`` is given only
    those coordinates are estimated; the rest of the result is NaN.
    """
    if x.dtype != np.float64:
        raise OracleError("finite differences require a float64 tensor")
    grad = np.full(x.shape, np.nan) if indices is not None else np.zeros(x.shape)
    idx_iter = indices if indices is not None else np.ndindex(x.shape)
    for idx in idx_iter:
        idx = tuple(idx)
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"objective is not finite at coordinate {idx}")
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-8) -> float:
    """Largest elementwise relative error, ignoring entries closer than ``atol``."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - b)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
    rel = np.where(diff <= atol, 0.0, diff / scale)
    return float(rel.max()) if rel.size else 0.0
