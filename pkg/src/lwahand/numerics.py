"""Dense numerical substrate shared by every operator in the package.

Arrays are plain ``numpy.ndarray`` objects in row-major (C) order. Verification
paths run in float64. Each differentiable primitive comes as a ``*_fwd`` /
``*_bwd`` pair: the forward returns ``(output, cache)`` and the backward maps an
upstream gradient plus the cache to input/weight gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

OPERATORS = (
    "matmul",
    "softmax",
    "activation",
    "depthwise_conv2d",
    "pointwise_conv2d",
)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a computation produces or receives non-finite values."""


def as_tensor(x, name: str = "tensor", dtype=np.float64) -> np.ndarray:
    """Convert external input to a contiguous array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(np.asarray(x, dtype=dtype))
    if arr.size and not np.all(np.isfinite(arr)):
        raise NumericError(f"{name}: non-finite values in input")
    if any(s <= 0 for s in arr.shape):
        raise ShapeError(f"{name}: shape {arr.shape} has a non-positive dimension")
    return arr


def _require_ndim(x: np.ndarray, ndim: int, name: str) -> None:
    if x.ndim != ndim:
        raise ShapeError(f"{name}: expected rank {ndim}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

_GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class SeededRng:
    """SplitMix64 stream.

    Draw ``i`` (0-based) is ``mix(seed + (i + 1) * 0x9E3779B97F4A7C15)`` with the
    standard SplitMix64 finalizer, so the stream is counter-based and can be
    generated in vectorized blocks. Uniform doubles use the top 53 bits.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _GOLDEN_GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z = z ^ (z >> np.uint64(31))
        return z

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = tuple(int(s) for s in np.atleast_1d(shape)) if np.ndim(shape) else (int(shape),)
        n = int(np.prod(shape))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        """Box-Muller normals built from two uniform blocks."""
        shape = tuple(shape)
        n = int(np.prod(shape))
        u1 = self.uniform(n)
        u2 = self.uniform(n)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        return (r * np.cos(2.0 * np.pi * u2)).reshape(shape)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        span = np.uint64(high - low)
        return (self.next_u64(n) % span).astype(np.int64) + low

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    trainable: bool = True


@dataclass
class ParamStore:
    """Ordered, uniquely named collection of parameters."""

    params: dict[str, Parameter] = field(default_factory=dict)

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.ascontiguousarray(np.asarray(value, dtype=np.float64))
        self.params[name] = Parameter(name, arr, trainable)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def __setitem__(self, name: str, value) -> None:
        p = self.params[name]
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != p.value.shape:
            raise ShapeError(f"{name}: expected shape {p.value.shape}, got {arr.shape}")
        p.value = np.ascontiguousarray(arr)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, trainable_only: bool = False) -> list[str]:
        return [n for n, p in self.params.items() if p.trainable or not trainable_only]

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, p in self.params.items():
            out.params[n] = Parameter(n, p.value.copy(), p.trainable)
        return out

    def num_values(self) -> int:
        return sum(p.value.size for p in self.params.values())


# ---------------------------------------------------------------------------
# Dense primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    if x.shape[axis] == 0:
        raise ShapeError("softmax: empty axis")
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_bwd(dy: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_fwd(x: np.ndarray, kind: str):
    """Elementwise activation. ``silu`` is x*sigmoid(x); ``identity`` is a no-op."""
    if kind == "identity":
        return x, None
    if kind == "silu":
        s = _sigmoid(x)
        return x * s, (x, s)
    raise ValueError(f"unknown activation {kind!r}")


def activation_bwd(dy: np.ndarray, cache, kind: str) -> np.ndarray:
    if kind == "identity":
        return dy
    x, s = cache
    return dy * (s * (1.0 + x * (1.0 - s)))


def activation(x, kind: str = "silu") -> np.ndarray:
    return activation_fwd(np.asarray(x, dtype=np.float64), kind)[0]


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def depthwise_conv2d_fwd(x, kernel, stride: int = 1, padding: int = 0):
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    _require_ndim(x, 3, "depthwise_conv2d input")
    _require_ndim(kernel, 3, "depthwise_conv2d kernel")
    c, h, w = x.shape
    kc, k, k2 = kernel.shape
    if kc != c:
        raise ShapeError(f"depthwise_conv2d: kernel channels {kc} != input channels {c}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"depthwise_conv2d: kernel must be square with odd size, got {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("depthwise_conv2d: stride must be >= 1 and padding >= 0")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"depthwise_conv2d: kernel {k}x{k} larger than padded input {h}x{w}+{padding}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    out = np.zeros((c, ho, wo))
    for a in range(k):
        for b in range(k):
            patch = xp[:, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride]
            out += kernel[:, a, b, None, None] * patch
    return out, (xp, kernel, stride, padding, x.shape)


def depthwise_conv2d_bwd(dout: np.ndarray, cache):
    xp, kernel, stride, padding, in_shape = cache
    _, k, _ = kernel.shape
    _, ho, wo = dout.shape
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernel)
    for a in range(k):
        for b in range(k):
            sl = (slice(None), slice(a, a + stride * (ho - 1) + 1, stride), slice(b, b + stride * (wo - 1) + 1, stride))
            dk[:, a, b] = np.sum(dout * xp[sl], axis=(1, 2))
            dxp[sl] += kernel[:, a, b, None, None] * dout
    _, h, w = in_shape
    dx = dxp[:, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(dx), dk


def depthwise_conv2d(x, kernel, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Per-channel spatial convolution with zero padding (cross-correlation form)."""
    return depthwise_conv2d_fwd(x, kernel, stride, padding)[0]


def pointwise_conv2d_fwd(x, kernel):
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    _require_ndim(x, 3, "pointwise_conv2d input")
    _require_ndim(kernel, 2, "pointwise_conv2d kernel")
    c, h, w = x.shape
    if kernel.shape[1] != c:
        raise ShapeError(f"pointwise_conv2d: kernel {kernel.shape} does not accept {c} channels")
    out = (kernel @ x.reshape(c, h * w)).reshape(kernel.shape[0], h, w)
    return out, (x, kernel)


def pointwise_conv2d_bwd(dout: np.ndarray, cache):
    x, kernel = cache
    c, h, w = x.shape
    d2 = dout.reshape(kernel.shape[0], h * w)
    dk = d2 @ x.reshape(c, h * w).T
    dx = (kernel.T @ d2).reshape(c, h, w)
    return dx, dk


def pointwise_conv2d(x, kernel) -> np.ndarray:
    """1x1 convolution: the same channel-mixing matrix applied at every pixel."""
    return pointwise_conv2d_fwd(x, kernel)[0]


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"finite_diff_grad: non-finite function value at element {i}")
        g[i] = (fp - fm) / (2.0 * eps)
    return grad


def directional_derivative(f: Callable[[np.ndarray], float], x, direction, eps: float = 1e-5) -> float:
    x = np.asarray(x, dtype=np.float64)
    fp = float(f(x + eps * direction))
    fm = float(f(x - eps * direction))
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise NumericError("directional_derivative: non-finite function value")
    return (fp - fm) / (2.0 * eps)


def relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """Max-norm relative error between two gradient arrays."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), floor)
    return float(np.max(np.abs(a - n), initial=0.0) / scale)


def accumulate(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


