"""Dense-tensor reverse-mode automatic differentiation on numpy storage.

Tensors record their parents and a backward closure on an implicit tape;
``backward()`` walks the tape in reverse topological order exactly once.
Training runs in float32; wrap code in ``use_dtype(np.float64)`` for
finite-difference gradient checks.

Masked log-softmax convention: entries outside the mask are written as 0.0
(not -inf) so no inf/nan can leak into downstream arithmetic; consumers must
multiply by the mask, which also makes masked-out probabilities and gradients
exactly zero.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import List, Optional, Sequence

import numpy as np

from .errors import DomainError, ShapeMismatchError

_STATE = {"dtype": np.float32}


def current_dtype():
    return _STATE["dtype"]


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    prev = _STATE["dtype"]
    _STATE["dtype"] = dtype
    try:
        yield
    finally:
        _STATE["dtype"] = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_STATE["dtype"])
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = _parents
        self._backward = _backward

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    # -- graph machinery -----------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.data.size != 1:
            raise DomainError("backward() requires a scalar loss")
        topo: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        for node in topo:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        other = _as_tensor(other)
        try:
            data = self.data + other.data
        except ValueError:
            raise ShapeMismatchError(
                f"cannot add {self.shape} and {other.shape}"
            ) from None

        def back(g):
            _accum(self, _unbroadcast(g, self.shape))
            _accum(other, _unbroadcast(g, other.shape))

        return Tensor(data, _parents=(self, other), _backward=back)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        try:
            data = self.data * other.data
        except ValueError:
            raise ShapeMismatchError(
                f"cannot multiply {self.shape} and {other.shape}"
            ) from None

        def back(g):
            _accum(self, _unbroadcast(g * other.data, self.shape))
            _accum(other, _unbroadcast(g * self.data, other.shape))

        return Tensor(data, _parents=(self, other), _backward=back)

    def __neg__(self) -> "Tensor":
        data = -self.data

        def back(g):
            _accum(self, -g)

        return Tensor(data, _parents=(self,), _backward=back)

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other))

    def __rmul__(self, other) -> "Tensor":
        return self * other

    def __radd__(self, other) -> "Tensor":
        return self + other

    def __pow__(self, exponent: float) -> "Tensor":
        data = self.data**exponent

        def back(g):
            _accum(self, g * exponent * self.data ** (exponent - 1))

        return Tensor(data, _parents=(self,), _backward=back)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        other = _as_tensor(other)
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise ShapeMismatchError("matmul operands must have >= 2 dimensions")
        if self.shape[-1] != other.shape[-2]:
            raise ShapeMismatchError(
                f"matmul inner dimensions differ: {self.shape} @ {other.shape}"
            )
        data = self.data @ other.data

        def back(g):
            _accum(self, _unbroadcast(g @ other.data.swapaxes(-1, -2), self.shape))
            _accum(other, _unbroadcast(self.data.swapaxes(-1, -2) @ g, other.shape))

        return Tensor(data, _parents=(self, other), _backward=back)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def back(g):
            _accum(self, g.reshape(self.shape))

        return Tensor(data, _parents=(self,), _backward=back)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        data = self.data.transpose(axes)
        inverse = tuple(np.argsort(axes))

        def back(g):
            _accum(self, g.transpose(inverse))

        return Tensor(data, _parents=(self,), _backward=back)

    def __getitem__(self, key) -> "Tensor":
        data = self.data[key]

        def back(g):
            if self.grad is not None:
                np.add.at(self.grad, key, g)

        return Tensor(data, _parents=(self,), _backward=back)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(self, np.broadcast_to(g, self.shape).copy())

        return Tensor(data, _parents=(self,), _backward=back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    # -- elementwise nonlinearities -------------------------------------------

    def relu(self) -> "Tensor":
        keep = self.data > 0
        data = np.where(keep, self.data, 0)

        def back(g):
            _accum(self, g * keep)

        return Tensor(data, _parents=(self,), _backward=back)

    def tanh(self) -> "Tensor":
        data = np.tanh(self.data)

        def back(g):
            _accum(self, g * (1 - data * data))

        return Tensor(data, _parents=(self,), _backward=back)

    def exp(self) -> "Tensor":
        data = np.exp(self.data)

        def back(g):
            _accum(self, g * data)

        return Tensor(data, _parents=(self,), _backward=back)

    def log(self) -> "Tensor":
        data = np.log(self.data)

        def back(g):
            _accum(self, g / self.data)

        return Tensor(data, _parents=(self,), _backward=back)

    def gelu(self) -> "Tensor":
        # tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
        c = math.sqrt(2.0 / math.pi)
        x = self.data
        inner = c * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        data = 0.5 * x * (1 + t)

        def back(g):
            dinner = c * (1 + 3 * 0.044715 * x**2)
            _accum(self, g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner))

        return Tensor(data, _parents=(self,), _backward=back)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is not None:
        t.grad += g


def parameter(data, rng=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=_STATE["dtype"]), requires_grad=True)


# ---------------------------------------------------------------------------
# Fused and structural ops
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return Tensor(data, _parents=tuple(tensors), _backward=back)


def broadcast_to(t: Tensor, shape: tuple) -> Tensor:
    data = np.broadcast_to(t.data, shape).copy()

    def back(g):
        _accum(t, _unbroadcast(g, t.shape))

    return Tensor(data, _parents=(t,), _backward=back)


def take_along_last(t: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the last axis with a constant integer index array."""
    idx = np.asarray(idx)
    data = np.take_along_axis(t.data, idx, axis=-1)

    def back(g):
        if t.grad is not None:
            scatter = np.zeros_like(t.data)
            np.add.at(
                scatter.reshape(-1, t.shape[-1]),
                (
                    np.arange(scatter.size // t.shape[-1])[:, None]
                    .repeat(idx.shape[-1], axis=1),
                    idx.reshape(-1, idx.shape[-1]),
                ),
                g.reshape(-1, idx.shape[-1]),
            )
            t.grad += scatter

    return Tensor(data, _parents=(t,), _backward=back)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(t, data * (g - dot))

    return Tensor(data, _parents=(t,), _backward=back)


def masked_log_softmax(t: Tensor, mask: np.ndarray) -> Tensor:
    """Log-probabilities over the masked entries of the last axis.

    Masked-out entries of the result are 0.0 and carry exactly zero
    gradient; multiply by the mask before using them (see module docstring).
    Rows with an empty mask are rejected.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != t.shape:
        raise ShapeMismatchError(f"mask {mask.shape} does not match logits {t.shape}")
    if not mask.any(axis=-1).all():
        raise DomainError("mask has a row with no legal entries")
    neg = np.finfo(t.data.dtype).min
    masked = np.where(mask, t.data, neg)
    m = masked.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(t.data - m), 0.0)
    lse = np.log(e.sum(axis=-1, keepdims=True)) + m
    data = np.where(mask, t.data - lse, 0.0)
    probs = np.where(mask, np.exp(data), 0.0)

    def back(g):
        g_in = g * mask
        dot = g_in.sum(axis=-1, keepdims=True)
        _accum(t, g_in - probs * dot * mask)

    return Tensor(data, _parents=(t,), _backward=back)


def masked_probs(log_probs: Tensor, mask: np.ndarray) -> np.ndarray:
    """Probabilities from masked_log_softmax output; masked-out entries 0."""
    return np.where(np.asarray(mask, dtype=bool), np.exp(log_probs.data), 0.0)


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    if gamma.shape != t.shape[-1:] or beta.shape != t.shape[-1:]:
        raise ShapeMismatchError(
            f"layer_norm affine shape {gamma.shape} does not match feature dim"
        )
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def back(g):
        n = x.shape[-1]
        _accum(beta, _unbroadcast(g, beta.shape))
        _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
        gx = g * gamma.data
        dx = inv * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        _accum(t, dx)

    return Tensor(data, _parents=(t, gamma, beta), _backward=back)


def conv2d(t: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """2D convolution on NHWC input with zero padding k // 2.

    weight has shape (k, k, c_in, c_out); output spatial size is
    (H + 2*(k//2) - k) // stride + 1 per axis.
    """
    k = weight.shape[0]
    if t.data.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects NHWC input, got shape {t.shape}")
    if t.shape[3] != weight.shape[2]:
        raise ShapeMismatchError(
            f"conv2d input has {t.shape[3]} channels, weight expects {weight.shape[2]}"
        )
    pad = k // 2
    b, h, w, _ = t.shape
    c_out = weight.shape[3]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(t.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.broadcast_to(bias.data, (b, ho, wo, c_out)).copy()
    for i in range(k):
        for j in range(k):
            patch = xp[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :]
            out += patch @ weight.data[i, j]

    def back(g):
        dxp = np.zeros_like(xp) if t.grad is not None else None
        for i in range(k):
            for j in range(k):
                patch = xp[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :]
                if weight.grad is not None:
                    weight.grad[i, j] += np.einsum("bhwc,bhwd->cd", patch, g)
                if dxp is not None:
                    dxp[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :] += (
                        g @ weight.data[i, j].T
                    )
        if bias.grad is not None:
            bias.grad += g.sum(axis=(0, 1, 2))
        if dxp is not None:
            t.grad += dxp[:, pad : pad + h, pad : pad + w, :] if pad else dxp

    return Tensor(out, _parents=(t, weight, bias), _backward=back)


def max_pool2d(t: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 on NHWC input; odd remainders dropped."""
    if t.data.ndim != 4:
        raise ShapeMismatchError(f"max_pool2d expects NHWC input, got {t.shape}")
    b, h, w, c = t.shape
    ho, wo = h // 2, w // 2
    x = t.data[:, : ho * 2, : wo * 2, :]
    windows = x.reshape(b, ho, 2, wo, 2, c)
    data = windows.max(axis=(2, 4))

    def back(g):
        if t.grad is None:
            return
        # Route each output's gradient to the first maximal entry only.
        flat = windows.transpose(0, 1, 3, 5, 2, 4).reshape(b, ho, wo, c, 4)
        argmax = flat.argmax(axis=-1)
        hit = np.zeros_like(flat)
        np.put_along_axis(hit, argmax[..., None], g[..., None], axis=-1)
        scattered = (
            hit.reshape(b, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
            .reshape(b, ho * 2, wo * 2, c)
        )
        t.grad[:, : ho * 2, : wo * 2, :] += scattered

    return Tensor(data, _parents=(t,), _backward=back)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)

    def back(g):
        _accum(a, _unbroadcast(g * take_a, a.shape))
        _accum(b, _unbroadcast(g * ~take_a, b.shape))

    return Tensor(data, _parents=(a, b), _backward=back)


def clip(t: Tensor, lo: float, hi: float) -> Tensor:
    inside = (t.data >= lo) & (t.data <= hi)
    data = np.clip(t.data, lo, hi)

    def back(g):
        _accum(t, g * inside)

    return Tensor(data, _parents=(t,), _backward=back)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        b1c = 1 - self.beta1**self.step_count
        b2c = 1 - self.beta2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict:
        """Flat state for checkpointing; load with load_state_arrays."""
        out = {"step_count": self.step_count}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state_arrays(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for i in range(len(self.params)):
            self.m[i][...] = state[f"m{i}"]
            self.v[i][...] = state[f"v{i}"]
