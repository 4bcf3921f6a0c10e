"""Layer specs, their instantiations, and finite-difference gradient checks.

A LayerSpec is a small declarative description (kind plus sizes) with total
shape inference; ``instantiate`` turns it into a callable layer holding
parameter Tensors. ``grad_check`` compares analytic gradients against central
differences in float64 for any spec.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeMismatchError

VALID_KERNELS = (1, 3, 7)
VALID_STRIDES = (1, 2)


def xavier_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def embedding_init(rng, shape):
    return rng.normal(0.0, 0.02, size=shape)


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenseSpec:
    in_dim: int
    out_dim: int

    def infer_shape(self, in_shape):
        if in_shape[-1] != self.in_dim:
            raise ShapeMismatchError(
                f"Dense expects feature dim {self.in_dim}, got {in_shape}"
            )
        return in_shape[:-1] + (self.out_dim,)

    def probe_shape(self):
        return (2, self.in_dim)


@dataclass(frozen=True)
class Conv2DSpec:
    kernel: int
    in_ch: int
    out_ch: int
    stride: int = 1

    def __post_init__(self):
        if self.kernel not in VALID_KERNELS:
            raise ConfigError(f"conv kernel must be one of {VALID_KERNELS}")
        if self.stride not in VALID_STRIDES:
            raise ConfigError(f"conv stride must be one of {VALID_STRIDES}")

    def infer_shape(self, in_shape):
        if len(in_shape) != 4 or in_shape[3] != self.in_ch:
            raise ShapeMismatchError(
                f"Conv2D expects NHWC with {self.in_ch} channels, got {in_shape}"
            )
        pad = self.kernel // 2
        ho = (in_shape[1] + 2 * pad - self.kernel) // self.stride + 1
        wo = (in_shape[2] + 2 * pad - self.kernel) // self.stride + 1
        return (in_shape[0], ho, wo, self.out_ch)

    def probe_shape(self):
        return (2, 5, 5, self.in_ch)


@dataclass(frozen=True)
class LayerNormSpec:
    dim: int

    def infer_shape(self, in_shape):
        if in_shape[-1] != self.dim:
            raise ShapeMismatchError(
                f"LayerNorm expects feature dim {self.dim}, got {in_shape}"
            )
        return in_shape

    def probe_shape(self):
        return (3, self.dim)


@dataclass(frozen=True)
class MultiHeadAttentionSpec:
    d_model: int
    heads: int

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError("d_model must divide evenly into heads")

    def infer_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[-1] != self.d_model:
            raise ShapeMismatchError(
                f"attention expects (batch, tokens, {self.d_model}), got {in_shape}"
            )
        return in_shape

    def probe_shape(self):
        return (2, 6, self.d_model)


@dataclass(frozen=True)
class ReLUSpec:
    def infer_shape(self, in_shape):
        return in_shape

    def probe_shape(self):
        return (3, 4)


@dataclass(frozen=True)
class GELUSpec:
    def infer_shape(self, in_shape):
        return in_shape

    def probe_shape(self):
        return (3, 4)


@dataclass(frozen=True)
class SoftmaxSpec:
    axis: int = -1

    def infer_shape(self, in_shape):
        return in_shape

    def probe_shape(self):
        return (3, 5)


@dataclass(frozen=True)
class ResidualSpec:
    inner: tuple  # sequence of specs whose composition preserves shape

    def infer_shape(self, in_shape):
        shape = in_shape
        for spec in self.inner:
            shape = spec.infer_shape(shape)
        if shape != in_shape:
            raise ShapeMismatchError(
                f"residual block changes shape {in_shape} -> {shape}"
            )
        return in_shape

    def probe_shape(self):
        return self.inner[0].probe_shape()


@dataclass(frozen=True)
class MaxPool2DSpec:
    def infer_shape(self, in_shape):
        if len(in_shape) != 4:
            raise ShapeMismatchError(f"MaxPool2D expects NHWC, got {in_shape}")
        return (in_shape[0], in_shape[1] // 2, in_shape[2] // 2, in_shape[3])

    def probe_shape(self):
        return (2, 4, 4, 3)


# ---------------------------------------------------------------------------
# Instantiated layers
# ---------------------------------------------------------------------------


class Layer:
    def params(self) -> List[Tensor]:
        return []

    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, spec: DenseSpec, rng):
        self.spec = spec
        self.w = ad.parameter(
            xavier_uniform(rng, (spec.in_dim, spec.out_dim), spec.in_dim, spec.out_dim)
        )
        self.b = ad.parameter(np.zeros(spec.out_dim))

    def params(self):
        return [self.w, self.b]

    def __call__(self, x):
        return x @ self.w + self.b


class Conv2D(Layer):
    def __init__(self, spec: Conv2DSpec, rng):
        self.spec = spec
        k = spec.kernel
        fan_in = k * k * spec.in_ch
        fan_out = k * k * spec.out_ch
        self.w = ad.parameter(
            xavier_uniform(rng, (k, k, spec.in_ch, spec.out_ch), fan_in, fan_out)
        )
        self.b = ad.parameter(np.zeros(spec.out_ch))

    def params(self):
        return [self.w, self.b]

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.spec.stride)


class LayerNorm(Layer):
    def __init__(self, spec: LayerNormSpec, rng=None):
        self.spec = spec
        self.gamma = ad.parameter(np.ones(spec.dim))
        self.beta = ad.parameter(np.zeros(spec.dim))

    def params(self):
        return [self.gamma, self.beta]

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(Layer):
    def __init__(self, spec: MultiHeadAttentionSpec, rng):
        self.spec = spec
        d = spec.d_model
        self.wq = Dense(DenseSpec(d, d), rng)
        self.wk = Dense(DenseSpec(d, d), rng)
        self.wv = Dense(DenseSpec(d, d), rng)
        self.wo = Dense(DenseSpec(d, d), rng)

    def params(self):
        return self.wq.params() + self.wk.params() + self.wv.params() + self.wo.params()

    def __call__(self, x):
        b, n, d = x.shape
        h = self.spec.heads
        dh = d // h

        def split(t):
            return t.reshape(b, n, h, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)
        mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.wo(mixed)


class ReLU(Layer):
    def __init__(self, spec=None, rng=None):
        pass

    def __call__(self, x):
        return x.relu()


class GELU(Layer):
    def __init__(self, spec=None, rng=None):
        pass

    def __call__(self, x):
        return x.gelu()


class Softmax(Layer):
    def __init__(self, spec: SoftmaxSpec, rng=None):
        self.spec = spec

    def __call__(self, x):
        return ad.softmax(x, axis=self.spec.axis)


class Residual(Layer):
    def __init__(self, spec: ResidualSpec, rng):
        self.inner = [instantiate(s, rng) for s in spec.inner]

    def params(self):
        return [p for layer in self.inner for p in layer.params()]

    def __call__(self, x):
        y = x
        for layer in self.inner:
            y = layer(y)
        return x + y


class MaxPool2D(Layer):
    def __init__(self, spec=None, rng=None):
        pass

    def __call__(self, x):
        return ad.max_pool2d(x)


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


_LAYER_CLASSES = {
    DenseSpec: Dense,
    Conv2DSpec: Conv2D,
    LayerNormSpec: LayerNorm,
    MultiHeadAttentionSpec: MultiHeadAttention,
    ReLUSpec: ReLU,
    GELUSpec: GELU,
    SoftmaxSpec: Softmax,
    ResidualSpec: Residual,
    MaxPool2DSpec: MaxPool2D,
}


def instantiate(spec, rng) -> Layer:
    try:
        cls = _LAYER_CLASSES[type(spec)]
    except KeyError:
        raise ConfigError(f"unknown layer spec {spec!r}") from None
    return cls(spec, rng)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def _rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def grad_check(spec, seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs a small instantiation of the spec in float64 and perturbs every
    parameter and input entry. Inputs are nudged away from zero so kinked
    activations (ReLU, MaxPool) are not probed at their kinks.
    """
    with ad.use_dtype(np.float64):
        rng = np.random.default_rng(seed)
        layer = instantiate(spec, rng)
        x_data = rng.standard_normal(spec.probe_shape())
        x_data += 0.25 * np.where(x_data >= 0, 1.0, -1.0) * (np.abs(x_data) < 0.05)
        x = Tensor(x_data.copy(), requires_grad=True)
        proj = rng.standard_normal(spec.infer_shape(x.shape))

        def run() -> float:
            out = layer(x)
            return float((out.data * proj).sum())

        loss = (layer(x) * Tensor(proj)).sum()
        loss.backward()

        worst = 0.0
        for target in layer.params() + [x]:
            analytic = target.grad.copy()
            numeric = np.zeros_like(analytic)
            flat = target.data.reshape(-1)
            nflat = numeric.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                up = run()
                flat[i] = keep - h
                down = run()
                flat[i] = keep
                nflat[i] = (up - down) / (2 * h)
            worst = max(worst, _rel_error(analytic, numeric))
        return worst


DEFAULT_GRADCHECK_SUITE: Tuple = (
    DenseSpec(4, 3),
    ReLUSpec(),
    GELUSpec(),
    SoftmaxSpec(axis=-1),
    LayerNormSpec(8),
    Conv2DSpec(1, 3, 4, stride=1),
    Conv2DSpec(3, 2, 2, stride=1),
    Conv2DSpec(3, 2, 3, stride=2),
    Conv2DSpec(7, 2, 2, stride=2),
    MaxPool2DSpec(),
    MultiHeadAttentionSpec(8, 2),
    ResidualSpec((LayerNormSpec(6), DenseSpec(6, 6), GELUSpec())),
)


def run_gradcheck_suite(seed: int = 0):
    """(spec, max_rel_error) pairs over the default suite."""
    return [(spec, grad_check(spec, seed)) for spec in DEFAULT_GRADCHECK_SUITE]
