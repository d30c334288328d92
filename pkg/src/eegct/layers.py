"""Differentiable building blocks: grouped temporal convolutions, norms,
pooling, dropout and linear maps.

Convolution is cross-correlation (no kernel flip) with symmetric zero
padding, computed via sliding windows + einsum; each layer registers a
hand-derived backward rule on the tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _meter_add, make_op, matmul


@dataclass(frozen=True)
class Conv1dSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    groups: int = 1
    padding: int = 0
    bias: bool = True

    def __post_init__(self):
        if self.kernel_size < 1:
            raise ShapeError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels} in, {self.out_channels} out) "
                f"not divisible by groups={self.groups}"
            )

    @property
    def group_in(self) -> int:
        return self.in_channels // self.groups

    @property
    def group_out(self) -> int:
        return self.out_channels // self.groups

    def out_len(self, t: int) -> int:
        n = t + 2 * self.padding - self.kernel_size + 1
        if n <= 0:
            raise ShapeError(
                f"conv output length {n} <= 0 for input length {t}, "
                f"kernel {self.kernel_size}, padding {self.padding}"
            )
        return n


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape((1,) + x.shape), False
    if x.ndim == 3:
        return x, True
    raise ShapeError(f"expected (C, T) or (B, C, T), got {x.shape}")


def _windows(arr: np.ndarray, k: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(arr, k, axis=-1)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, spec: Conv1dSpec) -> Tensor:
    """Grouped 1-d cross-correlation. x: (B, Cin, T) or (Cin, T);
    w: (Cout, Cin/groups, K); returns (B, Cout, T') / (Cout, T')."""
    x3, had_batch = _batched(x)
    bsz, cin, t = x3.shape
    if cin != spec.in_channels:
        raise ShapeError(f"conv expects {spec.in_channels} channels, got {cin}")
    if w.shape != (spec.out_channels, spec.group_in, spec.kernel_size):
        raise ShapeError(f"conv weight shape {w.shape} does not match {spec}")
    g, ci, co, k = spec.groups, spec.group_in, spec.group_out, spec.kernel_size
    t_out = spec.out_len(t)

    xp = x3.data
    if spec.padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (spec.padding, spec.padding)))
    win = _windows(xp, k).reshape(bsz, g, ci, t_out, k)
    w5 = w.data.reshape(g, co, ci, k)
    out = np.einsum("bgitk,goik->bgot", win, w5, optimize=True)
    out = np.ascontiguousarray(out.reshape(bsz, spec.out_channels, t_out))
    _meter_add(bsz * spec.out_channels * ci * k * t_out)
    if b is not None:
        out = out + b.data[:, None]

    parents = (x3, w) if b is None else (x3, w, b)

    def backward_fn(grad):
        g4 = grad.reshape(bsz, g, co, t_out)
        if w.requires_grad or w._backward is not None:
            dw = np.einsum("bgot,bgitk->goik", g4, win, optimize=True)
            w._accumulate(dw.reshape(spec.out_channels, ci, k))
        if b is not None and (b.requires_grad or b._backward is not None):
            b._accumulate(grad.sum(axis=(0, 2)))
        if x3.requires_grad or x3._backward is not None:
            gp = np.pad(grad, ((0, 0), (0, 0), (k - 1, k - 1)))
            gwin = _windows(gp, k).reshape(bsz, g, co, xp.shape[-1], k)
            wflip = w5[..., ::-1]
            dxp = np.einsum("bgosk,goik->bgis", gwin, wflip, optimize=True)
            dxp = dxp.reshape(bsz, cin, xp.shape[-1])
            if spec.padding:
                dxp = dxp[..., spec.padding:spec.padding + t]
            x3._accumulate(np.ascontiguousarray(dxp))

    res = make_op(out, parents, backward_fn)
    return res if had_batch else res.reshape(res.shape[1:])


class Conv1d:
    """Owns the weight (and optional bias) for one grouped conv layer."""

    def __init__(self, spec: Conv1dSpec, rng: np.random.Generator):
        self.spec = spec
        fan_in = spec.group_in * spec.kernel_size
        self.w = Tensor(uniform_init(rng, (spec.out_channels, spec.group_in, spec.kernel_size), fan_in),
                        requires_grad=True)
        self.b = Tensor(np.zeros(spec.out_channels), requires_grad=True) if spec.bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.w, self.b, self.spec)


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None, spec: Conv1dSpec) -> Tensor:
    """Conv where each group contains exactly one input channel."""
    if spec.group_in != 1:
        raise ShapeError(f"depthwise conv needs groups == in_channels, got {spec}")
    return conv1d(x, w, b, spec)


def pointwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None, spec: Conv1dSpec) -> Tensor:
    """Kernel-1 conv: a per-timestep linear mix of channels within each group."""
    if spec.kernel_size != 1:
        raise ShapeError(f"pointwise conv needs kernel_size == 1, got {spec.kernel_size}")
    return conv1d(x, w, b, spec)


def separable_conv1d(x: Tensor, depth: Conv1d, point: Conv1d) -> Tensor:
    if point.spec.kernel_size != 1:
        raise ShapeError("separable conv: second stage must have kernel_size 1")
    if depth.spec.out_channels != point.spec.in_channels:
        raise ShapeError(
            f"separable conv: depth out {depth.spec.out_channels} != point in {point.spec.in_channels}"
        )
    return point(depth(x))


class BatchNorm1d:
    """Per-channel batch norm over (batch, time) with running statistics.

    Running stats start at mean 0 / var 1, updated as
    new = (1 - momentum) * old + momentum * batch.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        x3, had_batch = _batched(x)
        bsz, c, t = x3.shape
        if c != self.num_features:
            raise ShapeError(f"batch norm expects {self.num_features} channels, got {c}")
        if training and bsz * t < 2:
            raise ShapeError("batch norm in train mode needs batch*time >= 2")
        gamma, beta = self.gamma, self.beta

        if training:
            mu = x3.data.mean(axis=(0, 2))
            var = x3.data.var(axis=(0, 2))
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mu, var = self.running_mean, self.running_var

        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x3.data - mu[:, None]) * inv[:, None]
        out = gamma.data[:, None] * xhat + beta.data[:, None]
        n = bsz * t

        def backward_fn(g):
            if beta.requires_grad or beta._backward is not None:
                beta._accumulate(g.sum(axis=(0, 2)))
            if gamma.requires_grad or gamma._backward is not None:
                gamma._accumulate((g * xhat).sum(axis=(0, 2)))
            if x3.requires_grad or x3._backward is not None:
                dxhat = g * gamma.data[:, None]
                if training:
                    s1 = dxhat.sum(axis=(0, 2), keepdims=True)
                    s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
                    dx = inv[:, None] / n * (n * dxhat - s1 - xhat * s2)
                else:
                    dx = dxhat * inv[:, None]
                x3._accumulate(dx)

        res = make_op(out, (x3, gamma, beta), backward_fn)
        return res if had_batch else res.reshape(res.shape[1:])


class LayerNorm:
    """Normalizes over the last dimension per position, then scales/shifts."""

    def __init__(self, dim: int, eps: float = 1e-5):
        if dim < 2:
            raise ShapeError(f"layer norm needs last-dim length >= 2, got {dim}")
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"layer norm expects trailing dim {self.dim}, got {x.shape}")
        gamma, beta = self.gamma, self.beta
        mu = x.data.mean(axis=-1, keepdims=True)
        var = x.data.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x.data - mu) * inv
        out = gamma.data * xhat + beta.data

        def backward_fn(g):
            if beta.requires_grad or beta._backward is not None:
                beta._accumulate(g.reshape(-1, self.dim).sum(axis=0))
            if gamma.requires_grad or gamma._backward is not None:
                gamma._accumulate((g * xhat).reshape(-1, self.dim).sum(axis=0))
            if x.requires_grad or x._backward is not None:
                dxhat = g * gamma.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                x._accumulate(inv * (dxhat - m1 - xhat * m2))

        return make_op(out, (x, gamma, beta), backward_fn)


def avg_pool1d(x: Tensor, pool: int) -> Tensor:
    """Non-overlapping window means along time; the trailing remainder is dropped."""
    if pool < 1:
        raise ShapeError(f"pool size must be >= 1, got {pool}")
    t = x.shape[-1]
    t_out = t // pool
    if t_out == 0:
        raise ShapeError(f"pool {pool} over length {t} gives empty output")
    lead = x.shape[:-1]
    trimmed = x.data[..., :t_out * pool].reshape(lead + (t_out, pool))
    out = trimmed.mean(axis=-1)

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[..., :t_out * pool] = np.repeat(g / pool, pool, axis=-1)
        x._accumulate(dx)

    return make_op(out, (x,), backward_fn)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Zero each element with probability p and rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward_fn(g):
        x._accumulate(g * mask)

    return make_op(x.data * mask, (x,), backward_fn)


class Linear:
    """Affine map on the trailing dimension."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.w = Tensor(uniform_init(rng, (d_in, d_out), d_in), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: trailing dim {x.shape} does not match weight {w.shape}")
    single = x.ndim == 1
    if single:
        x = x.reshape((1, x.shape[0]))
    out = matmul(x, w)
    if b is not None:
        out = out + b
    return out.reshape(out.shape[1:]) if single else out
