"""Neural layers: conv, batch/layer norm, scaled ReLU, GELU, attention, FFN.

Every layer is a plain parameter container with a ``__call__`` that builds
onto whatever tape is active. Parameters are exposed through
``named_params()`` so the optimizer and checkpoint code can enumerate them.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) resampled into [-2 std, 2 std]."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.standard_normal(bad.sum()) * std
        bad = np.abs(out) > 2 * std
    return out


def scaled_relu(x, alpha, beta):
    """beta * max(x + alpha, 0); alpha/beta may be floats or tensors."""
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(alpha)
    beta = beta if isinstance(beta, Tensor) else Tensor(beta)
    return beta * T.maximum(x + alpha, Tensor(0.0))


def relu(x):
    return T.maximum(x, Tensor(0.0))


def gelu(x):
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    return x * (T.erf(x * Tensor(1.0 / math.sqrt(2.0))) + 1.0) * 0.5


def softmax(x, axis=-1):
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = T.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


class Module:
    def named_modules(self, prefix=""):
        yield prefix.rstrip("."), self
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_modules(prefix + name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{name}.{i}.")

    def named_params(self, prefix=""):
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + name] = val
            elif isinstance(val, Module):
                out.update(val.named_params(prefix + name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_params(f"{prefix}{name}.{i}."))
        return out


class Linear(Module):
    def __init__(self, rng, d_in, d_out, std=0.02):
        self.weight = Tensor(trunc_normal(rng, (d_in, d_out), std), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        return x @ self.weight + self.bias


def _conv_out_size(size, k, stride, pad):
    if size + 2 * pad < k:
        raise ShapeError(f"kernel {k} larger than padded input {size + 2 * pad}")
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, kernel, bias, stride=1, padding=0):
    """Cross-correlation with bias via im2col; custom backward.

    x: (B, C, H, W), kernel: (C', C, k, k), bias: (C',).
    """
    B, C, H, W = x.shape
    Cout, Cin, k, _ = kernel.shape
    if Cin != C:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernel {Cin}")
    Hout = _conv_out_size(H, k, stride, padding)
    Wout = _conv_out_size(W, k, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # cols: (B, C*k*k, Hout*Wout)
    sB, sC, sH, sW = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, C, Hout, Wout, k, k),
        strides=(sB, sC, sH * stride, sW * stride, sH, sW),
        writeable=False,
    )
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * k * k, Hout * Wout)
    wmat = kernel.data.reshape(Cout, C * k * k)
    out_data = (wmat @ cols).reshape(B, Cout, Hout, Wout) + bias.data.reshape(1, Cout, 1, 1)

    def backward(g):
        gmat = g.reshape(B, Cout, Hout * Wout)
        if bias._tracked():
            bias._accum(g.sum(axis=(0, 2, 3)))
        if kernel._tracked():
            gw = np.einsum("bol,bil->oi", gmat, cols)
            kernel._accum(gw.reshape(kernel.shape))
        if x._tracked():
            gcols = np.einsum("oi,bol->bil", wmat, gmat)
            gcols = gcols.reshape(B, C, k, k, Hout, Wout)
            gx = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gx[:, :, ki : ki + Hout * stride : stride, kj : kj + Wout * stride : stride] += gcols[:, :, ki, kj]
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            x._accum(gx)

    return T.record_op(out_data, (x, kernel, bias), backward)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, std=0.02):
        self.kernel_size = kernel
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(trunc_normal(rng, (c_out, c_in, kernel, kernel), std), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    """Per-channel batch norm over (B, H, W); biased variance, eps floor."""

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum
        self.training = True
        self._seen_batch = False

    def __call__(self, x):
        if x.ndim != 4:
            raise ShapeError(f"BatchNorm2d expects (B,C,H,W), got {x.shape}")
        g = self.gamma.reshape(1, -1, 1, 1)
        b = self.bias.reshape(1, -1, 1, 1)
        if self.training:
            B, C, H, W = x.shape
            if B * H * W < 2:
                raise ShapeError("batch norm needs at least 2 values per channel")
            mean = x.mean(axis=(0, 2, 3), keepdims=True)
            var = ((x - mean) * (x - mean)).mean(axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean.data.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * var.data.reshape(-1)
            self._seen_batch = True
            xhat = (x - mean) / T.sqrt(var + Tensor(self.eps))
        else:
            rv = np.maximum(self.running_var, 0.0)
            if np.any(rv == 0.0):
                warnings.warn("eval-mode batch norm with zero running variance; using eps floor")
            mean = Tensor(self.running_mean.reshape(1, -1, 1, 1))
            std = Tensor(np.sqrt(rv + self.eps).reshape(1, -1, 1, 1))
            xhat = (x - mean) / std
        return g * xhat + b

    def paper_normalize(self, x):
        """Batch-summed-norm normalizer: (X_ic - mu_c e) / sqrt(sum_i ||X_ic - mu_c e||^2).

        Returns a numpy array shaped like ``x``; per channel, the squared
        norms summed over the batch equal 1.
        """
        xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        centered = xd - mu
        denom = np.sqrt((centered**2).sum(axis=(0, 2, 3), keepdims=True))
        return centered / denom


class BatchNorm1d(Module):
    """Batch norm over (B, L) per feature channel, for the Conv1D ffn variant."""

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum
        self.training = True

    def __call__(self, x):
        # x: (B, C, L)
        g = self.gamma.reshape(1, -1, 1)
        b = self.bias.reshape(1, -1, 1)
        if self.training:
            mean = x.mean(axis=(0, 2), keepdims=True)
            var = ((x - mean) * (x - mean)).mean(axis=(0, 2), keepdims=True)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean.data.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * var.data.reshape(-1)
            xhat = (x - mean) / T.sqrt(var + Tensor(self.eps))
        else:
            mean = Tensor(self.running_mean.reshape(1, -1, 1))
            std = Tensor(np.sqrt(self.running_var + self.eps).reshape(1, -1, 1))
            xhat = (x - mean) / std
        return g * xhat + b


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6):
        if dim < 2:
            raise ShapeError("layer norm needs dim >= 2")
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        mean = x.mean(axis=-1, keepdims=True)
        var = ((x - mean) * (x - mean)).mean(axis=-1, keepdims=True)
        xhat = (x - mean) / T.sqrt(var + Tensor(self.eps))
        return self.gamma * xhat + self.bias


class MultiHeadSelfAttention(Module):
    def __init__(self, rng, dim, heads):
        if dim % heads != 0:
            raise ValueError(f"embed dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.w_q = Linear(rng, dim, dim)
        self.w_k = Linear(rng, dim, dim)
        self.w_v = Linear(rng, dim, dim)
        self.w_out = Linear(rng, dim, dim)

    def __call__(self, x, return_attn=False):
        B, n, d = x.shape
        h = self.heads
        dh = d // h

        def split_heads(t):
            return t.reshape(B, n, h, dh).transpose(0, 2, 1, 3)

        q = split_heads(self.w_q(x))
        k = split_heads(self.w_k(x))
        v = split_heads(self.w_v(x))
        attn = softmax(q @ k.transpose(0, 1, 3, 2) * Tensor(1.0 / math.sqrt(dh)))
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
        out = self.w_out(out)
        if return_attn:
            return out, attn
        return out


FFN_VARIANTS = ("baseline", "gelu_to_relu", "conv1d_bn_gelu", "conv1d_gelu", "no_layernorm")


def conv1d_k1(x, weight, bias):
    """Kernel-1 Conv1D over (B, C, L): a channel-mixing map, computed as an
    explicit einsum so the Linear-equivalence check is a genuine dual route."""
    out_data = np.einsum("oc,bcl->bol", weight.data, x.data) + bias.data.reshape(1, -1, 1)

    def backward(g):
        if weight._tracked():
            weight._accum(np.einsum("bol,bcl->oc", g, x.data))
        if bias._tracked():
            bias._accum(g.sum(axis=(0, 2)))
        if x._tracked():
            x._accum(np.einsum("oc,bol->bcl", weight.data, g))

    return T.record_op(out_data, (x, weight, bias), backward)


class FeedForward(Module):
    """Token-wise MLP with the encoder-design variants from the ablation grid."""

    def __init__(self, rng, dim, ratio=4, variant="baseline"):
        if variant not in FFN_VARIANTS:
            raise ValueError(f"unknown ffn variant {variant!r}; choose from {FFN_VARIANTS}")
        self.variant = variant
        hidden = dim * ratio
        if variant in ("conv1d_bn_gelu", "conv1d_gelu"):
            self.w1 = Tensor(trunc_normal(rng, (hidden, dim)), requires_grad=True)
            self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
            self.w2 = Tensor(trunc_normal(rng, (dim, hidden)), requires_grad=True)
            self.b2 = Tensor(np.zeros(dim), requires_grad=True)
            if variant == "conv1d_bn_gelu":
                self.bn = BatchNorm1d(hidden)
        else:
            self.fc1 = Linear(rng, dim, hidden)
            self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x):
        if self.variant in ("conv1d_bn_gelu", "conv1d_gelu"):
            # (B, n, d) -> (B, d, n) channel-first for the conv path
            h = conv1d_k1(x.transpose(0, 2, 1), self.w1, self.b1)
            if self.variant == "conv1d_bn_gelu":
                h = self.bn(h)
            h = gelu(h)
            return conv1d_k1(h, self.w2, self.b2).transpose(0, 2, 1)
        h = self.fc1(x)
        h = relu(h) if self.variant == "gelu_to_relu" else gelu(h)
        return self.fc2(h)


def set_training(module, flag):
    """Flip train/eval mode on every norm layer reachable from ``module``."""
    for val in vars(module).values():
        if isinstance(val, (BatchNorm2d, BatchNorm1d)):
            val.training = flag
        if isinstance(val, Module):
            set_training(val, flag)
        if isinstance(val, (list, tuple)):
            for item in val:
                if isinstance(item, Module):
                    set_training(item, flag)
                    if isinstance(item, (BatchNorm2d, BatchNorm1d)):
                        item.training = flag
