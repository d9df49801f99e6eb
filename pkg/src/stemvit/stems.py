"""Stem front-ends built from component strings like "3Conv+3BN+3ReLU+1Proj".

The component string is the stable public identifier for a stem: it appears
in configs, report rows and sweep tables. Counted items expand positionally:
a run of adjacent items sharing the same count interleaves cyclically, so
"3Conv+3BN+3ReLU+1Proj" becomes (Conv, BN, ReLU) x 3 followed by Proj, while
"3Conv+1Proj+1ReLU" puts the ReLU after the projection.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError
from .layers import Module, Conv2d, BatchNorm2d, relu, gelu, trunc_normal

KINDS = ("Conv", "BN", "ReLU", "GELU", "Proj")
_ITEM_RE = re.compile(r"^(\d+)(Conv|BN|ReLU|GELU|Proj)$")


class StemSpecError(ValueError):
    pass


@dataclass
class StemSpec:
    components: list  # expanded layer kinds, in order
    items: list  # (count, kind) as written, for round-tripping
    strides: list
    kernels: list
    patch_size: int

    def render(self):
        return "+".join(f"{c}{k}" for c, k in self.items)

    @property
    def conv_count(self):
        return sum(1 for k in self.components if k == "Conv")


def parse_stem_spec(spec, strides, kernels=None, patch_size=None):
    """Parse a component string; validate against strides and patch size."""
    if not spec:
        raise StemSpecError("empty stem spec")
    items = []
    for piece in spec.split("+"):
        m = _ITEM_RE.match(piece)
        if not m:
            raise StemSpecError(f"malformed stem item {piece!r} in {spec!r}")
        items.append((int(m.group(1)), m.group(2)))

    # expand: maximal runs of equal count interleave cyclically
    components = []
    i = 0
    while i < len(items):
        j = i
        while j < len(items) and items[j][0] == items[i][0]:
            j += 1
        count = items[i][0]
        kinds = [k for _, k in items[i:j]]
        for _ in range(count):
            components.extend(kinds)
        i = j

    n_proj = components.count("Proj")
    if n_proj != 1:
        raise StemSpecError(f"stem needs exactly one Proj, got {n_proj} in {spec!r}")

    strides = list(strides)
    n_strided = components.count("Conv") + 1
    if len(strides) != n_strided:
        raise StemSpecError(
            f"{spec!r} has {n_strided} strided layers but {len(strides)} strides given"
        )
    if kernels is None:
        # projection kernel equals its stride; plain convs default to 3x3
        kernels = [3] * (n_strided - 1) + [strides[-1]]
    kernels = list(kernels)
    if len(kernels) != n_strided:
        raise StemSpecError(f"need {n_strided} kernels, got {len(kernels)}")

    prod = int(np.prod(strides))
    if patch_size is not None and prod != patch_size:
        raise StemSpecError(f"stride product {prod} != patch size {patch_size}")

    return StemSpec(components, items, strides, kernels, patch_size or prod)


@dataclass
class StemOutput:
    tokens: Tensor  # (B, n, d)
    grid: tuple  # (H', W')


class Stem(Module):
    """Sequence of Conv/BN/ReLU/GELU blocks ending in (or containing) a
    stride-p projection; flattens the final feature map to tokens."""

    def __init__(self, rng, spec: StemSpec, image_size, embed_dim, mid_channels=64):
        if image_size % spec.patch_size != 0:
            raise ShapeError(f"image size {image_size} not divisible by patch {spec.patch_size}")
        self.spec = spec
        self.image_size = image_size
        self.embed_dim = embed_dim
        self.layers = []
        self.layer_kinds = []

        chans = 3
        strided_idx = 0
        size = image_size
        for kind in spec.components:
            if kind == "Conv":
                k = spec.kernels[strided_idx]
                s = spec.strides[strided_idx]
                pad = k // 2
                self.layers.append(Conv2d(rng, chans, mid_channels, k, s, pad))
                chans = mid_channels
                size = (size + 2 * pad - k) // s + 1
                strided_idx += 1
            elif kind == "Proj":
                s = spec.strides[strided_idx]
                k = spec.kernels[strided_idx]
                self.layers.append(Conv2d(rng, chans, embed_dim, k, s, 0))
                chans = embed_dim
                size = (size - k) // s + 1
                strided_idx += 1
            elif kind == "BN":
                self.layers.append(BatchNorm2d(chans))
            elif kind in ("ReLU", "GELU"):
                self.layers.append(kind)
            self.layer_kinds.append(kind)
        self.grid = (size, size)
        self.token_count = size * size

    def __call__(self, images):
        if images.ndim != 4 or images.shape[2] != self.image_size or images.shape[3] != self.image_size:
            raise ShapeError(
                f"stem expects (B,3,{self.image_size},{self.image_size}), got {images.shape}"
            )
        x = images
        for layer in self.layers:
            if layer == "ReLU":
                x = relu(x)
            elif layer == "GELU":
                x = gelu(x)
            else:
                x = layer(x)
        B, d, h, w = x.shape
        tokens = x.reshape(B, d, h * w).transpose(0, 2, 1)
        return StemOutput(tokens=tokens, grid=(h, w))

    def param_count(self):
        return sum(p.size for p in self.named_params().values())


def build_stem(rng, spec, image_size, patch_size, embed_dim, mid_channels=64):
    if spec.patch_size != patch_size:
        raise StemSpecError(f"spec patch size {spec.patch_size} != requested {patch_size}")
    return Stem(rng, spec, image_size, embed_dim, mid_channels)


def add_pos_cls(tokens, pos, cls):
    """Prepend the class token and add positional embeddings.

    tokens: (B, n, d); pos: (n+1, d); cls: (1, 1, d).
    """
    B, n, d = tokens.shape
    if pos.shape[0] != n + 1:
        raise ShapeError(f"positional table has {pos.shape[0]} rows, need {n + 1}")
    cls_row = T.broadcast_to(cls, (B, 1, d))
    full = T.concat([cls_row, tokens], axis=1)
    return full + pos


def make_pos_cls(rng, n_tokens, embed_dim):
    pos = Tensor(trunc_normal(rng, (n_tokens + 1, embed_dim)), requires_grad=True)
    cls = Tensor(trunc_normal(rng, (1, 1, embed_dim)), requires_grad=True)
    return pos, cls
