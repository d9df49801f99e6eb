"""ViT assembly: stem + pre-norm encoder stack + class-token head.

A forward pass can capture a LayerTrace: the stem output, the tokens after
position embedding, and each encoder block's output. Capturing copies data
out and never perturbs the computation.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor, Tape, ShapeError
from .layers import (
    Module,
    Linear,
    LayerNorm,
    MultiHeadSelfAttention,
    FeedForward,
    FFN_VARIANTS,
    trunc_normal,
    set_training,
)
from .stems import parse_stem_spec, build_stem, add_pos_cls, make_pos_cls

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    stem_spec: str = "3Conv+3BN+3ReLU+1Proj"
    strides: tuple = (2, 1, 1, 2)
    kernels: tuple = None
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 192
    depth: int = 6
    heads: int = 3
    ffn_variant: str = "baseline"
    ffn_ratio: int = 4
    num_classes: int = 10
    mid_channels: int = 64

    def validate(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.ffn_variant not in FFN_VARIANTS:
            raise ValueError(f"unknown ffn variant {self.ffn_variant!r}")
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        parse_stem_spec(self.stem_spec, self.strides, self.kernels, self.patch_size)
        return self

    def to_dict(self):
        d = asdict(self)
        d["strides"] = list(self.strides)
        d["kernels"] = list(self.kernels) if self.kernels is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["strides"] = tuple(d["strides"])
        if d.get("kernels") is not None:
            d["kernels"] = tuple(d["kernels"])
        return cls(**d).validate()


@dataclass
class LayerTrace:
    entries: list = field(default_factory=list)  # (label, np array (B,n',d), has_cls)

    def labels(self):
        return [e[0] for e in self.entries]

    def __len__(self):
        return len(self.entries)


class EncoderBlock(Module):
    """Pre-norm block: x + MHSA(LN(x)); x + FFN(LN(x)).

    The "no_layernorm" ffn variant drops the LN in front of the FFN,
    mirroring the crash row of the encoder-design grid.
    """

    def __init__(self, rng, dim, heads, ffn_variant, ffn_ratio):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(rng, dim, heads)
        self.skip_ffn_norm = ffn_variant == "no_layernorm"
        if not self.skip_ffn_norm:
            self.ln2 = LayerNorm(dim)
        variant = "baseline" if ffn_variant == "no_layernorm" else ffn_variant
        self.ffn = FeedForward(rng, dim, ffn_ratio, variant)

    def __call__(self, x):
        x = x + self.attn(self.ln1(x))
        h = x if self.skip_ffn_norm else self.ln2(x)
        return x + self.ffn(h)


class Model(Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        spec = parse_stem_spec(cfg.stem_spec, cfg.strides, cfg.kernels, cfg.patch_size)
        self.stem = build_stem(rng, spec, cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.mid_channels)
        self.pos, self.cls = make_pos_cls(rng, self.stem.token_count, cfg.embed_dim)
        self.blocks = [
            EncoderBlock(rng, cfg.embed_dim, cfg.heads, cfg.ffn_variant, cfg.ffn_ratio)
            for _ in range(cfg.depth)
        ]
        self.norm = LayerNorm(cfg.embed_dim)
        self.head = Linear(rng, cfg.embed_dim, cfg.num_classes)

    def forward(self, images, capture=False):
        """Return (logits, trace or None)."""
        trace = LayerTrace() if capture else None
        out = self.stem(images)
        if capture:
            trace.entries.append(("stem", out.tokens.data.copy(), False))
        x = add_pos_cls(out.tokens, self.pos, self.cls)
        if capture:
            trace.entries.append(("pos_embed", x.data.copy(), True))
        for i, block in enumerate(self.blocks):
            x = block(x)
            if capture:
                trace.entries.append((f"encoder{i + 1}", x.data.copy(), True))
        x = self.norm(x)
        logits = self.head(x[:, 0, :])
        return logits, trace

    def __call__(self, images, capture=False):
        return self.forward(images, capture)

    def set_training(self, flag):
        set_training(self, flag)

    def decay_mask(self):
        """Which parameters receive weight decay: weights only — not norm
        scales/biases, layer biases, class token, or positional table."""
        mask = {}
        for name, p in self.named_params().items():
            leaf = name.rsplit(".", 1)[-1]
            decay = leaf in ("weight", "kernel", "w1", "w2") and "ln" not in name and "norm" not in name
            if name in ("pos", "cls"):
                decay = False
            if leaf in ("bias", "gamma", "b1", "b2"):
                decay = False
            mask[name] = decay
        return mask


def build_model(cfg: ModelConfig, seed=0) -> Model:
    return Model(cfg, seed)


def param_count(model: Model) -> int:
    return sum(p.size for p in model.named_params().values())


def cross_entropy_loss(logits, labels):
    """Mean negative log-softmax of the true class; max-stabilized.

    logits: (B, C) Tensor; labels: (B,) int array.
    """
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    shift = logits - Tensor(logits.data.max(axis=1, keepdims=True))
    lse = T.log(T.exp(shift).sum(axis=1))
    onehot = np.zeros((B, C))
    onehot[np.arange(B), labels] = 1.0
    picked = (shift * Tensor(onehot)).sum(axis=1)
    return (lse - picked).mean()


def _named_buffers(model):
    from .layers import BatchNorm2d, BatchNorm1d

    out = {}
    for path, mod in model.named_modules():
        if isinstance(mod, (BatchNorm2d, BatchNorm1d)):
            out[path + ".running_mean"] = mod.running_mean
            out[path + ".running_var"] = mod.running_var
    return out


def save_checkpoint(path, model: Model):
    """Versioned npz container: config echo + named parameter arrays."""
    arrays = {"param:" + k: v.data for k, v in model.named_params().items()}
    arrays.update({"buffer:" + k: v for k, v in _named_buffers(model).items()})
    header = json.dumps({"version": CHECKPOINT_VERSION, "config": model.cfg.to_dict()})
    np.savez(path, __header__=np.frombuffer(header.encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path, seed=0) -> Model:
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        cfg = ModelConfig.from_dict(header["config"])
        model = Model(cfg, seed)
        params = model.named_params()
        buffers = _named_buffers(model)
        for key in z.files:
            if key.startswith("param:"):
                name = key[len("param:"):]
                if name not in params:
                    raise ValueError(f"checkpoint parameter {name!r} not in model")
                if params[name].shape != z[key].shape:
                    raise ValueError(f"shape mismatch for {name}: {params[name].shape} vs {z[key].shape}")
                params[name].data = z[key].astype(np.float64)
            elif key.startswith("buffer:"):
                name = key[len("buffer:"):]
                if name in buffers:
                    buffers[name][...] = z[key]
    return model
