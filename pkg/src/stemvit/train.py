"""Training machinery: AdamW and SAM, warmup+cosine schedule, desk-scale
datasets (CIFAR-10 binary batches or procedural synthetic shapes), the
training loop, and divergence detection."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor, Tape
from .model import Model, ModelConfig, cross_entropy_loss
from .diagnostics import layer_diversity


class DivergenceSignal(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    optimizer: str = "adamw"  # "adamw" | "sam"
    sam_rho: float = 0.05
    warmup_epochs: int = 2
    total_epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    dataset: str = "synth:0:1024:4"
    label_smoothing: float = 0.0
    augment: bool = False
    min_lr: float = 1e-6

    def validate(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.total_epochs > 0 and self.warmup_epochs >= self.total_epochs:
            raise ValueError("warmup_epochs must be < total_epochs")
        if self.optimizer == "sam" and self.sam_rho <= 0:
            raise ValueError("sam needs rho > 0")
        if self.optimizer not in ("adamw", "sam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


# -- optimizers ---------------------------------------------------------------


class AdamW:
    """Decoupled weight decay: decay is applied to the weights directly,
    never folded into the gradient moments."""

    def __init__(self, params, decay_mask=None, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params  # name -> Tensor
        self.decay_mask = decay_mask or {k: True for k in params}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr, weight_decay):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise DivergenceSignal(f"non-finite gradient in {name}")
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1**self.t)
            vhat = self.v[name] / (1 - b2**self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)
            if weight_decay and self.decay_mask.get(name, False):
                p.data = p.data - lr * weight_decay * p.data


class SAM:
    """Sharpness-aware step around an AdamW base update.

    Perturbs the weights by rho * g / ||g||_2 (global norm), re-evaluates the
    gradient there, restores the weights, then applies the base update with
    the perturbed gradient. rho = 0 degenerates to the base optimizer.
    """

    def __init__(self, params, decay_mask=None, rho=0.05, **adamw_kwargs):
        if rho < 0:
            raise ValueError("rho must be >= 0")
        self.params = params
        self.rho = rho
        self.base = AdamW(params, decay_mask, **adamw_kwargs)

    def step(self, lr, weight_decay, loss_fn):
        grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if not math.isfinite(gnorm):
            raise DivergenceSignal("non-finite gradient norm in SAM ascent")
        if self.rho > 0 and gnorm > 0:
            scale = self.rho / gnorm
            saved = {k: p.data.copy() for k, p in self.params.items()}
            for k, p in self.params.items():
                p.data = p.data + scale * grads[k]
            for p in self.params.values():
                p.zero_grad()
            loss_fn()  # forward+backward at the perturbed point
            for k, p in self.params.items():
                p.data = saved[k]
        self.base.step(lr, weight_decay)


def lr_at(step, peak, warmup_steps, total_steps, min_lr=0.0):
    """Linear warmup to peak, then cosine decay to min_lr."""
    if step < warmup_steps:
        return peak * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    progress = min(progress, 1.0)
    return min_lr + (peak - min_lr) * (1.0 + math.cos(math.pi * progress)) / 2.0


# -- divergence detection -------------------------------------------------------


class DivergenceDetector:
    """Crash rule: non-finite loss; or loss > 10x its 100-step trailing
    minimum for 50 consecutive steps; or validation accuracy at or below
    2x chance once 25% of the epochs have elapsed."""

    def __init__(self, num_classes, total_epochs, window=100, patience=50):
        self.chance = 1.0 / num_classes
        self.total_epochs = total_epochs
        self.window = window
        self.patience = patience
        self.history = []
        self.explode_run = 0

    def update_loss(self, loss):
        if not math.isfinite(loss):
            return True
        self.history.append(loss)
        trailing = min(self.history[-self.window:])
        if loss > 10.0 * trailing:
            self.explode_run += 1
        else:
            self.explode_run = 0
        return self.explode_run >= self.patience

    def update_val(self, epoch, accuracy):
        return (
            self.total_epochs > 0
            and (epoch + 1) >= 0.25 * self.total_epochs
            and accuracy <= 2.0 * self.chance
        )


# -- datasets -------------------------------------------------------------------


@dataclass
class Dataset:
    train_images: np.ndarray  # (N, 3, 32, 32) standardized float64
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    num_classes: int
    descriptor: str = ""


CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixels


def _standardize(images):
    x = images.astype(np.float64) / 255.0 if images.max() > 1.5 else images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    std = x.std(axis=(0, 2, 3), keepdims=True)
    return (x - mean) / np.maximum(std, 1e-8)


def _shape_mask(shape, xx, yy, cx, cy, r):
    if shape == "square":
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if shape == "cross":
        return (np.abs(xx - cx) <= r // 2) | (np.abs(yy - cy) <= r // 2)
    if shape == "diag":
        return np.abs((xx - cx) - (yy - cy)) <= r // 2
    if shape == "hbar":
        return np.abs(yy - cy) <= r // 2
    if shape == "vbar":
        return np.abs(xx - cx) <= r // 2
    if shape == "ring":
        rr = (xx - cx) ** 2 + (yy - cy) ** 2
        return (rr <= r * r) & (rr >= (r // 2) ** 2)
    if shape == "corner":
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r) & ((xx - cx) + (yy - cy) <= 0)
    if shape == "checker":
        return ((np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
                & (((xx - cx) // 2 + (yy - cy) // 2) % 2 == 0))
    if shape == "dots":
        return ((np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
                & ((xx - cx) % 4 < 2) & ((yy - cy) % 4 < 2))
    raise ValueError(shape)


_SHAPES = ["square", "circle", "cross", "diag", "hbar", "vbar", "ring", "corner",
           "checker", "dots"]


def _synth_images(seed, n, classes, size=32):
    """Procedural colored shapes.

    The class is the shape kind; hue, position and size are random per
    image, so labels cannot be read off single-patch color statistics.
    """
    rng = np.random.default_rng(seed)
    images = np.zeros((n, 3, size, size))
    labels = np.arange(n) % classes
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(n):
        shape = _SHAPES[labels[i] % len(_SHAPES)]
        cx = rng.integers(size * 3 // 8, 5 * size // 8)
        cy = rng.integers(size * 3 // 8, 5 * size // 8)
        r = rng.integers(size // 4, size * 3 // 8)
        hue = rng.uniform(0.4, 1.0, 3)
        mask = _shape_mask(shape, xx, yy, cx, cy, r)
        img = rng.normal(0.0, 0.08, (3, size, size)) + 0.15
        img[:, mask] = hue[:, None] + rng.normal(0.0, 0.05, (3, int(mask.sum())))
        images[i] = np.clip(img, 0.0, 1.0)
    perm = rng.permutation(n)
    return images[perm], labels[perm]


class DataError(ValueError):
    pass


def load_cifar10_batch(path):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD != 0:
        raise DataError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    recs = raw.reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    images = recs[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_dataset(descriptor, seed=0):
    """`cifar10:<dir-or-file>` or `synth:<seed>:<n>:<classes>`."""
    parts = descriptor.split(":")
    if parts[0] == "synth":
        if len(parts) != 4:
            raise DataError(f"bad synth descriptor {descriptor!r}")
        s, n, classes = int(parts[1]), int(parts[2]), int(parts[3])
        images, labels = _synth_images(s, n, classes)
        images = _standardize(images)
        n_val = max(1, n // 10)
        return Dataset(images[n_val:], labels[n_val:], images[:n_val], labels[:n_val],
                       classes, descriptor)
    if parts[0] == "cifar10":
        import os

        root = ":".join(parts[1:])
        if os.path.isdir(root):
            train_files = [os.path.join(root, f"data_batch_{i}.bin") for i in range(1, 6)]
            train_files = [f for f in train_files if os.path.exists(f)]
            if not train_files:
                raise DataError(f"no data_batch_*.bin files under {root}")
            test_file = os.path.join(root, "test_batch.bin")
        else:
            train_files, test_file = [root], None
        imgs, labs = zip(*(load_cifar10_batch(f) for f in train_files))
        images = np.concatenate(imgs)
        labels = np.concatenate(labs)
        images = _standardize(images)
        if test_file and os.path.exists(test_file):
            vi, vl = load_cifar10_batch(test_file)
            vi = _standardize(vi)
        else:
            n_val = len(images) // 10
            vi, vl = images[:n_val], labels[:n_val]
            images, labels = images[n_val:], labels[n_val:]
        return Dataset(images, labels, vi, vl, 10, descriptor)
    raise DataError(f"unknown dataset scheme {parts[0]!r}")


def augment_batch(images, rng):
    """Random crop with 4-pixel reflection pad plus horizontal flip."""
    B, C, H, W = images.shape
    out = np.empty_like(images)
    padded = np.pad(images, ((0, 0), (0, 0), (4, 4), (4, 4)), mode="reflect")
    for i in range(B):
        dy, dx = rng.integers(0, 9, 2)
        img = padded[i, :, dy : dy + H, dx : dx + W]
        if rng.random() < 0.5:
            img = img[:, :, ::-1]
        out[i] = img
    return out


# -- run loop ---------------------------------------------------------------------


@dataclass
class RunReport:
    model_cfg: dict
    train_cfg: dict
    epochs: list = field(default_factory=list)  # {epoch, train_loss, val_accuracy}
    diverged: bool = False
    diverged_step: int = -1
    final_top1: float = None
    wall_time: float = 0.0
    diversity: dict = field(default_factory=dict)  # epoch label -> profile dict

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def evaluate(model, images, labels, batch_size=256):
    model.set_training(False)
    correct = 0
    for i in range(0, len(images), batch_size):
        logits, _ = model(Tensor(images[i : i + batch_size]))
        correct += int((logits.data.argmax(axis=1) == labels[i : i + batch_size]).sum())
    model.set_training(True)
    return correct / len(images)


def _diversity_snapshot(model, images):
    model.set_training(False)
    with Tape():
        _, trace = model(Tensor(images), capture=True)
    model.set_training(True)
    return layer_diversity(trace).to_dict()


def run_training(model_cfg: ModelConfig, train_cfg: TrainConfig, log=None):
    """Full desk-scale training loop; early exit with diverged=True on crash."""
    model_cfg.validate()
    train_cfg.validate()
    t0 = time.time()
    data = load_dataset(train_cfg.dataset, train_cfg.seed)
    model_cfg.num_classes = data.num_classes
    model = Model(model_cfg, seed=train_cfg.seed)
    params = model.named_params()
    mask = model.decay_mask()
    if train_cfg.optimizer == "sam":
        opt = SAM(params, mask, rho=train_cfg.sam_rho)
    else:
        opt = AdamW(params, mask)

    rng = np.random.default_rng(train_cfg.seed + 1)
    n_train = len(data.train_images)
    steps_per_epoch = max(1, n_train // train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.total_epochs
    warmup_steps = max(1, steps_per_epoch * train_cfg.warmup_epochs)
    detector = DivergenceDetector(data.num_classes, train_cfg.total_epochs)
    snap_batch = data.val_images[: min(16, len(data.val_images))]

    report = RunReport(model_cfg.to_dict(), train_cfg.to_dict())
    mid = train_cfg.total_epochs // 2
    snap_epochs = {0: "epoch0", mid: "mid", train_cfg.total_epochs - 1: "final"}

    step = 0
    for epoch in range(train_cfg.total_epochs):
        if epoch in snap_epochs:
            report.diversity[snap_epochs[epoch]] = _diversity_snapshot(model, snap_batch)
        perm = rng.permutation(n_train)
        epoch_losses = []
        for b in range(steps_per_epoch):
            idx = perm[b * train_cfg.batch_size : (b + 1) * train_cfg.batch_size]
            images = data.train_images[idx]
            if train_cfg.augment:
                images = augment_batch(images, rng)
            labels = data.train_labels[idx]
            lr = lr_at(step, train_cfg.lr, warmup_steps, total_steps, train_cfg.min_lr)

            def closure():
                for p in params.values():
                    p.zero_grad()
                with Tape() as tape:
                    logits, _ = model(Tensor(images))
                    loss = cross_entropy_loss(logits, labels)
                    T.backward(tape, loss)
                return float(loss.data)

            try:
                loss_val = closure()
                if train_cfg.optimizer == "sam":
                    opt.step(lr, train_cfg.weight_decay, closure)
                else:
                    opt.step(lr, train_cfg.weight_decay)
            except DivergenceSignal:
                loss_val = float("nan")

            if detector.update_loss(loss_val):
                report.diverged = True
                report.diverged_step = step
                report.wall_time = time.time() - t0
                return report
            epoch_losses.append(loss_val)
            step += 1

        acc = evaluate(model, data.val_images, data.val_labels)
        report.epochs.append(
            {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)), "val_accuracy": acc}
        )
        if log:
            log(f"epoch {epoch}: loss {np.mean(epoch_losses):.4f} acc {acc:.4f}")
        if detector.update_val(epoch, acc):
            report.diverged = True
            report.diverged_step = step
            report.wall_time = time.time() - t0
            return report

    if train_cfg.total_epochs > 0:
        report.diversity["final"] = _diversity_snapshot(model, snap_batch)
        report.final_top1 = report.epochs[-1]["val_accuracy"]
    report.wall_time = time.time() - t0
    report._model = model  # not serialized; lets callers save a checkpoint
    return report
