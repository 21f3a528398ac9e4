"""AdamW, cosine annealing, augmentation, synthetic lesions and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .data_io import Sample, SampleBatch, resize_bilinear
from .loss import LossConfig, total_loss
from .metrics import evaluate_dataset
from .net import save_checkpoint
from .tensor import NonFiniteError, Tensor, as_tensor

log = logging.getLogger(__name__)

HISTORY_FIELDS = ["epoch", "lr", "train_loss", "val_iou", "val_dsc", "val_hd95"]


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    lr_init: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 0.01
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    augment: bool = True
    train_fraction: float = 1.0
    schedule: str = "epoch"  # or "iter"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0 < self.lr_min < self.lr_init:
            raise ValueError("need 0 < lr_min < lr_init")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must lie in (0, 1]")
        if self.schedule not in ("epoch", "iter"):
            raise ValueError("schedule must be 'epoch' or 'iter'")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        self.loss.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("loss"), dict):
            d["loss"] = LossConfig(**d["loss"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# -- optimisation -----------------------------------------------------------------------


def cosine_lr(step: int, total_steps: int, lr_init: float = 1e-3, lr_min: float = 1e-5) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_init(params: Sequence[np.ndarray]) -> dict:
    return {"t": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: dict,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One AdamW update, in place, with weight decay applied directly to the weights."""
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = [p for p in params if p.trainable]
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.state = adamw_init([p.data for p in self.params])

    def step(self, lr: float) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                   lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- data -----------------------------------------------------------------------------------


def _transform(a: np.ndarray, hflip: bool, vflip: bool, k: int) -> np.ndarray:
    if hflip:
        a = a[..., :, ::-1]
    if vflip:
        a = a[..., ::-1, :]
    if k:
        a = np.rot90(a, k, axes=(-2, -1))
    return np.ascontiguousarray(a)


def augment(batch: SampleBatch, rng: np.random.Generator) -> SampleBatch:
    """Independent per-sample flips and quarter turns, applied identically to image and mask.

    Non-square samples only receive half turns so the shape is kept.
    """
    images, masks = [], []
    square = batch.images.shape[-1] == batch.images.shape[-2]
    for img, m in zip(batch.images, batch.masks):
        hflip = rng.random() < 0.5
        vflip = rng.random() < 0.5
        k = int(rng.integers(0, 4))
        if not square:
            k = 2 * (k % 2)
        images.append(_transform(img, hflip, vflip, k))
        masks.append(_transform(m, hflip, vflip, k))
    return SampleBatch(np.stack(images), np.stack(masks), list(batch.ids))


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    return resize_bilinear(rng.random((cells, cells)), (size, size))


def synth_sample(rng: np.random.Generator, size: int, sid: str) -> Sample:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    while True:
        frac = rng.uniform(0.08, 0.45)
        aspect = rng.uniform(0.6, 1.0)
        area = frac * size * size
        a = math.sqrt(area / (math.pi * aspect))
        b = a * aspect
        cy = rng.uniform(0.35, 0.65) * size
        cx = rng.uniform(0.35, 0.65) * size
        theta = rng.uniform(0, math.pi)
        ct, st = math.cos(theta), math.sin(theta)
        u = ((xx - cx) * ct + (yy - cy) * st) / a
        v = (-(xx - cx) * st + (yy - cy) * ct) / b
        r = np.sqrt(u * u + v * v)
        mask = (r <= 1.0).astype(np.float32)
        if 0.05 <= mask.mean() <= 0.6:
            break
    skin = np.array([0.85, 0.65, 0.55]) + rng.uniform(-0.05, 0.05, 3)
    lesion = np.array([0.45, 0.28, 0.2]) + rng.uniform(-0.08, 0.08, 3)
    texture = 0.12 * (_smooth_noise(rng, size, 8) - 0.5) + 0.04 * (_smooth_noise(rng, size, 32) - 0.5)
    # soft edge: the lesion colour fades in over a short band around r = 1
    alpha = 1.0 / (1.0 + np.exp((r - 1.0) * 12.0))
    img = skin[:, None, None] * (1 - alpha) + lesion[:, None, None] * alpha
    img = img + texture[None] + 0.02 * rng.standard_normal((3, size, size))
    return Sample(sid, np.clip(img, 0.0, 1.0).astype(np.float32), mask[None])


def synth_dataset(n: int, size: int = 64, seed: int = 0) -> List[Sample]:
    """``n`` synthetic lesion images: a soft-edged dark ellipse on textured skin."""
    if size % 32 or size < 32:
        raise ValueError("size must be a positive multiple of 32")
    rng = np.random.default_rng(seed)
    return [synth_sample(rng, size, f"synth_{i:04d}") for i in range(n)]


def subsample_split(samples: Sequence, fraction: float, seed: int = 0) -> list:
    """Uniform subset of ``round(fraction·n)`` items without replacement, in original order."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    samples = list(samples)
    k = int(math.floor(fraction * len(samples) + 0.5))
    if k == len(samples):
        return samples
    idx = np.sort(np.random.default_rng(seed).choice(len(samples), size=k, replace=False))
    return [samples[i] for i in idx]


# -- loop ---------------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: List[dict]
    best_epoch: int
    best_val_iou: float
    best_checkpoint: Optional[str]


def _write_history(path: str, history: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])


def read_history(path: str) -> List[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(r[k]) if k == "epoch" else float(r[k])) for k in HISTORY_FIELDS}
                for r in csv.DictReader(fh)]


def train_loop(model, train: Sequence[Sample], val: Optional[Sequence[Sample]], cfg: TrainConfig,
               out_dir: Optional[str] = None,
               on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train ``model`` in place.

    Each epoch shuffles, batches, optionally augments, then takes AdamW steps
    on the configured loss. After every epoch the model is evaluated on
    ``val`` (or on ``train`` when ``val`` is empty) and the best validation
    IoU checkpoint is written to ``out_dir/best.ckpt``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    train = subsample_split(train, cfg.train_fraction, cfg.seed)
    val = list(val) if val else list(train)
    if not train:
        raise ValueError("no training samples")
    opt = AdamW(model.parameters(), cfg.betas, cfg.eps, cfg.weight_decay)
    dtype = model.head.weight.dtype
    n_batches = math.ceil(len(train) / cfg.batch_size)
    total_iters = cfg.epochs * n_batches
    history: List[dict] = []
    best_iou, best_epoch, best_path = -1.0, -1, None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train))
        losses, epoch_lr = [], None
        for bi in range(n_batches):
            if cfg.schedule == "epoch":
                lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min)
            else:
                lr = cosine_lr(epoch * n_batches + bi, total_iters, cfg.lr_init, cfg.lr_min)
            epoch_lr = lr if epoch_lr is None else epoch_lr
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            batch = SampleBatch.from_samples([train[i] for i in idx])
            if cfg.augment:
                batch = augment(batch, rng)
            tag = f"epoch {epoch} batch {bi} ids {batch.ids}"
            opt.zero_grad()
            try:
                p = model(as_tensor(batch.images.astype(dtype)))
                loss = total_loss(p, batch.masks.astype(dtype), cfg.loss)
            except NonFiniteError as exc:
                raise NonFiniteError(f"non-finite value in {tag}: {exc}") from exc
            if not np.isfinite(loss.item()):
                raise NonFiniteError(f"non-finite loss in {tag}")
            loss.backward()
            opt.step(lr)
            losses.append(loss.item())
        records, agg = evaluate_dataset(model, val, batch_size=cfg.batch_size)
        row = {"epoch": epoch, "lr": epoch_lr, "train_loss": float(np.mean(losses)),
               "val_iou": agg["iou"]["mean"], "val_dsc": agg["dsc"]["mean"],
               "val_hd95": agg["hd95"]["mean"]}
        history.append(row)
        if row["val_iou"] > best_iou:
            best_iou, best_epoch = row["val_iou"], epoch
            if out_dir:
                best_path = os.path.join(out_dir, "best.ckpt")
                save_checkpoint(model, best_path, {"epoch": epoch, "val_iou": best_iou})
        if out_dir:
            _write_history(os.path.join(out_dir, "history.csv"), history)
        log.info("epoch %d lr %.6g loss %.5f val_iou %.4f val_dsc %.4f", epoch, epoch_lr,
                 row["train_loss"], row["val_iou"], row["val_dsc"])
        if on_epoch is not None:
            on_epoch(row)
    if out_dir:
        save_checkpoint(model, os.path.join(out_dir, "last.ckpt"), {"epoch": cfg.epochs - 1})
    return TrainResult(history, best_epoch, best_iou, best_path)
