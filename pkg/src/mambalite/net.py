"""MambaLiteUNet assembly, complexity accounting, activation dumps and checkpoints."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .blocks import AMF, CGA, LGFM
from .layers import Conv2d, GroupNorm, depthwise
from .tensor import Module, Tensor, as_tensor, no_grad, precision, resolve_dtype

DEFAULT_CHANNELS = (16, 32, 48, 64, 96, 128)
DEFAULT_LAYOUT = ("plain", "plain", "plain", "plain", "mamba", "mamba")

CHANNEL_CONFIGS = {
    "C1": (8, 16, 24, 32, 48, 64),
    "C2": (8, 16, 32, 48, 64, 96),
    "C3": (16, 32, 48, 64, 96, 128),
    "C4": (8, 16, 32, 64, 128, 256),
    "C5": (16, 32, 64, 128, 256, 512),
}

STAGE_NAMES = ["enc1", "enc2", "enc3", "enc4", "enc5", "bottleneck",
               "dec5", "dec4", "dec3", "dec2", "dec1", "output"]


@dataclass
class ModelConfig:
    channels: Tuple[int, ...] = DEFAULT_CHANNELS
    branches: int = 4
    heads: int = 8
    d_state: int = 8
    # five encoder stages then the bottleneck
    stage_layout: Tuple[str, ...] = DEFAULT_LAYOUT
    input_size: Tuple[int, int] = (256, 256)
    precision: str = "f32"
    # skip levels (1 = shallowest) that are gated by CGA
    cga_levels: Tuple[int, ...] = (4, 5)
    use_amf: bool = True
    use_lgfm: bool = True
    use_cga: bool = True
    # Mamba inner width is channels // inner_divisor regardless of branch count
    inner_divisor: int = 4
    gn_groups: int = 4
    exact_zoh: bool = False

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.stage_layout = tuple(self.stage_layout)
        self.input_size = tuple(int(s) for s in self.input_size)
        self.cga_levels = tuple(int(s) for s in self.cga_levels)

    def validate(self) -> "ModelConfig":
        ch = self.channels
        if len(ch) != 6 or any(c < 1 for c in ch):
            raise ValueError("channels must be six positive integers")
        if any(b <= a for a, b in zip(ch, ch[1:])):
            raise ValueError(f"channels must be strictly increasing: {ch}")
        if len(self.stage_layout) != 6 or any(s not in ("plain", "mamba") for s in self.stage_layout):
            raise ValueError("stage_layout must hold six entries of 'plain' or 'mamba'")
        if self.branches < 1 or self.heads < 1 or self.d_state < 1:
            raise ValueError("branches, heads and d_state must be positive")
        for c, kind in zip(ch, self.stage_layout):
            if kind == "mamba":
                need = max(self.branches, self.heads, self.inner_divisor)
                if c % need:
                    raise ValueError(f"mamba-stage channels {c} not divisible by {need}")
            elif c % self.gn_groups:
                raise ValueError(f"plain-stage channels {c} not divisible by {self.gn_groups} groups")
        for c in ch[:5]:
            if c % self.gn_groups:
                raise ValueError(f"decoder channels {c} not divisible by {self.gn_groups} groups")
        for lv in self.cga_levels:
            if not 1 <= lv <= 5:
                raise ValueError(f"cga level {lv} outside 1..5")
            c = ch[lv - 1]
            if c % self.branches or c % self.inner_divisor:
                raise ValueError(f"CGA channels {c} not divisible by branches/inner divisor")
        h, w = self.input_size
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise ValueError(f"input size {self.input_size} must be a positive multiple of 32")
        resolve_dtype(self.precision)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def stage_kind(self, idx: int) -> str:
        """Effective body of stage ``idx`` (0..5) after module switches."""
        if self.stage_layout[idx] == "mamba" and (self.use_amf or self.use_lgfm):
            return "mamba"
        return "plain"


# -- stages -------------------------------------------------------------------------------


class PlainStage(Module):
    """3×3 conv, GroupNorm, GELU."""

    def __init__(self, cin: int, c: int, groups: int, rng):
        super().__init__()
        self.conv = Conv2d(cin, c, 3, rng)
        self.gn = GroupNorm(groups, c)

    def forward(self, x):
        return F.gelu(self.gn(self.conv(x)))

    def macs(self, h, w):
        return self.conv.macs(h, w)


class MambaStage(Module):
    """1×1 widening conv, then AMF and LGFM."""

    def __init__(self, cin: int, c: int, cfg: ModelConfig, rng):
        super().__init__()
        self.widen = Conv2d(cin, c, 1, rng)
        d_inner = c // cfg.inner_divisor
        self.amf = AMF(c, cfg.branches, cfg.d_state, rng, d_inner, cfg.exact_zoh) if cfg.use_amf else None
        self.lgfm = LGFM(c, cfg.heads, rng) if cfg.use_lgfm else None

    def forward(self, x):
        x = self.widen(x)
        if self.amf is not None:
            x = self.amf(x)
        if self.lgfm is not None:
            x = self.lgfm(x)
        return x

    def macs(self, h, w):
        m = self.widen.macs(h, w)
        if self.amf is not None:
            m += self.amf.macs(h, w)
        if self.lgfm is not None:
            m += self.lgfm.macs(h, w)
        return m


class PlainDecoderBody(Module):
    """Depthwise 3×3 conv, GroupNorm, GELU."""

    def __init__(self, c: int, groups: int, rng):
        super().__init__()
        self.dw = depthwise(c, rng)
        self.gn = GroupNorm(groups, c)

    def forward(self, x):
        return F.gelu(self.gn(self.dw(x)))

    def macs(self, h, w):
        return self.dw.macs(h, w)


class DecoderStage(Module):
    """Reduce channels, upsample, gate the skip, fuse by addition, transform.

    The 1×1 reduction runs before the nearest-neighbour upsampling; the two
    commute, and the low-resolution order is four times cheaper.
    """

    def __init__(self, cin: int, c: int, level: int, cfg: ModelConfig, rng):
        super().__init__()
        self.reduce = Conv2d(cin, c, 1, rng)
        if cfg.use_cga and level in cfg.cga_levels:
            self.cga = CGA(c, cfg.branches, cfg.d_state, rng, c // cfg.inner_divisor, cfg.exact_zoh)
        else:
            self.cga = None
        if cfg.stage_kind(level - 1) == "mamba" and cfg.use_amf:
            self.body = AMF(c, cfg.branches, cfg.d_state, rng, c // cfg.inner_divisor, cfg.exact_zoh)
        else:
            self.body = PlainDecoderBody(c, cfg.gn_groups, rng)

    def forward(self, x, skip):
        g = F.upsample2x(self.reduce(x))
        x_att = self.cga(skip, g) if self.cga is not None else skip
        return self.body(F.add(x_att, g))

    def macs(self, h, w):
        m = self.reduce.macs(h // 2, w // 2) + self.body.macs(h, w)
        if self.cga is not None:
            m += self.cga.macs(h, w)
        return m


class MambaLiteUNet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        object.__setattr__(self, "config", cfg)
        ch = cfg.channels
        cin = 3
        for s in range(6):
            name = STAGE_NAMES[s]
            if cfg.stage_kind(s) == "mamba":
                stage = MambaStage(cin, ch[s], cfg, rng)
            else:
                stage = PlainStage(cin, ch[s], cfg.gn_groups, rng)
            setattr(self, name, stage)
            cin = ch[s]
        for level in range(5, 0, -1):
            setattr(self, f"dec{level}", DecoderStage(ch[level], ch[level - 1], level, cfg, rng))
        self.head = Conv2d(ch[0], 1, 1, rng)

    def stage_modules(self) -> List[Tuple[str, Module]]:
        return [(n, getattr(self, n)) for n in STAGE_NAMES[:-1]] + [("head", self.head)]

    def forward(self, x: Tensor, record: Optional[dict] = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected B×3×H×W input, got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ValueError(f"spatial size {x.shape[2:]} must be divisible by 32")
        skips = []
        for s in range(5):
            x = getattr(self, STAGE_NAMES[s])(x)
            skips.append(x)
            if record is not None:
                record[STAGE_NAMES[s]] = x
            x = F.max_pool2d(x)
        x = self.bottleneck(x)
        if record is not None:
            record["bottleneck"] = x
        for level in range(5, 0, -1):
            x = getattr(self, f"dec{level}")(x, skips[level - 1])
            if record is not None:
                record[f"dec{level}"] = x
        out = F.sigmoid(self.head(x))
        if record is not None:
            record["output"] = out
        return out

    def macs(self, h: int, w: int) -> int:
        return sum(self.per_module_macs(h, w).values())

    def per_module_macs(self, h: int, w: int) -> Dict[str, int]:
        out = {}
        for s in range(6):
            out[STAGE_NAMES[s]] = getattr(self, STAGE_NAMES[s]).macs(h >> s, w >> s)
        for level in range(5, 0, -1):
            out[f"dec{level}"] = getattr(self, f"dec{level}").macs(h >> (level - 1), w >> (level - 1))
        out["head"] = self.head.macs(h, w)
        return out


Model = MambaLiteUNet


def build_model(cfg: Optional[ModelConfig] = None, seed: int = 0) -> MambaLiteUNet:
    """Construct a model deterministically from ``cfg`` and ``seed``."""
    cfg = (cfg or ModelConfig()).validate()
    rng = np.random.default_rng(seed)
    with precision(cfg.precision):
        model = MambaLiteUNet(cfg, rng)
    model.name_parameters()
    return model


def forward_infer(model: MambaLiteUNet, x) -> Tensor:
    """Probability map for ``x`` in inference mode without recording a graph."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            dtype = model.head.weight.dtype
            return model(as_tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dtype)))
    finally:
        model.train(was_training)


# -- accounting ------------------------------------------------------------------------------


def count_params(model: Module) -> dict:
    per_module = {}
    for name, sub in model.children():
        per_module[name] = sum(p.size for _, p in sub.named_parameters())
    own = sum(p.size for p in model._params.values())
    if own:
        per_module["<self>"] = own
    total = sum(p.size for p in model.parameters())
    trainable = sum(p.size for p in model.parameters() if p.trainable)
    return {"total": total, "per_module": per_module, "trainable": trainable}


def estimate_flops(model, input_size: Optional[Sequence[int]] = None, double: bool = False) -> dict:
    """Analytic per-sample complexity.

    One multiply-accumulate counts as one FLOP unless ``double`` is set.
    ``model`` may be a built model or a :class:`ModelConfig`.
    """
    if isinstance(model, ModelConfig):
        model = build_model(model, seed=0)
    if input_size is None:
        input_size = model.config.input_size
    h, w = (input_size, input_size) if isinstance(input_size, int) else tuple(input_size)
    per = model.per_module_macs(h, w)
    k = 2 if double else 1
    macs = sum(per.values())
    return {"total_gflops": k * macs / 1e9, "macs": macs,
            "per_module": {n: k * v / 1e9 for n, v in per.items()}}


# -- activation dumps ------------------------------------------------------------------------


def _to_gray(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 0:
        return np.full(a.shape, 128, dtype=np.uint8)
    return np.floor((a - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def dump_activations(model: MambaLiteUNet, x, out_dir: str) -> List[str]:
    """Write one channel-mean grayscale map per stage; returns the file paths.

    Intermediate maps are min-max normalised per map (a constant map becomes
    uniform mid-gray). The output map is the probability itself scaled by
    255, so it matches the saved prediction.
    """
    from .data_io import write_pgm

    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.shape[0] != 1:
        raise ValueError("dump_activations expects a single image (B=1)")
    record: dict = {}
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            model(as_tensor(data.astype(model.head.weight.dtype)), record=record)
    finally:
        model.train(was_training)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, name in enumerate(STAGE_NAMES):
        fmap = record[name].data[0].mean(axis=0)
        if name == "output":
            img = np.floor(np.clip(record[name].data[0, 0], 0, 1) * 255.0 + 0.5).astype(np.uint8)
        else:
            img = _to_gray(fmap)
        path = os.path.join(out_dir, f"{i:02d}_{name}.pgm")
        write_pgm(path, img)
        paths.append(path)
    return paths


# -- checkpoints ------------------------------------------------------------------------------

CKPT_MAGIC = b"MLUNCKPT"
CKPT_VERSION = 1


def save_checkpoint(model: MambaLiteUNet, path: str, extra: Optional[dict] = None) -> None:
    """Single-file checkpoint: magic, version, JSON header, little-endian float32 arrays."""
    arrays = [(n, p.data) for n, p in model.named_parameters()]
    arrays += [(n, b) for n, b in model.named_buffers()]
    entries, blobs, offset = [], [], 0
    for name, a in arrays:
        blob = np.ascontiguousarray(a, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": model.config.to_dict(), "arrays": entries,
                         "extra": extra or {}}, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path: str) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<II", raw, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = len(CKPT_MAGIC) + 8
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    base = start + hlen
    arrays = {}
    for e in header["arrays"]:
        buf = raw[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path: str) -> Tuple[MambaLiteUNet, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, extra)``."""
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    model = build_model(cfg, seed=0)
    dtype = resolve_dtype(cfg.precision)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    if set(arrays) != set(params) | set(buffers):
        raise ValueError(f"{path}: array names do not match the configured model")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        p.data = arrays[name].astype(dtype)
    for name in buffers:
        model.load_buffer(name, arrays[name].astype(dtype))
    return model, header.get("extra", {})
