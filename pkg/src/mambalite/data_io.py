"""Image and mask files, resizing, dataset manifests and splits."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

SPLITS = ("train", "val", "test")


@dataclass
class Sample:
    id: str
    image: np.ndarray   # 3×H×W in [0, 1]
    mask: np.ndarray    # 1×H×W in {0, 1}


@dataclass
class SampleBatch:
    images: np.ndarray
    masks: np.ndarray
    ids: List[str]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "SampleBatch":
        if not samples:
            raise ValueError("empty batch")
        images = np.stack([s.image for s in samples])
        masks = np.stack([s.mask for s in samples])
        if images.shape[0] != masks.shape[0] or images.shape[2:] != masks.shape[2:]:
            raise ValueError("image/mask shapes are inconsistent")
        if not np.all((masks == 0) | (masks == 1)):
            raise ValueError("masks must be binary")
        return cls(images, masks, [s.id for s in samples])

    def __len__(self) -> int:
        return len(self.ids)


# -- portable image files ------------------------------------------------------------


def write_pgm(path: str, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    Image.fromarray(img).save(path, format="PPM")


def write_ppm(path: str, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("write_ppm expects an H×W×3 uint8 array")
    Image.fromarray(img).save(path, format="PPM")


def read_image(path: str, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


# -- resizing -----------------------------------------------------------------------------


def resize_nearest(a: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes.

    Output pixel ``i`` samples input ``floor((i + 0.5) * in / out)``; a 2×
    downscale therefore keeps the bottom-right pixel of each 2×2 cell.
    """
    h, w = a.shape[-2:]
    oh, ow = size
    ri = np.minimum(np.floor((np.arange(oh) + 0.5) * h / oh).astype(int), h - 1)
    ci = np.minimum(np.floor((np.arange(ow) + 0.5) * w / ow).astype(int), w - 1)
    return a[..., ri[:, None], ci[None, :]]


def _bilinear_weights(n_in: int, n_out: int):
    x = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    x = np.clip(x, 0, n_in - 1)
    i0 = np.floor(x).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, x - i0


def resize_bilinear(a: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the last two axes with half-pixel centres, no antialiasing."""
    h, w = a.shape[-2:]
    if (h, w) == tuple(size):
        return a.astype(np.float64)
    r0, r1, fr = _bilinear_weights(h, size[0])
    c0, c1, fc = _bilinear_weights(w, size[1])
    a = a.astype(np.float64)
    rows = a[..., r0, :] * (1 - fr)[:, None] + a[..., r1, :] * fr[:, None]
    return rows[..., c0] * (1 - fc) + rows[..., c1] * fc


# -- pairs and masks --------------------------------------------------------------------


def load_pair(entry: dict, target_size: Optional[Tuple[int, int]] = None, root: str = "") -> Sample:
    """Read an image/mask pair into a :class:`Sample` at ``target_size``."""
    img = read_image(os.path.join(root, entry["image"]), "RGB")
    mask = read_image(os.path.join(root, entry["mask"]), "L")
    if img.shape[:2] != mask.shape:
        raise ValueError(f"image {img.shape[:2]} and mask {mask.shape} sizes differ for {entry['image']}")
    size = tuple(target_size) if target_size is not None else mask.shape
    image = resize_bilinear(img.transpose(2, 0, 1), size) / 255.0
    m = resize_nearest(mask, size).astype(np.float64) / 255.0
    m = (m >= 0.5).astype(np.float32)[None]
    sid = entry.get("id") or os.path.splitext(os.path.basename(entry["image"]))[0]
    return Sample(sid, np.clip(image, 0.0, 1.0).astype(np.float32), m)


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Scale [0, 1] values by 255 with round-half-up."""
    v = np.asarray(values, dtype=np.float64)
    if v.min(initial=0.0) < 0 or v.max(initial=0.0) > 1:
        raise ValueError("values must lie in [0, 1]")
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def save_mask(mask, path: str, as_probability: bool = False) -> None:
    m = np.asarray(mask, dtype=np.float64)
    m = m.reshape(m.shape[-2:])
    if not as_probability:
        m = (m >= 0.5).astype(np.float64)
    write_pgm(path, to_uint8(m))


def load_mask(path: str) -> np.ndarray:
    return (read_image(path, "L") >= 128).astype(np.float32)


def save_image(image: np.ndarray, path: str) -> None:
    """Write a 3×H×W [0, 1] image as PPM."""
    write_ppm(path, to_uint8(np.asarray(image).transpose(1, 2, 0)))


# -- manifests and splits ----------------------------------------------------------------


@dataclass
class DatasetManifest:
    entries: List[dict]
    root: str = ""
    image_size: Tuple[int, int] = (256, 256)

    def validate(self, check_files: bool = True) -> "DatasetManifest":
        seen: Dict[str, str] = {}
        for e in self.entries:
            for key in ("image", "mask", "split"):
                if key not in e:
                    raise ValueError(f"manifest entry missing {key!r}: {e}")
            if e["split"] not in SPLITS:
                raise ValueError(f"unknown split {e['split']!r}")
            sid = e.get("id") or os.path.splitext(os.path.basename(e["image"]))[0]
            if sid in seen and seen[sid] != e["split"]:
                raise ValueError(f"id {sid!r} appears in splits {seen[sid]} and {e['split']}")
            if sid in seen:
                raise ValueError(f"duplicate id {sid!r}")
            seen[sid] = e["split"]
            if check_files:
                for key in ("image", "mask"):
                    p = os.path.join(self.root, e[key])
                    if not os.path.exists(p):
                        raise FileNotFoundError(p)
        return self

    def split(self, name: str) -> List[dict]:
        return [e for e in self.entries if e["split"] == name]

    def load(self, split: str) -> List[Sample]:
        return [load_pair(e, self.image_size, self.root) for e in self.split(split)]

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump({"root": self.root, "image_size": list(self.image_size),
                       "entries": self.entries}, fh, indent=1)
            fh.write("\n")


def read_manifest(path: str, check_files: bool = True) -> DatasetManifest:
    with open(path) as fh:
        raw = json.load(fh)
    root = raw.get("root", "")
    if not os.path.isabs(root):
        root = os.path.join(os.path.dirname(os.path.abspath(path)), root)
    m = DatasetManifest(list(raw["entries"]), root, tuple(raw.get("image_size", (256, 256))))
    return m.validate(check_files)


def make_split(ids: Sequence[str], ratios=(0.7, 0.1, 0.2), seed: int = 0) -> Dict[str, List[str]]:
    """Shuffle ``ids`` deterministically and cut into train/val/test.

    Sizes are ``floor(r·n)`` with the remainder handed out one by one in
    order of largest fractional part (earlier split first on ties).
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-6):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = list(ids)
    n = len(ids)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    exact = [r * n for r in ratios]
    sizes = [int(math.floor(e + 1e-9)) for e in exact]
    rem = n - sum(sizes)
    frac_rank = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in frac_rank[:rem]:
        sizes[i] += 1
    out, start = {}, 0
    for name, k in zip(SPLITS, sizes):
        out[name] = shuffled[start:start + k]
        start += k
    return out
