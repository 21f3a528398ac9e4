"""Overlap metrics, the 95th-percentile Hausdorff distance, and dataset evaluation."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

CSV_FIELDS = ["sample_id", "iou", "dsc", "ac", "se", "sp", "hd95"]
METRIC_NAMES = CSV_FIELDS[1:]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass
class MetricsRecord:
    sample_id: str
    iou: float
    dsc: float
    ac: float
    se: float
    sp: float
    hd95: float

    def as_row(self) -> dict:
        return asdict(self)


def binarize(p, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(p) >= threshold).astype(np.uint8)


def _as_binary(m) -> np.ndarray:
    m = np.asarray(m)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    return m.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = _as_binary(pred), _as_binary(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: int, den: int) -> float:
    # 0/0 means nothing to get wrong: perfect by vacuity
    return 1.0 if den == 0 else num / den


def overlap_metrics(c: ConfusionCounts) -> Dict[str, float]:
    total = c.tp + c.fp + c.fn + c.tn
    return {
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn),
        "dsc": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "ac": _ratio(c.tp + c.tn, total),
        "se": _ratio(c.tp, c.tp + c.fn),
        "sp": _ratio(c.tn, c.tn + c.fp),
    }


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour in the background.

    Pixels outside the image count as background.
    """
    m = _as_binary(mask)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(b).query(a, k=1)
    return np.asarray(d, dtype=np.float64)


def hd95(gt, pred, pooled: bool = True) -> float:
    """95th-percentile symmetric Hausdorff distance in pixels.

    ``pooled=True`` takes the percentile over the union of both directed
    distance sets; otherwise the larger of the two directed percentiles.
    Both masks empty gives 0, exactly one empty gives the image diagonal.
    """
    gt, pred = _as_binary(gt), _as_binary(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {gt.shape} vs {pred.shape}")
    g_any, p_any = gt.any(), pred.any()
    if not g_any and not p_any:
        return 0.0
    if not g_any or not p_any:
        return float(np.hypot(*gt.shape))
    bg = np.argwhere(boundary(gt)).astype(np.float64)
    bp = np.argwhere(boundary(pred)).astype(np.float64)
    d_gp = _directed(bg, bp)
    d_pg = _directed(bp, bg)
    if pooled:
        return float(np.percentile(np.concatenate([d_gp, d_pg]), 95))
    return float(max(np.percentile(d_gp, 95), np.percentile(d_pg, 95)))


def evaluate_pair(pred, gt, sample_id: str = "", pooled: bool = True) -> MetricsRecord:
    c = confusion(pred, gt)
    m = overlap_metrics(c)
    return MetricsRecord(sample_id, m["iou"], m["dsc"], m["ac"], m["se"], m["sp"],
                         hd95(gt, pred, pooled=pooled))


def aggregate(records: Sequence[MetricsRecord]) -> Dict[str, Dict[str, float]]:
    """Mean and population standard deviation of every metric."""
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in records], dtype=np.float64)
        out[name] = {"mean": float(vals.mean()), "sd": float(vals.std())}
    return out


def evaluate_dataset(model, samples, threshold: float = 0.5, pooled: bool = True, batch_size: int = 8):
    """Per-sample records (in input order) and their mean/SD aggregate."""
    from .net import forward_infer

    samples = list(samples)
    if not samples:
        raise ValueError("evaluate_dataset needs at least one sample")
    records = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x = np.stack([s.image for s in chunk])
        probs = forward_infer(model, x).data
        for s, p in zip(chunk, probs):
            records.append(evaluate_pair(binarize(p[0], threshold), s.mask[0], s.id, pooled))
    return records, aggregate(records)


def _fmt(v) -> str:
    return v if isinstance(v, str) else repr(float(v))


def write_metrics_csv(path: str, records: Sequence[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([_fmt(getattr(r, k)) for k in CSV_FIELDS])


def write_aggregate_csv(path: str, agg: Dict[str, Dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for stat in ("mean", "sd"):
            w.writerow([stat] + [_fmt(agg[k][stat]) for k in METRIC_NAMES])


def read_metrics_csv(path: str) -> List[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(r["sample_id"], *(float(r[k]) for k in METRIC_NAMES)) for r in rows]
