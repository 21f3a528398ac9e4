"""Command-line entry point: train, eval, predict, report, gradcheck, ablate, synth.

Every command takes an optional JSON config file with ``model``, ``train``
and ``data`` sections; command-line flags override it. The merged config is
validated before any compute and written to ``<out>/config.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data_io import Sample, load_pair, make_split, read_image, read_manifest, resize_bilinear, \
    save_image, save_mask, DatasetManifest
from .loss import LossConfig, MODES
from .metrics import evaluate_dataset, write_aggregate_csv, write_metrics_csv
from .net import CHANNEL_CONFIGS, ModelConfig, build_model, count_params, dump_activations, \
    estimate_flops, forward_infer, load_checkpoint
from .trainer import TrainConfig, synth_dataset, train_loop

log = logging.getLogger("mambalite")

OUT_ENV = "MAMBALITE_OUT"
AXES = ("modules", "branches", "channels", "input-size", "loss")
MODULE_NAMES = ("amf", "lgfm", "cga")
DEFAULT_AXIS_VALUES = {
    "modules": "none,amf,lgfm,cga,amf+lgfm,amf+cga,lgfm+cga,amf+lgfm+cga",
    "branches": "1,2,4,8,16",
    "channels": "C1,C2,C3,C4,C5",
    "input-size": "224,256,288,320,512",
    "loss": "bce,dice,both",
}


class UsageError(Exception):
    """Invalid command line or config; reported with exit code 2."""


# -- run config ---------------------------------------------------------------------------


@dataclass
class DataConfig:
    manifest: Optional[str] = None
    synth: int = 0          # number of synthetic samples generated in memory
    synth_size: int = 64
    ratios: tuple = (0.7, 0.1, 0.2)
    overfit: bool = False   # train, validate and test on the same samples

    def validate(self) -> "DataConfig":
        if self.manifest and self.synth:
            raise ValueError("give either a manifest or a synthetic sample count, not both")
        if self.synth < 0:
            raise ValueError("synthetic sample count must be non-negative")
        return self


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    out: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    options: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.data.validate()
        return self

    def to_dict(self) -> dict:
        d = self.data
        return {"command": self.command, "seed": self.seed, "out": self.out,
                "model": self.model.to_dict(), "train": self.train.to_dict(),
                "data": {"manifest": d.manifest, "synth": d.synth, "synth_size": d.synth_size,
                         "ratios": list(d.ratios), "overfit": d.overfit},
                "options": self.options}

    def echo(self) -> str:
        os.makedirs(self.out, exist_ok=True)
        path = os.path.join(self.out, "config.json")
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path


def parse_channels(text: str) -> tuple:
    key = text.strip().upper()
    if key in CHANNEL_CONFIGS:
        return tuple(CHANNEL_CONFIGS[key])
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"channels must be one of {sorted(CHANNEL_CONFIGS)} or six integers, got {text!r}")


def parse_size(text) -> tuple:
    parts = str(text).lower().replace("x", ",").split(",")
    try:
        vals = [int(p) for p in parts if p]
    except ValueError:
        raise UsageError(f"bad size {text!r}")
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise UsageError(f"bad size {text!r}")
    return tuple(vals)


def parse_modules(label: str) -> dict:
    parts = [p for p in label.lower().split("+") if p]
    if parts == ["none"]:
        parts = []
    unknown = set(parts) - set(MODULE_NAMES)
    if unknown:
        raise UsageError(f"unknown module(s) {sorted(unknown)} in {label!r}")
    return {f"use_{m}": m in parts for m in MODULE_NAMES}


def _read_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    unknown = set(raw) - {"seed", "out", "model", "train", "data", "options"}
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}")
    return raw


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge the config file with flag overrides (flags win) and validate."""
    raw = _read_config_file(getattr(args, "config", None))
    model_d = dict(raw.get("model", {}))
    if isinstance(model_d.get("channels"), str):
        model_d["channels"] = parse_channels(model_d["channels"])
    train_d = dict(raw.get("train", {}))
    data_d = dict(raw.get("data", {}))

    def put(d, key, value):
        if value is not None:
            d[key] = value

    put(model_d, "channels", parse_channels(args.channels) if args.channels else None)
    put(model_d, "branches", args.branches)
    put(model_d, "heads", args.heads)
    put(model_d, "d_state", args.d_state)
    put(model_d, "input_size", parse_size(args.input_size) if args.input_size else None)
    put(model_d, "precision", args.precision)
    for m in MODULE_NAMES:
        if getattr(args, f"no_{m}"):
            model_d[f"use_{m}"] = False
    if args.exact_zoh:
        model_d["exact_zoh"] = True

    put(train_d, "epochs", args.epochs)
    put(train_d, "batch_size", args.batch_size)
    put(train_d, "lr_init", args.lr)
    put(train_d, "lr_min", args.lr_min)
    put(train_d, "weight_decay", args.weight_decay)
    put(train_d, "train_fraction", args.train_fraction)
    put(train_d, "schedule", args.schedule)
    if args.no_augment:
        train_d["augment"] = False
    if args.loss:
        loss_d = dict(train_d.get("loss", {}))
        loss_d["mode"] = args.loss
        train_d["loss"] = loss_d

    put(data_d, "manifest", args.manifest)
    put(data_d, "synth", args.synth)
    put(data_d, "synth_size", args.synth_size)
    if args.overfit:
        data_d["overfit"] = True
    if "ratios" in data_d:
        data_d["ratios"] = tuple(data_d["ratios"])

    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    train_d["seed"] = seed
    out = args.out or raw.get("out") or os.path.join(os.environ.get(OUT_ENV, "runs"), args.command)
    try:
        cfg = RunConfig(args.command, seed, out, ModelConfig.from_dict(model_d),
                        TrainConfig.from_dict(train_d), DataConfig(**data_d), dict(raw.get("options", {})))
        return cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}")


# -- data ---------------------------------------------------------------------------------


def load_splits(cfg: RunConfig) -> Dict[str, List[Sample]]:
    """Train/val/test samples from the manifest or from the synthetic generator."""
    d, size = cfg.data, cfg.model.input_size
    if d.manifest:
        m = read_manifest(d.manifest)
        m.image_size = size
        splits = {s: m.load(s) for s in ("train", "val", "test")}
    elif d.synth:
        samples = synth_dataset(d.synth, d.synth_size, cfg.seed)
        if size != (d.synth_size, d.synth_size):
            samples = [_resize_sample(s, size) for s in samples]
        if d.overfit:
            return {"train": samples, "val": samples, "test": samples}
        parts = make_split([s.id for s in samples], d.ratios, cfg.seed)
        by_id = {s.id: s for s in samples}
        splits = {k: [by_id[i] for i in v] for k, v in parts.items()}
    else:
        raise UsageError("no data: give --manifest or --synth N")
    if d.overfit:
        splits = {"train": splits["train"], "val": splits["train"], "test": splits["train"]}
    return splits


def _resize_sample(s: Sample, size) -> Sample:
    from .data_io import resize_nearest
    img = np.clip(resize_bilinear(s.image, size), 0, 1).astype(np.float32)
    return Sample(s.id, img, resize_nearest(s.mask, size))


# -- commands -----------------------------------------------------------------------------


def run_train(cfg: RunConfig) -> dict:
    splits = load_splits(cfg)
    model = build_model(cfg.model, cfg.seed)
    t0 = time.time()
    res = train_loop(model, splits["train"], splits["val"], cfg.train, out_dir=cfg.out)
    last = res.history[-1]
    print(f"trained {cfg.train.epochs} epochs in {time.time() - t0:.1f}s; best val IoU "
          f"{res.best_val_iou:.4f} at epoch {res.best_epoch}; final train loss {last['train_loss']:.5f}")
    return {"model": model, "result": res, "splits": splits}


def _require_checkpoint(path: Optional[str]) -> str:
    if not path:
        raise UsageError("--checkpoint is required")
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def run_eval(cfg: RunConfig) -> dict:
    model, _ = load_checkpoint(_require_checkpoint(cfg.options.get("checkpoint")))
    split = cfg.options.get("split", "test")
    samples = load_splits(cfg)[split]
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    records, agg = evaluate_dataset(model, samples, threshold=cfg.options.get("threshold", 0.5),
                                    pooled=not cfg.options.get("hd95_max", False))
    os.makedirs(cfg.out, exist_ok=True)
    write_metrics_csv(os.path.join(cfg.out, "metrics.csv"), records)
    write_aggregate_csv(os.path.join(cfg.out, "aggregate.csv"), agg)
    print("metric  mean      sd")
    for k, v in agg.items():
        print(f"{k:<6}  {v['mean']:.6f}  {v['sd']:.6f}")
    return {"records": records, "aggregate": agg}


def _predict_inputs(cfg: RunConfig) -> List[Sample]:
    paths = cfg.options.get("inputs") or []
    if not paths:
        return load_splits(cfg)[cfg.options.get("split", "test")]
    out = []
    size = cfg.model.input_size
    for p in paths:
        img = read_image(p, "RGB").transpose(2, 0, 1)
        img = np.clip(resize_bilinear(img, size) / 255.0, 0, 1).astype(np.float32)
        out.append(Sample(os.path.splitext(os.path.basename(p))[0], img,
                          np.zeros((1,) + tuple(size), np.float32)))
    return out


def run_predict(cfg: RunConfig) -> dict:
    model, _ = load_checkpoint(_require_checkpoint(cfg.options.get("checkpoint")))
    samples = _predict_inputs(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    written = []
    for s in samples:
        p = forward_infer(model, s.image[None]).data[0]
        path = os.path.join(cfg.out, f"{s.id}.pgm")
        save_mask(p, path, as_probability=bool(cfg.options.get("probability")))
        written.append(path)
        if cfg.options.get("dump_activations"):
            dump_activations(model, s.image[None], os.path.join(cfg.out, "activations", s.id))
    print(f"wrote {len(written)} masks to {cfg.out}")
    return {"paths": written}


def report_rows(model_cfg: ModelConfig, seed: int = 0) -> List[dict]:
    model = build_model(model_cfg, seed)
    params = count_params(model)
    flops = estimate_flops(model, model_cfg.input_size)
    rows = [{"module": n, "params": params["per_module"].get(n, 0), "gflops": flops["per_module"][n]}
            for n in flops["per_module"]]
    rows.append({"module": "total", "params": params["total"], "gflops": flops["total_gflops"]})
    return rows


def run_report(cfg: RunConfig) -> dict:
    rows = report_rows(cfg.model, cfg.seed)
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "report.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, ["module", "params", "gflops"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    h, w_ = cfg.model.input_size
    print(f"module      params     GFLOPs ({h}x{w_}, MACs)")
    for r in rows:
        print(f"{r['module']:<10}  {r['params']:>9,d}  {r['gflops']:.6f}")
    total = rows[-1]
    print(f"total params {total['params'] / 1e6:.3f} M, GFLOPs {total['gflops']:.3f}")
    return {"rows": rows}


def run_gradcheck(cfg: RunConfig) -> dict:
    from .checks import run_suite

    tol = float(cfg.options.get("tol", 1e-4))
    reports = run_suite(cfg.seed, tol, include_model=not cfg.options.get("no_model", False))
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "gradcheck.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "max_rel_err", "passed", "n_checked", "worst"])
        for name, r in reports.items():
            w.writerow([name, repr(r.max_rel_err), r.passed, r.n_checked, r.worst])
    for name, r in reports.items():
        print(f"{'PASS' if r.passed else 'FAIL'}  {name:<36} max_rel_err={r.max_rel_err:.3e}")
    worst = max(r.max_rel_err for r in reports.values())
    ok = all(r.passed for r in reports.values())
    print(f"{'all checks passed' if ok else 'some checks FAILED'}; max rel-err {worst:.3e} (tol {tol:g})")
    return {"reports": reports, "passed": ok, "max_rel_err": worst}


def _axis_configs(axis: str, values: Sequence[str], base: RunConfig) -> List[tuple]:
    out = []
    for v in values:
        m = base.model.to_dict()
        t = base.train.to_dict()
        if axis == "modules":
            m.update(parse_modules(v))
        elif axis == "branches":
            m["branches"] = int(v)
        elif axis == "channels":
            m["channels"] = list(parse_channels(v))
        elif axis == "input-size":
            m["input_size"] = list(parse_size(v))
        elif axis == "loss":
            if v not in MODES:
                raise UsageError(f"loss mode must be one of {MODES}, got {v!r}")
            t["loss"] = {**t["loss"], "mode": v}
        else:
            raise UsageError(f"unknown axis {axis!r}; choose from {AXES}")
        try:
            out.append((v, ModelConfig.from_dict(m).validate(), TrainConfig.from_dict(t).validate()))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"axis value {v!r}: {exc}")
    return out


ABLATION_FIELDS = ["axis", "value", "params", "gflops", "train_loss", "iou", "dsc", "ac", "se", "sp", "hd95"]


def run_ablation(axis: str, values: Sequence[str], base: RunConfig, train: bool = False) -> List[dict]:
    """One row per axis value: params, GFLOPs and, when trained, test-split metrics."""
    configs = _axis_configs(axis, values, base)  # validate all before any compute
    splits = load_splits(base) if train else None
    rows = []
    for v, mcfg, tcfg in configs:
        model = build_model(mcfg, base.seed)
        row = {"axis": axis, "value": v, "params": count_params(model)["total"],
               "gflops": estimate_flops(model, mcfg.input_size)["total_gflops"]}
        if train:
            data = splits
            if mcfg.input_size != base.model.input_size:
                data = {k: [_resize_sample(s, mcfg.input_size) for s in ss] for k, ss in splits.items()}
            res = train_loop(model, data["train"], data["val"], tcfg,
                             out_dir=os.path.join(base.out, f"{axis}_{v}"))
            test = data["test"] or data["val"]
            _, agg = evaluate_dataset(model, test)
            row["train_loss"] = res.history[-1]["train_loss"]
            row.update({k: agg[k]["mean"] for k in ("iou", "dsc", "ac", "se", "sp", "hd95")})
        rows.append(row)
        log.info("ablation %s=%s done", axis, v)
    return rows


def write_ablation(path: str, rows: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ABLATION_FIELDS, lineterminator="\n", restval="")
        w.writeheader()
        w.writerows(rows)


def format_ablation(rows: List[dict]) -> str:
    trained = "iou" in rows[0]
    head = f"{'value':<14}{'params (M)':>11}{'GFLOPs':>9}"
    if trained:
        head += f"{'loss':>9}{'IoU':>8}{'DSC':>8}{'HD95':>8}"
    lines = [head]
    for r in rows:
        line = f"{r['value']:<14}{r['params'] / 1e6:>11.3f}{r['gflops']:>9.3f}"
        if trained:
            line += f"{r['train_loss']:>9.4f}{r['iou']:>8.4f}{r['dsc']:>8.4f}{r['hd95']:>8.2f}"
        lines.append(line)
    return "\n".join(lines)


def run_ablate(cfg: RunConfig) -> dict:
    axis = cfg.options.get("axis")
    if axis not in AXES:
        raise UsageError(f"--axis must be one of {AXES}")
    values = [v for v in (cfg.options.get("values") or DEFAULT_AXIS_VALUES[axis]).split(",") if v]
    train = bool(cfg.options.get("train")) or axis == "loss"
    rows = run_ablation(axis, values, cfg, train=train)
    os.makedirs(cfg.out, exist_ok=True)
    write_ablation(os.path.join(cfg.out, f"ablation_{axis}.csv"), rows)
    print(format_ablation(rows))
    return {"rows": rows}


def run_synth(cfg: RunConfig) -> dict:
    n = cfg.data.synth or 8
    size = cfg.data.synth_size
    samples = synth_dataset(n, size, cfg.seed)
    for sub in ("images", "masks"):
        os.makedirs(os.path.join(cfg.out, sub), exist_ok=True)
    split = make_split([s.id for s in samples], cfg.data.ratios, cfg.seed)
    which = {i: k for k, ids in split.items() for i in ids}
    entries = []
    for s in samples:
        img, msk = f"images/{s.id}.ppm", f"masks/{s.id}.pgm"
        save_image(s.image, os.path.join(cfg.out, img))
        save_mask(s.mask, os.path.join(cfg.out, msk))
        entries.append({"id": s.id, "image": img, "mask": msk,
                        "split": "train" if cfg.data.overfit else which[s.id]})
    path = os.path.join(cfg.out, "manifest.json")
    DatasetManifest(entries, "", (size, size)).save(path)
    print(f"wrote {n} samples ({size}x{size}) and {path}")
    return {"manifest": path}


COMMANDS = {"train": run_train, "eval": run_eval, "predict": run_predict, "report": run_report,
            "gradcheck": run_gradcheck, "ablate": run_ablate, "synth": run_synth}


# -- argument parsing ----------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run")
    g.add_argument("--config", help="JSON config with model/train/data sections")
    g.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
    g.add_argument("--seed", type=int)
    g.add_argument("-v", "--verbose", action="store_true")
    m = p.add_argument_group("model")
    m.add_argument("--channels", help="C1..C5 or six comma-separated widths")
    m.add_argument("--branches", type=int)
    m.add_argument("--heads", type=int)
    m.add_argument("--d-state", type=int)
    m.add_argument("--input-size", help="N or HxW")
    m.add_argument("--precision", choices=("f32", "f64"))
    for name in MODULE_NAMES:
        m.add_argument(f"--no-{name}", action="store_true")
    m.add_argument("--exact-zoh", action="store_true", help="exact zero-order-hold input discretisation")
    t = p.add_argument_group("training")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-min", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--train-fraction", type=float)
    t.add_argument("--schedule", choices=("epoch", "iter"))
    t.add_argument("--loss", choices=MODES)
    t.add_argument("--no-augment", action="store_true")
    d = p.add_argument_group("data")
    d.add_argument("--manifest")
    d.add_argument("--synth", type=int, help="generate N synthetic samples instead of reading a manifest")
    d.add_argument("--synth-size", type=int)
    d.add_argument("--overfit", action="store_true", help="use one sample set for train, val and test")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mambalite", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    helps = {"train": "train a model", "eval": "evaluate a checkpoint", "predict": "write predicted masks",
             "report": "parameter and GFLOP table", "gradcheck": "finite-difference gradient suite",
             "ablate": "sweep one ablation axis", "synth": "write a synthetic dataset and manifest"}
    ps = {}
    for name in COMMANDS:
        ps[name] = sub.add_parser(name, help=helps[name])
        _common(ps[name])
    for name in ("eval", "predict"):
        ps[name].add_argument("--checkpoint")
        ps[name].add_argument("--split", choices=("train", "val", "test"), default="test")
    ps["eval"].add_argument("--threshold", type=float, default=0.5)
    ps["eval"].add_argument("--hd95-max", action="store_true",
                            help="max of directed percentiles instead of the pooled percentile")
    ps["predict"].add_argument("inputs", nargs="*", help="image files (default: the chosen split)")
    ps["predict"].add_argument("--probability", action="store_true", help="write probabilities, not masks")
    ps["predict"].add_argument("--dump-activations", action="store_true")
    ps["gradcheck"].add_argument("--tol", type=float, default=1e-4)
    ps["gradcheck"].add_argument("--no-model", action="store_true", help="skip the full-model check")
    ps["ablate"].add_argument("--axis", choices=AXES, required=True)
    ps["ablate"].add_argument("--values", help="comma-separated axis values")
    ps["ablate"].add_argument("--train", action="store_true", help="train each variant and add metrics")
    return parser


_OPTION_KEYS = ("checkpoint", "split", "threshold", "hd95_max", "inputs", "probability",
                "dump_activations", "tol", "no_model", "axis", "values", "train")


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = build_run_config(args)
        for k in _OPTION_KEYS:
            if getattr(args, k, None) not in (None, False, []):
                cfg.options[k] = getattr(args, k)
        if cfg.command in ("ablate",) and cfg.options.get("axis") not in AXES:
            raise UsageError(f"--axis must be one of {AXES}")
        cfg.echo()
        result = COMMANDS[cfg.command](cfg)
    except UsageError as exc:
        print(f"mambalite {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"mambalite {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if cfg.command == "gradcheck" and not result["passed"]:
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())
