"""Finite-difference gradient checks for primitives, modules, losses and the full model.

Every check runs in 64-bit precision and returns a :class:`GradReport`.
Outputs are contracted against a fixed random tensor so that every output
coordinate contributes to the scalar under test.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from . import functional as F
from .blocks import AMF, CGA, LGFM
from .gradcheck import GradReport, finite_diff_check
from .loss import bce_loss, dice_loss, total_loss
from .net import ModelConfig, build_model
from .ssm import S6, selective_scan
from .tensor import Tensor, no_grad, precision


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


def _check_fn(fn, inputs, seed, **kw) -> GradReport:
    rng = np.random.default_rng(seed + 1000)
    with precision("f64"):
        R = Tensor(rng.standard_normal(fn(*inputs).shape), dtype=np.float64)
        return finite_diff_check(lambda: F.sum(F.mul(fn(*inputs), R)), inputs, **kw)


def primitive_cases(seed: int = 0) -> Dict[str, Tuple[Callable, list]]:
    """Small random instances of every differentiable primitive."""
    rng = np.random.default_rng(seed)
    L = lambda *s, lo=-1.0, hi=1.0: _leaf(rng, s, lo, hi)  # noqa: E731
    # well-separated values keep max-pool/ReLU away from their kinks
    pool_in = Tensor(rng.permutation(32).reshape(1, 2, 4, 4) * 0.1 + 0.05, requires_grad=True,
                     dtype=np.float64)
    relu_in = Tensor(np.sign(rng.uniform(-1, 1, (3, 4))) * rng.uniform(0.1, 1.0, (3, 4)),
                     requires_grad=True, dtype=np.float64)
    bn_running = {"mean": rng.uniform(-0.5, 0.5, 3), "var": rng.uniform(0.5, 1.5, 3)}
    cases = {
        "add": (F.add, [L(3, 4), L(1, 4)]),
        "sub": (F.sub, [L(3, 4), L(3, 1)]),
        "mul": (F.mul, [L(3, 4), L(3, 4)]),
        "div": (F.div, [L(3, 4), L(3, 4, lo=0.5, hi=2.0)]),
        "exp": (F.exp, [L(3, 4)]),
        "log": (F.log, [L(3, 4, lo=0.2, hi=2.0)]),
        "clamp": (lambda x: F.clamp(x, -0.5, 0.5), [L(3, 4)]),
        "sum_axis": (lambda x: F.sum(x, axis=(0, 2)), [L(2, 3, 4)]),
        "mean": (lambda x: F.mean(x, axis=1, keepdims=True), [L(2, 3, 4)]),
        "reshape": (lambda x: F.reshape(x, (4, 6)), [L(2, 3, 4)]),
        "transpose": (lambda x: F.transpose(x, (2, 0, 1)), [L(2, 3, 4)]),
        "flip": (lambda x: F.flip(x, 1), [L(2, 3, 4)]),
        "split_concat": (lambda x: F.concat_channels(F.split_channels(x, 2)[::-1]), [L(1, 4, 2, 2)]),
        "stack": (lambda a, b: F.stack([a, b], axis=1), [L(2, 3), L(2, 3)]),
        "matmul": (F.matmul, [L(2, 3, 4), L(4, 5)]),
        "linear": (F.linear, [L(2, 3, 4), L(4, 5), L(5)]),
        "relu": (F.relu, [relu_in]),
        "sigmoid": (F.sigmoid, [L(3, 4, lo=-3, hi=3)]),
        "silu": (F.silu, [L(3, 4, lo=-3, hi=3)]),
        "gelu": (F.gelu, [L(3, 4, lo=-3, hi=3)]),
        "softplus": (F.softplus, [L(3, 4, lo=-3, hi=3)]),
        "softmax": (lambda x: F.softmax(x, -1), [L(2, 3, 5)]),
        "conv2d": (lambda x, w, b: F.conv2d(x, w, b, padding=1), [L(2, 3, 5, 5), L(4, 3, 3, 3), L(4)]),
        "conv2d_depthwise": (lambda x, w, b: F.conv2d(x, w, b, padding=1, groups=3),
                             [L(2, 3, 5, 5), L(3, 1, 3, 3), L(3)]),
        "conv2d_grouped_strided": (lambda x, w: F.conv2d(x, w, None, stride=2, padding=1, groups=2),
                                   [L(1, 4, 6, 6), L(6, 2, 3, 3)]),
        "max_pool2d": (F.max_pool2d, [pool_in]),
        "upsample2x": (F.upsample2x, [L(1, 2, 3, 3)]),
        "layer_norm": (lambda x, g, b: F.layer_norm(x, g, b), [L(2, 3, 6), L(6), L(6)]),
        "group_norm": (lambda x, g, b: F.group_norm(x, 2, g, b), [L(2, 4, 3, 3), L(4), L(4)]),
        "batch_norm_train": (lambda x, g, b: F.batch_norm2d(x, g, b, None, True),
                             [L(2, 3, 3, 3), L(3), L(3)]),
        "batch_norm_infer": (lambda x, g, b: F.batch_norm2d(x, g, b, bn_running, False),
                             [L(2, 3, 3, 3), L(3), L(3)]),
        "mha": (lambda x, q, k, v, o: F.mha_forward(x, q, k, v, o, 2),
                [L(2, 3, 4), L(4, 4), L(4, 4), L(4, 4), L(4, 4)]),
    }
    scan_inputs = lambda: [L(1, 6, 4), L(1, 6, 4, lo=0.05, hi=0.8), L(4, 3, lo=-2.0, hi=-0.3),  # noqa: E731
                           L(1, 6, 3), L(1, 6, 3), L(4)]
    cases["selective_scan"] = (lambda *a: selective_scan(*a), scan_inputs())
    cases["selective_scan_zoh"] = (lambda *a: selective_scan(*a, exact_zoh=True), scan_inputs())
    return cases


def check_primitives(seed: int = 0, tol: float = 1e-4) -> Dict[str, GradReport]:
    with precision("f64"):
        cases = primitive_cases(seed)
    return {name: _check_fn(fn, inputs, seed, tol=tol) for name, (fn, inputs) in cases.items()}


def _module_check(module, make_out, inputs, seed, tol, max_coords=None, order=4) -> GradReport:
    rng = np.random.default_rng(seed + 7)
    named = list(module.named_parameters())
    params = [p for _, p in named] + list(inputs)
    names = [n for n, _ in named] + [f"input{i}" for i in range(len(inputs))]
    with precision("f64"):
        R = Tensor(rng.standard_normal(make_out().shape), dtype=np.float64)
        return finite_diff_check(lambda: F.sum(F.mul(make_out(), R)), params, tol=tol,
                                 max_coords=max_coords, seed=seed, names=names, order=order)


def _perturb_params(module, rng, scale=0.3):
    # move away from init so alpha, biases and gates all carry signal
    for _, p in module.named_parameters():
        p.data = np.asarray(p.data + scale * rng.standard_normal(p.shape))


def _open_step_sizes(module, dt: float = 0.5):
    # with the tiny default step the scan's parameter gradients sit near the
    # finite-difference noise floor; a larger step makes them measurable
    for m in module.modules():
        if isinstance(m, S6):
            m.delta_proj.bias.data[...] = np.log(np.expm1(dt))


def check_amf(seed: int = 0, tol: float = 1e-4) -> GradReport:
    rng = np.random.default_rng(seed)
    with precision("f64"):
        m = AMF(8, 4, 3, rng, d_inner=4)
        _perturb_params(m, rng)
        _open_step_sizes(m)
        x = _leaf(rng, (1, 8, 4, 4))
    return _module_check(m, lambda: m(x), [x], seed, tol)


def check_lgfm(seed: int = 0, tol: float = 1e-4) -> GradReport:
    rng = np.random.default_rng(seed)
    with precision("f64"):
        m = LGFM(8, 8, rng)
        _perturb_params(m, rng)
        x = _leaf(rng, (1, 8, 3, 3))
    return _module_check(m, lambda: m(x), [x], seed, tol)


def check_cga(seed: int = 0, tol: float = 1e-4, margin: float = 0.02) -> GradReport:
    rng = np.random.default_rng(seed)
    with precision("f64"):
        m = CGA(8, 4, 3, rng, d_inner=4)
        _perturb_params(m, rng)
        _open_step_sizes(m)
        m.train()
        # redraw inputs until no ReLU input in the mask sits within a
        # finite-difference step of the kink
        for _ in range(50):
            x = _leaf(rng, (1, 8, 4, 4))
            g = _leaf(rng, (1, 8, 4, 4))
            with no_grad():
                if np.abs(m.gate_logits(x, g).data).min() > margin:
                    break
    return _module_check(m, lambda: m(x, g), [x, g], seed, tol)


def check_losses(seed: int = 0, tol: float = 1e-4) -> Dict[str, GradReport]:
    rng = np.random.default_rng(seed)
    out = {}
    with precision("f64"):
        g = (rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64)
        for name, fn in (("bce", bce_loss), ("dice", dice_loss), ("total", total_loss)):
            p = _leaf(rng, (2, 1, 8, 8), 0.05, 0.95)
            out[name] = finite_diff_check(lambda fn=fn, p=p: fn(p, g), [p], tol=tol)
    return out


def check_model(seed: int = 0, tol: float = 1e-4, size: int = 32, max_coords: int = 1,
                cfg: ModelConfig = None, pick: str = "largest", scale: float = 0.1) -> GradReport:
    """Full-model loss gradient at 1×3×size×size with sampled parameter coordinates.

    Every parameter tensor is checked at its ``max_coords`` largest-gradient
    coordinates, with ReLU masks and max-pool winners held at the base point.
    At 32×32 the bottleneck map is a single pixel, so its scan decay and
    attention query/key parameters have an exactly zero gradient.
    """
    cfg = cfg or ModelConfig(input_size=(size, size), precision="f64")
    model = build_model(cfg, seed=seed)
    model.train()
    rng = np.random.default_rng(seed + 1)
    _perturb_params(model, rng, scale=scale)
    _open_step_sizes(model)
    with precision("f64"):
        x = Tensor(rng.random((1, 3, size, size)), dtype=np.float64)
        g = (rng.random((1, 1, size, size)) > 0.5).astype(np.float64)
    named = list(model.named_parameters())
    return finite_diff_check(lambda: total_loss(model(x), g), [p for _, p in named], tol=tol,
                             max_coords=max_coords, seed=seed, names=[n for n, _ in named],
                             pick=pick, freeze_pieces=True)


def run_suite(seed: int = 0, tol: float = 1e-4, include_model: bool = True) -> Dict[str, GradReport]:
    reports = {f"primitive:{k}": v for k, v in check_primitives(seed, tol).items()}
    reports["module:amf"] = check_amf(seed, tol)
    reports["module:lgfm"] = check_lgfm(seed, tol)
    reports["module:cga"] = check_cga(seed, tol)
    reports.update({f"loss:{k}": v for k, v in check_losses(seed, tol).items()})
    if include_model:
        reports["model:full"] = check_model(seed, tol)
    return reports
