"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import functional as F
from .tensor import NonFiniteError, Tensor, no_grad


@dataclass
class GradReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst: str = ""
    per_tensor: dict = field(default_factory=dict)

    # ``pass`` is a keyword, so expose it through item access as well
    def __getitem__(self, key):
        if key == "pass":
            return self.passed
        return getattr(self, key)


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def _scalar(f: Callable[[], Tensor]) -> float:
    out = f()
    val = float(np.asarray(out.data).reshape(-1)[0]) if out.size == 1 else None
    if val is None:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    if not np.isfinite(val):
        raise NonFiniteError("function value is not finite")
    return val


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
                      tol: float = 1e-4, max_coords: Optional[int] = None,
                      seed: int = 0, names: Optional[Sequence[str]] = None,
                      order: int = 2, pick: str = "random", freeze_pieces: bool = False) -> GradReport:
    """Compare the tape gradient of ``f()`` with central differences.

    ``f`` takes no arguments and closes over ``params``; each coordinate is
    perturbed in place. When ``max_coords`` is set, at most that many
    coordinates per tensor are sampled uniformly without replacement.
    ``order=4`` uses the five-point stencil, whose truncation error is
    O(h⁴) instead of O(h²), at twice the cost.
    ``pick="largest"`` samples the coordinates with the largest analytic
    gradient magnitude instead of random ones; coordinates whose gradient
    is below the finite-difference noise floor cannot be verified anyway.
    ``freeze_pieces=True`` evaluates the differences with every ReLU mask,
    clamp side and max-pool winner fixed at the base point. A large network
    almost always has some pre-activation within one step of a kink, and
    crossing it makes the difference quotient meaningless.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if pick not in ("random", "largest"):
        raise ValueError("pick must be 'random' or 'largest'")
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("finite_diff_check requires 64-bit tensors")
        p.grad = None
    with contextlib.ExitStack() as stack:
        pieces = stack.enter_context(F.frozen_pieces()) if freeze_pieces else None
        out = f()
        if out.size != 1:
            raise ValueError("finite_diff_check needs a scalar-valued function")
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("function value is not finite")
        out.backward()
        return _compare(f, params, out, h, tol, max_coords, seed, names, order, pick, pieces)


def _compare(f, params, out, h, tol, max_coords, seed, names, order, pick, pieces) -> GradReport:

    rng = np.random.default_rng(seed)
    names = list(names) if names is not None else [f"p{i}" for i in range(len(params))]
    worst, worst_name, checked = 0.0, "", 0
    per_tensor = {}
    with no_grad():
        for name, p in zip(names, params):
            p.data = np.ascontiguousarray(p.data).reshape(p.data.shape)  # keeps 0-d shape
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            n = flat.size
            if max_coords is not None and n > max_coords and pick == "largest":
                coords = np.sort(np.argsort(-np.abs(analytic.reshape(-1)), kind="stable")[:max_coords])
            elif max_coords is not None and n > max_coords:
                coords = np.sort(rng.choice(n, size=max_coords, replace=False))
            else:
                coords = np.arange(n)
            tensor_worst = 0.0
            for i in coords:
                orig = flat[i]

                def at(delta):
                    flat[i] = orig + delta
                    if pieces is not None:
                        pieces.replay()
                    return _scalar(f)

                num = (at(h) - at(-h)) / (2 * h)
                if order == 4:
                    num = (4 * num - (at(2 * h) - at(-2 * h)) / (4 * h)) / 3
                flat[i] = orig
                e = rel_err(float(analytic.reshape(-1)[i]), num)
                tensor_worst = max(tensor_worst, e)
                if e > worst:
                    worst, worst_name = e, f"{name}[{int(i)}]"
                checked += 1
            per_tensor[name] = tensor_worst
    return GradReport(worst, worst < tol, checked, worst_name, per_tensor)
