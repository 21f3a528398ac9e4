"""Selective state-space scan (S6), its four-direction 2D wrapper and the Mamba block.

The recurrence per channel ``j`` and state ``k`` is::

    h_t = exp(Δ_t A) h_{t-1} + B̄_t u_t,       h_0 = 0
    y_t = Σ_k C_t h_t + D u_t

with ``B̄_t = Δ_t B_t`` (Euler) or ``B̄_t = (exp(Δ_t A) - 1) / A · B_t``
(exact zero-order hold).
"""

from __future__ import annotations

import math
from typing import List, Optional, Tuple

import numpy as np

from . import functional as F
from .layers import LayerNorm, Linear, depthwise
from .tensor import Module, Parameter, Tensor, default_dtype


# -- scan kernels -----------------------------------------------------------------


def _discretize(delta: np.ndarray, A: np.ndarray, exact_zoh: bool):
    A = A[..., None, :, :]                        # broadcast over the time axis
    dA = delta[..., None] * A                     # (..., L, d, N)
    a = np.exp(dA)
    if exact_zoh:
        phi = np.expm1(dA) / A
    else:
        phi = np.broadcast_to(delta[..., None], dA.shape)
    return dA, a, phi


def scan_states(u, delta, A, B, exact_zoh=False):
    """Run the recurrence; returns all states ``(..., L, d, N)`` and the decay factors."""
    dA, a, phi = _discretize(delta, A, exact_zoh)
    # same association as the scalar recurrence: (phi * B) * u
    b = (phi * B[..., None, :]) * u[..., None]
    L = u.shape[-2]
    H = np.empty_like(a)
    h = np.zeros_like(a[..., 0, :, :])
    for t in range(L):
        h = a[..., t, :, :] * h + b[..., t, :, :]
        H[..., t, :, :] = h
    return H, a, phi


def _contract_state(H, C):
    """``sum_n C[..., l, n] * H[..., l, d, n]`` accumulated left to right over ``n``.

    A fixed summation order keeps 32-bit results within rounding of the scalar loop.
    """
    Cb = C[..., None, :]
    y = np.zeros(H.shape[:-1], dtype=H.dtype)
    for k in range(H.shape[-1]):
        y += Cb[..., k] * H[..., k]
    return y


def selective_scan_ref(u, delta, A, B, C, D, exact_zoh=False) -> np.ndarray:
    """Naive left-to-right scalar loop; the oracle for :func:`selective_scan`.

    Every step is evaluated in the precision of ``u`` so a 32-bit scan is
    compared against a 32-bit recurrence.
    """
    u, delta, A, B, C, D = (np.asarray(v) for v in (u, delta, A, B, C, D))
    ft = u.dtype.type if u.dtype.kind == "f" else np.float64
    u, delta, A, B, C, D = (v.astype(ft) for v in (u, delta, A, B, C, D))
    lead = u.shape[:-2]
    L, d = u.shape[-2:]
    N = A.shape[-1]
    u2 = u.reshape(-1, L, d)
    dl2 = delta.reshape(-1, L, d)
    B2 = B.reshape(-1, L, N)
    C2 = C.reshape(-1, L, N)
    y = np.zeros_like(u2)
    for bi in range(u2.shape[0]):
        for j in range(d):
            h = [ft(0)] * N
            for t in range(L):
                acc = ft(0)
                for k in range(N):
                    dA = dl2[bi, t, j] * A[j, k]
                    if exact_zoh:
                        bbar = np.expm1(dA) / A[j, k] * B2[bi, t, k]
                    else:
                        bbar = dl2[bi, t, j] * B2[bi, t, k]
                    h[k] = np.exp(dA) * h[k] + bbar * u2[bi, t, j]
                    acc += C2[bi, t, k] * h[k]
                y[bi, t, j] = acc + D[j] * u2[bi, t, j]
    return y.reshape(lead + (L, d))


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor,
                   exact_zoh: bool = False) -> Tensor:
    """Differentiable S6 scan.

    Shapes: ``u, delta: (..., L, d)``; ``A: (..., d, N)``; ``B, C: (..., L, N)``;
    ``D: (..., d)``. Leading dims of ``A`` and ``D`` broadcast against those of
    ``u``, which lets several independent scans share one call. ``delta``
    must already be positive.
    """
    if u.shape != delta.shape:
        raise ValueError("u and delta must share a shape")
    L, d = u.shape[-2:]
    if L < 1:
        raise ValueError("scan length must be at least 1")
    N = A.shape[-1]
    lead = u.shape[:-2]
    if (A.shape[-2:] != (d, N) or B.shape != u.shape[:-1] + (N,) or C.shape != B.shape
            or D.shape[-1:] != (d,)):
        raise ValueError("selective_scan: inconsistent parameter shapes")
    try:
        np.broadcast_shapes(A.shape[:-2], D.shape[:-1], lead)
    except ValueError:
        raise ValueError("selective_scan: parameter batch dims do not broadcast")
    uu, dl, AA, BB, CC = u.data, delta.data, A.data, B.data, C.data
    DD = D.data[..., None, :]
    H, a, phi = scan_states(uu, dl, AA, BB, exact_zoh)
    y = _contract_state(H, CC) + DD * uu
    F.record_macs("scan", int(np.prod(lead, dtype=np.int64)) * L * d * N)

    def backward(gy):
        gC = np.einsum("...ld,...ldn->...ln", gy, H)
        gD = F._unbroadcast((gy * uu).sum(axis=-2), D.shape)
        gu = gy * DD
        # reverse recurrence for dL/dh_t
        gH = np.empty_like(H)
        gh = np.zeros_like(H[..., 0, :, :])
        for t in range(L - 1, -1, -1):
            gh = gy[..., t, :, None] * CC[..., t, None, :] + gh
            gH[..., t, :, :] = gh
            gh = gh * a[..., t, :, :]
        Hprev = np.zeros_like(H)
        Hprev[..., 1:, :, :] = H[..., :-1, :, :]
        g_dA = gH * Hprev * a                          # through a = exp(ΔA)
        uB = uu[..., None] * BB[..., None, :]
        g_phi = gH * uB
        gu += (gH * phi * BB[..., None, :]).sum(axis=-1)
        gB = (gH * phi * uu[..., None]).sum(axis=-2)
        At = AA[..., None, :, :]
        gdelta = (g_dA * At).sum(axis=-1)
        gA_t = g_dA * dl[..., None]
        if exact_zoh:
            # phi = expm1(ΔA)/A: dphi/dΔ = a, dphi/dA = (ΔA·a - expm1(ΔA)) / A²
            dA = dl[..., None] * At
            gdelta += (g_phi * a).sum(axis=-1)
            gA_t = gA_t + g_phi * (dA * a - np.expm1(dA)) / (At * At)
        else:
            gdelta += g_phi.sum(axis=-1)
        gA = F._unbroadcast(gA_t.sum(axis=-3), A.shape)
        return gu, gdelta, gA, gB, gC, gD

    return F._result(y.astype(uu.dtype), (u, delta, A, B, C, D), backward, "selective_scan")


# -- modules ------------------------------------------------------------------------------


class S6(Module):
    """Input-dependent SSM over ``d`` channels with ``d_state`` states per channel."""

    def __init__(self, d: int, d_state: int, rng: np.random.Generator, exact_zoh: bool = False,
                 dt_init: float = 0.01):
        super().__init__()
        self.d, self.d_state, self.exact_zoh = d, d_state, exact_zoh
        A = np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d, 1))
        self.A_log = Parameter(np.log(A).astype(default_dtype()))
        self.delta_proj = Linear(d, d, rng)
        self.delta_proj.bias.data[...] = math.log(math.expm1(dt_init))
        self.B_proj = Linear(d, d_state, rng, bias=False)
        self.C_proj = Linear(d, d_state, rng, bias=False)
        self.D = Parameter(np.ones(d, dtype=default_dtype()))

    def A(self) -> Tensor:
        return F.mul(F.exp(self.A_log), -1.0)

    def forward(self, x: Tensor) -> Tensor:
        return F.unstack(stacked_s6([self], F.stack([x], axis=0)), 0)[0]

    def macs(self, h: int, w: int) -> int:
        L = h * w
        return L * (self.d * self.d + 2 * self.d * self.d_state + self.d * self.d_state)


def stacked_s6(blocks: List["S6"], u: Tensor) -> Tensor:
    """Evaluate ``len(blocks)`` independent S6 blocks on ``u`` of shape ``S×B×L×d``.

    Slice ``i`` of the result is block ``i`` applied to ``u[i]``. A single
    block goes through the same code with ``S = 1``, so stacked and separate
    evaluations agree bit for bit.
    """
    S, d = len(blocks), blocks[0].d

    def param(get, shape):
        return F.reshape(F.stack([get(m) for m in blocks], axis=0), shape)

    w_delta = param(lambda m: m.delta_proj.weight, (S, 1, d, d))
    b_delta = param(lambda m: m.delta_proj.bias, (S, 1, 1, d))
    w_B = param(lambda m: m.B_proj.weight, (S, 1, d, -1))
    w_C = param(lambda m: m.C_proj.weight, (S, 1, d, -1))
    A = param(lambda m: m.A(), (S, 1, d, -1))
    D = param(lambda m: m.D, (S, 1, d))
    delta = F.softplus(F.add(F.matmul(u, w_delta), b_delta))
    return selective_scan(u, delta, A, F.matmul(u, w_B), F.matmul(u, w_C), D,
                          exact_zoh=blocks[0].exact_zoh)


# row-major forward, row-major reverse, column-major forward, column-major reverse
DIRECTIONS = ("row", "row_rev", "col", "col_rev")


def _order(x: Tensor, direction: str) -> Tensor:
    if direction.startswith("col"):
        x = F.transpose(x, (0, 1, 3, 2))
    t = F.to_tokens(x)
    if direction.endswith("rev"):
        t = F.flip(t, 1)
    return t


def _unorder(t: Tensor, direction: str, h: int, w: int) -> Tensor:
    if direction.endswith("rev"):
        t = F.flip(t, 1)
    if direction.startswith("col"):
        return F.transpose(F.from_tokens(t, w, h), (0, 1, 3, 2))
    return F.from_tokens(t, h, w)


class SS2D(Module):
    """Four independent directional S6 scans summed back onto the 2D grid."""

    def __init__(self, d: int, d_state: int, rng: np.random.Generator, exact_zoh: bool = False):
        super().__init__()
        for name in DIRECTIONS:
            setattr(self, name, S6(d, d_state, rng, exact_zoh))

    def scan(self, x: Tensor, direction: str) -> Tensor:
        """One directional scan, evaluated on its own."""
        h, w = x.shape[2], x.shape[3]
        return _unorder(getattr(self, direction)(_order(x, direction)), direction, h, w)

    def forward(self, x: Tensor) -> Tensor:
        # the four scans are independent; run them as one stacked scan
        h, w = x.shape[2], x.shape[3]
        s6 = [getattr(self, n) for n in DIRECTIONS]
        y = stacked_s6(s6, F.stack([_order(x, n) for n in DIRECTIONS], axis=0))
        out = None
        for n, yn in zip(DIRECTIONS, F.unstack(y, 0)):
            yn = _unorder(yn, n, h, w)
            out = yn if out is None else F.add(out, yn)
        return out

    def macs(self, h: int, w: int) -> int:
        return sum(getattr(self, n).macs(h, w) for n in DIRECTIONS)


class MambaBlock(Module):
    """Gated Mamba unit on layer-normalised tokens ``B×N×c_in``.

    ``Y = SiLU(K W_g) ⊙ LN(SS2D(DW(SiLU(K W_z))))``. When the inner width
    differs from ``c_in`` a final projection maps back to ``c_in``.
    """

    def __init__(self, c_in: int, d_inner: int, d_state: int, rng: np.random.Generator,
                 exact_zoh: bool = False):
        super().__init__()
        self.c_in, self.d_inner = c_in, d_inner
        self.W_g = Linear(c_in, d_inner, rng, bias=False)
        self.W_z = Linear(c_in, d_inner, rng, bias=False)
        self.dw = depthwise(d_inner, rng)
        self.ss2d = SS2D(d_inner, d_state, rng, exact_zoh)
        self.ln = LayerNorm(d_inner)
        self.out_proj = Linear(d_inner, c_in, rng, bias=False) if d_inner != c_in else None

    def forward(self, K: Tensor, h: int, w: int) -> Tensor:
        if K.shape[1] != h * w:
            raise ValueError(f"token count {K.shape[1]} != {h}×{w}")
        G = F.silu(self.W_g(K))
        Z = F.from_tokens(F.silu(self.W_z(K)), h, w)
        Z = self.ss2d(self.dw(Z))
        Hf = self.ln(F.to_tokens(Z))
        Y = F.mul(G, Hf)
        return self.out_proj(Y) if self.out_proj is not None else Y

    def macs(self, h: int, w: int) -> int:
        m = self.W_g.macs(h, w) + self.W_z.macs(h, w) + self.dw.macs(h, w) + self.ss2d.macs(h, w)
        if self.out_proj is not None:
            m += self.out_proj.macs(h, w)
        return m


def mamba_on_map(block: MambaBlock, ln: LayerNorm, x: Tensor) -> Tensor:
    """Flatten a map row-major, layer-normalise, run ``block`` and restore the grid."""
    h, w = x.shape[2], x.shape[3]
    K = ln(F.to_tokens(x))
    return F.from_tokens(block(K, h, w), h, w)
