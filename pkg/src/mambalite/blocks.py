"""AMF, LGFM and CGA: the three feature modules of MambaLiteUNet."""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from . import functional as F
from .layers import BatchNorm2d, Conv2d, LayerNorm, Linear, depthwise, tokens_layer_norm
from .ssm import MambaBlock, mamba_on_map
from .tensor import Module, Parameter, Tensor, default_dtype


def _check_channels(x: Tensor, c: int, k: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != c:
        raise ValueError(f"{what} expects B×{c}×H×W input, got {x.shape}")
    if c % k:
        raise ValueError(f"{what}: C={c} not divisible by {k}")


class AMF(Module):
    """Adaptive multi-branch Mamba fusion.

    The input is split into ``branches`` channel groups, each processed by
    its own Mamba block plus an ``alpha``-scaled identity. The concatenation
    is re-weighted by a sigmoid gate (depthwise then pointwise conv), passed
    through a depthwise+pointwise transform with a shortcut, and finally
    added to the module input.
    """

    def __init__(self, c: int, branches: int, d_state: int, rng: np.random.Generator,
                 d_inner: Optional[int] = None, exact_zoh: bool = False):
        super().__init__()
        if c % branches:
            raise ValueError(f"AMF: C={c} not divisible by {branches} branches")
        self.c, self.branches = c, branches
        cb = c // branches
        d_inner = d_inner or cb
        for i in range(branches):
            setattr(self, f"ln{i}", LayerNorm(cb))
            setattr(self, f"branch{i}", MambaBlock(cb, d_inner, d_state, rng, exact_zoh))
        self.alpha = Parameter(np.zeros((), dtype=default_dtype()))
        self.s_dw = depthwise(c, rng)
        self.s_pw = Conv2d(c, c, 1, rng)
        self.t_dw = depthwise(c, rng)
        self.t_pw = Conv2d(c, c, 1, rng)

    def branch_outputs(self, X: Tensor) -> List[Tensor]:
        _check_channels(X, self.c, self.branches, "AMF")
        outs = []
        for i, Xk in enumerate(F.split_channels(X, self.branches)):
            m = mamba_on_map(getattr(self, f"branch{i}"), getattr(self, f"ln{i}"), Xk)
            outs.append(F.add(m, F.mul(Xk, self.alpha)))
        return outs

    def forward(self, X: Tensor) -> Tensor:
        Z = F.concat_channels(self.branch_outputs(X))
        S = F.sigmoid(self.s_pw(self.s_dw(Z)))
        # scaling each branch by its slice of S is the same as gating the concatenation
        ZS = F.mul(S, Z)
        T = F.add(self.t_pw(self.t_dw(ZS)), ZS)
        return F.add(T, X)

    def macs(self, h: int, w: int) -> int:
        m = sum(getattr(self, f"branch{i}").macs(h, w) for i in range(self.branches))
        for conv in (self.s_dw, self.s_pw, self.t_dw, self.t_pw):
            m += conv.macs(h, w)
        return m


class MHA(Module):
    def __init__(self, c: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if c % heads:
            raise ValueError(f"heads={heads} does not divide C={c}")
        self.c, self.heads = c, heads
        self.q = Linear(c, c, rng)
        # a key bias shifts every logit of a query equally and cancels in the softmax
        self.k = Linear(c, c, rng, bias=False)
        self.v = Linear(c, c, rng)
        self.o = Linear(c, c, rng)

    def forward(self, x: Tensor) -> Tensor:
        return F.mha_forward(x, self.q.weight, self.k.weight, self.v.weight, self.o.weight, self.heads,
                             self.q.bias, self.k.bias, self.v.bias, self.o.bias)

    def macs(self, h: int, w: int) -> int:
        n = h * w
        return 4 * n * self.c * self.c + 2 * n * n * self.c


class LGFM(Module):
    """Local-global mixing: depthwise conv and self-attention fused by a 1×1 conv."""

    def __init__(self, c: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if c % heads:
            raise ValueError(f"LGFM: heads={heads} does not divide C={c}")
        self.c = c
        self.local = depthwise(c, rng)
        self.mha = MHA(c, heads, rng)
        self.fuse = Conv2d(2 * c, c, 1, rng)
        self.ln = LayerNorm(c)
        self.out_dw = depthwise(c, rng)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c, 1, "LGFM")
        h, w = x.shape[2], x.shape[3]
        f_local = self.local(x)
        f_global = F.from_tokens(self.mha(F.to_tokens(x)), h, w)
        y = self.fuse(F.concat_channels([f_local, f_global]))
        return self.out_dw(F.gelu(tokens_layer_norm(y, self.ln)))

    def macs(self, h: int, w: int) -> int:
        return (self.local.macs(h, w) + self.mha.macs(h, w) + self.fuse.macs(h, w)
                + self.out_dw.macs(h, w))


class CGA(Module):
    """Cross-gated attention between an encoder skip ``x`` and a decoder feature ``g``.

    Returns ``ψ ⊙ x`` where ``ψ`` is a single-channel spatial mask in (0, 1).
    The most recent mask is kept on ``last_mask`` for inspection.
    """

    def __init__(self, c: int, pairs: int, d_state: int, rng: np.random.Generator,
                 d_inner: Optional[int] = None, exact_zoh: bool = False):
        super().__init__()
        if c % pairs:
            raise ValueError(f"CGA: C={c} not divisible by {pairs} pairs")
        self.c, self.pairs = c, pairs
        cb = c // pairs
        d_inner = d_inner or cb
        for i in range(pairs):
            setattr(self, f"ln_x{i}", LayerNorm(cb))
            setattr(self, f"mamba_x{i}", MambaBlock(cb, d_inner, d_state, rng, exact_zoh))
            setattr(self, f"ln_g{i}", LayerNorm(cb))
            setattr(self, f"mamba_g{i}", MambaBlock(cb, d_inner, d_state, rng, exact_zoh))
            setattr(self, f"dw{i}", depthwise(cb, rng))
        self.bn = BatchNorm2d(c)
        self.mask_conv = Conv2d(c, 1, 3, rng)
        self.last_mask: Optional[Tensor] = None

    def gate_logits(self, x: Tensor, g: Tensor) -> Tensor:
        """Batch-normalised cross features, the input to the mask ReLU."""
        if x.shape != g.shape:
            raise ValueError(f"CGA: encoder {x.shape} and decoder {g.shape} shapes differ")
        _check_channels(x, self.c, self.pairs, "CGA")
        cross = []
        for i, (xi, gi) in enumerate(zip(F.split_channels(x, self.pairs), F.split_channels(g, self.pairs))):
            hx = mamba_on_map(getattr(self, f"mamba_x{i}"), getattr(self, f"ln_x{i}"), xi)
            hg = mamba_on_map(getattr(self, f"mamba_g{i}"), getattr(self, f"ln_g{i}"), gi)
            dw = getattr(self, f"dw{i}")
            xp, gp = dw(hx), dw(hg)
            cross.append(F.add(F.mul(hx, F.sigmoid(gp)), F.mul(hg, F.sigmoid(xp))))
        return self.bn(F.concat_channels(cross))

    def mask(self, x: Tensor, g: Tensor) -> Tensor:
        return F.sigmoid(self.mask_conv(F.relu(self.gate_logits(x, g))))

    def forward(self, x: Tensor, g: Tensor) -> Tensor:
        psi = self.mask(x, g)
        self.last_mask = psi
        return F.mul(psi, x)

    def macs(self, h: int, w: int) -> int:
        m = 0
        for i in range(self.pairs):
            m += getattr(self, f"mamba_x{i}").macs(h, w) + getattr(self, f"mamba_g{i}").macs(h, w)
            m += 2 * getattr(self, f"dw{i}").macs(h, w)
        return m + self.mask_conv.macs(h, w)
