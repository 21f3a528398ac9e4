"""AMF, LGFM and CGA."""

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import special

from mambalite import functional as F
from mambalite.blocks import AMF, CGA, LGFM
from mambalite.tensor import Tensor, no_grad, precision


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def perturbed(module, rng, scale=0.3):
    for _, p in module.named_parameters():
        p.data = np.asarray(p.data + scale * rng.standard_normal(p.shape))
    return module


def zero_branches(m: AMF):
    for i in range(m.branches):
        for _, p in getattr(m, f"branch{i}").named_parameters():
            p.data[...] = 0


@pytest.fixture
def amf(rng):
    with precision("f64"):
        return perturbed(AMF(8, 4, 3, rng), rng)


@pytest.fixture
def lgfm(rng):
    with precision("f64"):
        return perturbed(LGFM(8, 8, rng), rng)


@pytest.fixture
def cga(rng):
    with precision("f64"):
        m = perturbed(CGA(8, 4, 3, rng), rng)
    m.train()
    return m


class TestAMF:
    def test_alpha_is_one_zero_scalar(self, rng):
        with precision("f64"):
            m = AMF(8, 4, 3, rng)
        assert m.alpha.shape == () and m.alpha.data == 0
        assert sum(1 for n, _ in m.named_parameters() if n.endswith("alpha")) == 1

    def test_branch_width(self, rng):
        with precision("f64"):
            m = AMF(16, 4, 3, rng)
        assert m.branch0.W_g.weight.shape[0] == 4

    def test_init_branch_has_no_residual(self, rng):
        with precision("f64"):
            m = AMF(8, 4, 3, rng)
        x = T(rng.standard_normal((1, 8, 3, 3)))
        from mambalite.ssm import mamba_on_map
        for i, (out, xk) in enumerate(zip(m.branch_outputs(x), F.split_channels(x, 4))):
            direct = mamba_on_map(getattr(m, f"branch{i}"), getattr(m, f"ln{i}"), xk)
            np.testing.assert_array_equal(out.data, direct.data)

    @given(st.floats(-3, 3, allow_nan=False))
    def test_zeroed_branches_leave_scaled_identity(self, v):
        rng = np.random.default_rng(0)
        with precision("f64"):
            m = perturbed(AMF(8, 4, 3, rng), rng)
        zero_branches(m)
        m.alpha.data[...] = v
        x = T(rng.standard_normal((2, 8, 3, 4)))
        for out, xk in zip(m.branch_outputs(x), F.split_channels(x, 4)):
            assert np.array_equal(out.data, v * xk.data)

    def test_zeroed_gates_trace(self, amf, rng):
        zero_branches(amf)
        amf.alpha.data[...] = 0
        for conv in (amf.s_dw, amf.s_pw):
            conv.weight.data[...] = 0
            conv.bias.data[...] = 0
        x = T(rng.standard_normal((1, 8, 4, 4)))
        zeros = T(np.zeros((1, 8, 4, 4)))
        S = F.sigmoid(amf.s_pw(amf.s_dw(zeros))).data
        np.testing.assert_array_equal(S, 0.5)
        t_of_zero = amf.t_pw(amf.t_dw(zeros)).data
        np.testing.assert_allclose(amf(x).data, t_of_zero + x.data, atol=1e-15)

    def test_gate_scales_each_branch_by_its_slice(self, amf, rng):
        amf.alpha.data[...] = 0.7
        x = T(rng.standard_normal((1, 8, 3, 3)))
        Z = np.concatenate([b.data for b in amf.branch_outputs(x)], axis=1)
        S = F.sigmoid(amf.s_pw(amf.s_dw(T(Z)))).data
        ZS = S * Z
        expect = amf.t_pw(amf.t_dw(T(ZS))).data + ZS + x.data
        np.testing.assert_allclose(amf(x).data, expect, atol=1e-12)

    def test_channel_divisibility(self, rng):
        with pytest.raises(ValueError):
            AMF(6, 4, 3, rng)

    def test_gradcheck(self, module_reports):
        r = module_reports("amf")
        assert r.passed, (r.max_rel_err, r.worst)
        assert any(k.startswith("branch") for k in r.per_tensor)
        assert "alpha" in r.per_tensor


class TestLGFM:
    def test_single_token_closed_form(self, lgfm, rng):
        x = rng.standard_normal(8)
        w = lambda conv: conv.weight.data[:, 0, 1, 1]  # noqa: E731  depthwise centre tap
        local = w(lgfm.local) * x + lgfm.local.bias.data
        mha = lgfm.mha
        v = x @ mha.v.weight.data + mha.v.bias.data
        glob = v @ mha.o.weight.data + mha.o.bias.data
        y = lgfm.fuse.weight.data[:, :, 0, 0] @ np.concatenate([local, glob]) + lgfm.fuse.bias.data
        yn = (y - y.mean()) / np.sqrt(y.var() + lgfm.ln.eps) * lgfm.ln.gamma.data + lgfm.ln.beta.data
        act = yn * 0.5 * (1 + special.erf(yn / np.sqrt(2)))
        expect = w(lgfm.out_dw) * act + lgfm.out_dw.bias.data
        out = lgfm(T(x.reshape(1, 8, 1, 1))).data.reshape(8)
        np.testing.assert_allclose(out, expect, atol=1e-12)

    def test_constant_input_gives_constant_global_branch(self, lgfm, rng):
        c = rng.standard_normal(8)
        x = T(np.broadcast_to(c[None, :, None, None], (1, 8, 5, 5)).copy())
        g = F.from_tokens(lgfm.mha(F.to_tokens(x)), 5, 5).data
        assert np.allclose(g, g[:, :, :1, :1], atol=1e-13)
        loc = lgfm.local(x).data[:, :, 1:-1, 1:-1]
        assert np.allclose(loc, loc[:, :, :1, :1], atol=1e-13)

    def test_head_divisibility(self, rng):
        with pytest.raises(ValueError):
            LGFM(12, 8, rng)

    def test_gradcheck(self, module_reports):
        r = module_reports("lgfm")
        assert r.passed, (r.max_rel_err, r.worst)


class TestCGA:
    def test_mask_range_and_shape(self, cga, rng):
        x = T(rng.standard_normal((2, 8, 4, 4)) * 5)
        g = T(rng.standard_normal((2, 8, 4, 4)) * 5)
        out = cga(x, g)
        psi = cga.last_mask.data
        assert psi.shape == (2, 1, 4, 4)
        assert np.all((psi > 0) & (psi < 1))
        nz = x.data != 0
        assert np.all(np.abs(out.data[nz]) < np.abs(x.data[nz]))

    def test_zero_skip_gives_zero(self, cga, rng):
        g = T(rng.standard_normal((2, 8, 3, 3)))
        assert np.all(cga(T(np.zeros((2, 8, 3, 3))), g).data == 0)

    def test_cross_gating_formula(self, cga, rng):
        x = T(rng.standard_normal((2, 8, 3, 3)))
        g = T(rng.standard_normal((2, 8, 3, 3)))
        from mambalite.ssm import mamba_on_map
        with no_grad():
            cross = []
            for i, (xi, gi) in enumerate(zip(F.split_channels(x, 4), F.split_channels(g, 4))):
                hx = mamba_on_map(getattr(cga, f"mamba_x{i}"), getattr(cga, f"ln_x{i}"), xi).data
                hg = mamba_on_map(getattr(cga, f"mamba_g{i}"), getattr(cga, f"ln_g{i}"), gi).data
                dw = getattr(cga, f"dw{i}")
                sig = special.expit
                cross.append(hx * sig(dw(T(hg)).data) + hg * sig(dw(T(hx)).data))
            z = np.concatenate(cross, axis=1)
        mu = z.mean(axis=(0, 2, 3), keepdims=True)
        var = z.var(axis=(0, 2, 3), keepdims=True)
        bn = (z - mu) / np.sqrt(var + cga.bn.eps) * cga.bn.gamma.data[None, :, None, None] \
            + cga.bn.beta.data[None, :, None, None]
        psi = special.expit(cga.mask_conv(T(np.maximum(bn, 0))).data)
        np.testing.assert_allclose(cga(x, g).data, psi * x.data, atol=1e-12)

    def test_shape_mismatch(self, cga, rng):
        with pytest.raises(ValueError):
            cga(T(np.zeros((1, 8, 4, 4))), T(np.zeros((1, 8, 4, 3))))

    def test_gradcheck(self, module_reports):
        r = module_reports("cga")
        assert r.passed, (r.max_rel_err, r.worst)
        assert "input0" in r.per_tensor and "input1" in r.per_tensor


@given(st.integers(1, 2), st.integers(1, 4), st.integers(1, 4))
def test_modules_preserve_shape(b, h, w):
    rng = np.random.default_rng(b * 100 + h * 10 + w)
    with precision("f64"):
        amf, lgfm, cga = AMF(8, 4, 2, rng), LGFM(8, 8, rng), CGA(8, 4, 2, rng)
    x = T(rng.standard_normal((b, 8, h, w)))
    assert amf(x).shape == x.shape
    assert lgfm(x).shape == x.shape
    cga.eval()
    assert cga(x, x).shape == x.shape
