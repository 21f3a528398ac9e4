"""Selective scan, SS2D and the Mamba block."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mambalite import functional as F
from mambalite.gradcheck import finite_diff_check
from mambalite.layers import LayerNorm
from mambalite.ssm import DIRECTIONS, S6, SS2D, MambaBlock, mamba_on_map, selective_scan, \
    selective_scan_ref
from mambalite.tensor import NonFiniteError, Tensor, no_grad, precision


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def scan_inputs(rng, lead, L, d, N, dtype=np.float64):
    u = rng.standard_normal(lead + (L, d))
    delta = rng.uniform(0.01, 1.0, lead + (L, d))
    A = -rng.uniform(0.2, 3.0, (d, N))
    B = rng.standard_normal(lead + (L, N))
    C = rng.standard_normal(lead + (L, N))
    D = rng.standard_normal(d)
    return [np.asarray(v, dtype=dtype) for v in (u, delta, A, B, C, D)]


def run_scan(arrs, exact_zoh=False):
    dtype = arrs[0].dtype
    return selective_scan(*[Tensor(a, dtype=dtype) for a in arrs], exact_zoh=exact_zoh).data


class TestSelectiveScan:
    def test_zero_input(self, rng):
        arrs = scan_inputs(rng, (2,), 7, 3, 4)
        arrs[0][:] = 0
        assert np.all(run_scan(arrs) == 0)

    def test_single_step_closed_form(self, rng):
        u, delta, A, B, C, D = scan_inputs(rng, (1,), 1, 3, 2)
        y = run_scan([u, delta, A, B, C, D])
        expect = np.einsum("n,jn->j", C[0, 0], delta[0, 0][:, None] * B[0, 0][None, :] * u[0, 0][:, None]) \
            + D * u[0, 0]
        np.testing.assert_allclose(y[0, 0], expect, atol=1e-14)

    def test_zoh_single_step(self, rng):
        u, delta, A, B, C, D = scan_inputs(rng, (1,), 1, 2, 3)
        y = run_scan([u, delta, A, B, C, D], exact_zoh=True)
        bbar = np.expm1(delta[0, 0][:, None] * A) / A * B[0, 0][None, :]
        np.testing.assert_allclose(y[0, 0], (bbar * u[0, 0][:, None]) @ C[0, 0] + D * u[0, 0], atol=1e-14)

    def test_matches_naive_L32(self, rng):
        for dtype, tol in ((np.float64, 1e-12), (np.float32, 1e-6)):
            arrs = scan_inputs(rng, (2,), 32, 4, 8, dtype)
            ref = selective_scan_ref(*arrs)
            assert np.abs(run_scan(arrs) - ref).max() < tol

    @pytest.mark.parametrize("exact_zoh", [False, True])
    def test_oracle_random_shapes(self, exact_zoh):
        rng = np.random.default_rng(5)
        for _ in range(10):
            L, d, N = int(rng.integers(1, 40)), int(rng.integers(1, 5)), int(rng.integers(1, 17))
            arrs = scan_inputs(rng, (int(rng.integers(1, 3)),), L, d, N)
            ref = selective_scan_ref(*arrs, exact_zoh=exact_zoh)
            assert np.abs(run_scan(arrs, exact_zoh) - ref).max() < 1e-12

    def test_batched_parameters_broadcast(self, rng):
        # per-slice A and D along a leading axis equal separate scans
        lead = (3, 2)
        u, delta, _, B, C, _ = scan_inputs(rng, lead, 5, 2, 3)
        A = -rng.uniform(0.2, 2.0, (3, 1, 2, 3))
        D = rng.standard_normal((3, 1, 2))
        y = run_scan([u, delta, A, B, C, D])
        for i in range(3):
            yi = run_scan([u[i], delta[i], A[i, 0], B[i], C[i], D[i, 0]])
            np.testing.assert_array_equal(y[i], yi)

    def test_shape_errors(self, rng):
        u, delta, A, B, C, D = scan_inputs(rng, (1,), 4, 3, 2)
        with pytest.raises(ValueError):
            run_scan([u, delta[:, :3], A, B, C, D])
        with pytest.raises(ValueError):
            run_scan([u, delta, A[:, :1], B, C, D])
        with pytest.raises(ValueError):
            run_scan([u[:, :0], delta[:, :0], A, B[:, :0], C[:, :0], D])

    def test_nonfinite_state_is_an_error(self, rng):
        u, delta, A, B, C, D = scan_inputs(rng, (1,), 3, 2, 2)
        u[0, 1, 0] = np.inf
        with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError):
            run_scan([u, delta, A, B, C, D])

    def test_cost_is_linear_in_length(self, rng):
        def macs(L):
            arrs = scan_inputs(rng, (1,), L, 4, 8)
            with F.count_macs() as c:
                run_scan(arrs)
            return c.by_kind["scan"]

        assert macs(64) == 2 * macs(32)
        assert macs(32) == 32 * 4 * 8

    @pytest.mark.parametrize("exact_zoh", [False, True])
    def test_gradient(self, rng, exact_zoh):
        with precision("f64"):
            arrs = scan_inputs(rng, (1,), 6, 4, 3)
            ts = [T(a, grad=True) for a in arrs]
            R = T(rng.standard_normal((1, 6, 4)))
            r = finite_diff_check(lambda: F.sum(F.mul(selective_scan(*ts, exact_zoh=exact_zoh), R)), ts)
        assert r.max_rel_err < 1e-4


class TestS6:
    def test_init(self, rng):
        with precision("f64"):
            s = S6(3, 4, rng)
        np.testing.assert_allclose(s.A().data, -np.tile(np.arange(1, 5), (3, 1)))
        np.testing.assert_allclose(np.logaddexp(0, s.delta_proj.bias.data), 0.01, rtol=1e-12)
        np.testing.assert_array_equal(s.D.data, 1.0)

    def test_decay_and_positive_step(self, rng):
        with precision("f64"):
            s = S6(3, 4, rng)
            s.A_log.data[...] = rng.standard_normal(s.A_log.shape) * 3
        assert np.all(s.A().data < 0)
        x = T(rng.standard_normal((1, 5, 3)) * 50)
        assert np.all(F.softplus(s.delta_proj(x)).data > 0)

    def test_forward_equals_kernel(self, rng):
        with precision("f64"):
            s = S6(3, 2, rng)
            x = T(rng.standard_normal((2, 6, 3)))
            delta = F.softplus(s.delta_proj(x))
            ref = selective_scan_ref(x.data, delta.data, s.A().data, s.B_proj(x).data, s.C_proj(x).data,
                                     s.D.data)
        np.testing.assert_allclose(s(x).data, ref, atol=1e-12)


class TestSS2D:
    def _model(self, rng, d=3, N=2):
        with precision("f64"):
            m = SS2D(d, N, rng)
            for _, p in m.named_parameters():
                p.data = np.asarray(p.data + 0.3 * rng.standard_normal(p.shape))
        return m

    def test_zero_input(self, rng):
        m = self._model(rng)
        assert np.all(m(T(np.zeros((1, 3, 4, 5)))).data == 0)

    def test_single_pixel(self, rng):
        m = self._model(rng)
        x = T(rng.standard_normal((2, 3, 1, 1)))
        tokens = F.to_tokens(x)
        expect = sum(getattr(m, n)(tokens).data for n in DIRECTIONS)
        np.testing.assert_allclose(m(x).data, F.from_tokens(T(expect), 1, 1).data, atol=1e-13)

    def test_equals_sum_of_directional_scans_exactly(self, rng):
        m = self._model(rng)
        x = T(rng.standard_normal((2, 3, 4, 5)))
        parts = [m.scan(x, n).data for n in DIRECTIONS]
        assert np.array_equal(m(x).data, ((parts[0] + parts[1]) + parts[2]) + parts[3])

    def test_transpose_symmetry(self, rng):
        m = self._model(rng)
        swapped = SS2D(3, 2, rng)
        swapped.row, swapped.col = m.col, m.row
        swapped.row_rev, swapped.col_rev = m.col_rev, m.row_rev
        x = T(rng.standard_normal((1, 3, 4, 4)))
        xt = F.transpose(x, (0, 1, 3, 2))
        np.testing.assert_allclose(swapped(xt).data, m(x).data.transpose(0, 1, 3, 2), atol=1e-13)

    def test_directions_are_independent(self, rng):
        m = self._model(rng)
        ids = {id(getattr(m, n).A_log) for n in DIRECTIONS}
        assert len(ids) == 4
        assert not np.array_equal(m.row.B_proj.weight.data, m.col.B_proj.weight.data)

    def test_reverse_direction_scans_backwards(self, rng):
        m = self._model(rng)
        x = rng.standard_normal((1, 3, 1, 6))
        # the last token of a reverse row scan only sees itself
        y_rev = m.scan(T(x), "row_rev").data
        x2 = x.copy()
        x2[..., :-1] += 1.0
        y_rev2 = m.scan(T(x2), "row_rev").data
        np.testing.assert_allclose(y_rev[..., -1], y_rev2[..., -1], atol=1e-14)


class TestMambaBlock:
    def _block(self, rng, c=4, d_inner=4, N=3):
        with precision("f64"):
            b = MambaBlock(c, d_inner, N, rng)
            for _, p in b.named_parameters():
                p.data = np.asarray(p.data + 0.2 * rng.standard_normal(p.shape))
        return b

    def test_zero_tokens(self, rng):
        b = self._block(rng)
        assert np.all(b(T(np.zeros((1, 6, 4))), 2, 3).data == 0)

    def test_gating_bound(self, rng):
        b = self._block(rng)
        K = T(rng.standard_normal((2, 6, 4)))
        G = F.silu(b.W_g(K)).data
        Z = F.from_tokens(F.silu(b.W_z(K)), 2, 3)
        Hf = b.ln(F.to_tokens(b.ss2d(b.dw(Z)))).data
        Y = b(K, 2, 3).data
        assert np.all(np.abs(Y) <= np.abs(Hf) * np.abs(G).max() + 1e-12)
        assert np.all(np.abs(G) <= np.abs(b.W_g(K).data) + 1e-12)

    def test_hand_trace(self):
        # C = 2, H = W = 2, one state; every step of the pipeline evaluated in plain Python
        rng = np.random.default_rng(0)
        b = self._block(rng, c=2, d_inner=2, N=1)
        K = rng.standard_normal((1, 4, 2))
        silu = lambda v: v / (1 + math.exp(-v))  # noqa: E731
        Wg, Wz = b.W_g.weight.data, b.W_z.weight.data
        G = [[silu(sum(K[0, n, i] * Wg[i, j] for i in range(2))) for j in range(2)] for n in range(4)]
        Z = [[silu(sum(K[0, n, i] * Wz[i, j] for i in range(2))) for j in range(2)] for n in range(4)]
        dw, dwb = b.dw.weight.data, b.dw.bias.data
        conv = [[0.0] * 2 for _ in range(4)]
        for n in range(4):
            r, c = divmod(n, 2)
            for j in range(2):
                acc = dwb[j]
                for di in range(3):
                    for dj in range(3):
                        rr, cc = r + di - 1, c + dj - 1
                        if 0 <= rr < 2 and 0 <= cc < 2:
                            acc += Z[rr * 2 + cc][j] * dw[j, 0, di, dj]
                conv[n][j] = acc
        orders = {"row": [0, 1, 2, 3], "row_rev": [3, 2, 1, 0], "col": [0, 2, 1, 3], "col_rev": [3, 1, 2, 0]}
        ss = [[0.0] * 2 for _ in range(4)]
        for name, order in orders.items():
            s6 = getattr(b.ss2d, name)
            Wd, bd = s6.delta_proj.weight.data, s6.delta_proj.bias.data
            A, Bw, Cw, D = s6.A().data, s6.B_proj.weight.data, s6.C_proj.weight.data, s6.D.data
            h = [0.0, 0.0]
            for pos in order:
                u = conv[pos]
                Bt = sum(u[i] * Bw[i, 0] for i in range(2))
                Ct = sum(u[i] * Cw[i, 0] for i in range(2))
                for j in range(2):
                    dl = math.log1p(math.exp(sum(u[i] * Wd[i, j] for i in range(2)) + bd[j]))
                    h[j] = math.exp(dl * A[j, 0]) * h[j] + dl * Bt * u[j]
                    ss[pos][j] += Ct * h[j] + D[j] * u[j]
        g, be = b.ln.gamma.data, b.ln.beta.data
        Y = np.zeros((4, 2))
        for n in range(4):
            mu = (ss[n][0] + ss[n][1]) / 2
            var = ((ss[n][0] - mu) ** 2 + (ss[n][1] - mu) ** 2) / 2
            for j in range(2):
                Y[n, j] = G[n][j] * ((ss[n][j] - mu) / math.sqrt(var + 1e-5) * g[j] + be[j])
        np.testing.assert_allclose(b(T(K), 2, 2).data[0], Y, atol=1e-12)

    @given(st.integers(1, 4), st.integers(1, 4))
    def test_shape_preserved(self, h, w):
        b = self._block(np.random.default_rng(h * 10 + w), c=4, d_inner=2, N=2)
        K = T(np.random.default_rng(0).standard_normal((1, h * w, 4)))
        assert b(K, h, w).shape == (1, h * w, 4)

    def test_token_count_checked(self, rng):
        b = self._block(rng)
        with pytest.raises(ValueError):
            b(T(np.zeros((1, 5, 4))), 2, 3)

    def test_on_map_roundtrip_shape(self, rng):
        b = self._block(rng)
        with precision("f64"):
            ln = LayerNorm(4)
        assert mamba_on_map(b, ln, T(rng.standard_normal((2, 4, 3, 5)))).shape == (2, 4, 3, 5)
