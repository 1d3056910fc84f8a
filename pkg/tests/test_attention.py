import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mxa import engine as E
from mxa.attention import AttentionConfig, AttentionParams, TokenGrid, mhsa, parallel_fuse, windowed_mhsa
from mxa.engine import Tensor


def _grid(rng, b, h, w, d):
    return TokenGrid(Tensor(rng.normal(size=(b, h * w, d))), h, w)


def _naive_attention(x, p, heads):
    """Loop-per-head reference written straight from the scaled dot-product formula."""
    B, N, D = x.shape
    d = D // heads
    qkv = x @ p.w_qkv.values + p.b_qkv.values
    q, k, v = qkv[..., :D], qkv[..., D:2 * D], qkv[..., 2 * D:]
    out = np.zeros_like(x)
    for b in range(B):
        ctx = []
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            s = q[b, :, sl] @ k[b, :, sl].T / np.sqrt(d)
            s = np.exp(s - s.max(axis=1, keepdims=True))
            s /= s.sum(axis=1, keepdims=True)
            ctx.append(s @ v[b, :, sl])
        out[b] = np.concatenate(ctx, axis=1) @ p.w_out.values + p.b_out.values
    return out


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            AttentionConfig(10, 3)

    def test_head_dim(self):
        assert AttentionConfig(12, 3).head_dim == 4


class TestMhsa:
    def test_matches_naive_reference(self):
        rng = np.random.default_rng(0)
        x = _grid(rng, 2, 3, 3, 8)
        p = AttentionParams(8, rng, dtype=np.float64)
        out = mhsa(x, AttentionConfig(8, 2), p).tokens.values
        np.testing.assert_allclose(out, _naive_attention(x.tokens.values, p, 2), rtol=1e-10, atol=1e-12)

    def test_token_permutation_equivariance(self):
        rng = np.random.default_rng(1)
        x = _grid(rng, 1, 4, 4, 8)
        p = AttentionParams(8, rng, dtype=np.float64)
        perm = rng.permutation(16)
        cfg = AttentionConfig(8, 2)
        out = mhsa(x, cfg, p).tokens.values
        out_p = mhsa(TokenGrid(Tensor(x.tokens.values[:, perm]), 4, 4), cfg, p).tokens.values
        np.testing.assert_allclose(out_p, out[:, perm], rtol=1e-10, atol=1e-12)

    def test_received_mass_sums_to_token_count(self):
        rng = np.random.default_rng(2)
        rec = []
        mhsa(_grid(rng, 2, 3, 4, 8), AttentionConfig(8, 2), AttentionParams(8, rng, dtype=np.float64), rec)
        assert rec[0].shape == (2, 3, 4)
        np.testing.assert_allclose(rec[0].sum(axis=(1, 2)), 12.0)

    def test_width_mismatch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            mhsa(_grid(rng, 1, 2, 2, 6), AttentionConfig(8, 2), AttentionParams(8, rng))


class TestWindowed:
    @pytest.mark.parametrize("hw,window", [((4, 4), 4), ((3, 5), 5), ((2, 2), 7)])
    def test_window_covering_grid_equals_global(self, hw, window):
        rng = np.random.default_rng(3)
        x = _grid(rng, 2, *hw, 8)
        p = AttentionParams(8, rng, dtype=np.float64)
        a = windowed_mhsa(x, AttentionConfig(8, 2, window=window), p).tokens.values
        b = mhsa(x, AttentionConfig(8, 2), p).tokens.values
        np.testing.assert_array_equal(a, b)

    def test_windows_are_independent(self):
        rng = np.random.default_rng(4)
        x = _grid(rng, 1, 4, 4, 8)
        p = AttentionParams(8, rng, dtype=np.float64)
        cfg = AttentionConfig(8, 2, window=2)
        base = windowed_mhsa(x, cfg, p).tokens.values.reshape(4, 4, 8)
        v = x.tokens.values.reshape(4, 4, 8).copy()
        v[3, 3] += 5.0  # bottom-right window only
        moved = windowed_mhsa(TokenGrid(Tensor(v.reshape(1, 16, 8)), 4, 4), cfg, p).tokens.values.reshape(4, 4, 8)
        np.testing.assert_array_equal(moved[:2], base[:2])
        np.testing.assert_array_equal(moved[2:, :2], base[2:, :2])
        assert not np.allclose(moved[2:, 2:], base[2:, 2:])

    def test_each_window_matches_global_on_that_window(self):
        rng = np.random.default_rng(5)
        x = _grid(rng, 1, 4, 6, 8)
        p = AttentionParams(8, rng, dtype=np.float64)
        out = windowed_mhsa(x, AttentionConfig(8, 2, window=2), p).tokens.values.reshape(4, 6, 8)
        v = x.tokens.values.reshape(4, 6, 8)
        win = TokenGrid(Tensor(v[2:4, 4:6].reshape(1, 4, 8)), 2, 2)
        ref = mhsa(win, AttentionConfig(8, 2), p).tokens.values.reshape(2, 2, 8)
        np.testing.assert_allclose(out[2:4, 4:6], ref, rtol=1e-12, atol=1e-14)

    @settings(max_examples=20, deadline=None)
    @given(h=st.integers(1, 7), w=st.integers(1, 7), window=st.integers(1, 4))
    def test_ragged_padding_keeps_shape_and_mass(self, h, w, window):
        rng = np.random.default_rng(h * 10 + w)
        x = _grid(rng, 1, h, w, 4)
        rec = []
        out = windowed_mhsa(x, AttentionConfig(4, 1, window=window), AttentionParams(4, rng, dtype=np.float64), rec)
        assert out.tokens.shape == (1, h * w, 4)
        assert np.all(np.isfinite(out.tokens.values))
        # every real query spreads unit mass over real keys only
        np.testing.assert_allclose(rec[0].sum(), h * w, rtol=1e-10)


class TestParallelFuse:
    def test_zero_branches_are_identities(self):
        a = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
        z = Tensor(np.zeros((2, 3, 4, 4)))
        np.testing.assert_array_equal(parallel_fuse(a, z).values, a.values)
        np.testing.assert_array_equal(parallel_fuse(z, a).values, a.values)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            parallel_fuse(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 3, 4))))

    def test_token_map_round_trip(self):
        m = Tensor(np.arange(2 * 3 * 4 * 5, dtype=float).reshape(2, 3, 4, 5))
        np.testing.assert_array_equal(TokenGrid.from_map(m).to_map().values, m.values)


def test_windowed_gradient_flows_to_all_params():
    rng = np.random.default_rng(6)
    x = _grid(rng, 1, 3, 3, 4)
    p = AttentionParams(4, rng, dtype=np.float64)
    with E.Tape() as tape:
        out = E.sum_(windowed_mhsa(x, AttentionConfig(4, 2, window=2), p).tokens)
    tape.backward(out)
    for name, t in p.named_parameters().items():
        assert t.grad is not None and np.any(t.grad != 0), name
