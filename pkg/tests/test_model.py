import numpy as np
import pytest

from mxa import engine as E
from mxa.checks import MODEL_TOL, model_case
from mxa.engine import Tape, Tensor, gradient_check
from mxa.model import (
    PRESETS, Model, ModelConfig, attention_scores, downsample, parameter_count, preset,
)


def closed_form_params(cfg: ModelConfig) -> int:
    """Parameter count summed layer by layer from the architecture description."""
    c1, p = cfg.widths[0], cfg.patch_size
    total = c1 * cfg.in_channels * p * p + c1
    prev = c1
    for i, (c, depth) in enumerate(zip(cfg.widths, cfg.depths)):
        if i > 0:
            total += c * prev * 9 + c
        attn = c * 3 * c + 3 * c + c * c + c
        hidden = cfg.mlp_ratio * c
        mlp = c * hidden + hidden + hidden * c + c
        mxa = 0
        if cfg.mxa_enabled:
            h = max(4, c // 2)
            roi = h * c * 9 + h + h * h * 9 + h + h * 4 + 4
            r = c // cfg.cbam_reduction
            cbam = c * r + r * c + 2 * cfg.spatial_kernel ** 2
            mxa = roi + cbam
        total += depth * (attn + mlp + mxa)
        prev = c
    return total + prev * cfg.num_labels + cfg.num_labels


class TestConfig:
    def test_grid_sides(self):
        assert preset("M5-nano").grid_sides == (8, 4, 2)
        assert preset("M5-nano-8x8").grid_sides == (8, 4, 2)
        assert preset("M5").grid_sides == (14, 7, 4)

    def test_published_presets(self):
        assert set(PRESETS) == {"M0", "M1", "M2", "M3", "M4", "M5"}
        cfg = preset("M5")
        assert cfg.widths == (192, 288, 384) and cfg.depths == (1, 3, 4) and cfg.heads == (3, 3, 4)
        assert (cfg.patch_size, cfg.window, cfg.image_size) == (16, 7, 224)

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            preset("M9")

    def test_round_trip(self):
        cfg = preset("M5-nano", mxa_enabled=False)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            ModelConfig.from_dict({**preset("M5-nano").to_dict(), "dropout": 0.1})

    @pytest.mark.parametrize("kw", [
        dict(heads=(3, 2, 4)),             # 16 not divisible by 3
        dict(image_size=60),               # not divisible by the patch
        dict(patch_size=32),               # grids 2, 1, 1 leave MXA without room
        dict(depths=(1, 0, 4)),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            preset("M5-nano", **kw)

    def test_single_cell_grid_allowed_without_mxa(self):
        assert preset("M5-nano", patch_size=32, mxa_enabled=False).grid_sides == (2, 1, 1)


class TestParameterCount:
    @pytest.mark.parametrize("cfg", [
        preset("M5-nano"), preset("M5-nano", mxa_enabled=False), preset("M5-nano-8x8"),
        preset("M0", mxa_enabled=False), preset("M5-nano", cbam_reduction=8, spatial_kernel=3),
    ])
    def test_closed_form(self, cfg):
        assert parameter_count(cfg) == closed_form_params(cfg)

    def test_frozen_values(self):
        assert parameter_count(preset("M5-nano")) == 107_622
        assert parameter_count(preset("M5-nano", mxa_enabled=False)) == 62_078


class TestForward:
    def test_shapes_and_dtype(self):
        m = Model(preset("M5-nano"), 0)
        out = m.forward(np.random.default_rng(0).random((3, 1, 64, 64)))
        assert out.shape == (3, 14)
        assert out.dtype == np.float32

    def test_wrong_input_size(self):
        with pytest.raises(ValueError, match="64 x 64"):
            Model(preset("M5-nano"), 0).forward(np.zeros((1, 1, 32, 32)))

    def test_deterministic(self):
        x = np.random.default_rng(1).random((2, 1, 64, 64))
        a = Model(preset("M5-nano"), 7).forward(x).values
        b = Model(preset("M5-nano"), 7).forward(x).values
        assert a.tobytes() == b.tobytes()

    def test_mxa_toggle_keeps_shared_weights(self):
        on = Model(preset("M5-nano"), 3).named_parameters()
        off = Model(preset("M5-nano", mxa_enabled=False), 3).named_parameters()
        assert set(off) < set(on)
        for k, v in off.items():
            assert v.values.tobytes() == on[k].values.tobytes(), k

    def test_ablated_mxa_matches_disabled_model(self):
        x = np.random.default_rng(2).random((2, 1, 64, 64)).astype(np.float32)
        on = Model(preset("M5-nano"), 4).forward(x, ablate_mxa=True).values
        off = Model(preset("M5-nano", mxa_enabled=False), 4).forward(x).values
        np.testing.assert_array_equal(on, off)

    def test_non_finite_activation_names_block(self):
        m = Model(preset("M5-nano"), 0)
        m.stages[1].blocks[2].mlp.b2.values[0] = np.nan
        with pytest.raises(FloatingPointError, match=r"stages\.1\.blocks\.2"):
            m.forward(np.zeros((1, 1, 64, 64)))

    def test_records_attention_and_boxes(self):
        m = Model(preset("M5-nano"), 0)
        rec = {}
        m.forward(np.random.default_rng(3).random((2, 1, 64, 64)), record=rec)
        assert [a.shape for a in rec["attention"]] == [(2, 8, 8), (2, 4, 4), (2, 2, 2)]
        assert len(rec["boxes"]) == sum(m.cfg.depths)

    def test_backward_reaches_every_parameter(self):
        m = Model(preset("M5-nano-8x8"), 0, dtype=np.float64)
        x = np.random.default_rng(4).random((2, 1, 8, 8))
        with Tape() as tape:
            out = E.sum_(m.forward(x))
        tape.backward(out)
        for name, p in m.named_parameters().items():
            assert p.grad is not None and np.any(p.grad != 0), name


class TestAttentionScores:
    def test_normalized_range(self):
        m = Model(preset("M5-nano"), 0)
        maps = attention_scores(m, np.random.default_rng(5).random((2, 1, 64, 64)))
        for a in maps:
            assert a.min() >= 0 and a.max() <= 1
            np.testing.assert_allclose(a.max(axis=(1, 2)), 1.0)

    def test_received_mass_conserved(self):
        m = Model(preset("M5-nano"), 0)
        raw = attention_scores(m, np.random.default_rng(6).random((1, 1, 64, 64)), normalize=False)
        # every query spreads unit mass, so a stage map sums to its token count
        for a, g in zip(raw, m.cfg.grid_sides):
            assert a.sum() == pytest.approx(g * g, rel=1e-4)


class TestDownsample:
    @pytest.mark.parametrize("side,expected", [(8, 4), (7, 4), (4, 2), (3, 2), (2, 1)])
    def test_ceil_half(self, side, expected):
        x = Tensor(np.ones((1, 2, side, side)))
        y = downsample(x, Tensor(np.ones((3, 2, 3, 3))), Tensor(np.zeros(3)))
        assert y.shape == (1, 3, expected, expected)


def test_model_gradient_check():
    names, f, inputs, k = model_case(0)
    rep = gradient_check(f, inputs, tol=MODEL_TOL, names=names, max_elements=k, seed=0)
    assert rep.passed, rep.summary()
