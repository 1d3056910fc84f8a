import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mxa import engine as E
from mxa.checks import OPS_TOL, mxa_cases
from mxa.engine import Tensor, gradient_check
from mxa.mxa_block import (
    EPS_MIN, CbamParams, RoiBox, RoiPredictorParams, apply_channel_gate, box_from_raw, boxes_to_list,
    channel_attention, mxa_forward, predict_roi, roi_pool, spatial_attention, write_roi_csv,
)

raw_values = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


class TestBoxParameterization:
    @settings(max_examples=300)
    @given(arrays(np.float64, (8, 4), elements=raw_values))
    def test_boxes_always_valid(self, raw):
        boxes = boxes_to_list(box_from_raw(Tensor(raw)))
        assert all(b.is_valid() for b in boxes), boxes

    def test_zero_raw_gives_centered_box(self):
        box = box_from_raw(Tensor(np.zeros((1, 4)))).values[0]
        side = EPS_MIN + (1 - EPS_MIN) * 0.5
        np.testing.assert_allclose(box, [0.5 - side / 2, 0.5 - side / 2, 0.5 + side / 2, 0.5 + side / 2])

    def test_edge_center_is_shifted_inside(self):
        box = box_from_raw(Tensor(np.array([[30.0, -30.0, 0.0, 0.0]]))).values[0]
        assert box[2] == pytest.approx(1.0)
        assert box[1] == pytest.approx(0.0)
        assert box[2] - box[0] == pytest.approx(0.55)

    def test_minimum_size(self):
        box = box_from_raw(Tensor(np.array([[0.0, 0.0, -50.0, -50.0]]))).values[0]
        assert box[2] - box[0] == pytest.approx(EPS_MIN)
        assert box[3] - box[1] == pytest.approx(EPS_MIN)

    def test_roibox_validity_rules(self):
        assert RoiBox(0.0, 0.0, 1.0, 1.0).is_valid()
        assert not RoiBox(0.5, 0.0, 0.55, 1.0).is_valid()
        assert not RoiBox(-0.1, 0.0, 0.5, 0.5).is_valid()
        assert not RoiBox(0.2, 0.2, 0.1, 0.5).is_valid()


class TestPredictor:
    @pytest.mark.parametrize("seed", range(20))
    def test_random_parameters_give_valid_boxes(self, seed):
        rng = np.random.default_rng(seed)
        p = RoiPredictorParams(4, rng, dtype=np.float64)
        for t in p.parameters():
            t.values[...] = rng.normal(scale=10.0, size=t.shape)
        boxes = predict_roi(Tensor(rng.normal(size=(3, 4, 5, 5))), p)
        assert boxes.shape == (3, 4)
        assert all(b.is_valid() for b in boxes_to_list(boxes))

    def test_hidden_width(self):
        assert RoiPredictorParams(16, np.random.default_rng(0)).hidden == 8
        assert RoiPredictorParams(4, np.random.default_rng(0)).hidden == 4


class TestCbam:
    def test_reduction_must_divide(self):
        with pytest.raises(ValueError):
            CbamParams(6, np.random.default_rng(0), reduction=4)

    def test_even_spatial_kernel_rejected(self):
        with pytest.raises(ValueError):
            CbamParams(8, np.random.default_rng(0), spatial_kernel=6)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 5.0))
    def test_gates_strictly_inside_unit_interval(self, seed, scale):
        rng = np.random.default_rng(seed)
        p = CbamParams(8, rng, dtype=np.float64)
        f = Tensor(rng.normal(scale=scale, size=(2, 8, 4, 4)))
        g = channel_attention(f, p).values
        s = spatial_attention(apply_channel_gate(f, Tensor(g)), p).values
        assert g.shape == (2, 8) and s.shape == (2, 1, 4, 4)
        assert np.all((g > 0) & (g < 1))
        assert np.all((s > 0) & (s < 1))

    def test_channel_gate_matches_manual_mlp(self):
        rng = np.random.default_rng(1)
        p = CbamParams(8, rng, dtype=np.float64)
        f = rng.normal(size=(1, 8, 3, 3))
        relu = lambda v: np.maximum(v, 0)  # noqa: E731
        avg, mx = f.mean(axis=(2, 3)), f.max(axis=(2, 3))
        logits = relu(avg @ p.w1.values) @ p.w2.values + relu(mx @ p.w1.values) @ p.w2.values
        np.testing.assert_allclose(channel_attention(Tensor(f), p).values, 1 / (1 + np.exp(-logits)), rtol=1e-12)

    def test_channel_count_mismatch(self):
        with pytest.raises(ValueError):
            channel_attention(Tensor(np.zeros((1, 4, 3, 3))), CbamParams(8, np.random.default_rng(0)))


class TestMxaForward:
    def test_shape_preserved_and_boxes_recorded(self):
        rng = np.random.default_rng(2)
        f = Tensor(rng.normal(size=(2, 8, 4, 4)))
        rec = {}
        out = mxa_forward(f, RoiPredictorParams(8, rng, dtype=np.float64), CbamParams(8, rng, dtype=np.float64), rec)
        assert out.shape == f.shape
        assert rec["boxes"][0].shape == (2, 4)

    def test_full_box_pool_is_identity(self):
        f = Tensor(np.random.default_rng(3).normal(size=(2, 4, 5, 5)))
        out = roi_pool(f, Tensor(np.tile([0.0, 0.0, 1.0, 1.0], (2, 1))))
        np.testing.assert_array_equal(out.values, f.values)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_check(self, seed):
        for name, f, inputs in mxa_cases(seed):
            rep = gradient_check(f, inputs, tol=OPS_TOL, max_elements=32, seed=seed)
            assert rep.passed, f"{name}: {rep.summary()}"

    def test_gradient_reaches_predictor(self):
        rng = np.random.default_rng(4)
        roi = RoiPredictorParams(8, rng, dtype=np.float64)
        cbam = CbamParams(8, rng, dtype=np.float64)
        f = Tensor(rng.normal(size=(1, 8, 4, 4)))
        with E.Tape() as tape:
            out = E.sum_(E.mul(mxa_forward(f, roi, cbam), Tensor(rng.normal(size=(1, 8, 4, 4)))))
        tape.backward(out)
        assert np.any(roi.linear.grad != 0)


def test_roi_csv(tmp_path):
    path = tmp_path / "roi.csv"
    write_roi_csv(path, ["a", "b"], np.array([[0.0, 0.1, 0.5, 0.6], [0.2, 0.2, 1.0, 1.0]]))
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["sample_id", "x1", "y1", "x2", "y2"]
    assert rows[1] == ["a", "0.000000", "0.100000", "0.500000", "0.600000"]
