"""Medical X-ray Attention block.

A learnable ROI predictor picks one box per image, the box is cropped and
resampled back to the input size, and CBAM-style channel then spatial gates
refine the pooled map.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import engine as E
from .engine import Tensor
from .module import Module, uniform_param

EPS_MIN = 0.1


@dataclass(frozen=True)
class RoiBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def is_valid(self, eps_min: float = EPS_MIN, tol: float = 1e-6) -> bool:
        return (
            0.0 <= self.x1 < self.x2 <= 1.0
            and 0.0 <= self.y1 < self.y2 <= 1.0
            and self.x2 - self.x1 >= eps_min - tol
            and self.y2 - self.y1 >= eps_min - tol
        )


def boxes_to_list(boxes) -> list:
    arr = boxes.values if isinstance(boxes, Tensor) else np.asarray(boxes)
    return [RoiBox(*(float(v) for v in row)) for row in arr]


class RoiPredictorParams(Module):
    """Two 3x3 conv+ReLU layers, global average pool, linear map to 4 raw outputs."""

    def __init__(self, channels: int, rng: np.random.Generator, hidden: Optional[int] = None, dtype=np.float32):
        h = hidden or max(4, channels // 2)
        self.conv1 = uniform_param(rng, (h, channels, 3, 3), channels * 9, dtype)
        self.bias1 = uniform_param(rng, (h,), channels * 9, dtype)
        self.conv2 = uniform_param(rng, (h, h, 3, 3), h * 9, dtype)
        self.bias2 = uniform_param(rng, (h,), h * 9, dtype)
        self.linear = uniform_param(rng, (h, 4), h, dtype)
        self.linear_bias = uniform_param(rng, (4,), h, dtype)

    @property
    def hidden(self) -> int:
        return self.conv1.shape[0]


class CbamParams(Module):
    """Shared channel MLP (no biases) and the spatial-attention kernel."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4,
                 spatial_kernel: int = 7, dtype=np.float32):
        if reduction < 1 or channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction ratio {reduction}")
        if spatial_kernel % 2 == 0:
            raise ValueError(f"spatial kernel must be odd, got {spatial_kernel}")
        hidden = channels // reduction
        self.reduction = reduction
        self.w1 = uniform_param(rng, (channels, hidden), channels, dtype)
        self.w2 = uniform_param(rng, (hidden, channels), hidden, dtype)
        self.spatial_kernel = uniform_param(rng, (1, 2, spatial_kernel, spatial_kernel), 2 * spatial_kernel ** 2, dtype)


class MxaParams(Module):
    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4,
                 spatial_kernel: int = 7, dtype=np.float32):
        self.roi = RoiPredictorParams(channels, rng, dtype=dtype)
        self.cbam = CbamParams(channels, rng, reduction, spatial_kernel, dtype)


def box_from_raw(raw: Tensor, eps_min: float = EPS_MIN) -> Tensor:
    """Map unconstrained ``B x 4`` outputs ``(t_cx, t_cy, t_w, t_h)`` to valid boxes.

    center = sigmoid(t_c), size = eps + (1 - eps) * sigmoid(t_s); the top-left
    corner is clipped into ``[0, 1 - size]`` so the box never leaves the image
    and never shrinks below ``eps`` per side. Output columns: x1, y1, x2, y2.
    """
    center = E.sigmoid(raw[:, 0:2])
    size = E.add(E.scale(E.sigmoid(raw[:, 2:4]), 1.0 - eps_min), eps_min)
    start = E.sub(center, E.scale(size, 0.5))
    upper = E.add(E.neg(size), 1.0)
    start = E.sub(start, E.relu(E.sub(start, upper)))  # min(start, 1 - size)
    lo = E.relu(start)
    hi = E.add(lo, size)
    hi = E.sub(hi, E.relu(E.sub(hi, 1.0)))  # guards the 1 + ulp case
    return E.concat([lo, hi], axis=1)


def predict_roi(f: Tensor, params: RoiPredictorParams, eps_min: float = EPS_MIN) -> Tensor:
    """One normalized box per batch element, differentiable w.r.t. ``f`` and ``params``."""
    B = f.shape[0]
    h = params.hidden
    z = E.relu(E.add(E.conv2d(f, params.conv1, 1, 1), params.bias1.reshape(1, h, 1, 1)))
    z = E.relu(E.add(E.conv2d(z, params.conv2, 1, 1), params.bias2.reshape(1, h, 1, 1)))
    z = E.pool(z, "global_avg").reshape(B, h)
    raw = E.add(z @ params.linear, params.linear_bias.reshape(1, 4))
    return box_from_raw(raw, eps_min)


def roi_pool(f: Tensor, boxes: Tensor) -> Tensor:
    """Crop each box and resample it back to the full ``H x W`` of ``f``."""
    return E.bilinear_crop_resize(f, boxes, f.shape[2], f.shape[3])


def channel_attention(f_pooled: Tensor, p: CbamParams) -> Tensor:
    """Channel gate ``B x C`` from the shared MLP over GAP and GMP descriptors."""
    B, C = f_pooled.shape[:2]
    if p.w1.shape[0] != C:
        raise ValueError(f"CBAM parameters expect {p.w1.shape[0]} channels, got {C}")
    avg = E.pool(f_pooled, "global_avg").reshape(B, C)
    mx = E.pool(f_pooled, "global_max").reshape(B, C)
    branch_avg = E.relu(avg @ p.w1) @ p.w2
    branch_max = E.relu(mx @ p.w1) @ p.w2
    return E.sigmoid(E.add(branch_avg, branch_max))


def apply_channel_gate(f: Tensor, gate: Tensor) -> Tensor:
    B, C = gate.shape
    return E.mul(f, gate.reshape(B, C, 1, 1))


def spatial_attention(f_chan: Tensor, p: CbamParams) -> Tensor:
    """Spatial gate ``B x 1 x H x W`` from channel-wise max and mean planes."""
    desc = E.concat([E.pool(f_chan, "channel_max"), E.pool(f_chan, "channel_avg")], axis=1)
    k = p.spatial_kernel.shape[-1]
    return E.sigmoid(E.conv2d(desc, p.spatial_kernel, 1, k // 2))


def mxa_forward(f: Tensor, roi_params: RoiPredictorParams, cbam_params: CbamParams,
                record: Optional[dict] = None) -> Tensor:
    """ROI pooling followed by channel and spatial gating; output shape equals input shape."""
    boxes = predict_roi(f, roi_params)
    pooled = roi_pool(f, boxes)
    f_chan = apply_channel_gate(pooled, channel_attention(pooled, cbam_params))
    gate = spatial_attention(f_chan, cbam_params)
    if record is not None:
        record.setdefault("boxes", []).append(boxes.values.copy())
    return E.mul(f_chan, gate)


def write_roi_csv(path, sample_ids, boxes) -> None:
    arr = boxes.values if isinstance(boxes, Tensor) else np.asarray(boxes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "x1", "y1", "x2", "y2"])
        for sid, row in zip(sample_ids, arr):
            w.writerow([sid] + [f"{float(v):.6f}" for v in row])
