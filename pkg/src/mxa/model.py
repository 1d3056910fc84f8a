"""Miniature EfficientViT-style multi-label backbone with parallel MXA branches."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import engine as E
from .attention import AttentionConfig, AttentionParams, TokenGrid, parallel_fuse, windowed_mhsa
from .engine import Tensor
from .module import Module, uniform_param
from .mxa_block import MxaParams, mxa_forward


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (16, 24, 32)
    depths: tuple = (1, 3, 4)
    heads: tuple = (2, 2, 4)
    patch_size: int = 8
    window: int = 7
    image_size: int = 64
    num_labels: int = 14
    mxa_enabled: bool = True
    cbam_reduction: int = 4
    spatial_kernel: int = 7
    mlp_ratio: int = 2
    in_channels: int = 1

    def __post_init__(self):
        for name in ("widths", "depths", "heads"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not (len(self.widths) == len(self.depths) == len(self.heads) == 3):
            raise ValueError("widths, depths and heads must each list three stages")
        for i, (c, h) in enumerate(zip(self.widths, self.heads)):
            if c <= 0 or h <= 0:
                raise ValueError(f"stage {i + 1}: width and heads must be positive")
            if c % h:
                raise ValueError(f"stage {i + 1}: width {c} not divisible by heads {h}")
            if self.mxa_enabled and c % self.cbam_reduction:
                raise ValueError(f"stage {i + 1}: width {c} not divisible by cbam_reduction {self.cbam_reduction}")
        if any(d < 1 for d in self.depths):
            raise ValueError("every stage needs depth >= 1")
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.window <= 0:
            raise ValueError("window must be positive")
        grids = self.grid_sides
        if min(grids) < 1:
            raise ValueError(f"stage grids {grids} collapse below 1")
        if self.mxa_enabled and min(grids) < 2:
            raise ValueError(f"MXA needs every stage grid side >= 2, got {grids}")

    @property
    def grid_sides(self) -> tuple:
        g = self.image_size // self.patch_size
        out = [g]
        for _ in range(2):
            g = -(-g // 2)
            out.append(g)
        return tuple(out)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("widths", "depths", "heads"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "M0": dict(widths=(64, 128, 192), depths=(1, 2, 3), heads=(4, 4, 4)),
    "M1": dict(widths=(128, 144, 192), depths=(1, 2, 3), heads=(2, 3, 3)),
    "M2": dict(widths=(128, 192, 224), depths=(1, 2, 3), heads=(4, 3, 2)),
    "M3": dict(widths=(128, 240, 320), depths=(1, 2, 3), heads=(4, 3, 4)),
    "M4": dict(widths=(128, 256, 384), depths=(1, 2, 3), heads=(4, 4, 4)),
    "M5": dict(widths=(192, 288, 384), depths=(1, 3, 4), heads=(3, 3, 4)),
}
PUBLISHED_INPUT = dict(patch_size=16, window=7, image_size=224)


def preset(name: str, **overrides) -> ModelConfig:
    """Named configs: published variants ``M0``..``M5`` and desk-scale ``M5-nano`` / ``M5-nano-8x8``."""
    if name in PRESETS:
        kw = {**PRESETS[name], **PUBLISHED_INPUT}
    elif name == "M5-nano":
        kw = dict(widths=(16, 24, 32), depths=(1, 3, 4), heads=(2, 2, 4), patch_size=8, window=7, image_size=64)
    elif name == "M5-nano-8x8":
        kw = dict(widths=(16, 24, 32), depths=(1, 3, 4), heads=(2, 2, 4), patch_size=1, window=7, image_size=8)
    else:
        raise ValueError(f"unknown preset {name!r}")
    kw.update(overrides)
    return ModelConfig(**kw)


def _rng(seed: int, *path: int) -> np.random.Generator:
    # one stream per component so enabling MXA leaves the other initial weights untouched
    return np.random.default_rng([seed, *path])


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype):
        self.w1 = uniform_param(rng, (dim, hidden), dim, dtype)
        self.b1 = uniform_param(rng, (hidden,), dim, dtype)
        self.w2 = uniform_param(rng, (hidden, dim), hidden, dtype)
        self.b2 = uniform_param(rng, (dim,), hidden, dtype)

    def __call__(self, t: Tensor) -> Tensor:
        h = E.relu(E.add(t @ self.w1, self.b1.reshape(1, 1, -1)))
        return E.add(h @ self.w2, self.b2.reshape(1, 1, -1))


class Block(Module):
    def __init__(self, dim: int, cfg: ModelConfig, seed: int, stage: int, index: int, dtype):
        self.attn = AttentionParams(dim, _rng(seed, stage, index, 0), dtype)
        self.mlp = Mlp(dim, cfg.mlp_ratio * dim, _rng(seed, stage, index, 2), dtype)
        if cfg.mxa_enabled:
            self.mxa = MxaParams(dim, _rng(seed, stage, index, 1), cfg.cbam_reduction, cfg.spatial_kernel, dtype)
        else:
            self.mxa = None


class Stage(Module):
    def __init__(self, in_dim: int, dim: int, depth: int, cfg: ModelConfig, seed: int, stage: int, dtype):
        if stage > 0:
            rng = _rng(seed, stage, 999)
            self.down = uniform_param(rng, (dim, in_dim, 3, 3), in_dim * 9, dtype)
            self.down_bias = uniform_param(rng, (dim,), in_dim * 9, dtype)
        else:
            self.down = None
        self.blocks = [Block(dim, cfg, seed, stage, j, dtype) for j in range(depth)]


def downsample(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-2 3x3 conv with "same" padding: the output side is ceil(side / 2)."""
    H, W = x.shape[2:]
    ph, pw = (1 if H % 2 == 0 else 2), (1 if W % 2 == 0 else 2)
    x = E.pad(x, [(0, 0), (0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)])
    y = E.conv2d(x, kernel, stride=2, padding=0)
    return E.add(y, bias.reshape(1, -1, 1, 1))


class Model(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        c1, p = cfg.widths[0], cfg.patch_size
        rng = _rng(seed, 100)
        fan = cfg.in_channels * p * p
        self.patch_embed = uniform_param(rng, (c1, cfg.in_channels, p, p), fan, dtype)
        self.patch_bias = uniform_param(rng, (c1,), fan, dtype)
        self.stages = []
        prev = c1
        for i, (c, d) in enumerate(zip(cfg.widths, cfg.depths)):
            self.stages.append(Stage(prev, c, d, cfg, seed, i, dtype))
            prev = c
        rng = _rng(seed, 200)
        self.head_w = uniform_param(rng, (prev, cfg.num_labels), prev, dtype)
        self.head_b = uniform_param(rng, (cfg.num_labels,), prev, dtype)

    def attention_configs(self) -> list:
        out = []
        for c, h, g in zip(self.cfg.widths, self.cfg.heads, self.cfg.grid_sides):
            out.append(AttentionConfig(c, h, min(self.cfg.window, g)))
        return out

    def forward(self, images, record: Optional[dict] = None, ablate_mxa: bool = False) -> Tensor:
        """Logits ``B x num_labels`` for ``B x 1 x S x S`` images.

        ``record`` collects per-stage received attention and predicted boxes.
        ``ablate_mxa`` keeps the MXA computation but adds it with weight zero.
        """
        cfg = self.cfg
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.image_size, cfg.image_size):
            raise ValueError(
                f"expected images of shape B x {cfg.in_channels} x {cfg.image_size} x {cfg.image_size}, got {x.shape}"
            )
        p = cfg.patch_size
        x = E.add(E.conv2d(x, self.patch_embed, stride=p, padding=0), self.patch_bias.reshape(1, -1, 1, 1))
        attn_cfgs = self.attention_configs()
        for i, stage in enumerate(self.stages):
            if stage.down is not None:
                x = downsample(x, stage.down, stage.down_bias)
            stage_attn = [] if record is not None else None
            for j, block in enumerate(stage.blocks):
                tg = TokenGrid.from_map(x)
                a = windowed_mhsa(tg, attn_cfgs[i], block.attn, stage_attn).to_map()
                if block.mxa is not None:
                    m = mxa_forward(x, block.mxa.roi, block.mxa.cbam, record)
                    if ablate_mxa:
                        m = E.scale(m, 0.0)
                    a = parallel_fuse(a, m)
                x = E.add(x, a)
                t = TokenGrid.from_map(x)
                t = TokenGrid(E.add(t.tokens, block.mlp(t.tokens)), t.grid_h, t.grid_w)
                x = t.to_map()
                if not np.all(np.isfinite(x.values)):
                    raise FloatingPointError(f"non-finite activation at stages.{i}.blocks.{j}")
            if record is not None:
                record.setdefault("attention", []).append(np.mean(stage_attn, axis=0))
        B, C = x.shape[:2]
        pooled = E.pool(x, "global_avg").reshape(B, C)
        logits = E.add(pooled @ self.head_w, self.head_b.reshape(1, -1))
        if not np.all(np.isfinite(logits.values)):
            raise FloatingPointError("non-finite activation at head")
        return logits

    __call__ = forward


def build(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(cfg, seed, dtype)


def forward(model: Model, images, **kw) -> Tensor:
    return model.forward(images, **kw)


def _minmax(a: np.ndarray) -> np.ndarray:
    lo = a.min(axis=(-2, -1), keepdims=True)
    hi = a.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (a - lo) / safe, 1.0)


def attention_scores(model: Model, images, normalize: bool = True) -> list:
    """Per-stage ``B x gh x gw`` attention mass received by each patch.

    Mass is averaged over heads and over the blocks of a stage, then min-max
    normalized per image (constant maps normalize to 1).
    """
    rec: dict = {}
    model.forward(images, record=rec)
    maps = [m.astype(np.float64) for m in rec["attention"]]
    return [_minmax(m) for m in maps] if normalize else maps


def parameter_count(cfg: ModelConfig) -> int:
    return build(cfg, 0).num_parameters()
