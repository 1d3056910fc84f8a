"""Multi-head self-attention, its local-window variant, and branch fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import engine as E
from .engine import Tensor
from .module import Module, uniform_param

MASK_VALUE = -1e9


@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int
    num_heads: int
    window: Optional[int] = None

    def __post_init__(self):
        if self.embed_dim <= 0 or self.num_heads <= 0:
            raise ValueError("embed_dim and num_heads must be positive")
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.window is not None and self.window <= 0:
            raise ValueError(f"window must be positive, got {self.window}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class TokenGrid:
    """Tokens ``B x N x D`` laid out row-major on a ``grid_h x grid_w`` grid."""

    tokens: Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] != self.grid_h * self.grid_w:
            raise ValueError(
                f"tokens of shape {self.tokens.shape} do not fit a {self.grid_h}x{self.grid_w} grid"
            )

    @classmethod
    def from_map(cls, fmap: Tensor) -> "TokenGrid":
        B, D, H, W = fmap.shape
        tokens = fmap.reshape(B, D, H * W).transpose(0, 2, 1)
        return cls(tokens, H, W)

    def to_map(self) -> Tensor:
        B, N, D = self.tokens.shape
        return self.tokens.transpose(0, 2, 1).reshape(B, D, self.grid_h, self.grid_w)


class AttentionParams(Module):
    """Fused query/key/value projection plus output projection, with biases."""

    def __init__(self, embed_dim: int, rng: np.random.Generator, dtype=np.float32):
        d = embed_dim
        self.w_qkv = uniform_param(rng, (d, 3 * d), d, dtype)
        self.b_qkv = uniform_param(rng, (3 * d,), d, dtype)
        self.w_out = uniform_param(rng, (d, d), d, dtype)
        self.b_out = uniform_param(rng, (d,), d, dtype)


def _attend(x: Tensor, cfg: AttentionConfig, p: AttentionParams, mask=None):
    """Attention over ``B' x N x D`` token sets; returns (output, weights)."""
    Bp, N, D = x.shape
    h, d = cfg.num_heads, cfg.head_dim
    qkv = E.add(x @ p.w_qkv, p.b_qkv.reshape(1, 1, 3 * D))
    qkv = qkv.reshape(Bp, N, 3, h, d).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = E.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(d))
    attn = E.softmax(scores, axis=-1, mask=mask)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(Bp, N, D)
    out = E.add(ctx @ p.w_out, p.b_out.reshape(1, 1, D))
    return out, attn


def mhsa(x: TokenGrid, cfg: AttentionConfig, params: AttentionParams, record: Optional[list] = None) -> TokenGrid:
    """Global scaled dot-product attention over every token of the grid.

    When ``record`` is a list, the per-patch received attention mass
    (``B x grid_h x grid_w``, averaged over heads) is appended to it.
    """
    if x.tokens.shape[-1] != cfg.embed_dim:
        raise ValueError(f"token width {x.tokens.shape[-1]} != embed_dim {cfg.embed_dim}")
    out, attn = _attend(x.tokens, cfg, params)
    if record is not None:
        received = attn.values.sum(axis=2).mean(axis=1)
        record.append(received.reshape(-1, x.grid_h, x.grid_w))
    return TokenGrid(out, x.grid_h, x.grid_w)


def _window_valid_mask(H: int, W: int, w: int) -> np.ndarray:
    Hp, Wp = -(-H // w) * w, -(-W // w) * w
    valid = np.zeros((Hp, Wp), dtype=bool)
    valid[:H, :W] = True
    return valid.reshape(Hp // w, w, Wp // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)


def windowed_mhsa(x: TokenGrid, cfg: AttentionConfig, params: AttentionParams, record: Optional[list] = None) -> TokenGrid:
    """Attention restricted to non-overlapping ``w x w`` windows.

    Ragged edge windows are zero-padded; padded keys are masked out before the
    softmax, padded queries are dropped from the output.
    """
    w = cfg.window
    if w is None or w <= 0:
        raise ValueError(f"windowed_mhsa needs a positive window, got {w}")
    H, W = x.grid_h, x.grid_w
    if w >= H and w >= W:
        return mhsa(x, cfg, params, record)
    if x.tokens.shape[-1] != cfg.embed_dim:
        raise ValueError(f"token width {x.tokens.shape[-1]} != embed_dim {cfg.embed_dim}")

    B, N, D = x.tokens.shape
    nh, nw = -(-H // w), -(-W // w)
    Hp, Wp = nh * w, nw * w
    grid = x.tokens.reshape(B, H, W, D)
    if (Hp, Wp) != (H, W):
        grid = E.pad(grid, [(0, 0), (0, Hp - H), (0, Wp - W), (0, 0)])
    wins = grid.reshape(B, nh, w, nw, w, D).transpose(0, 1, 3, 2, 4, 5).reshape(B * nh * nw, w * w, D)

    valid = _window_valid_mask(H, W, w)  # nW x w*w
    valid_b = np.tile(valid, (B, 1))
    mask = np.where(valid_b, 0.0, MASK_VALUE).astype(x.tokens.dtype)[:, None, None, :]
    out, attn = _attend(wins, cfg, params, mask=None if valid.all() else mask)

    out = out.reshape(B, nh, nw, w, w, D).transpose(0, 1, 3, 2, 4, 5).reshape(B, Hp, Wp, D)
    if (Hp, Wp) != (H, W):
        out = out[:, :H, :W, :]
    if record is not None:
        a = attn.values * valid_b[:, None, :, None]
        received = a.sum(axis=2).mean(axis=1)  # B*nW x w*w
        received = received.reshape(B, nh, nw, w, w).transpose(0, 1, 3, 2, 4).reshape(B, Hp, Wp)
        record.append(received[:, :H, :W])
    return TokenGrid(out.reshape(B, N, D), H, W)


def parallel_fuse(f_mhsa: Tensor, f_mxa: Tensor) -> Tensor:
    """Elementwise sum of the attention branch and the MXA branch (map form)."""
    if f_mhsa.shape != f_mxa.shape:
        raise ValueError(f"cannot fuse branches of shapes {f_mhsa.shape} and {f_mxa.shape}")
    return E.add(f_mhsa, f_mxa)
