"""Image-shaped operations: convolution, pooling and differentiable crop-resize."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_output

POOL_KINDS = ("global_avg", "global_max", "channel_avg", "channel_max", "window_avg")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ValueError(
            f"non-integral conv output size: (size={size} + 2*{padding} - k={k}) / stride={stride}"
        )
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``B x C_in x H x W`` with ``C_out x C_in x k x k``."""
    xv, wv = x.values, kernel.values
    if xv.ndim != 4 or wv.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {xv.shape} and {wv.shape}")
    B, C, H, W = xv.shape
    Co, Ci, kh, kw = wv.shape
    if Ci != C:
        raise ValueError(f"conv2d channel mismatch: input has {C}, kernel expects {Ci}")
    if kh != kw:
        raise ValueError(f"conv2d needs a square kernel, got {kh}x{kw}")
    k = kh
    Ho = conv_output_size(H, k, stride, padding)
    Wo = conv_output_size(W, k, stride, padding)
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv

    # B x C x Ho x Wo x k x k
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, wv, axes=([1, 4, 5], [1, 2, 3]))  # B x Ho x Wo x Co
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gx = gw = None
        if kernel.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # Co x C x k x k
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    contrib = np.tensordot(wv[:, :, i, j], g, axes=([0], [1]))  # C x B x Ho x Wo
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += contrib.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw

    return make_output(out, (x, kernel), "conv2d", backward)


def pool(x: Tensor, kind: str, window: int = 2) -> Tensor:
    """Reduce a ``B x C x H x W`` map.

    Global kinds give ``B x C x 1 x 1``; channel kinds give ``B x 1 x H x W``;
    ``window_avg`` averages non-overlapping ``window x window`` tiles.
    Max kinds route the gradient to the first maximal element in row-major order.
    """
    xv = x.values
    if xv.ndim != 4 or xv.size == 0:
        raise ValueError(f"pool expects a non-empty 4-D input, got {xv.shape}")
    B, C, H, W = xv.shape
    if kind == "global_avg":
        out = xv.mean(axis=(2, 3), keepdims=True)
        n = H * W
        return make_output(out, (x,), "pool", lambda g: (np.broadcast_to(g / n, xv.shape).copy(),))
    if kind == "channel_avg":
        out = xv.mean(axis=1, keepdims=True)
        return make_output(out, (x,), "pool", lambda g: (np.broadcast_to(g / C, xv.shape).copy(),))
    if kind == "global_max":
        flat = xv.reshape(B, C, H * W)
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(B, C, 1, 1)

        def backward(g):
            gf = np.zeros_like(flat)
            np.put_along_axis(gf, idx[..., None], g.reshape(B, C, 1), axis=2)
            return (gf.reshape(xv.shape),)

        return make_output(out, (x,), "pool", backward)
    if kind == "channel_max":
        idx = xv.argmax(axis=1)[:, None]
        out = np.take_along_axis(xv, idx, axis=1)

        def backward(g):
            gx = np.zeros_like(xv)
            np.put_along_axis(gx, idx, g, axis=1)
            return (gx,)

        return make_output(out, (x,), "pool", backward)
    if kind == "window_avg":
        k = int(window)
        if k <= 0 or H % k or W % k:
            raise ValueError(f"window_avg size {k} must divide the map size {H}x{W}")
        out = xv.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

        def backward(g):
            gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
            return (gx,)

        return make_output(out, (x,), "pool", backward)
    raise ValueError(f"unknown pool kind {kind!r}; expected one of {POOL_KINDS}")


def _interp_matrix(lo: np.ndarray, hi: np.ndarray, size: int, n_out: int):
    """Per-batch bilinear sampling matrices ``B x n_out x size``.

    Samples sit on ``lo*(size-1) + (hi-lo)*(size-1)*i/(n_out-1)`` so the first
    and last samples land exactly on the box edges.
    """
    Bn = lo.shape[0]
    m = np.zeros((Bn, n_out, size), dtype=lo.dtype)
    if size == 1:
        m[:, :, 0] = 1
        z = np.zeros((Bn, n_out), dtype=np.intp)
        return m, z, np.zeros((Bn, n_out), dtype=lo.dtype)
    steps = np.arange(n_out, dtype=lo.dtype)
    extent = (hi - lo)[:, None] * (size - 1)
    pos = lo[:, None] * (size - 1) + extent * steps / (n_out - 1)
    pos = np.clip(pos, 0, size - 1)
    i0 = np.minimum(np.floor(pos).astype(np.intp), size - 2)
    frac = pos - i0
    rows = np.arange(n_out)
    for b in range(Bn):
        np.add.at(m[b], (rows, i0[b]), 1 - frac[b])
        np.add.at(m[b], (rows, i0[b] + 1), frac[b])
    return m, i0, frac


def bilinear_crop_resize(x: Tensor, boxes: Tensor, out_h: int, out_w: int) -> Tensor:
    """Crop normalized ``[x1, y1, x2, y2]`` boxes and resample them bilinearly.

    Differentiable with respect to both the feature map and the box
    coordinates. The full box with ``out = (H, W)`` is an exact identity.
    """
    xv, bv = x.values, boxes.values
    if xv.ndim != 4:
        raise ValueError(f"bilinear_crop_resize expects B x C x H x W, got {xv.shape}")
    B, C, H, W = xv.shape
    if bv.shape != (B, 4):
        raise ValueError(f"boxes must have shape ({B}, 4), got {bv.shape}")
    if out_h < 2 or out_w < 2:
        raise ValueError(f"output size must be at least 2x2, got {out_h}x{out_w}")
    if not np.all(np.isfinite(bv)) or np.any(bv[:, 2] <= bv[:, 0]) or np.any(bv[:, 3] <= bv[:, 1]):
        raise ValueError("degenerate or non-finite box passed to bilinear_crop_resize")

    x1, y1, x2, y2 = (bv[:, i].astype(xv.dtype) for i in range(4))
    ry, iy, _ = _interp_matrix(y1, y2, H, out_h)  # B x oh x H
    rx, ix, _ = _interp_matrix(x1, x2, W, out_w)  # B x ow x W
    tmp = np.einsum("bih,bchw->bciw", ry, xv)
    out = np.einsum("bciw,bjw->bcij", tmp, rx)

    def backward(g):
        gx = gb = None
        if x.requires_grad:
            gx = np.einsum("bih,bcij,bjw->bchw", ry, g, rx)
        if boxes.requires_grad:
            gb = np.zeros((B, 4), dtype=bv.dtype)
            # dL/dRy and dL/dRx, then through the sample positions
            g_ry = np.einsum("bcij,bchw,bjw->bih", g, xv, rx)
            g_rx = np.einsum("bcij,bih,bchw->bjw", g, ry, xv)
            if H > 1:
                t = np.arange(out_h, dtype=xv.dtype) / (out_h - 1)
                bidx = np.arange(B)[:, None]
                rows = np.arange(out_h)[None, :]
                dpos = g_ry[bidx, rows, iy + 1] - g_ry[bidx, rows, iy]
                gb[:, 1] = (dpos * (1 - t)).sum(axis=1) * (H - 1)
                gb[:, 3] = (dpos * t).sum(axis=1) * (H - 1)
            if W > 1:
                t = np.arange(out_w, dtype=xv.dtype) / (out_w - 1)
                bidx = np.arange(B)[:, None]
                cols = np.arange(out_w)[None, :]
                dpos = g_rx[bidx, cols, ix + 1] - g_rx[bidx, cols, ix]
                gb[:, 0] = (dpos * (1 - t)).sum(axis=1) * (W - 1)
                gb[:, 2] = (dpos * t).sum(axis=1) * (W - 1)
        return gx, gb

    return make_output(out, (x, boxes), "bilinear_crop_resize", backward)
