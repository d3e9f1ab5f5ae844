"""Spatial and fused operations on 4-D ``(N, C, H, W)`` tensors."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError
from .tensor import Tensor, make_op, unbroadcast

PADDING_MODES = ("circular", "zero")


def _pad(x: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    width = ((0, 0), (0, 0), (ph, ph), (pw, pw))
    return np.pad(x, width, mode="wrap" if mode == "circular" else "constant")


def _fold_axis(g: np.ndarray, p: int, n: int, axis: int) -> np.ndarray:
    """Adjoint of circular padding by ``p`` along ``axis`` (length ``n`` unpadded)."""
    if p == 0:
        return g
    g = np.moveaxis(g, axis, 0)
    if p <= n:
        out = g[p:p + n].copy()
        out[n - p:] += g[:p]
        out[:p] += g[p + n:]
    else:
        out = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        np.add.at(out, (np.arange(n + 2 * p) - p) % n, g)
    return np.moveaxis(out, 0, axis)


def _unpad(gp: np.ndarray, ph: int, pw: int, h: int, w: int, mode: str) -> np.ndarray:
    if mode == "zero":
        return gp[:, :, ph:ph + h, pw:pw + w]
    return _fold_axis(_fold_axis(gp, ph, h, 2), pw, w, 3)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "circular") -> Tensor:
    """Stride-1 'same' convolution (cross-correlation) with circular or zero padding.

    Parameters
    ----------
    x : Tensor
        Input of shape ``(N, Cin, H, W)``.
    weight : Tensor
        Kernels of shape ``(Cout, Cin, kh, kw)`` with odd ``kh``, ``kw``.
    bias : Tensor, optional
        Per-output-channel offsets, shape ``(Cout,)``.
    padding : {'circular', 'zero'}
        Boundary extension. Circular wraps indices modulo ``H`` and ``W``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ConfigurationError(f"conv2d channel mismatch: input has {cin}, kernel expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d kernel size must be odd, got {kh}x{kw}")
    if padding not in PADDING_MODES:
        raise ConfigurationError(f"unknown padding '{padding}'")
    if bias is not None and bias.shape != (cout,):
        raise ConfigurationError(f"conv2d bias shape {bias.shape} != ({cout},)")

    ph, pw = kh // 2, kw // 2
    xp = _pad(x.data, ph, pw, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (N, Cin, H, W, kh, kw)
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gwin = np.tensordot(g, weight.data, axes=([1], [0]))  # (N, H, W, Cin, kh, kw)
            gp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gp[:, :, i:i + h, j:j + w] += gwin[..., i, j].transpose(0, 3, 1, 2)
            gx = _unpad(gp, ph, pw, h, w, padding)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op("conv2d", out, parents, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, ``(N, C, H, W) -> (N, C, 1, 1)``."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    scale = x.dtype.type(1.0 / (h * w))
    return make_op("global_avg_pool", out, (x,),
                   lambda g: (np.broadcast_to(g * scale, x.shape).copy(),))


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, cr2, h, w = a.shape
    c = cr2 // (r * r)
    return a.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    n, c, hr, wr = a.shape
    h, w = hr // r, wr // r
    return a.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: ``(N, C*r*r, H, W) -> (N, C, r*H, r*W)``.

    ``out[n, c, h, w] = in[n, c*r*r + (h % r)*r + (w % r), h // r, w // r]``.
    """
    if r < 1 or x.shape[1] % (r * r):
        raise ConfigurationError(f"pixel_shuffle: {x.shape[1]} channels not divisible by r^2={r * r}")
    return make_op("pixel_shuffle", np.ascontiguousarray(_shuffle(x.data, r)), (x,),
                   lambda g: (np.ascontiguousarray(_unshuffle(g, r)),))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    if x.shape[2] % r or x.shape[3] % r:
        raise ConfigurationError(f"pixel_unshuffle: spatial size {x.shape[2:]} not divisible by {r}")
    return make_op("pixel_unshuffle", np.ascontiguousarray(_unshuffle(x.data, r)), (x,),
                   lambda g: (np.ascontiguousarray(_shuffle(g, r)),))


def _roll_gather(a: np.ndarray, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """``out[n,c,y,x] = a[n,c,(y-dy[n,c]) % H, (x-dx[n,c]) % W]`` for integer offsets."""
    n, c, h, w = a.shape
    rows = (np.arange(h)[None, None, :, None] - dy[:, :, None, None]) % h
    cols = (np.arange(w)[None, None, None, :] - dx[:, :, None, None]) % w
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    return a[ni, ci, rows, cols]


def translate_bilinear(x: Tensor, shifts: Tensor) -> Tensor:
    """Translate each channel by a real ``(dy, dx)`` with bilinear weights and wrap-around.

    ``out(y, x) = in(y - dy, x - dx)``, so a positive ``dx`` moves content to
    the right. ``shifts`` has shape ``(N, C, 2)`` or ``(C, 2)``.
    """
    n, c, h, w = x.shape
    s = np.broadcast_to(shifts.data, (n, c, 2))
    fy, fx = np.floor(s[..., 0]), np.floor(s[..., 1])
    ty = (s[..., 0] - fy).astype(x.dtype)[:, :, None, None]
    tx = (s[..., 1] - fx).astype(x.dtype)[:, :, None, None]
    iy, ix = fy.astype(np.int64), fx.astype(np.int64)
    r00 = _roll_gather(x.data, iy, ix)
    r01 = _roll_gather(x.data, iy, ix + 1)
    r10 = _roll_gather(x.data, iy + 1, ix)
    r11 = _roll_gather(x.data, iy + 1, ix + 1)
    out = (1 - ty) * ((1 - tx) * r00 + tx * r01) + ty * ((1 - tx) * r10 + tx * r11)

    def bw(g):
        gx = gs = None
        if x.requires_grad:
            gx = (_roll_gather((1 - ty) * (1 - tx) * g, -iy, -ix)
                  + _roll_gather((1 - ty) * tx * g, -iy, -ix - 1)
                  + _roll_gather(ty * (1 - tx) * g, -iy - 1, -ix)
                  + _roll_gather(ty * tx * g, -iy - 1, -ix - 1))
        if shifts.requires_grad:
            d_ty = (1 - tx) * (r10 - r00) + tx * (r11 - r01)
            d_tx = (1 - ty) * (r01 - r00) + ty * (r11 - r10)
            gs = np.stack([(g * d_ty).sum(axis=(2, 3)), (g * d_tx).sum(axis=(2, 3))], axis=-1)
            gs = unbroadcast(gs, shifts.shape)
        return gx, gs

    return make_op("translate_bilinear", out, (x, shifts), bw)


def rational(x: Tensor, num: Tensor, den: Tensor) -> Tensor:
    """Pointwise safe rational function ``sum_k a_k x^k / (1 + sum_l |b_l x^l|)``.

    ``num`` holds ``a_0..a_M``; ``den`` holds ``b_1..b_N``. One coefficient set
    is shared by every element of ``x``.
    """
    a, b = num.data.reshape(-1), den.data.reshape(-1)
    xd = x.data
    powers = [np.ones_like(xd), xd]
    for _ in range(max(len(a) - 1, len(b)) - 1):
        powers.append(powers[-1] * xd)
    p = sum(a[k] * powers[k] for k in range(len(a)))
    q = [b[l - 1] * powers[l] for l in range(1, len(b) + 1)]
    d = 1 + sum(np.abs(ql) for ql in q) if q else np.ones_like(xd)
    out = p / d

    def bw(g):
        gd = g / d
        ratio = out / d
        gx = ga = gb = None
        if x.requires_grad:
            dp = sum(k * a[k] * powers[k - 1] for k in range(1, len(a))) if len(a) > 1 else 0
            dd = sum(np.sign(q[l - 1]) * l * b[l - 1] * powers[l - 1] for l in range(1, len(b) + 1)) if q else 0
            gx = g * (dp / d) - g * ratio * dd
        if num.requires_grad:
            ga = np.array([(gd * powers[k]).sum() for k in range(len(a))], dtype=num.dtype).reshape(num.shape)
        if den.requires_grad:
            gb = np.array([-(g * ratio * np.sign(q[l - 1]) * powers[l]).sum() for l in range(1, len(b) + 1)],
                          dtype=den.dtype).reshape(den.shape)
        return gx, ga, gb

    return make_op("rational", out.astype(xd.dtype, copy=False), (x, num, den), bw)
