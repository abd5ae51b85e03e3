"""Differentiable image operators on NCHW tensors."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, amax, make_result, mean


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _gather_patches(xp: np.ndarray, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            cols[:, :, i, j] = xp[:, :, hi : hi + h_span : stride, wj : wj + w_span : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _scatter_patches(dcols: np.ndarray, xp_shape, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    n, c = xp_shape[:2]
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            dxp[:, :, hi : hi + h_span : stride, wj : wj + w_span : stride] += dcols[:, :, i, j]
    return dxp


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation (no kernel flip) over an NCHW batch.

    Output extent is ``(H + 2*padding - dilation*(kh-1) - 1) // stride + 1``
    along each spatial axis.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be N,C,H,W, got shape {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"conv2d: weight must be Cout,Cin,kh,kw, got shape {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input channels (dim 1) is {cin} but weight expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv2d: bias must have shape ({cout},), got {b.shape}")
    if min(kh, kw, stride, dilation) < 1 or padding < 0:
        raise ValueError("conv2d: kernel, stride and dilation must be >= 1, padding >= 0")
    for dim, size, k in (("height", h, kh), ("width", wd, kw)):
        if (k - 1) * dilation + 1 > size + 2 * padding:
            raise ValueError(
                f"conv2d: effective kernel {dim} {(k - 1) * dilation + 1} exceeds "
                f"padded input {dim} {size + 2 * padding}"
            )
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(wd, kw, stride, padding, dilation)

    xd = x.data
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xd.reshape(n, cin, h * wd)
        xp_shape = xd.shape
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        xp_shape = xp.shape
        cols = _gather_patches(xp, kh, kw, stride, dilation, ho, wo)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def backward(g):
        g = g.reshape(n, cout, ho * wo)
        gw = gx = gb = None
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g)
            if pointwise:
                gx = dcols.reshape(x.shape)
            else:
                dxp = _scatter_patches(dcols, xp_shape, kh, kw, stride, dilation, ho, wo)
                gx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return make_result(out, inputs, backward, "conv2d")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange ``N, C*r*r, H, W`` into ``N, C, r*H, r*W``.

    ``out[n, c, r*h + i, r*w + j] = x[n, c*r*r + i*r + j, h, w]``.
    """
    n, cr2, h, w = x.shape
    if r < 1 or cr2 % (r * r):
        raise ValueError(f"pixel_shuffle: channel count {cr2} is not divisible by r^2 = {r * r}")
    c = cr2 // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def backward(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, cr2, h, w),)

    return make_result(out, (x,), backward, "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    n, c, hr, wr = x.shape
    if r < 1 or hr % r or wr % r:
        raise ValueError(f"pixel_unshuffle: spatial extents {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    out = x.data.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)

    def backward(g):
        return (g.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, hr, wr),)

    return make_result(out, (x,), backward, "pixel_unshuffle")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W, keeping ``N, C, 1, 1``."""
    return mean(x, axis=(2, 3), keepdims=True)


def channel_pool(x: Tensor, mode: str = "mean") -> Tensor:
    """Per-pixel mean or max across channels, giving ``N, 1, H, W``."""
    if mode == "mean":
        return mean(x, axis=1, keepdims=True)
    if mode == "max":
        return amax(x, axis=1, keepdims=True)
    raise ValueError(f"channel_pool: unknown mode {mode!r}")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; a trailing odd row/column is dropped."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ValueError(f"avg_pool2: input {h}x{w} too small to pool")
    xd = x.data[:, :, : 2 * h2, : 2 * w2]
    out = xd.reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx,)

    return make_result(out, (x,), backward, "avg_pool2")


def broadcast_add(x: Tensor, v: Tensor) -> Tensor:
    """Add a per-channel vector ``v`` (shape ``C``) over N, H and W."""
    if v.ndim != 1 or v.shape[0] != x.shape[1]:
        raise ValueError(f"broadcast_add: vector of shape {v.shape} does not match {x.shape[1]} channels")
    return x + v.reshape(1, -1, 1, 1)
