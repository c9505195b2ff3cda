"""Hot-loop kernels behind the tensor ops.

These are pure memory movers and elementwise maps; they never reorder
the floating-point arithmetic of the operations that use them, so the
JIT path and the numpy fallback produce identical forward results.
(Backward accumulation into overlapping windows may differ between the
paths in the last ulp; gradient checks run at far looser tolerance.)
"""

from __future__ import annotations

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - the test env ships numba
    HAVE_NUMBA = False


if HAVE_NUMBA:
    @numba.njit(cache=True)
    def _im2col_jit(xp, oh, ow, kh, kw, stride, out):
        n, cin = xp.shape[0], xp.shape[1]
        for ni in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    y0 = oy * stride
                    x0 = ox * stride
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                out[ni, oy, ox, ci, ky, kx] = \
                                    xp[ni, ci, y0 + ky, x0 + kx]

    @numba.njit(cache=True)
    def _col2im_jit(dview, kh, kw, stride, dxp):
        n, cin = dxp.shape[0], dxp.shape[1]
        oh, ow = dview.shape[1], dview.shape[2]
        for ni in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    y0 = oy * stride
                    x0 = ox * stride
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                dxp[ni, ci, y0 + ky, x0 + kx] += \
                                    dview[ni, oy, ox, ci, ky, kx]

    @numba.njit(cache=True)
    def _leaky_fwd_jit(x, slope, out):
        for i in range(x.size):
            v = x[i]
            out[i] = v if v > 0 else v * slope

    @numba.njit(cache=True)
    def _leaky_bwd_jit(x, g, slope, out):
        for i in range(x.size):
            out[i] = g[i] if x[i] > 0 else g[i] * slope

    @numba.njit(cache=True)
    def _maxpool_fwd_jit(x, k, stride, out, arg):
        n, c = x.shape[0], x.shape[1]
        oh, ow = out.shape[2], out.shape[3]
        for ni in range(n):
            for ci in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        y0 = oy * stride
                        x0 = ox * stride
                        best = x[ni, ci, y0, x0]
                        bidx = 0
                        for ky in range(k):
                            for kx in range(k):
                                v = x[ni, ci, y0 + ky, x0 + kx]
                                if v > best:
                                    best = v
                                    bidx = ky * k + kx
                        out[ni, ci, oy, ox] = best
                        arg[ni, ci, oy, ox] = bidx

    @numba.njit(cache=True)
    def _maxpool_bwd_jit(arg, g, k, stride, dx):
        n, c = dx.shape[0], dx.shape[1]
        oh, ow = g.shape[2], g.shape[3]
        for ni in range(n):
            for ci in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        a = arg[ni, ci, oy, ox]
                        dx[ni, ci, oy * stride + a // k,
                           ox * stride + a % k] += g[ni, ci, oy, ox]


def im2col(xp: np.ndarray, oh: int, ow: int, kh: int, kw: int,
           stride: int) -> np.ndarray:
    """Gather sliding windows into [n, oh, ow, cin, kh, kw] (C order)."""
    n, cin = xp.shape[0], xp.shape[1]
    out = np.empty((n, oh, ow, cin, kh, kw), dtype=xp.dtype)
    if HAVE_NUMBA:
        _im2col_jit(xp, oh, ow, kh, kw, stride, out)
        return out
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(n, oh, ow, cin, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw), writeable=False)
    np.copyto(out, win)
    return out


def col2im_add(dview: np.ndarray, kh: int, kw: int, stride: int,
               dxp: np.ndarray) -> None:
    """Scatter-add window gradients [n, oh, ow, cin, kh, kw] into dxp."""
    if HAVE_NUMBA:
        _col2im_jit(dview, kh, kw, stride, dxp)
        return
    oh, ow = dview.shape[1], dview.shape[2]
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, :, ky:ky + oh * stride:stride,
                kx:kx + ow * stride:stride] += \
                dview[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)


def leaky_forward(x: np.ndarray, slope: float) -> np.ndarray:
    out = np.empty_like(x)
    if HAVE_NUMBA and x.flags.c_contiguous:
        _leaky_fwd_jit(x.reshape(-1), x.dtype.type(slope), out.reshape(-1))
        return out
    return np.where(x > 0, x, x * x.dtype.type(slope))


def leaky_backward(x: np.ndarray, g: np.ndarray, slope: float) -> np.ndarray:
    if HAVE_NUMBA and x.flags.c_contiguous and g.flags.c_contiguous:
        out = np.empty_like(g)
        _leaky_bwd_jit(x.reshape(-1), g.reshape(-1), g.dtype.type(slope),
                       out.reshape(-1))
        return out
    return np.where(x > 0, g, g * g.dtype.type(slope))


def maxpool_forward(x: np.ndarray, k: int,
                    stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Window max plus the first (row-major) argmax per window."""
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    if HAVE_NUMBA and x.flags.c_contiguous:
        out = np.empty((n, c, oh, ow), dtype=x.dtype)
        arg = np.empty((n, c, oh, ow), dtype=np.int64)
        _maxpool_fwd_jit(x, k, stride, out, arg)
        return out, arg
    if stride == k and h % k == 0 and w % k == 0:
        windows = np.ascontiguousarray(
            x.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5)
        ).reshape(n, c, oh, ow, k * k)
    else:
        windows = np.empty((n, c, oh, ow, k * k), dtype=x.dtype)
        for ky in range(k):
            for kx in range(k):
                windows[..., ky * k + kx] = x[:, :, ky:ky + oh * stride:stride,
                                              kx:kx + ow * stride:stride]
    arg = windows.argmax(axis=4)
    out = np.take_along_axis(windows, arg[..., None], axis=4)[..., 0]
    return out, arg


def maxpool_backward(arg: np.ndarray, g: np.ndarray, k: int, stride: int,
                     shape: tuple) -> np.ndarray:
    dx = np.zeros(shape, dtype=g.dtype)
    if HAVE_NUMBA and g.flags.c_contiguous:
        _maxpool_bwd_jit(arg, g, k, stride, dx)
        return dx
    n, c, oh, ow = g.shape
    ky = arg // k
    kx = arg % k
    oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    rows = oy * stride + ky
    cols = ox * stride + kx
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dx, (ni, ci, rows, cols), g)
    return dx
