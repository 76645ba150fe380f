"""Convolution kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time.  Set ``AHMF_KERNELS=numpy`` to force
the fallback (useful for debugging or when numba is unavailable); the default
is ``numba`` when it imports cleanly.

All kernels work on batched NCHW arrays and keep the dtype of their inputs.
"""
import os

import numpy as np

_requested = os.environ.get("AHMF_KERNELS", "numba").strip().lower()

try:
    if _requested == "numpy":
        raise ImportError("numpy backend requested")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path


def _windows(xp, k, stride, ho, wo):
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def conv2d_forward_np(x, w, stride, padding, groups):
    n, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, k, stride, ho, wo)  # n c ho wo k k
    if groups == 1:
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # n ho wo o
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    og = o // groups
    win = win.reshape(n, groups, cg, ho, wo, k, k)
    wg = w.reshape(groups, og, cg, k, k)
    out = np.einsum("ngchwij,gocij->ngohw", win, wg, optimize=True)
    return np.ascontiguousarray(out.reshape(n, o, ho, wo))


def conv2d_backward_np(x, w, gy, stride, padding, groups):
    n, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    _, _, ho, wo = gy.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, k, stride, ho, wo)
    gxp = np.zeros(xp.shape, dtype=x.dtype)
    if groups == 1:
        gw = np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # o c k k
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(w[:, :, i, j], gy, axes=([0], [1]))  # c n ho wo
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib.transpose(
                    1, 0, 2, 3
                )
    else:
        og = o // groups
        win = win.reshape(n, groups, cg, ho, wo, k, k)
        gyg = gy.reshape(n, groups, og, ho, wo)
        wg = w.reshape(groups, og, cg, k, k)
        gw = np.einsum("ngohw,ngchwij->gocij", gyg, win, optimize=True).reshape(o, cg, k, k)
        for i in range(k):
            for j in range(k):
                contrib = np.einsum("goc,ngohw->ngchw", wg[:, :, :, i, j], gyg).reshape(n, c, ho, wo)
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
    if padding:
        gx = gxp[:, :, padding : padding + h, padding : padding + wd]
    else:
        gx = gxp
    return np.ascontiguousarray(gx), gw.astype(x.dtype, copy=False)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _valid_range(size_in, size_out, stride, offset):
        # output positions y with 0 <= y*stride + offset < size_in
        lo = 0
        while lo < size_out and lo * stride + offset < 0:
            lo += 1
        hi = size_out
        while hi > lo and (hi - 1) * stride + offset >= size_in:
            hi -= 1
        return lo, hi

    @njit(cache=True)
    def _conv_fwd_nb(x, w, stride, padding, groups, out):
        n, c, h, wd = x.shape
        o, cg, k, _ = w.shape
        _, _, ho, wo = out.shape
        og = o // groups
        for b in range(n):
            for oc in range(o):
                g = oc // og
                for ic in range(cg):
                    cin = g * cg + ic
                    for i in range(k):
                        y0, y1 = _valid_range(h, ho, stride, i - padding)
                        for j in range(k):
                            x0, x1 = _valid_range(wd, wo, stride, j - padding)
                            wv = w[oc, ic, i, j]
                            for y in range(y0, y1):
                                yy = y * stride + i - padding
                                for xx in range(x0, x1):
                                    out[b, oc, y, xx] += wv * x[b, cin, yy, xx * stride + j - padding]
        return out

    @njit(cache=True)
    def _conv_bwd_nb(x, w, gy, stride, padding, groups, gx, gw):
        n, c, h, wd = x.shape
        o, cg, k, _ = w.shape
        _, _, ho, wo = gy.shape
        og = o // groups
        for b in range(n):
            for oc in range(o):
                g = oc // og
                for ic in range(cg):
                    cin = g * cg + ic
                    for i in range(k):
                        y0, y1 = _valid_range(h, ho, stride, i - padding)
                        for j in range(k):
                            x0, x1 = _valid_range(wd, wo, stride, j - padding)
                            wv = w[oc, ic, i, j]
                            acc = x.dtype.type(0)
                            for y in range(y0, y1):
                                yy = y * stride + i - padding
                                for xx in range(x0, x1):
                                    xc = xx * stride + j - padding
                                    gv = gy[b, oc, y, xx]
                                    acc += gv * x[b, cin, yy, xc]
                                    gx[b, cin, yy, xc] += wv * gv
                            gw[oc, ic, i, j] += acc
        return gx, gw

    @njit(cache=True)
    def _im2col_nb(x, k, stride, padding, ho, wo):
        n, c, h, wd = x.shape
        cols = np.zeros((n * ho * wo, c * k * k), dtype=x.dtype)
        for b in range(n):
            for y in range(ho):
                for xx in range(wo):
                    row = (b * ho + y) * wo + xx
                    for ch in range(c):
                        for i in range(k):
                            yy = y * stride + i - padding
                            if yy < 0 or yy >= h:
                                continue
                            for j in range(k):
                                xc = xx * stride + j - padding
                                if 0 <= xc < wd:
                                    cols[row, (ch * k + i) * k + j] = x[b, ch, yy, xc]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, shape, k, stride, padding, ho, wo):
        n, c, h, wd = shape
        gx = np.zeros((n, c, h, wd), dtype=cols.dtype)
        for b in range(n):
            for y in range(ho):
                for xx in range(wo):
                    row = (b * ho + y) * wo + xx
                    for ch in range(c):
                        for i in range(k):
                            yy = y * stride + i - padding
                            if yy < 0 or yy >= h:
                                continue
                            for j in range(k):
                                xc = xx * stride + j - padding
                                if 0 <= xc < wd:
                                    gx[b, ch, yy, xc] += cols[row, (ch * k + i) * k + j]
        return gx


def _out_hw(h, wd, k, stride, padding):
    return (h + 2 * padding - k) // stride + 1, (wd + 2 * padding - k) // stride + 1


def conv2d_forward_nb(x, w, stride, padding, groups):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = _out_hw(h, wd, k, stride, padding)
    x = np.ascontiguousarray(x)
    if k == 1 and stride == 1 and padding == 0 and groups == 1:
        return conv2d_forward_np(x, w, stride, padding, groups)
    if groups == 1:
        cols = _im2col_nb(x, k, stride, padding, ho, wo)
        out = cols @ w.reshape(o, -1).T  # (n ho wo) o
        return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    return _conv_fwd_nb(x, np.ascontiguousarray(w), stride, padding, groups, out)


def conv2d_backward_nb(x, w, gy, stride, padding, groups):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    _, _, ho, wo = gy.shape
    x = np.ascontiguousarray(x)
    gy = gy.astype(x.dtype, copy=False)
    if k == 1 and stride == 1 and padding == 0 and groups == 1:
        return conv2d_backward_np(x, w, gy, stride, padding, groups)
    if groups == 1:
        cols = _im2col_nb(x, k, stride, padding, ho, wo)
        gmat = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = gmat @ w.reshape(o, -1)
        gx = _col2im_nb(np.ascontiguousarray(gcols), x.shape, k, stride, padding, ho, wo)
        return gx, gw
    gx = np.zeros(x.shape, dtype=x.dtype)
    gw = np.zeros(w.shape, dtype=x.dtype)
    return _conv_bwd_nb(x, np.ascontiguousarray(w), np.ascontiguousarray(gy), stride, padding, groups, gx, gw)


if HAVE_NUMBA:
    conv2d_forward = conv2d_forward_nb
    conv2d_backward = conv2d_backward_nb
else:
    conv2d_forward = conv2d_forward_np
    conv2d_backward = conv2d_backward_np
