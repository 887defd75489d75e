"""Gather/scatter kernels behind conv2d.

The convolution itself is a matrix product over an unfolded ("im2col") view of
the padded input. Unfolding and its adjoint (folding, "col2im") are the hot
inner loops; they run under numba when available and ``BAMGUARD_NO_NUMBA`` is
unset, otherwise through the pure-numpy path. Both paths accumulate in the same
order, so results are bit-identical.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

_DISABLED = os.environ.get("BAMGUARD_NO_NUMBA", "").lower() not in ("", "0", "false")
USE_NUMBA = numba is not None and not _DISABLED


def _im2col_numpy(xp, kh, kw, stride, dilation, oh, ow):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    h_span = stride * (oh - 1) + 1
    w_span = stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i * dilation:i * dilation + h_span:stride,
                                  j * dilation:j * dilation + w_span:stride]
    return cols


def _col2im_numpy(cols, padded_shape, stride, dilation):
    n, c, kh, kw, oh, ow = cols.shape
    out = np.zeros(padded_shape, dtype=cols.dtype)
    h_span = stride * (oh - 1) + 1
    w_span = stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i * dilation:i * dilation + h_span:stride,
                j * dilation:j * dilation + w_span:stride] += cols[:, :, i, j]
    return out


if numba is not None:

    @numba.njit(cache=True)
    def _im2col_jit(xp, kh, kw, stride, dilation, oh, ow):
        n, c = xp.shape[0], xp.shape[1]
        cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(oh):
                            row = y * stride + i * dilation
                            for x in range(ow):
                                cols[b, ch, i, j, y, x] = xp[b, ch, row, x * stride + j * dilation]
        return cols

    @numba.njit(cache=True)
    def _col2im_jit(cols, out, stride, dilation):
        # (i, j) ahead of (y, x): each pixel accumulates in the numpy path's order
        n, c, kh, kw, oh, ow = cols.shape
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(oh):
                            row = y * stride + i * dilation
                            for x in range(ow):
                                out[b, ch, row, x * stride + j * dilation] += cols[b, ch, i, j, y, x]
        return out


def im2col(xp, kh, kw, stride, dilation, oh, ow, use_numba=None):
    """Unfold padded input ``(N, C, Hp, Wp)`` into ``(N, C, kh, kw, OH, OW)``."""
    if USE_NUMBA if use_numba is None else use_numba:
        return _im2col_jit(np.ascontiguousarray(xp), kh, kw, stride, dilation, oh, ow)
    return _im2col_numpy(xp, kh, kw, stride, dilation, oh, ow)


def col2im(cols, padded_shape, stride, dilation, use_numba=None):
    """Adjoint of :func:`im2col`: scatter-add columns back into a padded image."""
    if USE_NUMBA if use_numba is None else use_numba:
        out = np.zeros(padded_shape, dtype=cols.dtype)
        return _col2im_jit(np.ascontiguousarray(cols), out, stride, dilation)
    return _col2im_numpy(cols, padded_shape, stride, dilation)
