"""Depthwise convolution kernels.

The numpy versions loop over kernel taps. When numba is importable, compiled
loops are used instead (same arithmetic, roughly 5x faster on one core).
Set ``MLRX_NO_NUMBA=1`` to force the numpy path.
"""

from __future__ import annotations

import os

import numpy as np


def _np_forward(xp, wd, dilation, h, w):
    kh, kw, _ = wd.shape
    dh, dw = dilation
    out = np.zeros(xp.shape[:1] + (h, w) + xp.shape[3:])
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i * dh : i * dh + h, j * dw : j * dw + w, :] * wd[i, j]
    return out


def _np_weight_grad(xp, g, kernel, dilation):
    kh, kw = kernel
    dh, dw = dilation
    _, h, w, c = g.shape
    gw = np.empty((kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            gw[i, j] = np.einsum("nhwc,nhwc->c", xp[:, i * dh : i * dh + h, j * dw : j * dw + w, :], g)
    return gw


def _np_input_grad(g, wd, dilation, padded_shape):
    kh, kw, _ = wd.shape
    dh, dw = dilation
    _, h, w, _ = g.shape
    gxp = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i * dh : i * dh + h, j * dw : j * dw + w, :] += g * wd[i, j]
    return gxp


depthwise_forward = _np_forward
depthwise_weight_grad = _np_weight_grad
depthwise_input_grad = _np_input_grad
USING_NUMBA = False

if not os.environ.get("MLRX_NO_NUMBA"):
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is optional
        numba = None

    if numba is not None:

        @numba.njit(cache=True)
        def _nb_forward(xp, wd, dh, dw, h, w):
            n, _, _, c = xp.shape
            kh, kw, _ = wd.shape
            out = np.zeros((n, h, w, c))
            for b in range(n):
                for y in range(h):
                    for x in range(w):
                        for i in range(kh):
                            for j in range(kw):
                                for ch in range(c):
                                    out[b, y, x, ch] += xp[b, y + i * dh, x + j * dw, ch] * wd[i, j, ch]
            return out

        @numba.njit(cache=True)
        def _nb_weight_grad(xp, g, kh, kw, dh, dw):
            n, h, w, c = g.shape
            gw = np.zeros((kh, kw, c))
            for b in range(n):
                for y in range(h):
                    for x in range(w):
                        for i in range(kh):
                            for j in range(kw):
                                for ch in range(c):
                                    gw[i, j, ch] += xp[b, y + i * dh, x + j * dw, ch] * g[b, y, x, ch]
            return gw

        @numba.njit(cache=True)
        def _nb_input_grad(g, wd, dh, dw, hp, wp):
            n, h, w, c = g.shape
            kh, kw, _ = wd.shape
            gxp = np.zeros((n, hp, wp, c))
            for b in range(n):
                for y in range(h):
                    for x in range(w):
                        for i in range(kh):
                            for j in range(kw):
                                for ch in range(c):
                                    gxp[b, y + i * dh, x + j * dw, ch] += g[b, y, x, ch] * wd[i, j, ch]
            return gxp

        def depthwise_forward(xp, wd, dilation, h, w):  # noqa: F811
            return _nb_forward(xp, np.ascontiguousarray(wd), dilation[0], dilation[1], h, w)

        def depthwise_weight_grad(xp, g, kernel, dilation):  # noqa: F811
            return _nb_weight_grad(xp, g, kernel[0], kernel[1], dilation[0], dilation[1])

        def depthwise_input_grad(g, wd, dilation, padded_shape):  # noqa: F811
            return _nb_input_grad(
                g, np.ascontiguousarray(wd), dilation[0], dilation[1], padded_shape[1], padded_shape[2]
            )

        USING_NUMBA = True
