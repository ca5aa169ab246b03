"""Fused convolution and normalization ops with hand-written gradients.

Images are NHWC. Padding is always "same": a dilated kernel of extent
``d * (k - 1) + 1`` gets ``d * (k - 1) // 2`` zeros before and the rest after,
so the spatial size is preserved for every kernel/dilation pair.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import Tensor, as_tensor


def same_padding(k: int, d: int) -> tuple[int, int]:
    total = d * (k - 1)
    return total // 2, total - total // 2


def _pad(x: np.ndarray, kernel, dilation) -> np.ndarray:
    (kh, kw), (dh, dw) = kernel, dilation
    ph, pw = same_padding(kh, dh), same_padding(kw, dw)
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), ph, pw, (0, 0)))


def _crop(xp: np.ndarray, kernel, dilation, h: int, w: int) -> np.ndarray:
    (kh, kw), (dh, dw) = kernel, dilation
    top, left = same_padding(kh, dh)[0], same_padding(kw, dw)[0]
    return xp[:, top : top + h, left : left + w, :]


def conv2d(x, weight, bias=None, dilation=(1, 1)) -> Tensor:
    """Dilated cross-correlation. ``weight`` is ``(kh, kw, c_in, c_out)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, wd = x.data, weight.data
    kh, kw, cin, cout = wd.shape
    if xd.shape[-1] != cin:
        raise ValueError(f"conv2d expects {cin} input channels, got {xd.shape[-1]}")
    n, h, w, _ = xd.shape
    dh, dw = dilation
    if kh == 1 and kw == 1:
        cols = xd.reshape(-1, cin)
    else:
        xp = _pad(xd, (kh, kw), dilation)
        cols = np.stack(
            [xp[:, i * dh : i * dh + h, j * dw : j * dw + w, :] for i in range(kh) for j in range(kw)],
            axis=3,
        ).reshape(-1, kh * kw * cin)
    w2 = wd.reshape(-1, cout)
    out = cols @ w2
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(n, h, w, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(wd.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ w2.T
            if kh == 1 and kw == 1:
                gx = gcols.reshape(xd.shape)
            else:
                gcols = gcols.reshape(n, h, w, kh * kw, cin)
                gxp = np.zeros((n, h + dh * (kh - 1), w + dw * (kw - 1), cin))
                for t, (i, j) in enumerate((i, j) for i in range(kh) for j in range(kw)):
                    gxp[:, i * dh : i * dh + h, j * dw : j * dw + w, :] += gcols[:, :, :, t, :]
                gx = _crop(gxp, (kh, kw), dilation, h, w)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Tensor._make(out, parents, backward)


def depthwise_conv2d(x, weight, dilation=(1, 1)) -> Tensor:
    """Per-channel spatial filtering. ``weight`` is ``(kh, kw, c)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, wd = x.data, weight.data
    kh, kw, c = wd.shape
    if xd.shape[-1] != c:
        raise ValueError(f"depthwise conv expects {c} channels, got {xd.shape[-1]}")
    n, h, w, _ = xd.shape
    xp = np.ascontiguousarray(_pad(xd, (kh, kw), dilation))
    out = _kernels.depthwise_forward(xp, wd, dilation, h, w)

    def backward(g):
        g = np.ascontiguousarray(g)
        gw = _kernels.depthwise_weight_grad(xp, g, (kh, kw), dilation) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = _kernels.depthwise_input_grad(g, wd, dilation, xp.shape)
            gx = _crop(gxp, (kh, kw), dilation, h, w)
        return gx, gw

    return Tensor._make(out, (x, weight), backward)


def batch_norm(x, gamma, beta, eps: float, running=None, momentum: float = 0.99, training: bool = True):
    """Per-channel normalization over the (N, H, W) axes.

    In training mode batch statistics are used and ``running`` (a
    ``[mean, var]`` pair of arrays, updated in place) tracks their exponential
    average; otherwise the running statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    axes = tuple(range(xd.ndim - 1))
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running is not None:
            running[0] *= momentum
            running[0] += (1 - momentum) * mu
            running[1] *= momentum
            running[1] += (1 - momentum) * var
    else:
        mu, var = running
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data * xhat + beta.data
    count = xd.size // xd.shape[-1]

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data
        if training:
            gx = inv / count * (count * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv
        return gx, gg, gb

    return Tensor._make(out, (x, gamma, beta), backward)
