"""3D convolution over (B, C, T, H, W) tensors.

One recorded autograd op covers padding, grouping and striding. Two fast
paths matter in practice: depthwise (groups == C) via vectorised
shift-and-accumulate, and dense/grouped kernels via per-offset BLAS matmuls
on a channels-last view.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, _record

_PAD_MODES = ("zeros", "reflect")


def _as_triple(value, name):
    if isinstance(value, int):
        return (value, value, value)
    t = tuple(int(v) for v in value)
    if len(t) != 3:
        raise ConfigurationError(f"{name} must be an int or length-3 sequence, got {value!r}")
    return t


def _pad_forward(x, pads, mode):
    """Pad T/H/W one axis at a time; reflect falls back to edge for unit axes."""
    for axis, p in zip((2, 3, 4), pads):
        if p == 0:
            continue
        size = x.shape[axis]
        width = [(0, 0)] * 5
        width[axis] = (p, p)
        if mode == "zeros":
            x = np.pad(x, width)
        else:
            if size == 1:
                x = np.pad(x, width, mode="edge")
            else:
                if p > size - 1:
                    raise ConfigurationError(
                        f"reflect padding {p} infeasible for extent {size}"
                    )
                x = np.pad(x, width, mode="reflect")
    return x


def _pad_backward(grad, pads, mode, sizes):
    """Adjoint of `_pad_forward`: crop, folding reflected borders back in."""
    for axis, p, n in zip((4, 3, 2), reversed(pads), reversed(sizes)):
        if p == 0:
            continue
        moved = np.moveaxis(grad, axis, 0)
        core = np.array(moved[p:p + n])
        if mode == "reflect":
            if n == 1:
                core[0] += moved[:p].sum(axis=0) + moved[p + n:].sum(axis=0)
            else:
                for i in range(p):
                    core[p - i] += moved[i]
                    core[n - 2 - i] += moved[p + n + i]
        grad = np.moveaxis(core, 0, axis)
    return grad


def conv3d(x, kernel, groups=1, stride=1, padding="zeros", pad=None):
    """Grouped 3D convolution.

    x:      Tensor (B, C, T, H, W)
    kernel: Tensor (O, C // groups, kt, kh, kw)
    stride: int or (st, sh, sw)
    padding: "zeros" | "reflect"
    pad:    explicit per-axis amounts; defaults to k//2 ("same" for stride 1)
    """
    if x.ndim != 5:
        raise DimensionError(f"conv3d input must be 5-D, got shape {x.shape}")
    if kernel.ndim != 5:
        raise DimensionError(f"conv3d kernel must be 5-D, got shape {kernel.shape}")
    if padding not in _PAD_MODES:
        raise ConfigurationError(f"padding must be one of {_PAD_MODES}, got {padding!r}")
    b, c, t, h, w = x.shape
    o, cg, kt, kh, kw = kernel.shape
    if groups < 1 or c % groups != 0:
        raise ConfigurationError(f"groups={groups} does not divide input channels {c}")
    if o % groups != 0:
        raise ConfigurationError(f"groups={groups} does not divide output channels {o}")
    if cg != c // groups:
        raise DimensionError(
            f"kernel expects {cg} channels per group but input provides {c // groups}"
        )
    stride = _as_triple(stride, "stride")
    pads = _as_triple(pad if pad is not None else (kt // 2, kh // 2, kw // 2), "pad")

    xp = _pad_forward(x.data, pads, padding)
    tp, hp, wp = xp.shape[2:]
    outs = tuple((full - k) // s + 1 for full, k, s in zip((tp, hp, wp), (kt, kh, kw), stride))
    if any(v < 1 for v in outs):
        raise DimensionError(
            f"kernel {kernel.shape[2:]} with stride {stride} exceeds padded input {(tp, hp, wp)}"
        )
    to, ho, wo = outs
    st, sh, sw = stride
    kd = kernel.data
    depthwise = groups == c and cg == 1

    def _slice(arr, i, j, l):
        return arr[:, :, i:i + to * st:st, j:j + ho * sh:sh, l:l + wo * sw:sw]

    if depthwise:
        out = np.zeros((b, c, to, ho, wo), dtype=xp.dtype)
        for i in range(kt):
            for j in range(kh):
                for l in range(kw):
                    out += kd[:, 0, i, j, l].reshape(1, c, 1, 1, 1) * _slice(xp, i, j, l)
    elif groups == 1:
        if (kt, kh, kw) == (1, 1, 1) and stride == (1, 1, 1):
            flat = xp.reshape(b, c, -1)
            out = np.matmul(kd.reshape(o, c)[None], flat).reshape(b, o, to, ho, wo)
        else:
            xt = xp.transpose(0, 2, 3, 4, 1)
            acc = np.zeros((b, to, ho, wo, o), dtype=xp.dtype)
            for i in range(kt):
                for j in range(kh):
                    for l in range(kw):
                        xs = xt[:, i:i + to * st:st, j:j + ho * sh:sh, l:l + wo * sw:sw, :]
                        acc += np.matmul(xs, kd[:, :, i, j, l].T)
            out = acc.transpose(0, 4, 1, 2, 3)
    else:
        og = o // groups
        out = np.zeros((b, o, to, ho, wo), dtype=xp.dtype)
        xt = xp.transpose(0, 2, 3, 4, 1)
        for g in range(groups):
            cs, os_ = g * cg, g * og
            for i in range(kt):
                for j in range(kh):
                    for l in range(kw):
                        xs = xt[:, i:i + to * st:st, j:j + ho * sh:sh, l:l + wo * sw:sw, cs:cs + cg]
                        part = np.matmul(xs, kd[os_:os_ + og, :, i, j, l].T)
                        out[:, os_:os_ + og] += part.transpose(0, 4, 1, 2, 3)

    def vjp(grad_out):
        need_x = x.requires_grad or x._parents
        need_k = kernel.requires_grad or kernel._parents
        gx = gk = None
        if need_k:
            gk = np.zeros_like(kd)
        if need_x:
            gxp = np.zeros_like(xp)
        if depthwise:
            for i in range(kt):
                for j in range(kh):
                    for l in range(kw):
                        xs = _slice(xp, i, j, l)
                        if need_k:
                            gk[:, 0, i, j, l] = (grad_out * xs).sum(axis=(0, 2, 3, 4))
                        if need_x:
                            _slice(gxp, i, j, l)[...] += (
                                kd[:, 0, i, j, l].reshape(1, c, 1, 1, 1) * grad_out
                            )
        elif groups == 1:
            gt = grad_out.transpose(0, 2, 3, 4, 1)
            xt = xp.transpose(0, 2, 3, 4, 1)
            gxt = np.zeros_like(xt) if need_x else None
            contract = ((0, 1, 2, 3), (0, 1, 2, 3))
            for i in range(kt):
                for j in range(kh):
                    for l in range(kw):
                        xs = xt[:, i:i + to * st:st, j:j + ho * sh:sh, l:l + wo * sw:sw, :]
                        if need_k:
                            gk[:, :, i, j, l] = np.tensordot(gt, xs, axes=contract)
                        if need_x:
                            gxt[:, i:i + to * st:st, j:j + ho * sh:sh, l:l + wo * sw:sw, :] += (
                                np.matmul(gt, kd[:, :, i, j, l])
                            )
            if need_x:
                gxp = gxt.transpose(0, 4, 1, 2, 3)
        else:
            og = o // groups
            gt = grad_out.transpose(0, 2, 3, 4, 1)
            xt = xp.transpose(0, 2, 3, 4, 1)
            gxt = np.zeros_like(xt) if need_x else None
            contract = ((0, 1, 2, 3), (0, 1, 2, 3))
            for g in range(groups):
                cs, os_ = g * cg, g * og
                gslab = gt[..., os_:os_ + og]
                for i in range(kt):
                    for j in range(kh):
                        for l in range(kw):
                            xs = xt[:, i:i + to * st:st, j:j + ho * sh:sh, l:l + wo * sw:sw, cs:cs + cg]
                            if need_k:
                                gk[os_:os_ + og, :, i, j, l] = np.tensordot(gslab, xs, axes=contract)
                            if need_x:
                                gxt[:, i:i + to * st:st, j:j + ho * sh:sh, l:l + wo * sw:sw, cs:cs + cg] += (
                                    np.matmul(gslab, kd[os_:os_ + og, :, i, j, l])
                                )
            if need_x:
                gxp = gxt.transpose(0, 4, 1, 2, 3)
        if need_x:
            gx = _pad_backward(gxp, pads, padding, (t, h, w))
        return gx, gk

    return _record(out, (x, kernel), vjp)


def spatial_mean(x, keepdims=True):
    """Average over H and W per (batch, channel, frame)."""
    return x.mean(axis=(3, 4), keepdims=keepdims)


def global_mean(x, keepdims=False):
    """Average over T, H and W per (batch, channel)."""
    return x.mean(axis=(2, 3, 4), keepdims=keepdims)
