"""Convolution and batch normalization with hand-written backward rules.

Convolutions use im2col: the padded input is viewed as overlapping patches
with ``as_strided``, copied into a matrix, and multiplied with the flattened
kernel.  The transposed convolution is the exact adjoint of :func:`conv2d`
for the same kernel (``kernel[C_out_of_conv, C_in_of_conv, k, k]``).
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from glf.core.tensor import as_tensor, make_op
from glf.errors import ConfigurationError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _out_extent(n, k, stride, padding, op):
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"{op}: spatial extent {n} does not divide exactly "
            f"(kernel {k}, stride {stride}, padding {padding}); an even extent is required")
    return span // stride + 1


def _im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    patches = as_strided(xp, (n, ho, wo, c, k, k), (sn, sh * stride, sw * stride, sc, sh, sw),
                         writeable=False)
    return patches.reshape(n * ho * wo, c * k * k)


def _col2im(cols, shape, k, stride, ho, wo):
    """Scatter-add patch columns of shape (N, Ho, Wo, C, k, k) into ``shape``."""
    out = np.zeros(shape, dtype=cols.dtype)
    patches = cols.transpose(0, 3, 4, 5, 1, 2)  # N, C, k, k, Ho, Wo
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += patches[:, :, i, j]
    return out


def _check_dtypes(op, *tensors):
    dtypes = {t.dtype for t in tensors if t is not None}
    if len(dtypes) > 1:
        raise ConfigurationError(f"{op}: mixed dtypes {sorted(map(str, dtypes))}")


def conv2d(x, kernel, bias=None, stride=2, padding=1):
    """2-d cross-correlation: ``x[N,C,H,W] * kernel[Co,C,k,k] -> [N,Co,Ho,Wo]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    bias = None if bias is None else as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigurationError("conv2d: expected x[N,C,H,W] and kernel[Co,C,k,k]")
    n, c, h, w = x.shape
    co, ci, k, k2 = kernel.shape
    if ci != c or k != k2:
        raise ConfigurationError(f"conv2d: kernel {kernel.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (co,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({co},)")
    _check_dtypes("conv2d", x, kernel, bias)
    ho = _out_extent(h, k, stride, padding, "conv2d")
    wo = _out_extent(w, k, stride, padding, "conv2d")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    kmat = kernel.data.reshape(co, c * k * k)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
    padded_shape = xp.shape

    def bw(g):
        gt = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gx = gk = gb = None
        if x.requires_grad:
            dcols = (gt @ kmat).reshape(n, ho, wo, c, k, k)
            gx = _col2im(dcols, padded_shape, k, stride, ho, wo)
            if p:
                gx = np.ascontiguousarray(gx[:, :, p:p + h, p:p + w])
        if kernel.requires_grad:
            gk = (gt.T @ cols).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = gt.sum(axis=0)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_op(out, parents, bw, "conv2d")


def conv_transpose2d(x, kernel, bias=None, stride=2, padding=1):
    """Transposed convolution: ``x[N,Ci,H,W]``, ``kernel[Ci,Co,k,k] -> [N,Co,Ho,Wo]``.

    With stride 2, padding 1 and a 4x4 kernel the spatial extents double.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    bias = None if bias is None else as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ConfigurationError("conv_transpose2d: expected x[N,Ci,H,W] and kernel[Ci,Co,k,k]")
    n, ci, h, w = x.shape
    kci, co, k, k2 = kernel.shape
    if kci != ci or k != k2:
        raise ConfigurationError(f"conv_transpose2d: kernel {kernel.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (co,):
        raise ConfigurationError(f"conv_transpose2d: bias shape {bias.shape} != ({co},)")
    _check_dtypes("conv_transpose2d", x, kernel, bias)
    p = padding
    hp = (h - 1) * stride + k
    wp = (w - 1) * stride + k
    ho, wo = hp - 2 * p, wp - 2 * p
    if ho <= 0 or wo <= 0:
        raise ConfigurationError("conv_transpose2d: padding too large for input")
    xt = x.data.transpose(0, 2, 3, 1).reshape(-1, ci)
    kmat = kernel.data.reshape(ci, co * k * k)
    cols = (xt @ kmat).reshape(n, h, w, co, k, k)
    out = _col2im(cols, (n, co, hp, wp), k, stride, h, w)
    if p:
        out = out[:, :, p:p + ho, p:p + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gcols = _im2col(gp, k, stride, h, w)
        gx = gk = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gcols @ kmat.T).reshape(n, h, w, ci).transpose(0, 3, 1, 2))
        if kernel.requires_grad:
            gk = (xt.T @ gcols).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_op(out, parents, bw, "conv_transpose2d")


def batchnorm(x, gamma, beta, running_mean, running_var, training,
              momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization over every axis except axis 1.

    ``running_mean`` and ``running_var`` are numpy buffers; in training mode
    they are updated in place (unbiased variance, as is conventional).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2:
        raise ConfigurationError("batchnorm: expected x[N, C, ...]")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"batchnorm: affine parameters must have shape ({c},)")
    _check_dtypes("batchnorm", x, gamma, beta)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    dt = xd.dtype.type
    if training:
        if x.shape[0] < 2:
            raise ConfigurationError("batchnorm: training mode needs a batch of at least 2")
        m = xd.size // c
        mean = xd.mean(axis=axes)
        centered = xd - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        m = None
        centered = xd - running_mean.astype(xd.dtype).reshape(bshape)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + dt(eps))).astype(xd.dtype)
    xhat = centered * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (inv.reshape(bshape) / dt(m)) * (dt(m) * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv.reshape(bshape)
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        return gx, gg, gb

    return make_op(out, (x, gamma, beta), bw, "batchnorm")


def pad2d(x, pad, value=0.0):
    """Constant padding of the two trailing axes by ``pad`` on every side."""
    x = as_tensor(x)
    if pad == 0:
        return x
    widths = ((0, 0),) * (x.ndim - 2) + ((pad, pad), (pad, pad))
    out = np.pad(x.data, widths, constant_values=value)
    h, w = x.shape[-2:]
    return make_op(out, (x,), lambda g: (np.ascontiguousarray(g[..., pad:pad + h, pad:pad + w]),),
                   "pad2d")
