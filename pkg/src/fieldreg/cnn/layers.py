"""Forward/backward primitives on NHWC float64 batches.

Kernels are stored ``(C_out, C_in, kh, kw)``. Convolution is cross-correlation
over a zero-padded input, no bias.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidArgument
from ..field import Field
from .spec import ConvSpec


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def _windows(xp, kh, kw, stride, ho, wo):
    # (N, Ho, Wo, C, kh, kw) view
    v = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return v[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def _shift_conv(x, kernel, padding):
    # Stride 1: on the padded batch flattened to (N*Hp*Wp, C) every kernel tap is
    # a row shift, so each tap is one contiguous GEMM. Rows whose window wraps
    # into the next row/sample are computed and then discarded.
    n, h, w, c = x.shape
    co, _, kh, kw = kernel.shape
    xp = _pad(x, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    X = xp.reshape(-1, c)
    m = X.shape[0] - ((kh - 1) * wp + (kw - 1))
    taps = np.ascontiguousarray(kernel.transpose(2, 3, 1, 0))  # (kh, kw, C, Co), BLAS-friendly
    out = np.zeros((X.shape[0], co))
    for p in range(kh):
        for q in range(kw):
            s = p * wp + q
            out[:m] += X[s : s + m] @ taps[p, q]
    return out.reshape(n, hp, wp, co)[:, : hp - kh + 1, : wp - kw + 1]


def _shift_conv_backward(dout, x, kernel, padding):
    n, h, w, c = x.shape
    co, _, kh, kw = kernel.shape
    _, ho, wo, _ = dout.shape
    xp = _pad(x, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    X = xp.reshape(-1, c)
    m = X.shape[0] - ((kh - 1) * wp + (kw - 1))
    D = np.zeros((n, hp, wp, co))
    D[:, :ho, :wo] = dout
    D = D.reshape(-1, co)[:m]
    taps = np.ascontiguousarray(kernel.transpose(2, 3, 0, 1))  # (kh, kw, Co, C)
    dX = np.zeros_like(X)
    dk = np.empty((kh, kw, co, c))
    for p in range(kh):
        for q in range(kw):
            s = p * wp + q
            dk[p, q] = D.T @ X[s : s + m]
            dX[s : s + m] += D @ taps[p, q]
    dx = dX.reshape(n, hp, wp, c)[:, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(dx), dk.transpose(2, 3, 0, 1).copy()


def conv2d(x, kernel, stride=1, padding=0):
    n, h, w, c = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise InvalidArgument(f"kernel expects {ci} input channels, input has {c}")
    ho = (h - kh + 2 * padding) // stride + 1
    wo = (w - kw + 2 * padding) // stride + 1
    if ho < 1 or wo < 1:
        raise InvalidArgument("convolution output would be empty")
    if kh == 1 and kw == 1 and padding == 0:
        xs = x[:, ::stride, ::stride][:, :ho, :wo]
        return xs @ kernel[:, :, 0, 0].T
    if stride == 1:
        return np.ascontiguousarray(_shift_conv(x, kernel, padding))
    cols = _windows(_pad(x, padding), kh, kw, stride, ho, wo).reshape(n * ho * wo, c * kh * kw)
    return (cols @ kernel.reshape(co, -1).T).reshape(n, ho, wo, co)


def conv2d_backward(dout, x, kernel, stride=1, padding=0):
    """Gradients w.r.t. input and kernel."""
    n, h, w, c = x.shape
    co, ci, kh, kw = kernel.shape
    _, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, co)
    if kh == 1 and kw == 1 and padding == 0:
        xs = x[:, ::stride, ::stride][:, :ho, :wo]
        dk = (d2.T @ xs.reshape(-1, c)).reshape(co, ci, 1, 1)
        dx = np.zeros_like(x)
        dx[:, ::stride, ::stride][:, :ho, :wo] = dout @ kernel[:, :, 0, 0]
        return dx, dk
    if stride == 1:
        return _shift_conv_backward(dout, x, kernel, padding)
    xp = _pad(x, padding)
    cols = _windows(xp, kh, kw, stride, ho, wo).reshape(n * ho * wo, c * kh * kw)
    dk = (d2.T @ cols).reshape(kernel.shape)
    dcols = (d2 @ kernel.reshape(co, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros_like(xp)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for p in range(kh):
        for q in range(kw):
            dxp[:, p : p + span_h : stride, q : q + span_w : stride] += dcols[..., p, q]
    if padding:
        dxp = dxp[:, padding:-padding, padding:-padding]
    return dxp, dk


def relu(x, eps=0.0):
    """max(x, eps) and the 0/1 derivative mask (0 at and below the threshold)."""
    mask = x > eps
    return np.where(mask, x, eps), mask


def batchnorm_train(x, alpha, beta, eps=1e-5):
    """Normalise with batch statistics over (N, H, W) per channel."""
    mu = x.mean(axis=(0, 1, 2))
    xc = x - mu
    var = (xc * xc).mean(axis=(0, 1, 2))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return alpha * xhat + beta, (xhat, inv_std, mu, var)


def batchnorm_infer(x, alpha, beta, running_mean, running_var, eps=1e-5):
    return alpha * (x - running_mean) / np.sqrt(running_var + eps) + beta


def batchnorm_backward(dout, alpha, cache):
    xhat, inv_std, _, _ = cache
    dalpha = (dout * xhat).sum(axis=(0, 1, 2))
    dbeta = dout.sum(axis=(0, 1, 2))
    dxhat = dout * alpha
    dx = inv_std * (dxhat - dxhat.mean(axis=(0, 1, 2)) - xhat * (dxhat * xhat).mean(axis=(0, 1, 2)))
    return dx, dalpha, dbeta


def cubic_kernel(s, a=-0.5):
    s = np.abs(s)
    return np.where(
        s <= 1.0,
        (a + 2.0) * s**3 - (a + 3.0) * s**2 + 1.0,
        np.where(s < 2.0, a * s**3 - 5.0 * a * s**2 + 8.0 * a * s - 4.0 * a, 0.0),
    )


def resize_matrix(n_in, n_out, a=-0.5):
    """(n_out, n_in) cubic-convolution interpolation matrix.

    Half-pixel (align-corners false) coordinates, taps clamped at the edges.
    """
    if n_in < 1 or n_out < 1:
        raise InvalidArgument("resize sizes must be >= 1")
    R = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    for tap in range(-1, 3):
        wgt = cubic_kernel(frac - tap, a)
        idx = np.clip(base + tap, 0, n_in - 1)
        np.add.at(R, (np.arange(n_out), idx), wgt)
    return R


def resize_nhwc(x, rh, rw):
    t = np.einsum("oh,nhwc->nowc", rh, x, optimize=True)
    return np.einsum("pw,nowc->nopc", rw, t, optimize=True)


def resize_nhwc_adjoint(g, rh, rw):
    return resize_nhwc(g, rh.T, rw.T)


# Field-level conveniences


def conv2d_forward(x, spec, kernel):
    """Single-field convolution; ``x`` is a Field, returns a Field."""
    if not isinstance(spec, ConvSpec):
        raise InvalidArgument("spec must be a ConvSpec")
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.channels != spec.in_channels:
        raise InvalidArgument(f"input has {x.channels} channels, spec expects {spec.in_channels}")
    expected = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
    if kernel.shape != expected:
        raise InvalidArgument(f"kernel shape {kernel.shape} != {expected}")
    out = conv2d(x.data.transpose(1, 2, 0)[None], kernel, spec.stride, spec.padding)
    return Field(out[0].transpose(2, 0, 1))


def bicubic_resize(x, target_h, target_w):
    """Resize a Field (channels independently) to ``target_h x target_w``."""
    if target_h < 1 or target_w < 1:
        raise InvalidArgument("resize targets must be >= 1")
    rh = resize_matrix(x.rows, target_h)
    rw = resize_matrix(x.cols, target_w)
    return Field(np.einsum("oh,chw,pw->cop", rh, x.data, rw, optimize=True))


def bicubic_resize_adjoint(g, source_h, source_w):
    """Transpose action of :func:`bicubic_resize` from ``g``'s size back to the source size."""
    rh = resize_matrix(source_h, g.rows)
    rw = resize_matrix(source_w, g.cols)
    return Field(np.einsum("oh,cop,pw->chw", rh, g.data, rw, optimize=True))
