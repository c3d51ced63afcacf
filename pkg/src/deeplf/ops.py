"""Dense 4-D tensor numerics with hand-derived adjoints.

All operations work on plain numpy arrays laid out (batch, channel, height,
width).  Forward functions return ``(output, cache)``; the matching
``*_backward`` consumes the upstream gradient plus that cache and returns
exact gradients.  Everything runs in the dtype of its input: float32 during
training, float64 when gradients are verified against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConvSpec",
    "conv2d",
    "conv2d_backward",
    "bilinear_resize",
    "bilinear_resize_backward",
    "batch_norm",
    "batch_norm_backward",
    "relu",
    "relu_backward",
    "global_avg_pool",
    "global_avg_pool_backward",
    "gradient_check",
]


def _require_nchw(x, name="input"):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")
    return x


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a dilated 2-D convolution.

    ``dilation`` is the tap spacing: kernel element ``k`` reads the input
    ``k * dilation`` pixels from the window origin, so ``dilation=1`` is an
    ordinary convolution.  ``padding`` zero-pads all four sides.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.out_channels < 1:
            raise ValueError(f"out_channels must be >= 1, got {self.out_channels}")
        kh, kw = self.kernel
        if kh < 1 or kw < 1:
            raise ValueError(f"kernel dims must be positive, got {self.kernel}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        kh, kw = self.kernel
        return (self.out_channels, self.in_channels, kh, kw)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        """Output spatial size for an h x w input; rejects sizes < 1."""
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        ow = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(
                f"convolution output size {oh}x{ow} < 1 for input {h}x{w} "
                f"(kernel {self.kernel}, stride {self.stride}, "
                f"dilation {self.dilation}, padding {self.padding})"
            )
        return oh, ow


def _is_pointwise(spec: ConvSpec) -> bool:
    return spec.kernel == (1, 1) and spec.stride == 1 and spec.padding == 0


def _im2col(x, spec: ConvSpec, oh, ow):
    """Gather kernel windows into a (n, c*kh*kw, oh*ow) matrix.

    One slice-copy per kernel tap; the tap spacing is ``spec.dilation`` and
    the window step is ``spec.stride``.
    """
    n, c, h, w = x.shape
    if _is_pointwise(spec):
        return x.reshape(n, c, h * w)
    kh, kw = spec.kernel
    s, d, p = spec.stride, spec.dilation, spec.padding
    if p > 0:
        xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, :, p : p + h, p : p + w] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for a in range(kh):
        ia = a * d
        for b in range(kw):
            jb = b * d
            cols[:, :, a, b] = xp[
                :, :, ia : ia + (oh - 1) * s + 1 : s, jb : jb + (ow - 1) * s + 1 : s
            ]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(gcols, spec: ConvSpec, x_shape, oh, ow):
    """Adjoint of :func:`_im2col`: scatter-add window gradients back."""
    n, c, h, w = x_shape
    if _is_pointwise(spec):
        return gcols.reshape(x_shape)
    kh, kw = spec.kernel
    s, d, p = spec.stride, spec.dilation, spec.padding
    gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=gcols.dtype)
    g = gcols.reshape(n, c, kh, kw, oh, ow)
    for a in range(kh):
        ia = a * d
        for b in range(kw):
            jb = b * d
            gxp[
                :, :, ia : ia + (oh - 1) * s + 1 : s, jb : jb + (ow - 1) * s + 1 : s
            ] += g[:, :, a, b]
    if p > 0:
        return gxp[:, :, p : p + h, p : p + w].copy()
    return gxp


def conv2d(x, spec: ConvSpec, weight, bias=None):
    """Dilated 2-D convolution.

    y[n,o,i,j] = bias[o]
               + sum_{c,a,b} x[n, c, i*stride + a*dilation - pad,
                                    j*stride + b*dilation - pad] * w[o,c,a,b]

    with out-of-range taps reading zero.  Returns ``(y, cache)``.
    """
    x = _require_nchw(x)
    weight = np.asarray(weight)
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(
            f"input has {c} channels, spec expects {spec.in_channels}"
        )
    if weight.shape != spec.weight_shape:
        raise ValueError(
            f"weight shape {weight.shape} does not match spec {spec.weight_shape}"
        )
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (spec.out_channels,):
            raise ValueError(
                f"bias length {bias.shape} does not match out_channels "
                f"{spec.out_channels}"
            )
    oh, ow = spec.output_size(h, w)
    cols = _im2col(x, spec, oh, ow)
    wmat = weight.reshape(spec.out_channels, -1)
    y = np.matmul(wmat, cols)
    if bias is not None:
        y = y + bias[:, None]
    y = y.reshape(n, spec.out_channels, oh, ow)
    cache = (cols, weight, spec, x.shape, oh, ow)
    return y, cache


def conv2d_backward(gy, cache):
    """Exact adjoint of :func:`conv2d`: returns (gx, gweight, gbias)."""
    cols, weight, spec, x_shape, oh, ow = cache
    gy = _require_nchw(gy, "output gradient")
    n = x_shape[0]
    if gy.shape != (n, spec.out_channels, oh, ow):
        raise ValueError(
            f"output gradient shape {gy.shape} does not match forward output "
            f"{(n, spec.out_channels, oh, ow)}"
        )
    gym = gy.reshape(n, spec.out_channels, oh * ow)
    wmat = weight.reshape(spec.out_channels, -1)
    gbias = gy.sum(axis=(0, 2, 3))
    gweight = np.matmul(gym, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    gcols = np.matmul(wmat.T, gym)
    gx = _col2im(gcols, spec, x_shape, oh, ow)
    return gx, gweight, gbias


def _resize_matrix(in_size, out_size, dtype):
    """Interpolation matrix m (out x in): y = m @ x along one axis.

    Half-pixel centers: src = (dst + 0.5) * in/out - 0.5, clamped to the
    valid range, then a linear blend of the two neighbours.
    """
    dst = np.arange(out_size, dtype=np.float64)
    src = np.clip((dst + 0.5) * (in_size / out_size) - 0.5, 0.0, in_size - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, in_size - 1)
    frac = src - i0
    i1 = np.minimum(i0 + 1, in_size - 1)
    m = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype, copy=False)


def bilinear_resize(x, out_h, out_w):
    """Bilinear resize to (out_h, out_w) with half-pixel sample centers.

    Separable: y = Rh @ x @ Rw^T per (batch, channel) slice, which makes the
    adjoint an exact transpose.  Returns ``(y, cache)``.
    """
    x = _require_nchw(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    rh = _resize_matrix(h, out_h, x.dtype)
    rw = _resize_matrix(w, out_w, x.dtype)
    y = np.matmul(np.matmul(rh, x), rw.T)
    cache = (rh, rw, x.shape)
    return y, cache


def bilinear_resize_backward(gy, cache):
    """Adjoint of :func:`bilinear_resize`: gx = Rh^T @ gy @ Rw."""
    rh, rw, x_shape = cache
    gy = _require_nchw(gy, "output gradient")
    gx = np.matmul(rh.T, np.matmul(gy, rw))
    if gx.shape != x_shape:
        raise ValueError(
            f"gradient shape {gy.shape} inconsistent with forward input {x_shape}"
        )
    return gx


def batch_norm(
    x,
    gamma,
    beta,
    running_mean,
    running_var,
    mode,
    epsilon=1e-5,
    momentum=0.1,
):
    """Per-channel batch normalization.

    Train mode normalizes by the batch mean/variance (biased, over batch and
    spatial axes) and folds them into the running statistics in place with
    the given momentum.  Eval mode normalizes by the running statistics and
    requires them to exist.  Returns ``(y, cache)``.
    """
    x = _require_nchw(x)
    c = x.shape[1]
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    if gamma.shape != (c,):
        raise ValueError(f"gamma length {gamma.shape} != channel count {c}")
    if beta.shape != (c,):
        raise ValueError(f"beta length {beta.shape} != channel count {c}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    if mode == "train":
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.astype(running_mean.dtype)
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var.astype(running_var.dtype)
    else:
        if running_mean is None or running_var is None:
            raise ValueError("eval mode requires running statistics")
        mu = np.asarray(running_mean, dtype=x.dtype)
        var = np.asarray(running_var, dtype=x.dtype)

    inv_std = 1.0 / np.sqrt(var + epsilon)
    xn = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xn + beta[None, :, None, None]
    cache = (mode, xn, inv_std, gamma)
    return y, cache


def batch_norm_backward(gy, cache):
    """Exact adjoint of :func:`batch_norm`: returns (gx, ggamma, gbeta).

    In train mode the batch statistics depend on x, so the input gradient
    carries the mean/variance correction terms; in eval mode the statistics
    are constants and the map is a per-channel affine scaling.
    """
    mode, xn, inv_std, gamma = cache
    gy = _require_nchw(gy, "output gradient")
    ggamma = (gy * xn).sum(axis=(0, 2, 3))
    gbeta = gy.sum(axis=(0, 2, 3))
    if mode == "train":
        gxn = gy * gamma[None, :, None, None]
        mean_gxn = gxn.mean(axis=(0, 2, 3), keepdims=True)
        mean_gxn_xn = (gxn * xn).mean(axis=(0, 2, 3), keepdims=True)
        gx = inv_std[None, :, None, None] * (gxn - mean_gxn - xn * mean_gxn_xn)
    else:
        gx = gy * (gamma * inv_std)[None, :, None, None]
    return gx, ggamma, gbeta


def relu(x):
    """Elementwise max(0, x).  Returns ``(y, cache)``."""
    x = np.asarray(x)
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), mask


def relu_backward(gy, cache):
    """Pass-through where the input was > 0, zero elsewhere (0 at exactly 0)."""
    return np.asarray(gy) * cache


def global_avg_pool(x):
    """Mean over the spatial axes, keeping (n, c, 1, 1).  Returns (y, cache)."""
    x = _require_nchw(x)
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"spatial dims must be >= 1, got {x.shape}")
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def global_avg_pool_backward(gy, cache):
    """Spread the upstream gradient uniformly: g / (h*w) at every position."""
    n, c, h, w = cache
    gy = _require_nchw(gy, "output gradient")
    gx = np.empty(cache, dtype=gy.dtype)
    gx[...] = gy / (h * w)
    return gx


def gradient_check(loss_fn, params, grads, epsilon=1e-5, rng=None, max_probes=None):
    """Verify analytic gradients of a scalar loss against central differences.

    ``loss_fn(params) -> float`` re-evaluates the loss at the current
    parameter values and ``grads`` carries the analytic gradient arrays to
    verify, one per parameter.  Every parameter element (or a seeded random
    subset of ``max_probes`` elements over all arrays) is perturbed in place
    by +/- ``epsilon`` and the analytic entry is compared against
    ``(f(p+eps) - f(p-eps)) / (2 eps)``.

    Returns the worst relative error, where each comparison is normalized by
    ``max(|analytic|, |numeric|, 1e-3)``; the floor keeps round-off noise on
    zero-gradient entries from registering as error.

    The parameters must be float64 arrays; they are restored exactly after
    probing.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    for p in params:
        if not isinstance(p, np.ndarray) or p.dtype != np.float64:
            raise ValueError("gradient_check requires float64 ndarray parameters")
    if len(grads) != len(params):
        raise ValueError("one analytic gradient required per parameter")
    for p, g in zip(params, grads):
        if np.shape(g) != p.shape:
            raise ValueError(
                f"gradient shape {np.shape(g)} does not match parameter {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite analytic gradient during gradient check")

    probes = [(pi, idx) for pi, p in enumerate(params) for idx in range(p.size)]
    if max_probes is not None and len(probes) > max_probes:
        if rng is None:
            rng = np.random.default_rng(0)
        chosen = rng.choice(len(probes), size=max_probes, replace=False)
        probes = [probes[i] for i in chosen]

    worst = 0.0
    for pi, idx in probes:
        p = params[pi]
        orig = p.flat[idx]
        p.flat[idx] = orig + epsilon
        lp = loss_fn(params)
        p.flat[idx] = orig - epsilon
        lm = loss_fn(params)
        p.flat[idx] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise ValueError(
                f"non-finite loss while probing parameter {pi} element {idx}"
            )
        numeric = (lp - lm) / (2.0 * epsilon)
        analytic = np.asarray(grads[pi]).flat[idx]
        denom = max(abs(analytic), abs(numeric), 1e-3)
        rel = abs(analytic - numeric) / denom
        if rel > worst:
            worst = rel
    return worst
