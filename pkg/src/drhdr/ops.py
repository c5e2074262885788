"""Neural operators with forward/backward pairs.

Standard, strided and dilated 2-D convolution, modulated deformable
convolution (learned per-pixel offsets plus a sigmoid mask), fixed x2
bilinear upsampling, elementwise activations and channel concatenation.
Convolution inner products accumulate in float64; outputs are stored as
float32 tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, record_op

__all__ = [
    "ConvParams",
    "DeformParams",
    "conv2d",
    "deform_conv2d",
    "bilinear_upsample_x2",
    "leaky_relu",
    "relu",
    "sigmoid",
    "tanh_elem",
    "concat_channels",
]


@dataclass(frozen=True)
class ConvParams:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    dilation: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (1, 1)
    has_bias: bool = True

    @staticmethod
    def same(in_channels: int, out_channels: int, kernel: int = 3, dilation: int = 1,
             stride: int = 1, has_bias: bool = True) -> "ConvParams":
        """3x3-style conv with padding chosen to preserve spatial size at stride 1."""
        pad = dilation * (kernel - 1) // 2
        return ConvParams(in_channels, out_channels, (kernel, kernel), (stride, stride),
                          (dilation, dilation), (pad, pad), has_bias)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw) = self.kernel, self.stride
        (dh, dw), (ph, pw) = self.dilation, self.padding
        oh = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
        ow = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
        if oh <= 0 or ow <= 0:
            raise ValueError(f"convolution output collapses: input {h}x{w}, params {self}")
        return oh, ow

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)


@dataclass(frozen=True)
class DeformParams:
    base: ConvParams
    deform_groups: int = 1

    def __post_init__(self):
        kh, kw = self.base.kernel
        ph, pw = self.base.padding
        if self.base.stride != (1, 1) or self.base.dilation != (1, 1):
            raise ValueError("deformable convolution supports stride 1 / dilation 1 only")
        if (ph, pw) != (kh // 2, kw // 2):
            raise ValueError("deformable convolution requires size-preserving padding")
        if self.base.in_channels % self.deform_groups != 0:
            raise ValueError("in_channels must be divisible by deform_groups")

    @property
    def offset_channels(self) -> int:
        kh, kw = self.base.kernel
        return 2 * kh * kw * self.deform_groups

    @property
    def mask_channels(self) -> int:
        kh, kw = self.base.kernel
        return kh * kw * self.deform_groups


def _check_conv_args(x: Tensor, weight: Tensor, bias: Tensor | None, params: ConvParams, op: str):
    if weight.data.shape != params.weight_shape():
        raise ValueError(f"{op}: weight shape {weight.data.shape} != expected {params.weight_shape()}")
    if x.data.shape[1] != params.in_channels:
        raise ValueError(f"{op}: input has {x.data.shape[1]} channels, expected {params.in_channels}")
    if params.has_bias:
        if bias is None:
            raise ValueError(f"{op}: params declare a bias but none was given")
        if bias.data.shape != (1, params.out_channels, 1, 1):
            raise ValueError(f"{op}: bias shape {bias.data.shape} != (1, {params.out_channels}, 1, 1)")
    elif bias is not None:
        raise ValueError(f"{op}: params declare no bias but one was given")


def _tap_slices(params: ConvParams, oh: int, ow: int):
    (kh, kw), (sh, sw) = params.kernel, params.stride
    dh, dw = params.dilation
    for ky in range(kh):
        ys = slice(ky * dh, ky * dh + (oh - 1) * sh + 1, sh)
        for kx in range(kw):
            yield ys, slice(kx * dw, kx * dw + (ow - 1) * sw + 1, sw)


def _im2col(xd: np.ndarray, params: ConvParams, oh: int, ow: int) -> np.ndarray:
    """Gather conv patches into a float64 (B, C*KH*KW, OH*OW) column stack."""
    b_, c, h, w = xd.shape
    kh, kw = params.kernel
    ph, pw = params.padding
    xpad = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))).astype(np.float64)
    cols = np.empty((b_, c, kh * kw, oh, ow), dtype=np.float64)
    for tap, (ys, xs) in enumerate(_tap_slices(params, oh, ow)):
        cols[:, :, tap] = xpad[:, :, ys, xs]
    return cols.reshape(b_, c * kh * kw, oh * ow)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, params: ConvParams) -> Tensor:
    """Cross-correlation with stride/dilation/zero-padding, differentiable in all
    args; the patch-gather inner product accumulates in float64."""
    _check_conv_args(x, weight, bias, params, "conv2d")
    b_, c, h, w = x.data.shape
    oh, ow = params.out_hw(h, w)
    kh, kw = params.kernel
    o = params.out_channels

    wmat = weight.data.reshape(o, c * kh * kw).astype(np.float64)
    out = np.matmul(wmat, _im2col(x.data, params, oh, ow))   # (B, O, OH*OW)
    out = out.reshape(b_, o, oh, ow)
    if bias is not None:
        out = out + bias.data.astype(np.float64)
    out32 = out.astype(np.float32)

    need_x, need_w = x.requires_grad, weight.requires_grad
    need_b = bias is not None and bias.requires_grad
    xd = x.data
    ph, pw = params.padding

    def bw(g):
        gflat = g.reshape(b_, o, oh * ow).astype(np.float64)
        dx = dw_ = db = None
        if need_w:
            cols = _im2col(xd, params, oh, ow)
            dw_ = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, kh, kw)
        if need_x:
            dcols = np.matmul(wmat.T, gflat).reshape(b_, c, kh * kw, oh, ow)
            dxpad = np.zeros((b_, c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
            for tap, (ys, xs) in enumerate(_tap_slices(params, oh, ow)):
                dxpad[:, :, ys, xs] += dcols[:, :, tap]
            dx = dxpad[:, :, ph:ph + h, pw:pw + w]
        if need_b:
            db = gflat.sum(axis=(0, 2)).reshape(1, o, 1, 1)
        return (dx, dw_, db) if bias is not None else (dx, dw_)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record_op("conv2d", inputs, out32, bw)


def deform_conv2d(x: Tensor, offsets: Tensor, mask: Tensor, weight: Tensor,
                  bias: Tensor | None, params: DeformParams) -> Tensor:
    """Modulated deformable convolution.

    For every output pixel and kernel tap, the input is sampled bilinearly at
    ``p + base_offset(tap) + learned_offset(p, tap)``, scaled by the (already
    sigmoid-activated) mask, then contracted with the kernel weights.
    Samples falling outside the canvas read zero.  Offsets are laid out as
    ``(B, G*K*2, H, W)`` with channel ``((g*K + k)*2 + {0: dy, 1: dx})`` and the
    mask as ``(B, G*K, H, W)`` with channel ``g*K + k``, kernel taps in row-major
    order.  Differentiable w.r.t. input, offsets, mask, weight and bias.
    """
    base = params.base
    _check_conv_args(x, weight, bias, base, "deform_conv2d")
    b_, c, h, w = x.data.shape
    g_ = params.deform_groups
    kh, kw = base.kernel
    k = kh * kw
    cg = c // g_
    o = base.out_channels
    hw = h * w
    if offsets.data.shape != (b_, params.offset_channels, h, w):
        raise ValueError(
            f"deform_conv2d: offsets shape {offsets.data.shape} != {(b_, params.offset_channels, h, w)}")
    if mask.data.shape != (b_, params.mask_channels, h, w):
        raise ValueError(
            f"deform_conv2d: mask shape {mask.data.shape} != {(b_, params.mask_channels, h, w)}")

    off = offsets.data.reshape(b_, g_, k, 2, hw).astype(np.float64)
    m64 = mask.data.reshape(b_, g_, 1, k, hw).astype(np.float64)
    taps_y = (np.repeat(np.arange(kh), kw) - base.padding[0]).astype(np.float64)
    taps_x = (np.tile(np.arange(kw), kh) - base.padding[1]).astype(np.float64)
    grid_y = np.repeat(np.arange(h, dtype=np.float64), w)
    grid_x = np.tile(np.arange(w, dtype=np.float64), h)

    py = grid_y[None, None, None, :] + taps_y[None, None, :, None] + off[:, :, :, 0]
    px = grid_x[None, None, None, :] + taps_x[None, None, :, None] + off[:, :, :, 1]
    y0 = np.floor(py)
    x0 = np.floor(px)
    fy = py - y0  # (B, G, K, HW)
    fx = px - x0

    xflat = x.data.reshape(b_, g_, cg, hw)

    def corner(cy, cx):
        valid = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
        idx = (np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)).astype(np.int64)
        v = np.take_along_axis(xflat, idx.reshape(b_, g_, 1, k * hw), axis=3)
        v = v.reshape(b_, g_, cg, k, hw) * valid[:, :, None, :, :]
        return v, idx, valid

    v00, i00, m00 = corner(y0, x0)
    v01, i01, m01 = corner(y0, x0 + 1)
    v10, i10, m10 = corner(y0 + 1, x0)
    v11, i11, m11 = corner(y0 + 1, x0 + 1)

    wy1, wx1 = fy[:, :, None], fx[:, :, None]          # (B, G, 1, K, HW)
    wy0, wx0 = 1.0 - wy1, 1.0 - wx1
    sampled = v00 * wy0 * wx0 + v01 * wy0 * wx1 + v10 * wy1 * wx0 + v11 * wy1 * wx1
    modulated = sampled * m64

    wmat = weight.data.reshape(o, g_ * cg * k).astype(np.float64)
    out = np.matmul(wmat, modulated.reshape(b_, g_ * cg * k, hw))
    if bias is not None:
        out += bias.data.reshape(1, o, 1).astype(np.float64)
    out32 = out.reshape(b_, o, h, w).astype(np.float32)

    need_x, need_off = x.requires_grad, offsets.requires_grad
    need_m, need_w = mask.requires_grad, weight.requires_grad
    need_b = bias is not None and bias.requires_grad

    def bw(g):
        g64 = g.reshape(b_, o, hw).astype(np.float64)
        dP = np.matmul(wmat.T, g64).reshape(b_, g_, cg, k, hw)
        dw_ = doff = dm = dx = db = None
        if need_w:
            mod_flat = modulated.reshape(b_, g_ * cg * k, hw)
            dw_ = np.matmul(g64, mod_flat.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, kh, kw)
        if need_m:
            dm = (dP * sampled).sum(axis=2).reshape(b_, params.mask_channels, h, w)
        dS = dP * m64
        if need_off:
            dpy = (dS * ((v10 - v00) * wx0 + (v11 - v01) * wx1)).sum(axis=2)
            dpx = (dS * ((v01 - v00) * wy0 + (v11 - v10) * wy1)).sum(axis=2)
            doff = np.empty((b_, g_, k, 2, hw), dtype=np.float64)
            doff[:, :, :, 0] = dpy
            doff[:, :, :, 1] = dpx
            doff = doff.reshape(b_, params.offset_channels, h, w)
        if need_x:
            base_idx = (np.arange(b_)[:, None, None] * g_ + np.arange(g_)[None, :, None]) * cg
            base_idx = (base_idx + np.arange(cg)[None, None, :]) * hw  # (B, G, Cg)
            base_idx = base_idx[:, :, :, None, None]
            acc = np.zeros(b_ * c * hw, dtype=np.float64)
            for vwgt, idx, ok in (
                (wy0 * wx0, i00, m00),
                (wy0 * wx1, i01, m01),
                (wy1 * wx0, i10, m10),
                (wy1 * wx1, i11, m11),
            ):
                contrib = dS * vwgt * ok[:, :, None]
                flat = np.broadcast_to(base_idx + idx[:, :, None], contrib.shape)
                acc += np.bincount(flat.ravel(), weights=contrib.ravel(), minlength=acc.size)
            dx = acc.reshape(b_, c, h, w)
        if need_b:
            db = g64.sum(axis=(0, 2)).reshape(1, o, 1, 1)
        grads = [dx, doff, dm, dw_]
        if bias is not None:
            grads.append(db)
        return tuple(grads)

    inputs = (x, offsets, mask, weight) + ((bias,) if bias is not None else ())
    return record_op("deform_conv2d", inputs, out32, bw)


def _upsample_matrix(n: int) -> np.ndarray:
    """(2n, n) interpolation matrix, half-pixel centers, edges clamped."""
    src = np.clip((np.arange(2 * n, dtype=np.float64) + 0.5) / 2.0 - 0.5, 0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    w1 = src - i0
    a = np.zeros((2 * n, n))
    rows = np.arange(2 * n)
    np.add.at(a, (rows, i0), 1.0 - w1)
    np.add.at(a, (rows, i1), w1)
    return a


def _apply_axis_matrices(arr64: np.ndarray, ay: np.ndarray, ax: np.ndarray) -> np.ndarray:
    t = np.tensordot(arr64, ay, axes=([2], [1]))       # (B, C, W, OH)
    t = np.tensordot(t, ax, axes=([2], [1]))            # (B, C, OH, OW)
    return t


def bilinear_upsample_x2(x: Tensor) -> Tensor:
    """Double H and W with bilinear interpolation (half-pixel sample centers)."""
    b_, c, h, w = x.data.shape
    ay, ax = _upsample_matrix(h), _upsample_matrix(w)
    out = _apply_axis_matrices(x.data.astype(np.float64), ay, ax).astype(np.float32)

    def bw(g):
        return (_apply_axis_matrices(g.astype(np.float64), ay.T, ax.T),)

    return record_op("bilinear_upsample_x2", (x,), out, bw)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    xd = x.data
    out = np.where(xd >= 0, xd, np.float32(slope) * xd)

    def bw(g):
        return (g * np.where(xd >= 0, np.float32(1.0), np.float32(slope)),)

    return record_op("leaky_relu", (x,), out, bw)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, np.float32(0.0))

    def bw(g):
        return (g * (xd >= 0).astype(np.float32),)

    return record_op("relu", (x,), out, bw)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        return (g * out * (np.float32(1.0) - out),)

    return record_op("sigmoid", (x,), out, bw)


def tanh_elem(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        return (g * (np.float32(1.0) - out * out),)

    exact = None
    if x.data.size == 1:
        v = x.exact if x.exact is not None else float(np.float64(x.data.reshape(())))
        exact = float(np.tanh(v))
    return record_op("tanh", (x,), out, bw, exact=exact)


def concat_channels(tensors: list[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("concat_channels: empty input list")
    first = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if (s[0], s[2], s[3]) != (first[0], first[2], first[3]):
            raise ValueError(f"concat_channels: spatial/batch mismatch {first} vs {s}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=1))

    return record_op("concat", tuple(tensors), out, bw)
