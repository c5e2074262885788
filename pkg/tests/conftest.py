"""Shared fixtures and numeric test helpers."""

import numpy as np
import pytest

from drhdr.ops import ConvParams
from drhdr.tensor import Tensor


def rng_for(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def tensor_uniform(rng, shape, lo=0.2, hi=0.8, requires_grad=False) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape).astype(np.float32), requires_grad=requires_grad)


def ramp_image(rng, channels: int, h: int, w: int) -> Tensor:
    """Zero-centered linear ramp per channel; bilinear sampling of it is exact
    and its spatial gradient is bounded away from zero."""
    ii, jj = np.meshgrid(np.arange(h) - h / 2 + 0.5, np.arange(w) - w / 2 + 0.5, indexing="ij")
    planes = []
    for _ in range(channels):
        sy, sx = rng.uniform(0.4, 0.8, 2)
        planes.append(sy * ii + sx * jj)
    return Tensor(np.stack(planes)[None].astype(np.float32))


def deform_offsets(rng, groups: int, h: int, w: int, k: int = 3) -> Tensor:
    """Offsets with magnitude in [0.15, 0.35] whose signs steer border-adjacent
    taps either fully inside the canvas or fully outside it, so every element's
    sampling gradient is either slope-driven or exactly zero (keeps central
    differences clear of bilinear kinks and of the float32 noise floor)."""
    taps = k * k
    mag = rng.uniform(0.15, 0.35, (groups, taps, 2, h, w))
    free = rng.choice([-1.0, 1.0], (groups, taps, 2, h, w))
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sign = np.zeros((taps, 2, h, w))
    for tap in range(taps):
        dy, dx = divmod(tap, k)
        dy -= k // 2
        dx -= k // 2
        qy, qx = ii + dy, jj + dx
        sign[tap, 0] = np.where(qy <= 0, np.where(qy == 0, 1.0, -1.0),
                                np.where(qy >= h - 1, np.where(qy == h - 1, -1.0, 1.0), 0.0))
        sign[tap, 1] = np.where(qx <= 0, np.where(qx == 0, 1.0, -1.0),
                                np.where(qx >= w - 1, np.where(qx == w - 1, -1.0, 1.0), 0.0))
    off = mag * np.where(sign[None] == 0, free, sign[None])
    return Tensor(off.reshape(1, groups * taps * 2, h, w).astype(np.float32))


def conv_reference(xd, wd, bd, params: ConvParams):
    """Brute-force quadruple-loop convolution; the independent oracle."""
    b_, c, h, w = xd.shape
    o = params.out_channels
    (kh, kw), (sh, sw) = params.kernel, params.stride
    (dh, dw), (ph, pw) = params.dilation, params.padding
    oh, ow = params.out_hw(h, w)
    xpad = np.zeros((b_, c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xpad[:, :, ph:ph + h, pw:pw + w] = xd
    out = np.zeros((b_, o, oh, ow), dtype=np.float64)
    for b in range(b_):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ic in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (xpad[b, ic, i * sh + ky * dh, j * sw + kx * dw]
                                        * wd[oc, ic, ky, kx])
                    out[b, oc, i, j] = acc + (bd[0, oc, 0, 0] if bd is not None else 0.0)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)
