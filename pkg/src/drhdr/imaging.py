"""Radiometric conversions, HDR quality metrics and image I/O.

LDR brackets live in [0, 1]; HDR images are linear radiance.  The metric
entry points work on plain numpy arrays; ``mu_law`` and the tanh-percentile
normalizer also accept tensors so the training loss can differentiate
through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError, NumericError
from . import ops
from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ExposureStack",
    "gamma_adjust",
    "mu_law",
    "percentile99",
    "TanhNorm",
    "tanh_norm_p99",
    "psnr",
    "psnr_mu",
    "read_pfm",
    "write_pfm",
    "read_ldr8",
    "write_ldr8",
]

DEFAULT_GAMMA = 2.2
DEFAULT_MU = 5000.0

# values above this size are 99th-percentiled on a seeded subsample
_PCTL_SAMPLE_LIMIT = 1 << 20
_PCTL_SEED = 0x99C11E


@dataclass
class ExposureStack:
    """Three LDR brackets plus exposure times; bracket 2 (index 1) is the reference."""

    ldr: tuple[np.ndarray, np.ndarray, np.ndarray]
    exposure_times: tuple[float, float, float]
    gt_hdr: np.ndarray | None = None

    def __post_init__(self):
        if len(self.ldr) != 3:
            raise ValueError("an exposure stack holds exactly three brackets")
        t1, t2, t3 = self.exposure_times
        if not (0 < t1 < t2 < t3):
            raise ValueError(f"exposure times must be positive and increasing, got {self.exposure_times}")
        shapes = {a.shape for a in self.ldr}
        if len(shapes) != 1:
            raise ValueError(f"bracket shapes differ: {sorted(shapes)}")
        if self.gt_hdr is not None and self.gt_hdr.shape != self.ldr[0].shape:
            raise ValueError("ground truth shape must match the brackets")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.ldr[0].shape


def gamma_adjust(ldr: np.ndarray, t: float, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Map an LDR bracket into the shared linear-radiance domain: ldr**gamma / t."""
    if t <= 0:
        raise ValueError(f"exposure time must be positive, got {t}")
    return (np.asarray(ldr, dtype=np.float32) ** np.float32(gamma)) / np.float32(t)


def mu_law(x, mu: float = DEFAULT_MU):
    """log(1 + mu*x) / log(1 + mu), elementwise; accepts arrays or tensors."""
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    inv_log = 1.0 / np.log1p(mu)
    if isinstance(x, Tensor):
        if x.data.min() < 0:
            raise ValueError("mu_law: input must be nonnegative")
        return T.scale(T.log1p_elem(T.scale(x, mu)), inv_log)
    arr = np.asarray(x)
    if arr.min() < 0:
        raise ValueError("mu_law: input must be nonnegative")
    return np.log1p(mu * arr) * inv_log


def percentile99(values: np.ndarray) -> float:
    """99th percentile; large inputs are reduced on a fixed-seed subsample."""
    flat = np.asarray(values).ravel()
    if flat.size > _PCTL_SAMPLE_LIMIT:
        rng = np.random.default_rng(_PCTL_SEED)
        flat = flat[rng.integers(0, flat.size, _PCTL_SAMPLE_LIMIT)]
    return float(np.percentile(flat.astype(np.float64), 99))


class TanhNorm:
    """x -> tanh(x / p) with p frozen at the 99th percentile of the prediction.

    The percentile is treated as a constant: no gradient flows through p.
    """

    def __init__(self, p: float):
        if not np.isfinite(p) or p <= 0:
            raise NumericError(f"degenerate tanh normalizer, p99 = {p}")
        self.p = float(p)

    def __call__(self, x):
        if isinstance(x, Tensor):
            return ops.tanh_elem(T.scale(x, 1.0 / self.p))
        return np.tanh(np.asarray(x) / self.p)


def tanh_norm_p99(pred) -> TanhNorm:
    data = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    if data.min() < 0:
        raise ValueError("tanh_norm_p99: prediction must be nonnegative")
    return TanhNorm(percentile99(data))


def psnr(pred: np.ndarray, gt: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE), capped at 100 dB so identical images stay sortable."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"psnr: shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return 100.0
    return min(100.0, 10.0 * np.log10(peak * peak / mse))


def psnr_mu(pred: np.ndarray, gt: np.ndarray, mu: float = DEFAULT_MU) -> float:
    """PSNR after normalizing both images by the ground truth's 99th percentile,
    clamping to [0, 1] and applying the mu-law tonemap."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"psnr_mu: shape mismatch {pred.shape} vs {gt.shape}")
    if pred.min() < 0 or gt.min() < 0:
        raise ValueError("psnr_mu: images must be nonnegative")
    p = percentile99(gt)
    if p <= 0:
        raise NumericError("psnr_mu: ground truth 99th percentile is not positive")
    a = mu_law(np.clip(pred / p, 0.0, 1.0), mu)
    b = mu_law(np.clip(gt / p, 0.0, 1.0), mu)
    return psnr(a, b, peak=1.0)


# ---------------------------------------------------------------------------
# image files


def write_pfm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) float32 image as a color PFM (little-endian, rows bottom-to-top)."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"write_pfm expects a (3, H, W) image, got {arr.shape}")
    _, h, w = arr.shape
    interleaved = np.flipud(np.transpose(arr, (1, 2, 0)))  # (H, W, 3), bottom row first
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(interleaved, dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a color PFM written by :func:`write_pfm` (or any PF/-scale file)."""
    with open(path, "rb") as f:
        raw = f.read()

    def fail(msg: str, offset: int):
        raise DataError(f"{path}: {msg} (byte offset {offset})")

    pos = 0

    def next_line():
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            fail("truncated header", pos)
        line = raw[pos:end]
        pos = end + 1
        return line

    magic = next_line().strip()
    if magic == b"Pf":
        raise DataError(f"{path}: grayscale 'Pf' files are not supported (byte offset 0)")
    if magic != b"PF":
        fail(f"bad magic {magic!r}", 0)
    dims_at = pos
    dims = next_line().split()
    if len(dims) != 2:
        fail("malformed dimensions line", dims_at)
    try:
        w, h = int(dims[0]), int(dims[1])
    except ValueError:
        fail("malformed dimensions line", dims_at)
    if w <= 0 or h <= 0:
        fail(f"bad dimensions {w}x{h}", dims_at)
    scale_at = pos
    try:
        scale = float(next_line())
    except ValueError:
        fail("malformed scale line", scale_at)
    if scale == 0:
        fail("zero scale", scale_at)
    dtype = "<f4" if scale < 0 else ">f4"
    expected = w * h * 3 * 4
    if len(raw) - pos < expected:
        fail(f"truncated payload, expected {expected} bytes, have {len(raw) - pos}", pos)
    data = np.frombuffer(raw, dtype=dtype, count=w * h * 3, offset=pos)
    img = np.flipud(data.reshape(h, w, 3)).astype(np.float32)
    return np.ascontiguousarray(np.transpose(img, (2, 0, 1)))


def read_ldr8(path) -> np.ndarray:
    """Read an 8-bit RGB image into a (3, H, W) float32 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32)
    except FileNotFoundError:
        raise
    except Exception as exc:  # Pillow raises a zoo of format errors
        raise DataError(f"{path}: cannot decode LDR image: {exc}") from exc
    return np.ascontiguousarray(np.transpose(rgb / 255.0, (2, 0, 1)))


def write_ldr8(path, image: np.ndarray) -> None:
    """Write a (3, H, W) [0, 1] image as an 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"write_ldr8 expects a (3, H, W) image, got {arr.shape}")
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(np.transpose(q, (1, 2, 0))).save(path)
