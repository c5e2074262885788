"""Deterministic synthetic exposure-stack generation and dataset plumbing.

Scenes are smooth radiance fields with Gaussian blobs spanning a configurable
luminance range.  The non-reference brackets are rendered from a translated
copy of the scene so the stacks carry genuine misalignment (the ghosting
stimulus), and every LDR picks up clipped sensor noise.  On disk a stack is a
directory with three 8-bit LDR images, the ground truth as a PFM and a JSON
sidecar with the exposure times.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .imaging import (DEFAULT_GAMMA, ExposureStack, gamma_adjust, read_ldr8,
                      read_pfm, write_ldr8, write_pfm)

__all__ = [
    "SceneParams",
    "gen_scene",
    "gen_dataset",
    "crop_patches",
    "augment",
    "split_dataset",
    "save_stack",
    "load_stack",
    "load_dataset",
    "write_dataset",
    "reference_passthrough",
]

DEFAULT_EXPOSURES = (0.25, 1.0, 4.0)


@dataclass(frozen=True)
class SceneParams:
    seed: int = 0
    size: tuple[int, int] = (128, 128)
    n_blobs: int = 8
    luminance_range: tuple[float, float] = (0.02, 8.0)
    motion_px: int = 6
    noise_sigma: float = 0.005
    exposure_times: tuple[float, float, float] = DEFAULT_EXPOSURES
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        h, w = self.size
        if h % 2 or w % 2:
            raise ValueError(f"scene size must be even, got {self.size}")
        if self.luminance_range[0] < 0 or self.motion_px < 0:
            raise ValueError("luminance floor and motion must be nonnegative")


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate (3, H, W) content by (dy, dx) with edge replication."""
    if dy == 0 and dx == 0:
        return img
    h, w = img.shape[1:]
    pad = np.pad(img, ((0, 0), (abs(dy), abs(dy)), (abs(dx), abs(dx))), mode="edge")
    y0, x0 = abs(dy) - dy, abs(dx) - dx
    return pad[:, y0:y0 + h, x0:x0 + w]


def gen_scene(params: SceneParams) -> ExposureStack:
    """Render one exposure stack; identical seeds give bit-identical stacks."""
    rng = np.random.default_rng(params.seed)
    h, w = params.size
    lo, hi = params.luminance_range

    # smooth base field: bilinear blow-up of a coarse random grid
    coarse = rng.uniform(0.0, 1.0, (3, 4, 4))
    yi = np.linspace(0, 3, h)
    xi = np.linspace(0, 3, w)
    y0 = np.clip(yi.astype(int), 0, 2)
    x0 = np.clip(xi.astype(int), 0, 2)
    fy = (yi - y0)[None, :, None]
    fx = (xi - x0)[None, None, :]
    c00 = coarse[:, y0][:, :, x0]
    c01 = coarse[:, y0][:, :, x0 + 1]
    c10 = coarse[:, y0 + 1][:, :, x0]
    c11 = coarse[:, y0 + 1][:, :, x0 + 1]
    base = c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx + c10 * fy * (1 - fx) + c11 * fy * fx
    scene = lo + base * (0.25 * (hi - lo))

    # bright blobs push selected regions toward the top of the luminance range
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for _ in range(params.n_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sig = rng.uniform(0.04, 0.16) * min(h, w)
        amp = rng.uniform(0.3, 1.0) * hi
        color = rng.uniform(0.5, 1.0, 3)
        blob = np.exp(-((ii - cy) ** 2 + (jj - cx) ** 2) / (2 * sig * sig))
        scene = scene + amp * color[:, None, None] * blob
    scene = scene.astype(np.float32)

    t = params.exposure_times
    inv_g = 1.0 / params.gamma
    ldrs = []
    for i in range(3):
        view = scene
        if i != 1 and params.motion_px > 0:
            dy = int(rng.integers(-params.motion_px, params.motion_px + 1))
            dx = int(rng.integers(-params.motion_px, params.motion_px + 1))
            view = _shift(scene, dy, dx)
        clean = np.clip(view * t[i], 0.0, None) ** inv_g
        noisy = clean + params.noise_sigma * rng.standard_normal(clean.shape)
        ldrs.append(np.clip(noisy, 0.0, 1.0).astype(np.float32))
    return ExposureStack(ldr=tuple(ldrs), exposure_times=t, gt_hdr=scene)


def gen_dataset(params: SceneParams, n: int) -> list[ExposureStack]:
    """n stacks with seeds params.seed, params.seed+1, ..."""
    return [gen_scene(replace(params, seed=params.seed + i)) for i in range(n)]


def crop_patches(stack: ExposureStack, size: int = 250, stride: int = 250) -> list[ExposureStack]:
    """Grid crops at multiples of ``stride`` plus a clamped final anchor so the
    image edges are always covered."""
    h, w = stack.shape[1:]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than the patch size {size}")

    def anchors(dim: int) -> list[int]:
        a = list(range(0, dim - size + 1, stride))
        if a[-1] != dim - size:
            a.append(dim - size)
        return a

    out = []
    for y in anchors(h):
        for x in anchors(w):
            sl = (slice(None), slice(y, y + size), slice(x, x + size))
            out.append(ExposureStack(
                ldr=tuple(np.ascontiguousarray(l[sl]) for l in stack.ldr),
                exposure_times=stack.exposure_times,
                gt_hdr=None if stack.gt_hdr is None else np.ascontiguousarray(stack.gt_hdr[sl]),
            ))
    return out


def augment(stack: ExposureStack, rng: np.random.Generator) -> ExposureStack:
    """One of {nothing, vflip, hflip, rot90}, uniformly, applied to every
    bracket and the ground truth alike."""
    choice = int(rng.integers(0, 4))
    if choice == 0:
        return stack
    if choice == 3:
        h, w = stack.shape[1:]
        if h != w:
            raise ValueError("rotation augmentation needs square patches")

    def tf(a: np.ndarray) -> np.ndarray:
        if choice == 1:
            out = a[:, ::-1, :]
        elif choice == 2:
            out = a[:, :, ::-1]
        else:
            out = np.rot90(a, axes=(1, 2))
        return np.ascontiguousarray(out)

    return ExposureStack(
        ldr=tuple(tf(l) for l in stack.ldr),
        exposure_times=stack.exposure_times,
        gt_hdr=None if stack.gt_hdr is None else tf(stack.gt_hdr),
    )


def split_dataset(stacks: list, n_val: int, seed: int) -> tuple[list, list]:
    """Seeded shuffle into disjoint, exhaustive (train, val) lists."""
    if n_val >= len(stacks):
        raise ValueError(f"n_val={n_val} must be smaller than the dataset ({len(stacks)})")
    order = np.random.default_rng(seed).permutation(len(stacks))
    val = [stacks[i] for i in order[:n_val]]
    train = [stacks[i] for i in order[n_val:]]
    return train, val


def reference_passthrough(stack: ExposureStack, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """HDR estimate using only the reference bracket: its gamma adjustment."""
    return gamma_adjust(stack.ldr[1], stack.exposure_times[1], gamma)


# ---------------------------------------------------------------------------
# on-disk layout: <dir>/ldr_{0,1,2}.png, gt.pfm (optional), meta.json


def save_stack(directory, stack: ExposureStack, extra_meta: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, ldr in enumerate(stack.ldr):
        write_ldr8(d / f"ldr_{i}.png", ldr)
    if stack.gt_hdr is not None:
        write_pfm(d / "gt.pfm", stack.gt_hdr)
    meta = {"exposure_times": list(stack.exposure_times)}
    if extra_meta:
        meta.update(extra_meta)
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_stack(directory) -> ExposureStack:
    d = Path(directory)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise DataError(f"{d}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text())
        times = tuple(float(t) for t in meta["exposure_times"])
    except (ValueError, KeyError) as exc:
        raise DataError(f"{meta_path}: malformed sidecar: {exc}") from exc
    ldrs = []
    for i in range(3):
        p = d / f"ldr_{i}.png"
        if not p.exists():
            raise DataError(f"{d}: missing bracket {p.name}")
        ldrs.append(read_ldr8(p))
    gt = read_pfm(d / "gt.pfm") if (d / "gt.pfm").exists() else None
    return ExposureStack(ldr=tuple(ldrs), exposure_times=times, gt_hdr=gt)


def load_dataset(root) -> list[ExposureStack]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a dataset directory")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.json").exists())
    if not dirs:
        raise DataError(f"{root}: no stacks found")
    return [load_stack(p) for p in dirs]


def write_dataset(root, params: SceneParams, n: int) -> list[Path]:
    root = Path(root)
    paths = []
    for i in range(n):
        p = replace(params, seed=params.seed + i)
        stack = gen_scene(p)
        out = root / f"stack_{i:04d}"
        save_stack(out, stack, extra_meta={"seed": p.seed})
        paths.append(out)
    return paths
