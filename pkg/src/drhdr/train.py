"""Training: tonemapped L1 loss, Adam, the three-phase learning-rate plan,
bit-exact checkpointing and the epoch loop.

Single-threaded runs with a fixed seed are bit-deterministic end to end; the
checkpoint stores weights, optimizer moments, step/epoch counters and the RNG
state so a resumed run reproduces the uninterrupted loss trajectory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from . import ops
from . import tensor as T
from .data import crop_patches, augment, reference_passthrough
from .graph import GraphSpec, NetworkConfig, build_graph, forward_eval, init_weights
from .imaging import (DEFAULT_GAMMA, DEFAULT_MU, ExposureStack, gamma_adjust,
                      mu_law, percentile99, psnr, psnr_mu)
from .tensor import Tape, Tensor, backward

__all__ = [
    "ScheduleSpec",
    "lr_at",
    "AdamState",
    "adam_step",
    "l1_tonemapped_loss",
    "encode_brackets",
    "save_checkpoint",
    "load_checkpoint",
    "TrainReport",
    "fit",
    "predict",
]


# ---------------------------------------------------------------------------
# learning-rate plan


@dataclass(frozen=True)
class ScheduleSpec:
    """Three contiguous phases: a long constant phase with a lowered tail,
    then two linearly decaying phases."""

    phase1_epochs: int = 150
    phase1_lr: float = 5e-4
    phase1_tail_epochs: int = 10
    phase1_tail_lr: float = 1e-4
    phase1_data_fraction: float = 0.5
    phase2_epochs: int = 50
    phase2_lr0: float = 1e-4
    phase3_epochs: int = 100
    phase3_lr0: float = 5e-5

    @property
    def total_epochs(self) -> int:
        return self.phase1_epochs + self.phase2_epochs + self.phase3_epochs

    def phase_of(self, epoch: int) -> int:
        if epoch < self.phase1_epochs:
            return 1
        if epoch < self.phase1_epochs + self.phase2_epochs:
            return 2
        return 3


def _linear_decay(lr0: float, n: int, total: int) -> float:
    # decay to ~0 across the phase, floored so the rate stays positive
    return max(lr0 * (1.0 - n / total), lr0 / total)


def lr_at(schedule: ScheduleSpec, epoch: int, literal_decay: bool = False) -> float:
    """Learning rate for a 0-based epoch.

    ``literal_decay=True`` applies the factor ``(1 - n)/N`` verbatim instead of
    ``1 - n/N``; it collapses to the floor after the first epoch of a phase and
    is kept only for comparison.
    """
    s = schedule
    if not 0 <= epoch < s.total_epochs:
        raise ValueError(f"epoch {epoch} outside the {s.total_epochs}-epoch plan")
    if epoch < s.phase1_epochs:
        if epoch < s.phase1_epochs - s.phase1_tail_epochs:
            return s.phase1_lr
        return s.phase1_tail_lr
    if epoch < s.phase1_epochs + s.phase2_epochs:
        n, total, lr0 = epoch - s.phase1_epochs, s.phase2_epochs, s.phase2_lr0
    else:
        n, total, lr0 = epoch - s.phase1_epochs - s.phase2_epochs, s.phase3_epochs, s.phase3_lr0
    if literal_decay:
        return max(lr0 * (1.0 - n) / total, lr0 / total)
    return _linear_decay(lr0, n, total)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        g64 = g.astype(np.float64)
        m = state.m[name] = (b1 * state.m[name] + (1 - b1) * g).astype(np.float32)
        v = state.v[name] = (b2 * state.v[name] + (1 - b2) * (g64 * g64)).astype(np.float32)
        update = lr * (m.astype(np.float64) / c1) / (np.sqrt(v.astype(np.float64) / c2) + state.eps)
        p.data = (p.data.astype(np.float64) - update).astype(np.float32)


# ---------------------------------------------------------------------------
# loss


def l1_tonemapped_loss(pred: Tensor, gt: Tensor, mu: float = DEFAULT_MU,
                       p: float | None = None) -> Tensor:
    """Mean |mu_law(tanh(pred/p)) - mu_law(tanh(gt/p))| with p the prediction's
    99th percentile, treated as a constant in backward.  Passing ``p`` pins the
    normalizer explicitly (used by gradient checks)."""
    if pred.shape != gt.shape:
        raise ValueError(f"loss: shape mismatch {pred.shape} vs {gt.shape}")
    if p is None:
        p = percentile99(pred.data)
    if not np.isfinite(p) or p <= 0:
        raise NumericError(f"degenerate prediction percentile p99 = {p}")
    a = mu_law(ops.tanh_elem(T.scale(pred, 1.0 / p)), mu)
    b = mu_law(ops.tanh_elem(T.scale(gt, 1.0 / p)), mu)
    return T.mean_all(T.abs_elem(T.sub(a, b)))


def encode_brackets(stacks: list[ExposureStack], gamma: float = DEFAULT_GAMMA) -> list[Tensor]:
    """Batch the three network inputs: per bracket, [LDR, gamma-adjusted LDR]."""
    inputs = []
    for i in range(3):
        planes = [np.concatenate([s.ldr[i], gamma_adjust(s.ldr[i], s.exposure_times[i], gamma)])
                  for s in stacks]
        inputs.append(Tensor(np.stack(planes)))
    return inputs


def predict(graph: GraphSpec, weights: dict[str, Tensor], stacks: list[ExposureStack],
            batch_size: int = 4, gamma: float = DEFAULT_GAMMA) -> list[np.ndarray]:
    """Run inference over whole stacks, returning (3, H, W) HDR estimates."""
    outputs: list[np.ndarray] = []
    for lo in range(0, len(stacks), batch_size):
        chunk = stacks[lo:lo + batch_size]
        out = forward_eval(graph, weights, encode_brackets(chunk, gamma))
        outputs.extend(out.data[i] for i in range(len(chunk)))
    return outputs


# ---------------------------------------------------------------------------
# checkpoints: magic "DRHD", version, then (name, ndim, dims, dtype, payload)
# entries; dtype 0 = float32 LE tensors, dtype 1 = raw uint8 (JSON metadata)

_MAGIC = b"DRHD"
_VERSION = 1
_DTYPE_F32 = 0
_DTYPE_U8 = 1


def _write_entry(f, name: str, arr: np.ndarray, dtype: int) -> None:
    nb = name.encode("utf-8")
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(struct.pack("<B", dtype))
    f.write(arr.tobytes())


def save_checkpoint(path, weights: dict[str, Tensor], adam: AdamState,
                    epoch: int, rng: np.random.Generator, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "step": adam.step,
        "epoch": epoch,
        "rng": rng.bit_generator.state,
        "adam": {"beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
    }
    if meta:
        payload["meta"] = meta
    blob = np.frombuffer(json.dumps(payload, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        for name in sorted(weights):
            _write_entry(f, "param/" + name, np.ascontiguousarray(weights[name].data, "<f4"), _DTYPE_F32)
        for name in sorted(adam.m):
            _write_entry(f, "adam.m/" + name, np.ascontiguousarray(adam.m[name], "<f4"), _DTYPE_F32)
            _write_entry(f, "adam.v/" + name, np.ascontiguousarray(adam.v[name], "<f4"), _DTYPE_F32)
        _write_entry(f, "state", blob, _DTYPE_U8)


def load_checkpoint(path) -> dict:
    """Returns {"weights": {name: array}, "adam_m": ..., "adam_v": ..., "state": dict}."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: checkpoint not found")
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {raw[:4]!r} (byte offset 0)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    entries: dict[str, np.ndarray] = {}
    while pos < len(raw):
        try:
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            (dtype,) = struct.unpack_from("<B", raw, pos)
            pos += 1
        except struct.error as exc:
            raise DataError(f"{path}: truncated entry header (byte offset {pos})") from exc
        count = 1
        for d in dims:
            count *= d
        itemsize = 4 if dtype == _DTYPE_F32 else 1
        nbytes = count * itemsize
        if len(raw) - pos < nbytes:
            raise DataError(f"{path}: truncated payload for {name!r} (byte offset {pos})")
        if dtype == _DTYPE_F32:
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
        elif dtype == _DTYPE_U8:
            arr = np.frombuffer(raw, dtype=np.uint8, count=count, offset=pos).copy()
        else:
            raise DataError(f"{path}: unknown dtype tag {dtype} for {name!r} (byte offset {pos})")
        entries[name] = arr
        pos += nbytes

    out = {"weights": {}, "adam_m": {}, "adam_v": {}, "state": None}
    for name, arr in entries.items():
        if name.startswith("param/"):
            out["weights"][name[6:]] = arr
        elif name.startswith("adam.m/"):
            out["adam_m"][name[7:]] = arr
        elif name.startswith("adam.v/"):
            out["adam_v"][name[7:]] = arr
        elif name == "state":
            out["state"] = json.loads(arr.tobytes().decode("utf-8"))
    if out["state"] is None:
        raise DataError(f"{path}: checkpoint is missing its state entry")
    return out


# ---------------------------------------------------------------------------
# fit loop


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"epochs": self.rows, "step_losses": self.step_losses}, indent=2)

    def to_text(self) -> str:
        lines = [f"{'epoch':>6}{'lr':>12}{'loss':>12}{'val PSNR':>12}{'val PSNR-mu':>14}"]
        for r in self.rows:
            lines.append(f"{r['epoch']:>6}{r['lr']:>12.2e}{r['mean_loss']:>12.5f}"
                         f"{r['val_psnr']:>12.3f}{r['val_psnr_mu']:>14.3f}")
        return "\n".join(lines)


def _validate(graph, weights, val_stacks, mu, gamma, batch_size) -> tuple[float, float]:
    preds = predict(graph, weights, val_stacks, batch_size, gamma)
    ps = [psnr(p, s.gt_hdr, peak=max(1.0, float(np.max(s.gt_hdr)))) for p, s in zip(preds, val_stacks)]
    pm = [psnr_mu(np.clip(p, 0, None), s.gt_hdr, mu) for p, s in zip(preds, val_stacks)]
    return float(np.mean(ps)), float(np.mean(pm))


def fit(cfg: NetworkConfig, schedule: ScheduleSpec, train_stacks: list[ExposureStack],
        val_stacks: list[ExposureStack], out_dir=None, *, epochs: int | None = None,
        max_steps: int | None = None, batch_size: int = 4, seed: int = 0,
        patch_size: int | None = None, patch_stride: int | None = None,
        mu: float = DEFAULT_MU, gamma: float = DEFAULT_GAMMA,
        resume_from=None, log=None) -> TrainReport:
    """Train a network on exposure stacks.

    Per epoch: during phase 1 a fresh half of the training stacks is sampled;
    patches are augmented, batched and stepped with Adam at the scheduled
    rate; validation metrics are computed and the best-by-PSNR-mu and last
    checkpoints are written (when ``out_dir`` is given).  Checkpoints land on
    epoch boundaries, so resuming reproduces an uninterrupted run exactly.
    """
    if not train_stacks:
        raise ValueError("fit: empty training set")
    graph = build_graph(cfg)
    rng = np.random.default_rng(seed)
    weights = init_weights(graph, rng, requires_grad=True)
    adam = AdamState.init(weights)
    start_epoch = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        for name, arr in ck["weights"].items():
            if name not in weights:
                raise DataError(f"checkpoint parameter {name!r} is not in the graph")
            weights[name].data = arr
        adam.m.update(ck["adam_m"])
        adam.v.update(ck["adam_v"])
        adam.step = ck["state"]["step"]
        start_epoch = ck["state"]["epoch"] + 1
        rng.bit_generator.state = ck["state"]["rng"]

    report = TrainReport()
    out_dir = Path(out_dir) if out_dir is not None else None
    best_psnr_mu = -np.inf
    meta = {"variant": cfg.variant, "ch": cfg.ch}

    def checkpoint(name: str, epoch: int) -> None:
        if out_dir is not None:
            save_checkpoint(out_dir / name, weights, adam, epoch, rng, meta=meta)

    total_epochs = schedule.total_epochs if epochs is None else epochs
    steps_done = 0
    epoch = start_epoch
    if epochs == 0:
        # report the initial validation metrics only
        v_psnr, v_mu = _validate(graph, weights, val_stacks, mu, gamma, batch_size) \
            if val_stacks else (float("nan"), float("nan"))
        report.rows.append({"epoch": -1, "lr": lr_at(schedule, 0), "mean_loss": float("nan"),
                            "val_psnr": v_psnr, "val_psnr_mu": v_mu})
        checkpoint("last.ckpt", -1)
        return report

    while epoch < total_epochs:
        lr = lr_at(schedule, min(epoch, schedule.total_epochs - 1))
        stacks = train_stacks
        if schedule.phase_of(min(epoch, schedule.total_epochs - 1)) == 1 and len(train_stacks) > 1:
            n_keep = max(1, int(round(len(train_stacks) * schedule.phase1_data_fraction)))
            picks = rng.choice(len(train_stacks), size=n_keep, replace=False)
            stacks = [train_stacks[i] for i in picks]

        samples: list[ExposureStack] = []
        for s in stacks:
            h, w = s.shape[1:]
            if patch_size is not None and (h > patch_size or w > patch_size):
                samples.extend(crop_patches(s, patch_size, patch_stride or patch_size))
            else:
                samples.append(s)
        order = rng.permutation(len(samples))

        losses = []
        for lo in range(0, len(order), batch_size):
            batch = [augment(samples[i], rng) for i in order[lo:lo + batch_size]]
            inputs = encode_brackets(batch, gamma)
            gt = Tensor(np.stack([b.gt_hdr for b in batch]))
            with Tape() as tape:
                out = forward_eval(graph, weights, inputs)
                loss = l1_tonemapped_loss(out, gt, mu)
            backward(tape, loss)
            grads = {}
            for name, p in weights.items():
                grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
                p.zero_grad()
            adam_step(weights, grads, adam, lr)
            val = loss.item()
            losses.append(val)
            report.step_losses.append(val)
            steps_done += 1
            if max_steps is not None and steps_done >= max_steps:
                break

        if val_stacks:
            v_psnr, v_mu = _validate(graph, weights, val_stacks, mu, gamma, batch_size)
        else:
            v_psnr, v_mu = float("nan"), float("nan")
        row = {"epoch": epoch, "lr": lr, "mean_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_psnr": v_psnr, "val_psnr_mu": v_mu}
        report.rows.append(row)
        if log is not None:
            log(f"epoch {epoch:4d}  lr {lr:.2e}  loss {row['mean_loss']:.5f}  "
                f"val PSNR {v_psnr:.3f}  PSNR-mu {v_mu:.3f}")
        checkpoint("last.ckpt", epoch)
        if val_stacks and v_mu > best_psnr_mu:
            best_psnr_mu = v_mu
            checkpoint("best.ckpt", epoch)
        epoch += 1
        if max_steps is not None and steps_done >= max_steps:
            break

    if out_dir is not None:
        (out_dir / "report.json").write_text(report.to_json())
        (out_dir / "report.txt").write_text(report.to_text() + "\n")
    return report
