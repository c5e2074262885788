"""Command-line surface: gen-data, train, infer, eval, profile.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Flags beat --config file values, which beat built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .data import SceneParams, load_dataset, load_stack, write_dataset
from .graph import VARIANTS, NetworkConfig, build_graph
from .imaging import psnr, psnr_mu, read_pfm, write_pfm
from .profiler import compare_to_reference, count_macs, REFERENCE_COMPLEXITY
from .tensor import Tensor
from .train import ScheduleSpec, fit, load_checkpoint, predict

USAGE_EXIT, DATA_EXIT, NUMERIC_EXIT = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _network_config(variant: str, preset: str) -> NetworkConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    if preset == "paper":
        return VARIANTS[variant]()
    if preset == "tiny":
        if variant not in ("drhdr",):
            raise ValueError("the tiny preset is defined for the drhdr variant only")
        return NetworkConfig.tiny()
    raise ValueError(f"unknown preset {preset!r}")


def _parse_hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"--hw expects HxW, got {text!r}") from None
    return h, w


def _apply_config_file(args: argparse.Namespace, defaults: dict) -> argparse.Namespace:
    """Resolve precedence: explicit flags > --config file > defaults."""
    file_values = {}
    if getattr(args, "config", None):
        p = Path(args.config)
        if not p.exists():
            raise DataError(f"{p}: config file not found")
        try:
            file_values = json.loads(p.read_text())
        except ValueError as exc:
            raise DataError(f"{p}: malformed config: {exc}") from exc
    for key, default in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, file_values.get(key, default))
    return args


def cmd_gen_data(args) -> int:
    defaults = {"n": 64, "size": 256, "seed": 7, "motion": 6, "noise": 0.005}
    _apply_config_file(args, defaults)
    params = SceneParams(seed=int(args.seed), size=(int(args.size), int(args.size)),
                         motion_px=int(args.motion), noise_sigma=float(args.noise))
    paths = write_dataset(args.out, params, int(args.n))
    print(f"wrote {len(paths)} stacks under {args.out}")
    return 0


def cmd_train(args) -> int:
    defaults = {"variant": "drhdr", "preset": "tiny", "seed": 0, "batch": 4,
                "epochs": None, "max_steps": None, "val_fraction": 0.1}
    _apply_config_file(args, defaults)
    cfg = _network_config(args.variant, args.preset)
    stacks = load_dataset(args.data)
    n_val = max(1, int(round(len(stacks) * float(args.val_fraction)))) if len(stacks) > 1 else 0
    if n_val:
        from .data import split_dataset
        train_stacks, val_stacks = split_dataset(stacks, n_val, int(args.seed))
    else:
        train_stacks, val_stacks = stacks, []
    schedule = ScheduleSpec()
    patch = 250 if args.preset == "paper" else None
    report = fit(cfg, schedule, train_stacks, val_stacks, args.out,
                 epochs=None if args.epochs is None else int(args.epochs),
                 max_steps=None if args.max_steps is None else int(args.max_steps),
                 batch_size=int(args.batch), seed=int(args.seed), patch_size=patch,
                 resume_from=args.resume, log=print)
    print(report.to_text())
    print(f"checkpoints and report written under {args.out}")
    return 0


def _load_weights_for(cfg: NetworkConfig, ck: dict):
    graph = build_graph(cfg)
    weights = {}
    for key, spec in graph.weights.items():
        for suffix, shape in (("w", spec.shape), ("b", spec.bias)):
            name = f"{key}.{suffix}"
            if name not in ck["weights"]:
                raise DataError(f"checkpoint is missing parameter {name!r}")
            arr = ck["weights"][name]
            if tuple(arr.shape) != tuple(shape):
                raise DataError(f"checkpoint parameter {name!r} has shape {arr.shape}, expected {shape}")
            weights[name] = Tensor(arr)
    return graph, weights


def cmd_infer(args) -> int:
    defaults = {"variant": None, "preset": None}
    _apply_config_file(args, defaults)
    ck = load_checkpoint(args.ckpt)
    meta = ck["state"].get("meta", {})
    variant = args.variant or meta.get("variant", "drhdr")
    preset = args.preset or ("tiny" if meta.get("ch") == 8 else "paper")
    cfg = _network_config(variant, preset)
    graph, weights = _load_weights_for(cfg, ck)
    stack = load_stack(args.stack)
    pred = predict(graph, weights, [stack], batch_size=1)[0]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pfm(out, np.clip(pred, 0.0, None))
    print(f"wrote {out}")
    if stack.gt_hdr is not None:
        peak = max(1.0, float(np.max(stack.gt_hdr)))
        print(f"PSNR    {psnr(pred, stack.gt_hdr, peak):8.3f}")
        print(f"PSNR-mu {psnr_mu(np.clip(pred, 0, None), stack.gt_hdr):8.3f}")
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    if not pred_dir.is_dir():
        raise DataError(f"{pred_dir}: not a directory")
    if not gt_dir.is_dir():
        raise DataError(f"{gt_dir}: not a directory")
    names = sorted(p.name for p in pred_dir.glob("*.pfm"))
    if not names:
        raise DataError(f"{pred_dir}: no .pfm predictions found")
    rows = []
    for name in names:
        gt_path = gt_dir / name
        if not gt_path.exists():
            raise DataError(f"{gt_path}: missing ground truth for {name}")
        pred = read_pfm(pred_dir / name)
        gt = read_pfm(gt_path)
        if pred.shape != gt.shape:
            raise ValueError(f"{name}: prediction {pred.shape} vs ground truth {gt.shape}")
        peak = max(1.0, float(np.max(gt)))
        rows.append((name, psnr(pred, gt, peak), psnr_mu(np.clip(pred, 0, None), np.clip(gt, 0, None))))
    width = max(len(n) for n, *_ in rows) + 2
    print(f"{'stack':<{width}}{'PSNR':>10}{'PSNR-mu':>10}")
    for name, p, m in rows:
        print(f"{name:<{width}}{p:>10.3f}{m:>10.3f}")
    print(f"{'mean':<{width}}{np.mean([r[1] for r in rows]):>10.3f}"
          f"{np.mean([r[2] for r in rows]):>10.3f}")
    if args.out:
        Path(args.out).write_text(json.dumps(
            [{"stack": n, "psnr": p, "psnr_mu": m} for n, p, m in rows], indent=2))
    return 0


def cmd_profile(args) -> int:
    defaults = {"variant": "drhdr", "hw": "1060x1900", "compare": None}
    _apply_config_file(args, defaults)
    if args.variant not in VARIANTS:
        raise ValueError(f"unknown variant {args.variant!r}; choose from {sorted(VARIANTS)}")
    h, w = _parse_hw(args.hw)
    cfg = VARIANTS[args.variant]()
    report = count_macs(build_graph(cfg), h, w)
    print(report.to_text())
    delta = compare_to_reference(args.variant, report)
    print(f"\nreference: {delta['ref_params']} weights / {delta['ref_gmacs']:.2f} GMACs"
          f"  (delta {delta['params_delta_pct']:+.2f}% / {delta['gmacs_delta_pct']:+.2f}%)")
    if args.compare:
        if args.compare != "baseline":
            raise ValueError("--compare supports only 'baseline'")
        base = count_macs(build_graph(VARIANTS["ahdr"]()), h, w)
        print(f"vs baseline: {report.gmacs:.2f} / {base.gmacs:.2f} GMACs "
              f"= {report.total_macs / base.total_macs:.3f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"profile_{args.variant}.json").write_text(report.to_json())
        (out / f"profile_{args.variant}.txt").write_text(report.to_text() + "\n")
        print(f"wrote profile files under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drhdr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic exposure-stack dataset")
    p.add_argument("--n", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--motion", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a network on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--preset", choices=["paper", "tiny"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--resume")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded deterministic mode (the default; flag kept for scripts)")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint on one stack directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stack", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--preset", choices=["paper", "tiny"])
    p.add_argument("--config")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="PSNR / PSNR-mu over matching .pfm files in two directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("profile", help="parameter / MAC table for a network variant")
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--hw")
    p.add_argument("--compare")
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_profile)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_EXIT
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_EXIT
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
