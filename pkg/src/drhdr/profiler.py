"""Symbolic parameter and multiply-accumulate counting over a GraphSpec.

Counting conventions (all exact integer arithmetic):

* convolution: ``out_h * out_w * out_ch * in_ch * kh * kw`` MACs at the
  layer's tagged resolution; bias adds are not counted (standard practice);
* deformable convolution: its kernel MACs plus 4 MACs per bilinear sample per
  tap and input channel (the offset/mask predictors are ordinary conv layers
  in the graph and are counted as such);
* elementwise ops (activations, adds, pointwise products): one MAC per output
  element;
* bilinear x2 upsampling: 4 MACs per output element;
* concatenation: free;
* parameters: kernel elements plus bias elements, shared weights counted once.

Quarter-resolution layers are evaluated at (H/2, W/2).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .graph import FULL, QUARTER, GraphSpec

__all__ = [
    "LayerCost",
    "CostReport",
    "count_params",
    "count_macs",
    "deform_sampling_macs",
    "REFERENCE_COMPLEXITY",
    "compare_to_reference",
]

# Published reference figures for the architecture family at 1060x1900:
# (total weights, GMACs).  Used for the reconciliation report and --compare.
REFERENCE_COMPLEXITY: dict[str, tuple[int, float]] = {
    "drhdr": (1_222_035, 1769.85),
    "ahdr": (1_441_283, 2916.92),
    "variant-a": (1_345_323, 2146.68),
    "variant-b": (1_338_087, 1526.83),
    "ours-star": (1_222_035, 2534.60),
}


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    res: str
    params: int
    macs: int


@dataclass
class CostReport:
    graph: str
    hw: tuple[int, int]
    rows: list[LayerCost]

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def gmacs(self) -> float:
        return self.total_macs / 1e9

    def to_text(self) -> str:
        h, w = self.hw
        width = max(24, max((len(r.name) for r in self.rows), default=0) + 2)
        lines = [f"{self.graph} @ {h}x{w}",
                 f"{'layer':<{width}}{'kind':<12}{'res':<9}{'params':>12}{'MACs':>16}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}{r.kind:<12}{r.res:<9}{r.params:>12}{r.macs:>16}")
        lines.append("-" * (width + 49))
        lines.append(f"{'total':<{width}}{'':<12}{'':<9}{self.total_params:>12}{self.total_macs:>16}")
        lines.append(f"{'':<{width}}{'':<12}{'':<9}{'':>12}{self.gmacs:>15.2f}G")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({
            "graph": self.graph,
            "hw": list(self.hw),
            "layers": [{"name": r.name, "kind": r.kind, "resolution": r.res,
                        "params": r.params, "macs": r.macs} for r in self.rows],
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "gmacs": round(self.gmacs, 2),
        }, indent=2)


def count_params(graph: GraphSpec) -> int:
    """Total trainable scalars; weights shared across layers count once."""
    total = 0
    for spec in graph.weights.values():
        n = 1
        for d in spec.shape:
            n *= d
        total += n
        if spec.bias is not None:
            m = 1
            for d in spec.bias:
                m *= d
            total += m
    return total


def deform_sampling_macs(in_channels: int, taps: int, out_h: int, out_w: int) -> int:
    """Bilinear gather cost of a deformable conv: 4 MACs per sample, one sample
    per tap and input channel at each output pixel.  Kept in one place so the
    convention can be recalibrated."""
    return 4 * taps * in_channels * out_h * out_w


def count_macs(graph: GraphSpec, h: int, w: int) -> CostReport:
    """Per-layer multiply-accumulate counts for one forward pass at h x w."""
    if h % 2 or w % 2:
        raise ValueError(f"count_macs needs even H and W, got {h}x{w}")
    rows: list[LayerCost] = []
    seen_weights: set[str] = set()
    for layer in graph.layers:
        oh, ow = (h // 2, w // 2) if layer.res == QUARTER else (h, w)
        params = 0
        if layer.weight is not None and layer.weight not in seen_weights:
            seen_weights.add(layer.weight)
            spec = graph.weights[layer.weight]
            params = 1
            for d in spec.shape:
                params *= d
            if spec.bias is not None:
                b = 1
                for d in spec.bias:
                    b *= d
                params += b
        if layer.kind == "conv":
            c = layer.conv
            macs = oh * ow * c.out_channels * c.in_channels * c.kernel[0] * c.kernel[1]
        elif layer.kind == "deform":
            c = layer.deform.base
            taps = c.kernel[0] * c.kernel[1]
            macs = oh * ow * c.out_channels * c.in_channels * taps
            macs += deform_sampling_macs(c.in_channels, taps, oh, ow)
        elif layer.kind in ("lrelu", "relu", "sigmoid", "add", "mul"):
            macs = oh * ow * layer.channels
        elif layer.kind == "concat":
            macs = 0
        elif layer.kind == "upsample2x":
            macs = 4 * layer.channels * oh * ow  # res tag is already the output resolution
        else:
            raise ValueError(f"count_macs: unknown layer kind {layer.kind!r}")
        rows.append(LayerCost(layer.name, layer.kind, layer.res, params, macs))
    return CostReport(graph.name, (h, w), rows)


def compare_to_reference(variant: str, report: CostReport) -> dict:
    """Deltas of a profiled report against the published reference figures."""
    if variant not in REFERENCE_COMPLEXITY:
        raise ValueError(f"no reference figures for variant {variant!r}")
    ref_params, ref_gmacs = REFERENCE_COMPLEXITY[variant]
    return {
        "variant": variant,
        "params": report.total_params,
        "ref_params": ref_params,
        "params_delta_pct": 100.0 * (report.total_params - ref_params) / ref_params,
        "gmacs": round(report.gmacs, 2),
        "ref_gmacs": ref_gmacs,
        "gmacs_delta_pct": 100.0 * (report.gmacs - ref_gmacs) / ref_gmacs,
    }
