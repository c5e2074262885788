"""Declarative assembly of the fusion networks and their executor.

A :class:`GraphSpec` is an ordered list of layers over named values plus a
table of named weights; it is consumed both by :func:`forward_eval` and by the
complexity profiler.  Builders are provided for the dual-branch network, the
attention-only reference network, the two ablation variants and the
full-resolution twin used for the branch-efficiency comparison.

Every layer carries a resolution tag (``full`` or ``quarter``): on the
downsampled branch everything between the strided convolution and the
upsampling step runs at a quarter of the input area, which is what drives the
MAC accounting.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericError
from . import ops
from . import tensor as T
from .ops import ConvParams, DeformParams
from .tensor import Tensor

__all__ = [
    "NetworkConfig",
    "WeightSpec",
    "LayerSpec",
    "GraphSpec",
    "GraphBuilder",
    "build_drhdr",
    "build_ahdr",
    "build_variant_a",
    "build_variant_b",
    "build_ours_star",
    "build_graph",
    "build_spatial_attention",
    "build_deformable_block",
    "build_drdb",
    "forward_eval",
    "init_weights",
    "VARIANTS",
]

FULL = "full"
QUARTER = "quarter"


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture knobs; the classmethods below pin the named configurations."""

    ch: int = 42
    drdb_per_branch: int = 5
    drdb_growth: int = 21
    drdb_depth: int = 6
    deform_groups: int = 1
    leaky_slope: float = 0.1
    variant: str = "drhdr"
    guidance_depth: int = 2          # convs in the deformable block's guidance stack
    skip_mode: str = "add"           # global skip: "add" or "concat"
    attention_wide: bool = False     # True: 2ch->2ch then 2ch->ch; False: 2ch->ch then ch->ch
    drdb_low_branch: int | None = None  # low-res branch block count when it differs

    def __post_init__(self):
        if self.ch <= 0 or self.drdb_growth <= 0 or self.drdb_per_branch < 1:
            raise ValueError("channel width, growth and block count must be positive")
        if self.skip_mode not in ("add", "concat"):
            raise ValueError(f"unknown skip_mode {self.skip_mode!r}")

    @property
    def drdb_low(self) -> int:
        return self.drdb_per_branch if self.drdb_low_branch is None else self.drdb_low_branch

    @classmethod
    def paper(cls) -> "NetworkConfig":
        # fixed-width dual-branch net; DRDB depth 5 and a 3-conv guidance
        # stack are the tuned values that reconcile against the reference
        # complexity totals (see docs/complexity_reconciliation.md)
        return cls(ch=42, drdb_per_branch=5, drdb_growth=21, drdb_depth=5,
                   guidance_depth=3, variant="drhdr")

    @classmethod
    def tiny(cls) -> "NetworkConfig":
        """Desk-scale configuration for CPU training experiments."""
        return cls(ch=8, drdb_per_branch=1, drdb_growth=4, drdb_depth=6,
                   guidance_depth=2, variant="drhdr")

    @classmethod
    def ahdr(cls) -> "NetworkConfig":
        return cls(ch=64, drdb_per_branch=3, drdb_growth=32, drdb_depth=6,
                   attention_wide=True, variant="ahdr")

    @classmethod
    def variant_a(cls) -> "NetworkConfig":
        return cls(ch=36, drdb_per_branch=6, drdb_growth=36, drdb_depth=3,
                   attention_wide=True, variant="variant-a")

    @classmethod
    def variant_b(cls) -> "NetworkConfig":
        return cls(ch=36, drdb_per_branch=3, drdb_low_branch=6, drdb_growth=36,
                   drdb_depth=3, guidance_depth=3, attention_wide=True,
                   variant="variant-b")

    @classmethod
    def ours_star(cls) -> "NetworkConfig":
        return replace(cls.paper(), variant="ours-star")


@dataclass(frozen=True)
class WeightSpec:
    shape: tuple[int, ...]               # conv kernel (out, in, kh, kw)
    bias: tuple[int, ...] | None         # (1, out, 1, 1) or None
    init: str = "he"                     # "he" or "zero"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str                            # conv | deform | lrelu | relu | sigmoid | add | mul | concat | upsample2x
    inputs: tuple[str, ...]
    output: str
    res: str
    channels: int                        # channels of this layer's output
    conv: ConvParams | None = None
    deform: DeformParams | None = None
    weight: str | None = None            # key into the weight map; shared layers reuse a key
    slope: float = 0.1


@dataclass
class GraphSpec:
    name: str
    inputs: tuple[tuple[str, int], ...]  # (value name, channels)
    output: str
    layers: list[LayerSpec]
    weights: dict[str, WeightSpec]

    @property
    def has_quarter(self) -> bool:
        return any(l.res == QUARTER for l in self.layers)

    def describe(self) -> str:
        lines = [f"graph {self.name}: inputs " +
                 " ".join(f"{n}({c}ch)" for n, c in self.inputs) +
                 f" -> {self.output}"]
        for l in self.layers:
            extra = ""
            if l.conv is not None:
                k, s, d = l.conv.kernel, l.conv.stride, l.conv.dilation
                extra = f"{l.conv.in_channels}->{l.conv.out_channels} k{k[0]}x{k[1]}"
                if s != (1, 1):
                    extra += f" s{s[0]}"
                if d != (1, 1):
                    extra += f" d{d[0]}"
                if l.weight != l.name:
                    extra += f" [shared {l.weight}]"
            lines.append(f"  {l.name:<28} {l.kind:<12} {l.res:<8} "
                         f"{','.join(l.inputs)} -> {l.output}  {extra}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "inputs": [{"name": n, "channels": c} for n, c in self.inputs],
            "output": self.output,
            "layers": [
                {
                    "name": l.name, "kind": l.kind, "inputs": list(l.inputs),
                    "output": l.output, "resolution": l.res, "channels": l.channels,
                    **({"conv": {
                        "in": l.conv.in_channels, "out": l.conv.out_channels,
                        "kernel": list(l.conv.kernel), "stride": list(l.conv.stride),
                        "dilation": list(l.conv.dilation), "padding": list(l.conv.padding),
                        "bias": l.conv.has_bias}} if l.conv is not None else {}),
                    **({"deform_groups": l.deform.deform_groups} if l.deform is not None else {}),
                    **({"weight": l.weight} if l.weight is not None else {}),
                }
                for l in self.layers
            ],
        }


class GraphBuilder:
    """Incrementally emits layers while tracking each value's channels and resolution."""

    def __init__(self, name: str, inputs: list[tuple[str, int]], leaky_slope: float = 0.1):
        self.name = name
        self.inputs = tuple(inputs)
        self.slope = leaky_slope
        self.layers: list[LayerSpec] = []
        self.weights: dict[str, WeightSpec] = {}
        self._meta: dict[str, tuple[int, str]] = {n: (c, FULL) for n, c in inputs}

    def _out(self, layer: LayerSpec) -> str:
        if layer.output in self._meta:
            raise ValueError(f"value {layer.output!r} produced twice")
        self.layers.append(layer)
        self._meta[layer.output] = (layer.channels, layer.res)
        return layer.output

    def meta(self, name: str) -> tuple[int, str]:
        if name not in self._meta:
            raise ValueError(f"unknown value {name!r}")
        return self._meta[name]

    def conv(self, name: str, src: str, out_ch: int, *, kernel: int = 3, stride: int = 1,
             dilation: int = 1, weight: str | None = None, init: str = "he",
             act: str | None = None) -> str:
        in_ch, res = self.meta(src)
        params = ConvParams.same(in_ch, out_ch, kernel=kernel, dilation=dilation, stride=stride)
        if stride == 2:
            if res != FULL:
                raise ValueError(f"{name}: only one downsampling stage is supported")
            res = QUARTER
        elif stride != 1:
            raise ValueError(f"{name}: stride must be 1 or 2")
        key = weight or name
        spec = WeightSpec(params.weight_shape(), (1, out_ch, 1, 1), init)
        if key in self.weights:
            if self.weights[key] != spec:
                raise ValueError(f"shared weight {key!r} redeclared with a different shape")
        else:
            self.weights[key] = spec
        out = self._out(LayerSpec(name, "conv", (src,), name + ".out", res, out_ch,
                                  conv=params, weight=key))
        if act is not None:
            out = self.activation(name + "." + act, out, act)
        return out

    def deform(self, name: str, src: str, offsets: str, mask: str, out_ch: int,
               groups: int) -> str:
        in_ch, res = self.meta(src)
        params = DeformParams(ConvParams.same(in_ch, out_ch), deform_groups=groups)
        self.weights[name] = WeightSpec(params.base.weight_shape(), (1, out_ch, 1, 1), "he")
        return self._out(LayerSpec(name, "deform", (src, offsets, mask), name + ".out",
                                   res, out_ch, deform=params, weight=name))

    def activation(self, name: str, src: str, kind: str) -> str:
        ch, res = self.meta(src)
        if kind not in ("lrelu", "relu", "sigmoid"):
            raise ValueError(f"unknown activation {kind!r}")
        return self._out(LayerSpec(name, kind, (src,), name + ".out", res, ch, slope=self.slope))

    def _binary(self, name: str, kind: str, a: str, b: str) -> str:
        ca, ra = self.meta(a)
        cb, rb = self.meta(b)
        if (ca, ra) != (cb, rb):
            raise ValueError(f"{name}: operands disagree: {ca}@{ra} vs {cb}@{rb}")
        return self._out(LayerSpec(name, kind, (a, b), name + ".out", ra, ca))

    def add(self, name: str, a: str, b: str) -> str:
        return self._binary(name, "add", a, b)

    def mul(self, name: str, a: str, b: str) -> str:
        return self._binary(name, "mul", a, b)

    def concat(self, name: str, srcs: list[str]) -> str:
        metas = [self.meta(s) for s in srcs]
        res = metas[0][1]
        if any(r != res for _, r in metas):
            raise ValueError(f"{name}: cannot concat across resolutions")
        return self._out(LayerSpec(name, "concat", tuple(srcs), name + ".out", res,
                                   sum(c for c, _ in metas)))

    def upsample(self, name: str, src: str) -> str:
        ch, res = self.meta(src)
        if res != QUARTER:
            raise ValueError(f"{name}: upsampling expects quarter-resolution input")
        return self._out(LayerSpec(name, "upsample2x", (src,), name + ".out", FULL, ch))

    def finish(self, output: str) -> GraphSpec:
        self.meta(output)
        return GraphSpec(self.name, self.inputs, output, self.layers, self.weights)


# ---------------------------------------------------------------------------
# block emitters


def _emit_attention(b: GraphBuilder, prefix: str, feat: str, ref: str,
                    cfg: NetworkConfig) -> str:
    """Sigmoid gate from the [feat, ref] pair, applied pointwise to feat."""
    ch = b.meta(feat)[0]
    cat = b.concat(f"{prefix}.cat", [feat, ref])
    mid = 2 * ch if cfg.attention_wide else ch
    h = b.conv(f"{prefix}.conv1", cat, mid, act="lrelu")
    raw = b.conv(f"{prefix}.conv2", h, ch)
    gate = b.activation(f"{prefix}.gate", raw, "sigmoid")
    return b.mul(f"{prefix}.apply", feat, gate)


def _emit_deform_block(b: GraphBuilder, prefix: str, feat: str, ref: str,
                       cfg: NetworkConfig) -> str:
    """Guidance stack over [feat, ref] predicts offsets and a mask; the
    deformable convolution then realigns feat."""
    ch = b.meta(feat)[0]
    g = b.concat(f"{prefix}.cat", [feat, ref])
    for i in range(cfg.guidance_depth):
        g = b.conv(f"{prefix}.guide{i + 1}", g, ch, act="lrelu")
    taps = 9 * cfg.deform_groups
    offs = b.conv(f"{prefix}.offsets", g, 2 * taps, init="zero")
    mask = b.conv(f"{prefix}.mask", g, taps, init="zero")
    mask = b.activation(f"{prefix}.mask_gate", mask, "sigmoid")
    return b.deform(f"{prefix}.dconv", feat, offs, mask, ch, cfg.deform_groups)


def _emit_drdb(b: GraphBuilder, prefix: str, src: str, cfg: NetworkConfig) -> str:
    """Densely connected dilated 3x3 convs, 1x1 local fusion, residual skip."""
    ch = b.meta(src)[0]
    feats = [src]
    for i in range(cfg.drdb_depth):
        inp = feats[0] if len(feats) == 1 else b.concat(f"{prefix}.cat{i + 1}", list(feats))
        feats.append(b.conv(f"{prefix}.dense{i + 1}", inp, cfg.drdb_growth,
                            dilation=2, act="lrelu"))
    cat = b.concat(f"{prefix}.cat_fuse", list(feats))
    fused = b.conv(f"{prefix}.fuse", cat, ch, kernel=1)
    return b.add(f"{prefix}.residual", fused, src)


def _emit_dual_branch(b: GraphBuilder, cfg: NetworkConfig, *, align_kind: str,
                      low_res: bool) -> str:
    x = [n for n, _ in b.inputs]
    z0 = [b.conv(f"encode.b{i + 1}", x[i], cfg.ch, weight="encode", act="lrelu")
          for i in range(3)]

    # full-resolution branch: align each non-reference bracket against the reference
    emit_align = _emit_deform_block if align_kind == "deform" else _emit_attention
    a1 = emit_align(b, "align1", z0[0], z0[1], cfg)
    a3 = emit_align(b, "align3", z0[2], z0[1], cfg)
    f0 = b.concat("full.cat", [a1, z0[1], a3])
    f0 = b.conv("full.fuse", f0, cfg.ch, act="lrelu")
    for i in range(cfg.drdb_per_branch):
        f0 = _emit_drdb(b, f"full.drdb{i + 1}", f0, cfg)

    # reduced branch: shared (optionally strided) conv, then attention gating
    stride = 2 if low_res else 1
    z1 = [b.conv(f"down.b{i + 1}", z0[i], cfg.ch, stride=stride, weight="down", act="lrelu")
          for i in range(3)]
    s1 = _emit_attention(b, "att1", z1[0], z1[1], cfg)
    s3 = _emit_attention(b, "att3", z1[2], z1[1], cfg)
    f1 = b.concat("low.cat", [s1, z1[1], s3])
    f1 = b.conv("low.fuse", f1, cfg.ch, act="lrelu")
    for i in range(cfg.drdb_low):
        f1 = _emit_drdb(b, f"low.drdb{i + 1}", f1, cfg)

    # dual-branch fusion and the reconstruction head with a global skip
    if low_res:
        f1 = b.upsample("dbf.upsample", f1)
    merged = b.concat("dbf.cat", [f0, f1])
    merged = b.conv("dbf.fuse", merged, cfg.ch, act="lrelu")
    if cfg.skip_mode == "add":
        head_in = b.add("head.skip", merged, z0[1])
    else:
        head_in = b.concat("head.skip", [merged, z0[1]])
    h = b.conv("head.conv1", head_in, cfg.ch, act="lrelu")
    return b.conv("head.conv2", h, 3, act="relu")


# ---------------------------------------------------------------------------
# public builders


def build_drhdr(cfg: NetworkConfig) -> GraphSpec:
    if cfg.variant != "drhdr":
        raise ValueError(f"build_drhdr got variant {cfg.variant!r}")
    b = GraphBuilder("drhdr", [("x1", 6), ("x2", 6), ("x3", 6)], cfg.leaky_slope)
    out = _emit_dual_branch(b, cfg, align_kind="deform", low_res=True)
    return b.finish(out)


def build_ours_star(cfg: NetworkConfig) -> GraphSpec:
    if cfg.variant != "ours-star":
        raise ValueError(f"build_ours_star got variant {cfg.variant!r}")
    b = GraphBuilder("ours-star", [("x1", 6), ("x2", 6), ("x3", 6)], cfg.leaky_slope)
    out = _emit_dual_branch(b, cfg, align_kind="deform", low_res=False)
    return b.finish(out)


def build_variant_a(cfg: NetworkConfig) -> GraphSpec:
    if cfg.variant != "variant-a":
        raise ValueError(f"build_variant_a got variant {cfg.variant!r}")
    b = GraphBuilder("variant-a", [("x1", 6), ("x2", 6), ("x3", 6)], cfg.leaky_slope)
    out = _emit_dual_branch(b, cfg, align_kind="attention", low_res=True)
    return b.finish(out)


def build_variant_b(cfg: NetworkConfig) -> GraphSpec:
    if cfg.variant != "variant-b":
        raise ValueError(f"build_variant_b got variant {cfg.variant!r}")
    b = GraphBuilder("variant-b", [("x1", 6), ("x2", 6), ("x3", 6)], cfg.leaky_slope)
    out = _emit_dual_branch(b, cfg, align_kind="deform", low_res=True)
    return b.finish(out)


def build_ahdr(cfg: NetworkConfig) -> GraphSpec:
    """Single full-resolution branch with attention gating, three dense blocks
    with global feature fusion, a global residual and the reconstruction head."""
    if cfg.variant != "ahdr":
        raise ValueError(f"build_ahdr got variant {cfg.variant!r}")
    b = GraphBuilder("ahdr", [("x1", 6), ("x2", 6), ("x3", 6)], cfg.leaky_slope)
    x = [n for n, _ in b.inputs]
    z = [b.conv(f"encode.b{i + 1}", x[i], cfg.ch, weight="encode", act="lrelu")
         for i in range(3)]
    a1 = _emit_attention(b, "att1", z[0], z[1], cfg)
    a3 = _emit_attention(b, "att3", z[2], z[1], cfg)
    cat = b.concat("merge.cat", [a1, z[1], a3])
    cur = b.conv("merge.fuse", cat, cfg.ch)
    blocks = []
    for i in range(cfg.drdb_per_branch):
        cur = _emit_drdb(b, f"drdb{i + 1}", cur, cfg)
        blocks.append(cur)
    gff = b.concat("gff.cat", blocks)
    gff = b.conv("gff.conv1x1", gff, cfg.ch, kernel=1)
    gff = b.conv("gff.conv3x3", gff, cfg.ch)
    merged = b.add("global.skip", gff, z[1])
    h = b.conv("head.conv1", merged, cfg.ch, act="lrelu")
    out = b.conv("head.conv2", h, 3, act="relu")
    return b.finish(out)


_BUILDERS = {
    "drhdr": build_drhdr,
    "ahdr": build_ahdr,
    "variant-a": build_variant_a,
    "variant-b": build_variant_b,
    "ours-star": build_ours_star,
}

VARIANTS = {
    "drhdr": NetworkConfig.paper,
    "ahdr": NetworkConfig.ahdr,
    "variant-a": NetworkConfig.variant_a,
    "variant-b": NetworkConfig.variant_b,
    "ours-star": NetworkConfig.ours_star,
}


def build_graph(cfg: NetworkConfig) -> GraphSpec:
    try:
        return _BUILDERS[cfg.variant](cfg)
    except KeyError:
        raise ValueError(f"unknown variant {cfg.variant!r}") from None


def build_spatial_attention(cfg: NetworkConfig) -> GraphSpec:
    """Standalone attention gate: inputs ``feat`` and ``ref`` (ch each)."""
    b = GraphBuilder("spatial-attention", [("feat", cfg.ch), ("ref", cfg.ch)], cfg.leaky_slope)
    return b.finish(_emit_attention(b, "att", "feat", "ref", cfg))


def build_deformable_block(cfg: NetworkConfig) -> GraphSpec:
    """Standalone deformable alignment block: inputs ``feat`` and ``ref``."""
    b = GraphBuilder("deformable-block", [("feat", cfg.ch), ("ref", cfg.ch)], cfg.leaky_slope)
    return b.finish(_emit_deform_block(b, "def", "feat", "ref", cfg))


def build_drdb(cfg: NetworkConfig) -> GraphSpec:
    """Standalone dilated residual dense block: input ``feat``."""
    b = GraphBuilder("drdb", [("feat", cfg.ch)], cfg.leaky_slope)
    return b.finish(_emit_drdb(b, "drdb", "feat", cfg))


# ---------------------------------------------------------------------------
# execution


def _check_weights(graph: GraphSpec, weights: dict[str, Tensor]) -> None:
    for key, spec in graph.weights.items():
        wk = key + ".w"
        if wk not in weights:
            raise ValueError(f"graph {graph.name}: missing weight {wk!r}")
        if tuple(weights[wk].shape) != spec.shape:
            raise ValueError(
                f"graph {graph.name}: weight {wk!r} has shape {weights[wk].shape}, expected {spec.shape}")
        if spec.bias is not None:
            bk = key + ".b"
            if bk not in weights:
                raise ValueError(f"graph {graph.name}: missing bias {bk!r}")
            if tuple(weights[bk].shape) != spec.bias:
                raise ValueError(
                    f"graph {graph.name}: bias {bk!r} has shape {weights[bk].shape}, expected {spec.bias}")


def forward_eval(graph: GraphSpec, weights: dict[str, Tensor], inputs: list[Tensor],
                 trace: dict | None = None) -> Tensor:
    """Execute the graph; under an active tape with gradient-tracked inputs or
    weights, every node is recorded for backward."""
    if len(inputs) != len(graph.inputs):
        raise ValueError(f"graph {graph.name}: expected {len(graph.inputs)} inputs, got {len(inputs)}")
    _check_weights(graph, weights)
    env: dict[str, Tensor] = {}
    for (name, ch), t in zip(graph.inputs, inputs):
        b_, c, h, w = t.shape
        if c != ch:
            raise ValueError(f"graph {graph.name}: input {name!r} has {c} channels, expected {ch}")
        if graph.has_quarter and (h % 2 or w % 2):
            raise ValueError(f"graph {graph.name}: input {name!r} is {h}x{w}; "
                             "the strided branch needs even H and W")
        env[name] = t

    for layer in graph.layers:
        srcs = [env[n] for n in layer.inputs]
        if layer.kind == "conv":
            w = weights[layer.weight + ".w"]
            b = weights.get(layer.weight + ".b")
            out = ops.conv2d(srcs[0], w, b, layer.conv)
        elif layer.kind == "deform":
            w = weights[layer.weight + ".w"]
            b = weights.get(layer.weight + ".b")
            out = ops.deform_conv2d(srcs[0], srcs[1], srcs[2], w, b, layer.deform)
        elif layer.kind == "lrelu":
            out = ops.leaky_relu(srcs[0], layer.slope)
        elif layer.kind == "relu":
            out = ops.relu(srcs[0])
        elif layer.kind == "sigmoid":
            out = ops.sigmoid(srcs[0])
        elif layer.kind == "add":
            out = T.add(srcs[0], srcs[1])
        elif layer.kind == "mul":
            out = T.mul(srcs[0], srcs[1])
        elif layer.kind == "concat":
            out = ops.concat_channels(srcs)
        elif layer.kind == "upsample2x":
            out = ops.bilinear_upsample_x2(srcs[0])
        else:
            raise ValueError(f"graph {graph.name}: unknown layer kind {layer.kind!r}")
        if not np.isfinite(out.data).all():
            raise NumericError(f"graph {graph.name}: non-finite values after layer {layer.name!r}")
        if trace is not None:
            trace[layer.name] = out.shape
        env[layer.output] = out
    return env[graph.output]


def init_weights(graph: GraphSpec, rng: np.random.Generator,
                 requires_grad: bool = False) -> dict[str, Tensor]:
    """He-normal kernels, zero biases; offset/mask predictors start at zero so
    the deformable blocks begin as (half-gated) plain convolutions."""
    out: dict[str, Tensor] = {}
    for key, spec in graph.weights.items():
        if spec.init == "zero":
            w = np.zeros(spec.shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(spec.shape[1:]))
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), spec.shape).astype(np.float32)
        out[key + ".w"] = Tensor(w, requires_grad=requires_grad)
        if spec.bias is not None:
            out[key + ".b"] = Tensor(np.zeros(spec.bias, dtype=np.float32),
                                     requires_grad=requires_grad)
    return out
