"""Static cost accounting: multiply-accumulates and parameters per layer.

Nothing here executes the network; costs are derived from the configuration
and the input size alone. Conventions:

* MAC = one scalar multiply-accumulate. FLOPs are reported as 2 x MACs.
* Attention follows ``4*h*w*C^2 + 2*(h*w)^2*C``: the first term is the
  q/k/v and output projections, the second the score and value products.
* Elementwise work (activations, residual adds, gating, DyT, softmax,
  resize) is counted in mac-equivalents on rows of kind ``elementwise`` so it
  can be excluded: 1 per element for activations/adds/pooling, 3 for DyT and
  softmax, 4 per output element for bilinear resize, 5 per pixel for the
  colour transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .blocks import EMSDC_DILATIONS, EMSDC_GROUPS
from .model import EXPOSURES, ModelConfig
from .tensor import ConvSpec

COMPUTE = "compute"
ELEMENTWISE = "elementwise"


@dataclass(frozen=True)
class LayerCost:
    name: str
    macs: int
    params: int = 0
    kind: str = COMPUTE

    def __post_init__(self):
        if self.macs < 0 or self.params < 0:
            raise ValueError(f"negative cost in {self}")

    @property
    def flops(self) -> int:
        return 2 * self.macs


@dataclass(frozen=True)
class AttentionDims:
    h: int
    w: int
    C: int

    def __post_init__(self):
        if min(self.h, self.w, self.C) < 1:
            raise ValueError(f"attention dims must be >= 1: {self}")


def msa_terms(d: AttentionDims) -> tuple[int, int]:
    """(projection MACs, token-mixing MACs) = (4hwC^2, 2(hw)^2 C)."""
    n = d.h * d.w
    return 4 * n * d.C * d.C, 2 * n * n * d.C


def count_msa(d: AttentionDims, name: str = "msa") -> LayerCost:
    proj, mix = msa_terms(d)
    return LayerCost(name, proj + mix, 4 * d.C * d.C + 4 * d.C)


def count_conv(spec: ConvSpec, out_h: int, out_w: int, name: str = "conv", bias: bool = True) -> LayerCost:
    kh, kw = spec.kernel
    fan_in = spec.in_channels // spec.groups * kh * kw
    return LayerCost(
        name,
        out_h * out_w * spec.out_channels * fan_in,
        spec.out_channels * fan_in + (spec.out_channels if bias else 0),
    )


def count_linear(in_features: int, out_features: int, rows: int, name: str) -> LayerCost:
    return LayerCost(name, rows * in_features * out_features, in_features * out_features + out_features)


def _elementwise(name: str, n: int, per: int = 1, params: int = 0) -> LayerCost:
    return LayerCost(name, n * per, params, ELEMENTWISE)


@dataclass
class CostReport:
    layers: list
    config: ModelConfig | None = None
    input_hw: tuple | None = None
    label: str = ""

    def total(self, attr: str = "macs", kind: str | None = None) -> int:
        return sum(getattr(l, attr) for l in self.layers if kind is None or l.kind == kind)

    @property
    def macs(self) -> int:
        return self.total("macs")

    @property
    def flops(self) -> int:
        return self.total("flops")

    @property
    def params(self) -> int:
        return self.total("params")

    def layer(self, name: str) -> LayerCost:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def prefix_total(self, prefix: str, attr: str = "macs") -> int:
        return sum(getattr(l, attr) for l in self.layers if l.name.startswith(prefix))


class _Walker:
    def __init__(self):
        self.layers = []

    def conv(self, name, cout, cin, k, h, w, stride=1, dilation=1, groups=1):
        spec = ConvSpec(cout, cin, k, stride, dilation, groups, dilation * (k - 1) // 2)
        oh, ow = spec.output_size(h, w)
        self.layers.append(count_conv(spec, oh, ow, name))
        return oh, ow

    def linear(self, name, cin, cout, rows):
        self.layers.append(count_linear(cin, cout, rows, name))

    def ew(self, name, n, per=1, params=0):
        self.layers.append(_elementwise(name, n, per, params))

    def se(self, name, c, r, hw):
        self.ew(f"{name}.pool", c * hw)
        self.linear(f"{name}.reduce", c, c // r, 1)
        self.ew(f"{name}.relu", c // r)
        self.linear(f"{name}.expand", c // r, c, 1)
        self.ew(f"{name}.sigmoid", c)
        self.ew(f"{name}.gate", c * hw)


def count_model(cfg: ModelConfig, input_h: int, input_w: int, label: str = "") -> CostReport:
    """Walk the forward pass of ``cfg`` at ``input_h x input_w`` and cost every layer."""
    cfg.validate()
    if input_h < cfg.ire_stride or input_w < cfg.ire_stride:
        raise ValueError(f"input {input_h}x{input_w} smaller than the embedding stride")
    s, c, d, r = cfg.ire_stride, cfg.base_channels, cfg.embed_dim, cfg.se_reduction
    hp, wp = -(-input_h // s) * s, -(-input_w // s) * s
    full = hp * wp
    wk = _Walker()

    for k in EXPOSURES:
        wk.ew(f"color.{k}", full, 5)
        wk.conv(f"stem.{k}.conv0", c, 3, 3, hp, wp)
    for pair in ("over", "under"):
        p = f"iaaf.{pair}"
        wk.conv(f"{p}.pre", c, 2 * c, 3, hp, wp)
        wk.conv(f"{p}.res.conv0", c, c, 3, hp, wp)
        wk.ew(f"{p}.res.gelu", c * full)
        wk.conv(f"{p}.res.conv1", c, c, 3, hp, wp)
        wk.ew(f"{p}.res.add", c * full)
        wk.conv(f"{p}.post", c, c, 3, hp, wp)
        wk.ew(f"{p}.fuse", c * full, 2)

    e = cfg.expanded_channels
    wk.conv("ire.expand", e, cfg.fusion_channels, 1, hp, wp)
    gh, gw = wk.conv("ire.dw", e, e, 3, hp, wp, stride=s, groups=e)
    n = gh * gw
    wk.se("ire.se", e, r, n)
    wk.conv("ire.project", d, e, 1, gh, gw)

    m = cfg.mlp_ratio * d
    for i in range(cfg.num_blocks):
        p = f"blocks.{i}"
        wk.ew(f"{p}.dyt1", n * d, 3, params=2 * d + 1)
        proj, mix = msa_terms(AttentionDims(gh, gw, d))
        wk.layers.append(LayerCost(f"{p}.attn.proj", proj, 4 * d * d + 4 * d))
        wk.ew(f"{p}.attn.scale", n * d)
        wk.layers.append(LayerCost(f"{p}.attn.scores", mix, 0))
        wk.ew(f"{p}.attn.softmax", n * n * cfg.heads, 3)
        wk.conv(f"{p}.lce.dw", d, d, 3, gh, gw, groups=d)
        wk.ew(f"{p}.lce.gelu", n * d)
        wk.conv(f"{p}.lce.pw", d, d, 1, gh, gw)
        wk.se(f"{p}.lce.se", d, r, n)
        wk.ew(f"{p}.residual1", n * d, 2)
        wk.ew(f"{p}.dyt2", n * d, 3, params=2 * d + 1)
        wk.linear(f"{p}.mlp.fc1", d, m, n)
        wk.ew(f"{p}.mlp.gelu", n * m)
        wk.linear(f"{p}.mlp.fc2", m, d, n)
        wk.ew(f"{p}.residual2", n * d)
        for j, dil in enumerate(EMSDC_DILATIONS):
            wk.conv(f"{p}.emsdc.branch{j}", d, d, 3, gh, gw, dilation=dil, groups=EMSDC_GROUPS)
            if cfg.emsdc_activation == "rprelu":
                wk.ew(f"{p}.emsdc.act{j}", n * d, 3, params=3 * d)
            else:
                wk.ew(f"{p}.emsdc.act{j}", n * d)
        wk.ew(f"{p}.emsdc.sum", n * d, len(EMSDC_DILATIONS) - 1)
        wk.conv(f"{p}.emsdc.merge", d, d, 1, gh, gw)
        wk.ew(f"{p}.emsdc.add", n * d)

    wk.ew("recon.resize", d * full, 4)
    wk.conv("recon.conv0", c, d, 3, hp, wp)
    wk.ew("recon.skip", c * full)
    wk.ew("recon.gelu", c * full)
    wk.conv("recon.conv1", 3, c, 3, hp, wp)
    wk.ew("recon.sigmoid", 3 * full)
    return CostReport(wk.layers, cfg, (input_h, input_w), label or cfg.variant)


# ---------------------------------------------------------------------------
# comparison


def _pct(new: int, base: int) -> float:
    return 0.0 if base == 0 else 100.0 * (new - base) / base


@dataclass
class Comparison:
    reports: list
    rows: list = field(default_factory=list)  # (label, macs, params, dmacs%, dparams%)

    def layer_ratio(self, name: str, index: int = 1) -> float:
        """macs of ``name`` in report ``index`` divided by the baseline's."""
        base = self.reports[0].layer(name).macs
        return self.reports[index].layer(name).macs / base


def compare_variants(cfgs, input_h: int, input_w: int, labels=None) -> Comparison:
    if len(cfgs) < 2:
        raise ValueError("compare_variants needs at least two configurations")
    labels = labels or [c.variant for c in cfgs]
    reports = [count_model(c, input_h, input_w, lab) for c, lab in zip(cfgs, labels)]
    base = reports[0]
    rows = [(r.label, r.macs, r.params, _pct(r.macs, base.macs), _pct(r.params, base.params)) for r in reports]
    return Comparison(reports, rows)


def stride_reduction(cfg: ModelConfig, input_h: int, input_w: int) -> float:
    """Percent fewer total MACs at ``cfg.ire_stride`` than with stride 1."""
    dense = count_model(cfg.replace(ire_stride=1), input_h, input_w).macs
    strided = count_model(cfg, input_h, input_w).macs
    return 100.0 * (dense - strided) / dense


# ---------------------------------------------------------------------------
# rendering


HEADER = "MACs = multiply-accumulates; FLOPs = 2 x MACs; attention per 4hwC^2 + 2(hw)^2C (MAC convention)"


def render_text(report: CostReport) -> str:
    width = max(len(l.name) for l in report.layers) + 2
    cfg = report.config
    lines = [f"# {report.label}: {cfg.variant if cfg else '?'} input {report.input_hw[0]}x{report.input_hw[1]}",
             f"# {HEADER}",
             f"{'layer':<{width}}{'kind':<13}{'macs':>16}{'flops':>16}{'params':>12}"]
    for l in report.layers:
        lines.append(f"{l.name:<{width}}{l.kind:<13}{l.macs:>16,}{l.flops:>16,}{l.params:>12,}")
    for kind in (COMPUTE, ELEMENTWISE):
        lines.append(f"{'subtotal ' + kind:<{width + 13}}{report.total('macs', kind):>16,}"
                     f"{report.total('flops', kind):>16,}{report.total('params', kind):>12,}")
    lines.append(f"{'TOTAL':<{width + 13}}{report.macs:>16,}{report.flops:>16,}{report.params:>12,}")
    return "\n".join(lines) + "\n"


def render_tsv(report: CostReport) -> str:
    lines = [f"# report\t{report.label}", "# name\tmacs\tflops\tparams"]
    lines += [f"{l.name}\t{l.macs}\t{l.flops}\t{l.params}" for l in report.layers]
    lines.append(f"TOTAL\t{report.macs}\t{report.flops}\t{report.params}")
    return "\n".join(lines) + "\n"


def parse_tsv(text: str) -> dict:
    """Read ``render_tsv`` output back: ``{label: {name: (macs, flops, params)}}``."""
    out, current = {}, None
    for line in text.splitlines():
        if line.startswith("# report\t"):
            current = out.setdefault(line.split("\t", 1)[1], {})
        elif line and not line.startswith("#") and current is not None:
            name, macs, flops, params = line.split("\t")
            current[name] = (int(macs), int(flops), int(params))
            if name == "TOTAL":
                current = None  # later COMPARE/REDUCTION rows belong to no report
    return out


def render_comparison(cmp: Comparison, fmt: str = "text") -> str:
    if fmt == "tsv":
        lines = ["# compare\tlabel\tmacs\tparams\tdelta_macs_pct\tdelta_params_pct"]
        lines += [f"COMPARE\t{lab}\t{m}\t{p}\t{dm:.4f}\t{dp:.4f}" for lab, m, p, dm, dp in cmp.rows]
        return "\n".join(lines) + "\n"
    lines = [f"{'variant':<12}{'macs':>18}{'params':>12}{'d_macs':>10}{'d_params':>10}"]
    lines += [f"{lab:<12}{m:>18,}{p:>12,}{dm:>+9.2f}%{dp:>+9.2f}%" for lab, m, p, dm, dp in cmp.rows]
    base = cmp.reports[0]
    attn = [l.name for l in base.layers if l.name.endswith((".attn.proj", ".attn.scores"))]
    common = [n for n in attn if all(any(x.name == n for x in r.layers) for r in cmp.reports[1:])]
    if common:
        lines.append("")
        lines.append(f"{'attention row':<24}" + "".join(f"{r.label:>14}" for r in cmp.reports[1:]))
        for name in common:
            ratios = "".join(f"{cmp.layer_ratio(name, i):>14.6g}" for i in range(1, len(cmp.reports)))
            lines.append(f"{name:<24}{ratios}")
    return "\n".join(lines) + "\n"
