"""Analytic parameter and multiply-accumulate accounting for ArchSpecs.

Conventions (mirrored by the model builder):
  * convolution params include bias: k^2 * Cin * Cout + Cout
  * convolution MACs count every kernel tap, padding taps included:
    k^2 * Cin * Cout * Hout * Wout with Hout = ceil(Hin / stride)
  * depthwise convolution: k^2 * C * multiplier (+ bias) per spatial position
  * dense: in * out MACs, in * out + out params
  * pooling, global pooling, activations, and additive skip merges cost 0
  * PRPE blocks are the sum of their four stages; with "concat" combine the
    middle projection reads replicas * internal channels
  * skip-edge 1x1 channel adapters are counted at the merge's spatial size
  * the sigmoid head (dense features -> 1) is always included

The report carries one row per layer plus rows for the head and for each
adapter; totals are the exact sums of the rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .architecture import (
    ArchSpec,
    LayerKind,
    LayerSpec,
    PRPEBlockSpec,
    Shape,
    propagate_shapes,
)


@dataclass(frozen=True)
class LayerCost:
    label: str
    params: int
    macs: int
    output_shape: tuple


@dataclass(frozen=True)
class ComplexityReport:
    spec_name: str
    input_shape: tuple[int, int, int]
    rows: tuple[LayerCost, ...]

    @property
    def total_params(self) -> int:
        return sum(row.params for row in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(row.macs for row in self.rows)


def _conv_cost(cin: int, cout: int, kernel: int, out_hw: int) -> tuple[int, int]:
    params = kernel * kernel * cin * cout + cout
    macs = kernel * kernel * cin * cout * out_hw
    return params, macs


def _prpe_cost(block: PRPEBlockSpec, kernel: int, out_hw: int) -> tuple[int, int]:
    inner = block.internal_channels
    p1, m1 = _conv_cost(block.in_channels, inner, 1, out_hw)
    # replicated depthwise transforms: each one k^2 taps per channel
    pb = block.replicas * (kernel * kernel * inner + inner)
    mb = block.replicas * (kernel * kernel * inner * out_hw)
    p2, m2 = _conv_cost(block.merge_channels, inner, 1, out_hw)
    p3, m3 = _conv_cost(inner, block.expand_channels, 1, out_hw)
    return p1 + pb + p2 + p3, m1 + mb + m2 + m3


def _layer_cost(layer: LayerSpec, out_shape: Shape, index: int) -> LayerCost:
    label = f"{index}:{layer.kind.value}"
    if layer.kind in (LayerKind.POOL, LayerKind.GLOBAL_POOL, LayerKind.ACTIVATION):
        shape = out_shape[1:] if out_shape[0] == "map" else (out_shape[1],)
        return LayerCost(label, 0, 0, tuple(shape))
    if layer.kind is LayerKind.DENSE:
        params = layer.in_channels * layer.out_channels + layer.out_channels
        macs = layer.in_channels * layer.out_channels
        return LayerCost(label, params, macs, (layer.out_channels,))
    _, c, h, w = out_shape
    hw = h * w
    if layer.kind is LayerKind.PRPE_BLOCK:
        params, macs = _prpe_cost(PRPEBlockSpec.from_layer(layer), layer.kernel, hw)
    elif layer.kind is LayerKind.CONV_DEPTHWISE:
        mult = int(layer.params.get("multiplier", 1))
        params = layer.kernel * layer.kernel * layer.in_channels * mult + layer.in_channels * mult
        macs = layer.kernel * layer.kernel * layer.in_channels * mult * hw
    else:
        params, macs = _conv_cost(layer.in_channels, layer.out_channels, layer.kernel, hw)
    return LayerCost(label, params, macs, (c, h, w))


def complexity_report(spec: ArchSpec, input_hw: tuple[int, int] | None = None) -> ComplexityReport:
    """Per-layer and total params/MACs, optionally at a non-default input size."""
    if input_hw is not None:
        spec = ArchSpec(
            name=spec.name,
            input_shape=(spec.input_shape[0], int(input_hw[0]), int(input_hw[1])),
            layers=spec.layers,
            long_range_edges=spec.long_range_edges,
        )
    shapes = propagate_shapes(spec)
    rows = [_layer_cost(layer, shapes[i], i) for i, layer in enumerate(spec.layers)]

    for src, dst in spec.long_range_edges:
        src_c = shapes[src][1]
        dst_c = shapes[dst - 1][1]
        if src_c == dst_c:
            continue  # direct add, no learned adapter
        _, _, h, w = shapes[dst - 1]
        params, macs = _conv_cost(src_c, dst_c, 1, h * w)
        rows.append(LayerCost(f"adapter:{src}->{dst}", params, macs, (dst_c, h, w)))

    features = shapes[-1][1]
    rows.append(LayerCost("head:dense", features * 1 + 1, features * 1, (1,)))
    return ComplexityReport(spec.name, spec.input_shape, tuple(rows))


def count_params(spec: ArchSpec) -> int:
    return complexity_report(spec).total_params


def count_macs(spec: ArchSpec, input_hw: tuple[int, int] | None = None) -> int:
    return complexity_report(spec, input_hw).total_macs


def render_table(report: ComplexityReport) -> str:
    name_w = max(len(r.label) for r in report.rows)
    name_w = max(name_w, len("layer"), len("total"))
    lines = [
        f"{report.spec_name}  (input {report.input_shape[0]}x{report.input_shape[1]}x{report.input_shape[2]})",
        f"{'layer':<{name_w}}  {'params':>12}  {'macs':>14}  output",
    ]
    for row in report.rows:
        shape = "x".join(str(v) for v in row.output_shape)
        lines.append(f"{row.label:<{name_w}}  {row.params:>12,}  {row.macs:>14,}  {shape}")
    lines.append(f"{'total':<{name_w}}  {report.total_params:>12,}  {report.total_macs:>14,}")
    return "\n".join(lines)


def render_json(report: ComplexityReport) -> str:
    payload = {
        "spec": report.spec_name,
        "input_shape": list(report.input_shape),
        "total_params": report.total_params,
        "total_macs": report.total_macs,
        "layers": [
            {
                "label": row.label,
                "params": row.params,
                "macs": row.macs,
                "output_shape": list(row.output_shape),
            }
            for row in report.rows
        ],
    }
    return json.dumps(payload, indent=2)
