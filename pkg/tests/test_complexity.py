import json

import numpy as np
import torch

from cxrscreen.architecture import ArchSpec, LayerKind, LayerSpec, build_model, cxr2_tiny
from cxrscreen.complexity import complexity_report, count_macs, count_params, render_json, render_table
from oracles import brute_force_complexity
from test_architecture import random_spec


def test_cxr2_tiny_totals():
    spec = cxr2_tiny()
    report = complexity_report(spec)
    assert report.total_params == 46_361
    assert report.total_macs == 5_923_904


def test_cxr2_tiny_matches_brute_force():
    spec = cxr2_tiny()
    params, macs = brute_force_complexity(spec)
    assert count_params(spec) == params
    assert count_macs(spec) == macs


def test_analytic_params_equal_torch_parameter_count():
    for seed in (0, 1, 2):
        spec = random_spec(np.random.default_rng(100 + seed))
        model = build_model(spec)
        torch_params = sum(p.numel() for p in model.parameters())
        assert count_params(spec) == torch_params
    spec = cxr2_tiny()
    model = build_model(spec)
    assert count_params(spec) == sum(p.numel() for p in model.parameters())


def test_random_specs_match_brute_force():
    rng = np.random.default_rng(777)
    for _ in range(20):
        spec = random_spec(rng)
        params, macs = brute_force_complexity(spec)
        assert count_params(spec) == params
        assert count_macs(spec) == macs


def test_totals_are_row_sums():
    report = complexity_report(cxr2_tiny())
    assert report.total_params == sum(r.params for r in report.rows)
    assert report.total_macs == sum(r.macs for r in report.rows)


def test_zero_cost_rows():
    report = complexity_report(cxr2_tiny())
    by_label = {r.label: r for r in report.rows}
    for label, row in by_label.items():
        kind = label.split(":")[-1]
        if kind in ("pool", "activation", "global_pool"):
            assert row.params == 0
            assert row.macs == 0


def test_adapter_rows_only_on_channel_mismatch():
    def make(mid):
        return ArchSpec(
            name="t",
            input_shape=(1, 16, 16),
            layers=(
                LayerSpec(LayerKind.CONV_POINTWISE, 1, 8),
                LayerSpec(LayerKind.CONV_POINTWISE, 8, mid),
                LayerSpec(LayerKind.CONV_POINTWISE, mid, 4),
                LayerSpec(LayerKind.GLOBAL_POOL),
            ),
            long_range_edges=((0, 2),),
        )

    labels_same = [r.label for r in complexity_report(make(8)).rows]
    labels_diff = [r.label for r in complexity_report(make(12)).rows]
    assert not any(l.startswith("adapter") for l in labels_same)
    assert "adapter:0->2" in labels_diff
    adapter = next(r for r in complexity_report(make(12)).rows if r.label == "adapter:0->2")
    # 1x1 conv 8 -> 12 with bias at 16x16
    assert adapter.params == 8 * 12 + 12
    assert adapter.macs == 8 * 12 * 16 * 16


def test_head_row_present():
    report = complexity_report(cxr2_tiny())
    head = next(r for r in report.rows if r.label == "head:dense")
    assert head.params == 96 + 1
    assert head.macs == 96


def test_params_invariant_to_input_size_macs_not():
    spec = cxr2_tiny()
    small = complexity_report(spec, input_hw=(240, 240))
    full = complexity_report(spec)
    assert small.total_params == full.total_params
    assert small.total_macs < full.total_macs


def test_macs_at_custom_input_match_brute_force():
    spec = cxr2_tiny()
    resized = ArchSpec(
        name=spec.name,
        input_shape=(1, 240, 240),
        layers=spec.layers,
        long_range_edges=spec.long_range_edges,
    )
    params, macs = brute_force_complexity(resized)
    assert count_params(spec) == params
    assert count_macs(spec, input_hw=(240, 240)) == macs


def test_render_table_contains_every_row_and_totals():
    report = complexity_report(cxr2_tiny())
    table = render_table(report)
    for row in report.rows:
        assert row.label in table
    assert "46,361" in table or "46361" in table
    assert "5,923,904" in table or "5923904" in table


def test_render_json_round_trips_totals():
    report = complexity_report(cxr2_tiny())
    payload = json.loads(render_json(report))
    assert payload["total_params"] == 46_361
    assert payload["total_macs"] == 5_923_904
    assert len(payload["layers"]) == len(report.rows)
    assert sum(r["params"] for r in payload["layers"]) == 46_361
