"""Analytic MAC model: closed-form counts vs instrumented execution, affine
scaling in depth, and report serialization."""

import numpy as np
import pytest

from dyhead.flops import (
    BlockConfig,
    count_block,
    instrumented_block_macs,
    report_summary,
    report_to_csv,
    stack_cost_curve,
)


def small_cfg(**kw):
    base = dict(num_levels=3, height=4, width=4, channels=8)
    base.update(kw)
    return BlockConfig(**base)


class TestAnalyticCounts:
    def test_scale_stage_formula(self):
        cfg = small_cfg()
        rep = count_block(cfg)
        lsc = 3 * 16 * 8
        assert rep.per_stage["scale"] == 2 * lsc + 3

    def test_scale_stage_linear_descriptor(self):
        rep = count_block(small_cfg(descriptor_mode="mean_s_linear_c"))
        lsc = 3 * 16 * 8
        assert rep.per_stage["scale"] == 2 * lsc + 3 * 8

    def test_spatial_stage_formula(self):
        cfg = small_cfg()
        L, S, C, K = 3, 16, 8, 9
        expected = S * 9 * C * 3 * K + 4 * L * K * S * C + L * K * S * C \
            + K * S * C + S * C
        assert count_block(cfg).per_stage["spatial"] == expected

    def test_channel_mix_dominates_depthwise(self):
        dw = count_block(small_cfg()).per_stage["spatial"]
        cm = count_block(small_cfg(kernel_mode="channel_mix")).per_stage["spatial"]
        assert cm - dw == 3 * 9 * 16 * 8 * 8 - 3 * 9 * 16 * 8

    def test_task_stage_formula(self):
        cfg = small_cfg()
        lsc = 3 * 16 * 8
        assert count_block(cfg).per_stage["task"] == 3 * lsc + 5 * 8 * 8 // 4 + 24 * 8

    def test_flops_are_twice_macs(self):
        rep = count_block(small_cfg())
        assert rep.total_flops == 2 * rep.total_macs


class TestDepthScaling:
    def test_depth_multiplies_every_stage(self):
        one = count_block(small_cfg(depth=1))
        six = count_block(small_cfg(depth=6))
        for stage in ("scale", "spatial", "task"):
            assert six.per_stage[stage] == 6 * one.per_stage[stage]

    def test_cost_curve_affine_in_depth(self):
        rows = stack_cost_curve(small_cfg(), depths=[1, 2, 3, 4, 5, 6])
        totals = [r[1] for r in rows]
        deltas = {totals[i + 1] - totals[i] for i in range(len(totals) - 1)}
        assert len(deltas) == 1
        assert deltas.pop() == count_block(small_cfg(depth=1)).total_macs

    def test_cost_curve_empty_depths_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            stack_cost_curve(small_cfg(), depths=[])


class TestInstrumentedAgreement:
    @pytest.mark.parametrize("seed", range(5))
    def test_analytic_equals_instrumented_random_configs(self, seed):
        rng = np.random.default_rng(1000 + seed)
        cfg = BlockConfig(
            num_levels=int(rng.integers(1, 5)),
            height=int(rng.integers(2, 7)),
            width=int(rng.integers(2, 7)),
            channels=int(rng.choice([4, 8, 12])),
            depth=int(rng.integers(1, 4)),
            descriptor_mode=str(rng.choice(["mean_sc", "mean_s_linear_c"])),
            kernel_mode=str(rng.choice(["depthwise", "channel_mix"])),
        )
        analytic = count_block(cfg).per_stage
        measured = instrumented_block_macs(cfg, seed=seed)
        assert measured == analytic, f"cfg={cfg}"

    def test_depth_zero_executes_nothing(self):
        assert instrumented_block_macs(small_cfg(depth=0)) == {}


class TestReports:
    def test_csv_round_trip(self):
        rep = count_block(small_cfg())
        text = report_to_csv(rep)
        lines = text.strip().splitlines()
        assert lines[0] == "stage,macs,flops"
        total_row = lines[-1].split(",")
        assert total_row[0] == "total"
        assert int(total_row[1]) == rep.total_macs
        body = {ln.split(",")[0]: int(ln.split(",")[1]) for ln in lines[1:-1]}
        assert sum(body.values()) == rep.total_macs

    def test_summary_mentions_counting_convention(self):
        rep = count_block(small_cfg())
        text = report_summary(rep)
        assert "MAC" in text
        assert "total" in text
