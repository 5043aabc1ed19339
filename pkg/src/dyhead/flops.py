"""Analytic multiply-accumulate accounting for the attention stack.

Counting convention (also stated in every report header): one MAC is one
multiply-accumulate and equals 2 FLOPs. Multiplies inside elementwise
products, linear maps, convolutions, bilinear sampling (4 taps per point per
channel) and mean reductions are counted; pure adds, comparisons and
nonlinearities are not. The same convention is wired into the executing
kernels, so analytic counts can be cross-checked against instrumented runs.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import attention
from .tensor import Tensor, count_macs

__all__ = [
    "BlockConfig",
    "FlopReport",
    "count_block",
    "stack_cost_curve",
    "instrumented_block_macs",
    "report_to_csv",
    "report_summary",
]

COUNTING_NOTE = (
    "MACs counted (1 MAC = 2 FLOPs); multiplies in elementwise products, "
    "linear/conv kernels, 4-tap bilinear sampling and mean reductions; "
    "comparisons and nonlinearities excluded."
)


@dataclass
class BlockConfig:
    num_levels: int
    height: int
    width: int
    channels: int
    num_points: int = 9
    depth: int = 1
    descriptor_mode: str = "mean_sc"
    kernel_mode: str = "depthwise"
    reduction: int = 4

    @property
    def spatial_size(self):
        return self.height * self.width


@dataclass
class FlopReport:
    per_stage: dict = field(default_factory=dict)   # stage -> exact MACs
    config: BlockConfig = None

    @property
    def total_macs(self):
        return sum(self.per_stage.values())

    @property
    def total_flops(self):
        return 2 * self.total_macs


def _scale_macs(cfg: BlockConfig):
    lsc = cfg.num_levels * cfg.spatial_size * cfg.channels
    if cfg.descriptor_mode == "mean_sc":
        affine = cfg.num_levels
    else:
        affine = cfg.num_levels * cfg.channels
    return 2 * lsc + affine


def _spatial_macs(cfg: BlockConfig):
    L, S, C, K = cfg.num_levels, cfg.spatial_size, cfg.channels, cfg.num_points
    predictor = S * 9 * C * 3 * K
    sampling = 4 * L * K * S * C
    if cfg.kernel_mode == "depthwise":
        kernel = L * K * S * C
    else:
        kernel = L * K * S * C * C
    modulation = K * S * C
    level_average = S * C
    return predictor + sampling + kernel + modulation + level_average


def _task_macs(cfg: BlockConfig):
    L, S, C = cfg.num_levels, cfg.spatial_size, cfg.channels
    lsc = L * S * C
    fcs = 5 * C * C // cfg.reduction        # fc1: C^2/r, fc2: 4C^2/r
    small = 24 * C                          # standardize(16C) + squash(4C) + coeffs(4C)
    return 3 * lsc + fcs + small


def count_block(cfg: BlockConfig) -> FlopReport:
    """Exact per-stage MACs for cfg.depth stacked blocks."""
    per_block = {
        "scale": _scale_macs(cfg),
        "spatial": _spatial_macs(cfg),
        "task": _task_macs(cfg),
    }
    return FlopReport(per_stage={k: cfg.depth * v for k, v in per_block.items()},
                      config=cfg)


def stack_cost_curve(cfg: BlockConfig, depths):
    """Totals per depth; consecutive differences are constant by construction.

    Returns a list of (depth, total_macs, total_flops, per_stage dict) rows.
    Raises if the per-block delta is not exactly constant.
    """
    if not depths:
        raise ValueError("depths must be nonempty")
    rows = []
    for d in depths:
        c = BlockConfig(**{**cfg.__dict__, "depth": d})
        rep = count_block(c)
        rows.append((d, rep.total_macs, rep.total_flops, dict(rep.per_stage)))
    deltas = {(rows[i + 1][1] - rows[i][1]) // max(1, rows[i + 1][0] - rows[i][0])
              for i in range(len(rows) - 1)}
    if len(deltas) > 1:
        raise AssertionError(f"per-block cost not constant: deltas {deltas}")
    return rows


def instrumented_block_macs(cfg: BlockConfig, seed=0):
    """Execute a real forward pass with the MAC counter armed.

    Independent check on the analytic model: counts come from the kernels as
    they run, not from the closed-form formulas.
    """
    rng = np.random.default_rng(seed)
    stack = attention.init_stack(
        cfg.depth, cfg.num_levels, cfg.channels, rng,
        num_points=cfg.num_points, descriptor_mode=cfg.descriptor_mode,
        kernel_mode=cfg.kernel_mode, reduction=cfg.reduction)
    # randomize away from the all-zero init so no degenerate fast paths hide
    for p in attention.stack_parameters(stack):
        p.data += rng.normal(scale=0.1, size=p.data.shape)
    F = Tensor(rng.normal(size=(cfg.num_levels, cfg.height, cfg.width,
                                cfg.channels)))
    mid = (cfg.num_levels - 1) // 2
    with count_macs() as counter:
        attention.stack_forward(F, stack, mid)
    return {k: v for k, v in counter.stages.items() if k != "other"}


def report_to_csv(report: FlopReport):
    buf = io.StringIO()
    buf.write("stage,macs,flops\n")
    for stage in ("scale", "spatial", "task"):
        if stage in report.per_stage:
            m = report.per_stage[stage]
            buf.write(f"{stage},{m},{2 * m}\n")
    for stage, m in report.per_stage.items():
        if stage not in ("scale", "spatial", "task"):
            buf.write(f"{stage},{m},{2 * m}\n")
    buf.write(f"total,{report.total_macs},{report.total_flops}\n")
    return buf.getvalue()


def report_summary(report: FlopReport):
    cfg = report.config
    lines = [
        f"# {COUNTING_NOTE}",
        f"config: L={cfg.num_levels} H={cfg.height} W={cfg.width} "
        f"C={cfg.channels} K={cfg.num_points} depth={cfg.depth}",
    ]
    for stage, m in report.per_stage.items():
        lines.append(f"  {stage:<10} {m:>14d} MACs  {2 * m:>14d} FLOPs")
    lines.append(f"  {'total':<10} {report.total_macs:>14d} MACs  "
                 f"{report.total_flops:>14d} FLOPs")
    return "\n".join(lines)
