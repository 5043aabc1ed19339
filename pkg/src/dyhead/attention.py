"""Scale-, spatial-, and task-aware attentions and their block composition.

The three stages run sequentially on the aligned [L, H, W, C] feature tensor:

  * scale attention gates each level by a scalar in [0, 1] computed from the
    level's pooled statistics through an affine map and a hard sigmoid;
  * spatial attention samples K offset locations per position with learned
    offsets and modulation (deformable, offsets predicted from the median
    level), mixes them with per-level kernel weights, and averages the
    levels; the averaged map is broadcast back to all L levels so the tensor
    shape survives stacking;
  * task attention applies a per-channel piecewise-linear activation
    max(a1*x + b1, a2*x + b2) whose coefficients come from a pooled
    two-layer hyper network, standardized and squashed into [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Parameter,
    Tensor,
    bilinear_sample_map,
    conv2d_3x3,
    hard_sigmoid,
    linear,
    maximum,
    mean,
    mul,
    mac_stage,
    pow_const,
    relu,
    reshape,
    sigmoid,
    stack,
)

__all__ = [
    "ScaleAttnParams",
    "SpatialAttnParams",
    "TaskAttnParams",
    "DyHeadBlockParams",
    "DyHeadStack",
    "base_grid_3x3",
    "init_scale_params",
    "init_spatial_params",
    "init_task_params",
    "init_block_params",
    "init_stack",
    "scale_attention",
    "spatial_attention",
    "spatial_predictions",
    "task_attention",
    "task_coefficients",
    "dyhead_block",
    "stack_forward",
    "ScaleRatioStats",
    "scale_ratio_stats",
]


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass
class ScaleAttnParams:
    f_weight: Parameter
    f_bias: Parameter
    descriptor_mode: str = "mean_sc"   # or "mean_s_linear_c"


@dataclass
class SpatialAttnParams:
    base_offsets: np.ndarray           # [K, 2] fixed (dy, dx) grid
    predictor_kernel: Parameter        # [3, 3, C, 3K]
    predictor_bias: Parameter          # [3K]
    kernels: Parameter                 # [L, K] depthwise or [L, K, C, C]
    kernel_mode: str = "depthwise"     # or "channel_mix"

    @property
    def num_points(self):
        return self.base_offsets.shape[0]


@dataclass
class TaskAttnParams:
    fc1_weight: Parameter              # [C, C // r]
    fc1_bias: Parameter                # [C // r]
    fc2_weight: Parameter              # [C // r, 4C]
    fc2_bias: Parameter                # [4C]
    reduction: int = 4
    lambda_alpha: float = 1.0
    lambda_beta: float = 0.5
    norm_eps: float = 1e-5


@dataclass
class DyHeadBlockParams:
    scale: ScaleAttnParams
    spatial: SpatialAttnParams
    task: TaskAttnParams


@dataclass
class DyHeadStack:
    blocks: list

    @property
    def depth(self):
        return len(self.blocks)


def base_grid_3x3():
    """The nine fixed sampling offsets of a dilation-1 3x3 neighborhood."""
    return np.array([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)],
                    dtype=np.float64)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_scale_params(channels, descriptor_mode="mean_sc", prefix="scale"):
    """Identity gating at init: weight 0, bias +1 puts the gate at exactly 1."""
    if descriptor_mode == "mean_sc":
        w = Parameter(0.0, f"{prefix}.f_weight")
    elif descriptor_mode == "mean_s_linear_c":
        w = Parameter(np.zeros((channels, 1)), f"{prefix}.f_weight")
    else:
        raise ValueError(f"unknown descriptor_mode {descriptor_mode!r}")
    b = Parameter(1.0, f"{prefix}.f_bias")
    return ScaleAttnParams(f_weight=w, f_bias=b, descriptor_mode=descriptor_mode)


def init_spatial_params(num_levels, channels, rng, num_points=9,
                        kernel_mode="depthwise", prefix="spatial"):
    """Zero offsets at init; kernels start near an identity-center tap.

    Kernels get small uniform noise plus weight 2 on the center sampling
    point, so with the init-time modulation of 0.5 the stage begins as the
    plain level average instead of a random feature scramble (which destroys
    the signal and stalls toy training).
    """
    base = base_grid_3x3() if num_points == 9 else _centered_grid(num_points)
    k3 = 3 * num_points
    bound = 0.1 / np.sqrt(9.0 * channels)
    center = num_points // 2
    if kernel_mode == "depthwise":
        kern = rng.uniform(-bound, bound, size=(num_levels, num_points))
        kern[:, center] = 2.0
    elif kernel_mode == "channel_mix":
        kern = rng.uniform(-bound, bound,
                           size=(num_levels, num_points, channels, channels))
        kern[:, center] += 2.0 * np.eye(channels)
    else:
        raise ValueError(f"unknown kernel_mode {kernel_mode!r}")
    return SpatialAttnParams(
        base_offsets=base,
        predictor_kernel=Parameter(np.zeros((3, 3, channels, k3)), f"{prefix}.pred_w"),
        predictor_bias=Parameter(np.zeros(k3), f"{prefix}.pred_b"),
        kernels=Parameter(kern, f"{prefix}.kernels"),
        kernel_mode=kernel_mode,
    )


def _centered_grid(num_points):
    # fallback for non-default K: first num_points of the 3x3 grid
    return base_grid_3x3()[:num_points]


def init_task_params(channels, rng, reduction=4, lambda_alpha=1.0,
                     lambda_beta=0.5, prefix="task"):
    """fc2 zeroed so the activation starts as an exact ReLU."""
    if channels % reduction != 0:
        raise ValueError(f"reduction {reduction} does not divide channels {channels}")
    hidden = channels // reduction
    bound = 1.0 / np.sqrt(channels)
    return TaskAttnParams(
        fc1_weight=Parameter(rng.uniform(-bound, bound, size=(channels, hidden)),
                             f"{prefix}.fc1_w"),
        fc1_bias=Parameter(np.zeros(hidden), f"{prefix}.fc1_b"),
        fc2_weight=Parameter(np.zeros((hidden, 4 * channels)), f"{prefix}.fc2_w"),
        fc2_bias=Parameter(np.zeros(4 * channels), f"{prefix}.fc2_b"),
        reduction=reduction,
        lambda_alpha=lambda_alpha,
        lambda_beta=lambda_beta,
    )


def init_block_params(num_levels, channels, rng, num_points=9,
                      descriptor_mode="mean_sc", kernel_mode="depthwise",
                      reduction=4, prefix="block"):
    return DyHeadBlockParams(
        scale=init_scale_params(channels, descriptor_mode, prefix=f"{prefix}.scale"),
        spatial=init_spatial_params(num_levels, channels, rng, num_points,
                                    kernel_mode, prefix=f"{prefix}.spatial"),
        task=init_task_params(channels, rng, reduction, prefix=f"{prefix}.task"),
    )


def init_stack(depth, num_levels, channels, rng, **kwargs):
    blocks = [init_block_params(num_levels, channels, rng,
                                prefix=f"block{i}", **kwargs)
              for i in range(depth)]
    return DyHeadStack(blocks=blocks)


def block_parameters(p: DyHeadBlockParams):
    out = [p.scale.f_weight, p.scale.f_bias,
           p.spatial.predictor_kernel, p.spatial.predictor_bias, p.spatial.kernels,
           p.task.fc1_weight, p.task.fc1_bias, p.task.fc2_weight, p.task.fc2_bias]
    return out


def stack_parameters(s: DyHeadStack):
    out = []
    for b in s.blocks:
        out.extend(block_parameters(b))
    return out


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def scale_attention(F, p: ScaleAttnParams):
    """Gate each level by hard_sigmoid(f(pooled descriptor)).

    F: Tensor with the level axis first ([L, S, C] or [L, H, W, C]).
    Returns (gated tensor, per-level weights Tensor[L]).
    """
    with mac_stage("scale"):
        ndim = len(F.shape)
        L = F.shape[0]
        if p.descriptor_mode == "mean_sc":
            d = mean(F, axes=tuple(range(1, ndim)))          # [L]
            pre = mul(d, p.f_weight) + p.f_bias
        else:
            d = mean(F, axes=tuple(range(1, ndim - 1)))      # [L, C]
            pre = reshape(linear(d, p.f_weight), (L,)) + p.f_bias
        weights = hard_sigmoid(pre)                          # [L]
        w_bcast = reshape(weights, (L,) + (1,) * (ndim - 1))
        out = mul(w_bcast, F)
    return out, weights


def spatial_predictions(f_median, p: SpatialAttnParams):
    """Offsets [H, W, K, 2] and modulation [H, W, K] from the median level."""
    H, W = f_median.shape[0], f_median.shape[1]
    K = p.num_points
    pred = conv2d_3x3(f_median, p.predictor_kernel, p.predictor_bias)
    offsets = reshape(pred[:, :, :2 * K], (H, W, K, 2))
    modulation = sigmoid(pred[:, :, 2 * K:])
    return offsets, modulation


def spatial_attention(F, p: SpatialAttnParams, median_index):
    """Modulated deformable sampling across levels (aligned input required).

    F: Tensor[L, H, W, C]. Offsets and modulation are predicted once from the
    median level and shared across levels. The level-averaged [H, W, C] result
    is broadcast back to all L levels.
    """
    if len(F.shape) != 4:
        raise ValueError(f"spatial_attention expects [L,H,W,C], got {F.shape}")
    with mac_stage("spatial"):
        L, H, W, C = F.shape
        K = p.num_points
        offsets, modulation = spatial_predictions(F[median_index], p)

        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        acc = None
        for k in range(K):
            py = offsets[:, :, k, 0] + (yy + p.base_offsets[k, 0])
            px = offsets[:, :, k, 1] + (xx + p.base_offsets[k, 1])
            k_sum = None
            for level in range(L):
                sampled = bilinear_sample_map(F[level], py, px)   # [H, W, C]
                if p.kernel_mode == "depthwise":
                    term = mul(sampled, p.kernels[level, k])
                else:
                    term = linear(sampled, p.kernels[level, k])
                k_sum = term if k_sum is None else k_sum + term
            weighted = mul(k_sum, reshape(modulation[:, :, k], (H, W, 1)))
            acc = weighted if acc is None else acc + weighted
        out = mul(acc, 1.0 / L)                               # [H, W, C]
        out = stack([out] * L, axis=0)                        # broadcast back
    return out


def task_coefficients(F, p: TaskAttnParams):
    """Hyper-network outputs: squashed u [4C] and the (a1, a2, b1, b2)
    coefficients of the piecewise-linear activation."""
    ndim = len(F.shape)
    C = F.shape[-1]
    g = mean(F, axes=tuple(range(ndim - 1)))              # [C]
    h = relu(linear(g, p.fc1_weight, p.fc1_bias))
    raw = linear(h, p.fc2_weight, p.fc2_bias)             # [4C]
    m = mean(raw)
    centered = raw - m
    var = mean(mul(centered, centered))
    inv = pow_const(var + p.norm_eps, -0.5)
    std = mul(centered, inv)
    u = mul(sigmoid(std), 2.0) - 1.0                      # in [-1, 1]
    a1 = mul(u[0:C], p.lambda_alpha) + 1.0
    a2 = mul(u[C:2 * C], p.lambda_alpha)
    b1 = mul(u[2 * C:3 * C], p.lambda_beta)
    b2 = mul(u[3 * C:4 * C], p.lambda_beta)
    return u, (a1, a2, b1, b2)


def task_attention(F, p: TaskAttnParams):
    """Per-channel dynamic piecewise-linear activation.

    F: Tensor with channels last and the level axis first. At init (zeroed
    fc2) this is exactly relu(F).
    """
    with mac_stage("task"):
        _, (a1, a2, b1, b2) = task_coefficients(F, p)
        out = maximum(mul(a1, F) + b1, mul(a2, F) + b2)
    return out


def dyhead_block(F, p: DyHeadBlockParams, median_index,
                 enable=(True, True, True)):
    """One block: task(spatial(scale(F))) on [L, H, W, C].

    Disabled stages are identities. Returns (output, scale weights or None).
    """
    weights = None
    if enable[0]:
        F, weights = scale_attention(F, p.scale)
    if enable[1]:
        F = spatial_attention(F, p.spatial, median_index)
    if enable[2]:
        F = task_attention(F, p.task)
    return F, weights


def stack_forward(F, s: DyHeadStack, median_index, enable=(True, True, True),
                  collect=None):
    """Apply all blocks sequentially; depth 0 returns F unchanged.

    collect, when a list, receives the per-block scale weights; when a dict
    with key "block_outputs", also each block's output tensor.
    """
    outputs = collect.get("block_outputs") if isinstance(collect, dict) else None
    weights_sink = collect if isinstance(collect, list) else (
        collect.get("scale_weights") if isinstance(collect, dict) else None)
    for blk in s.blocks:
        F, w = dyhead_block(F, blk, median_index, enable)
        if weights_sink is not None and w is not None:
            weights_sink.append(w)
        if outputs is not None:
            outputs.append(F)
    return F


# ---------------------------------------------------------------------------
# Scale-ratio diagnostics
# ---------------------------------------------------------------------------

@dataclass
class ScaleRatioStats:
    """Per-level histogram of gate ratios against the lowest-resolution level."""

    bin_edges: np.ndarray
    counts: dict = field(default_factory=dict)    # level -> np.ndarray[bins]
    dropped: dict = field(default_factory=dict)   # level -> small-denominator count

    def total_retained(self, level):
        return int(self.counts[level].sum())


def scale_ratio_stats(weights_per_image, bin_edges=None, denom_floor=1e-8):
    """Histogram omega_level / omega_reference over a collection of images.

    weights_per_image: iterable of length-L weight vectors (Tensor or array).
    Reference is the last level (lowest resolution). Ratios whose denominator
    is below denom_floor are dropped and counted separately. Out-of-range
    ratios land in the edge bins.
    """
    if bin_edges is None:
        bin_edges = np.linspace(0.0, 4.0, 41)
    ws = [w.numpy() if isinstance(w, Tensor) else np.asarray(w)
          for w in weights_per_image]
    if not ws:
        raise ValueError("no weight vectors given")
    L = ws[0].shape[0]
    stats = ScaleRatioStats(bin_edges=np.asarray(bin_edges, dtype=np.float64))
    for level in range(L - 1):
        ratios = []
        dropped = 0
        for w in ws:
            denom = w[L - 1]
            if abs(denom) < denom_floor:
                dropped += 1
            else:
                ratios.append(w[level] / denom)
        ratios = np.clip(np.asarray(ratios), bin_edges[0], bin_edges[-1])
        counts, _ = np.histogram(ratios, bins=bin_edges)
        stats.counts[level] = counts.astype(np.int64)
        stats.dropped[level] = dropped
    return stats
