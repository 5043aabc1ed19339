"""Alignment of a multi-resolution feature pyramid to the median level.

All levels are bilinearly resampled to the spatial size of the median level
and stacked into a single [L, H, W, C] tensor, the substrate every attention
stage operates on.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import Tensor, bilinear_resize, stack

__all__ = ["FeaturePyramid", "AlignedPyramid", "median_level", "align_pyramid"]


@dataclass
class FeaturePyramid:
    """Ordered multi-resolution features, index 0 = highest resolution."""

    levels: list          # list of Tensor[H_i, W_i, C]
    strides: list         # per-level downscale factor relative to the image

    def __post_init__(self):
        if len(self.levels) == 0:
            raise ValueError("pyramid must have at least one level")
        c = self.levels[0].shape[-1]
        for lv in self.levels[1:]:
            if lv.shape[-1] != c:
                raise ValueError(
                    f"channel mismatch across levels: {lv.shape[-1]} vs {c}")

    @property
    def num_levels(self):
        return len(self.levels)

    @property
    def channels(self):
        return self.levels[0].shape[-1]


@dataclass
class AlignedPyramid:
    """The [L, H, W, C] tensor at the median level's resolution."""

    data: Tensor
    median_index: int

    @property
    def shape(self):
        return self.data.shape


def median_level(num_levels):
    """Index of the alignment level: lower median, i.e. floor((L-1)/2)."""
    if num_levels < 1:
        raise ValueError("pyramid must have at least one level")
    return (num_levels - 1) // 2


def align_pyramid(p: FeaturePyramid) -> AlignedPyramid:
    """Resample every level to the median level's (H, W) and stack on axis 0.

    The median level passes through bit-identically; resampling is bilinear
    (target centers mapped proportionally into the source, edge clamped) and
    differentiable.
    """
    mid = median_level(p.num_levels)
    h, w = p.levels[mid].shape[0], p.levels[mid].shape[1]
    aligned = [bilinear_resize(lv, h, w) for lv in p.levels]
    return AlignedPyramid(data=stack(aligned, axis=0), median_index=mid)
