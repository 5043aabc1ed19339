"""Unified detection-head attention stack with a verifiable numerical core."""

from .tensor import Tensor, Parameter, gradcheck, count_macs
from .pyramid import FeaturePyramid, AlignedPyramid, median_level, align_pyramid
from .attention import (
    DyHeadBlockParams,
    DyHeadStack,
    dyhead_block,
    scale_attention,
    spatial_attention,
    stack_forward,
    task_attention,
)
from .head import GroundTruth, HeadOutputs, decode_and_eval, predict
from .flops import BlockConfig, FlopReport, count_block, stack_cost_curve
from .harness import TrainConfig, gen_scene, train, ablation_matrix

__version__ = "0.1.0"
