"""One-stage prediction head: classification, centerness, box regression.

The head shares one feature stack; the three predictors differ only in their
final 1x1 (per-position linear) maps. Targets follow the anchor-free
center-sampling convention: a position is positive when its center lies
inside a ground-truth box whose size falls into the position's level range.
Box regression encodes distances to the four box sides in median-grid units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Parameter,
    Tensor,
    absval,
    linear,
    mac_stage,
    mul,
    sigmoid,
    softplus,
    tsum,
)

__all__ = [
    "HeadParams",
    "HeadOutputs",
    "GroundTruth",
    "Targets",
    "init_head_params",
    "head_parameters",
    "predict",
    "level_size_ranges",
    "assign_targets",
    "loss",
    "decode_predictions",
    "nms",
    "box_iou",
    "average_precision",
    "decode_and_eval",
]

MAX_DELTA_LOG = math.log(1e4)   # clamp on raw box logits before exp


@dataclass
class HeadParams:
    cls_weight: Parameter      # [C, num_classes]
    cls_bias: Parameter        # [num_classes]
    ctr_weight: Parameter      # [C, 1]
    ctr_bias: Parameter        # [1]
    box_weight: Parameter      # [C, 4]
    box_bias: Parameter        # [4]

    @property
    def num_classes(self):
        return self.cls_weight.shape[1]


@dataclass
class HeadOutputs:
    cls_logits: Tensor         # [L, H, W, num_classes]
    centerness: Tensor         # [L, H, W, 1]
    box_deltas: Tensor         # [L, H, W, 4] raw logits; exp() gives distances


@dataclass
class GroundTruth:
    boxes: np.ndarray          # [N, 4] (x0, y0, x1, y1) image pixels
    classes: np.ndarray        # [N] integer labels

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)


@dataclass
class Targets:
    cls_index: np.ndarray      # [L, H, W] class id, -1 for background
    centerness: np.ndarray     # [L, H, W]
    box_dist: np.ndarray       # [L, H, W, 4] (l, t, r, b) in median-grid units
    pos_mask: np.ndarray       # [L, H, W] bool
    num_skipped: int = 0

    @property
    def num_pos(self):
        return int(self.pos_mask.sum())


def init_head_params(channels, num_classes, rng, prior_prob=0.01, prefix="head"):
    """1x1 predictors; classification bias set for a low foreground prior."""
    bound = 1.0 / np.sqrt(channels)
    bias_init = -math.log((1.0 - prior_prob) / prior_prob)

    def w(shape, name):
        return Parameter(rng.uniform(-bound, bound, size=shape), f"{prefix}.{name}")

    return HeadParams(
        cls_weight=w((channels, num_classes), "cls_w"),
        cls_bias=Parameter(np.full(num_classes, bias_init), f"{prefix}.cls_b"),
        ctr_weight=w((channels, 1), "ctr_w"),
        ctr_bias=Parameter(np.zeros(1), f"{prefix}.ctr_b"),
        box_weight=w((channels, 4), "box_w"),
        box_bias=Parameter(np.zeros(4), f"{prefix}.box_b"),
    )


def head_parameters(p: HeadParams):
    return [p.cls_weight, p.cls_bias, p.ctr_weight, p.ctr_bias,
            p.box_weight, p.box_bias]


def predict(F, p: HeadParams) -> HeadOutputs:
    """Run the three per-position linear predictors on [L, H, W, C]."""
    with mac_stage("head"):
        return HeadOutputs(
            cls_logits=linear(F, p.cls_weight, p.cls_bias),
            centerness=linear(F, p.ctr_weight, p.ctr_bias),
            box_deltas=linear(F, p.box_weight, p.box_bias),
        )


# ---------------------------------------------------------------------------
# Target assignment
# ---------------------------------------------------------------------------

def level_size_ranges(num_levels):
    """Geometric split of box max-side (level-0 grid units) across levels.

    Level i covers [2**(i+1), 2**(i+2)); the first lower bound is extended to
    0 and the last upper bound to infinity so every box is assignable. With
    a level-0 stride of 4 on 64px scenes this puts all levels in play
    (<16px, 16-32px, >=32px for the default three levels).
    """
    ranges = []
    for i in range(num_levels):
        lo = 0.0 if i == 0 else float(2 ** (i + 1))
        hi = math.inf if i == num_levels - 1 else float(2 ** (i + 2))
        ranges.append((lo, hi))
    return ranges


def assign_targets(gt: GroundTruth, grid_hw, num_levels, median_stride,
                   base_stride, num_classes):
    """Per-position classification / centerness / box-distance targets.

    grid_hw: (H, W) of the aligned grid; all levels share it. Position
    centers sit at ((y + 0.5) * median_stride, (x + 0.5) * median_stride) in
    image pixels. Among containing boxes in a level's size range, the
    smallest-area box wins. Degenerate boxes are skipped and counted.
    """
    H, W = grid_hw
    cls_index = np.full((num_levels, H, W), -1, dtype=np.int64)
    ctr = np.zeros((num_levels, H, W))
    dist = np.zeros((num_levels, H, W, 4))
    best_area = np.full((num_levels, H, W), np.inf)
    ranges = level_size_ranges(num_levels)

    cx = (np.arange(W) + 0.5) * median_stride
    cy = (np.arange(H) + 0.5) * median_stride
    skipped = 0
    for box, cls in zip(gt.boxes, gt.classes):
        x0, y0, x1, y1 = box
        if not (x1 > x0 and y1 > y0) or cls >= num_classes or cls < 0:
            skipped += 1
            continue
        max_side_units = max(x1 - x0, y1 - y0) / base_stride
        area = (x1 - x0) * (y1 - y0)
        left = cx[None, :] - x0
        top = cy[:, None] - y0
        right = x1 - cx[None, :]
        bottom = y1 - cy[:, None]
        inside = (left > 0) & (right > 0) & (top > 0) & (bottom > 0)
        lr_min = np.minimum(left, right)
        lr_max = np.maximum(left, right)
        tb_min = np.minimum(top, bottom)
        tb_max = np.maximum(top, bottom)
        with np.errstate(invalid="ignore", divide="ignore"):
            c = np.sqrt((lr_min / lr_max) * (tb_min / tb_max))
        for lvl, (lo, hi) in enumerate(ranges):
            if not (lo <= max_side_units < hi):
                continue
            take = inside & (area < best_area[lvl])
            if not take.any():
                continue
            best_area[lvl][take] = area
            cls_index[lvl][take] = cls
            ctr[lvl][take] = np.broadcast_to(c, (H, W))[take]
            dist[lvl][take] = np.broadcast_to(
                np.stack([np.broadcast_to(left, (H, W)),
                          np.broadcast_to(top, (H, W)),
                          np.broadcast_to(right, (H, W)),
                          np.broadcast_to(bottom, (H, W))], axis=-1),
                (H, W, 4))[take] / median_stride
    pos = cls_index >= 0
    return Targets(cls_index=cls_index, centerness=ctr, box_dist=dist,
                   pos_mask=pos, num_skipped=skipped)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def smooth_l1(x, beta):
    """Huber: quadratic within beta of zero, linear outside (C1 everywhere)."""
    ax = absval(x)
    quad_zone = (ax.numpy() < beta).astype(np.float64)
    quad = mul(mul(ax, ax), 0.5 / beta)
    lin = ax - 0.5 * beta
    return mul(quad, quad_zone) + mul(lin, 1.0 - quad_zone)


def loss(out: HeadOutputs, tgt: Targets, focal_gamma=2.0, focal_alpha=0.25,
         huber_beta=0.2):
    """Focal classification + smooth-L1 on log box distances + centerness BCE.

    Box and centerness terms cover positives only; the sum is normalized by
    max(1, number of positives). The box residual is taken in log space (raw
    predictions are log distances) and the centerness term is the
    entropy-subtracted BCE, so a perfect fit drives every term to zero.
    """
    L, H, W, ncls = out.cls_logits.shape
    onehot = np.zeros((L, H, W, ncls))
    pos = tgt.pos_mask
    ll, yy, xx = np.nonzero(pos)
    onehot[ll, yy, xx, tgt.cls_index[ll, yy, xx]] = 1.0

    z = out.cls_logits
    p = sigmoid(z)
    pos_term = mul(mul(pow_2(1.0 - p), softplus(mul(z, -1.0))), focal_alpha * onehot)
    neg_term = mul(mul(pow_2(p), softplus(z)), (1.0 - focal_alpha) * (1.0 - onehot))
    cls_loss = tsum(pos_term) + tsum(neg_term)

    pos_f = pos.astype(np.float64)[..., None]
    log_dist = np.where(tgt.box_dist > 0,
                        np.log(np.maximum(tgt.box_dist, 1e-12)), 0.0)
    box_loss = tsum(mul(smooth_l1(out.box_deltas - log_dist, huber_beta), pos_f))

    # entropy-subtracted BCE (the KL form): same gradients, but zero at
    # p == target, so a perfect fit drives this term to exactly 0
    t = tgt.centerness[..., None]
    tc = np.clip(t, 1e-12, 1.0 - 1e-12)
    entropy = -(tc * np.log(tc) + (1 - tc) * np.log1p(-tc))
    zc = out.centerness
    bce = softplus(zc) - mul(zc, t) - entropy
    ctr_loss = tsum(mul(bce, pos_f))

    total = cls_loss + box_loss + ctr_loss
    return mul(total, 1.0 / max(1, tgt.num_pos))


def pow_2(t):
    return mul(t, t)


# ---------------------------------------------------------------------------
# Decoding and evaluation
# ---------------------------------------------------------------------------

def decode_predictions(out: HeadOutputs, median_stride, score_thresh=0.05,
                       max_dets=100, nms_iou=0.6):
    """Score, decode and NMS one scene's raw outputs.

    Returns (boxes [M,4], scores [M], classes [M]) sorted by descending score.
    Per-position score is sigmoid(cls) * sigmoid(centerness).
    """
    cls = _np_sigmoid(out.cls_logits.numpy())
    ctr = _np_sigmoid(out.centerness.numpy())
    scores = cls * ctr                                   # [L, H, W, ncls]
    dist = np.exp(np.minimum(out.box_deltas.numpy(), MAX_DELTA_LOG))
    L, H, W, ncls = scores.shape

    cy = (np.arange(H) + 0.5) * median_stride
    cx = (np.arange(W) + 0.5) * median_stride
    cyg = np.broadcast_to(cy[None, :, None], (L, H, W))
    cxg = np.broadcast_to(cx[None, None, :], (L, H, W))
    d_px = dist * median_stride
    boxes = np.stack([cxg - d_px[..., 0], cyg - d_px[..., 1],
                      cxg + d_px[..., 2], cyg + d_px[..., 3]], axis=-1)

    flat_scores = scores.reshape(-1, ncls)
    flat_boxes = boxes.reshape(-1, 4)
    pos, cls_ids = np.nonzero(flat_scores >= score_thresh)
    if pos.size == 0:
        return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)
    sel_scores = flat_scores[pos, cls_ids]
    order = np.argsort(-sel_scores, kind="stable")[:max_dets]
    b = flat_boxes[pos[order]]
    s = sel_scores[order]
    c = cls_ids[order]

    keep = []
    for cid in np.unique(c):
        idx = np.nonzero(c == cid)[0]
        kept = nms(b[idx], s[idx], nms_iou)
        keep.extend(idx[kept])
    keep = sorted(keep, key=lambda i: (-s[i], i))
    keep = np.asarray(keep, dtype=np.int64)
    return b[keep], s[keep], c[keep]


def box_iou(a, b):
    """IoU matrix between boxes a [N,4] and b [M,4] (x0,y0,x1,y1)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.clip(ix1 - ix0, 0, None)
    ih = np.clip(iy1 - iy0, 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def nms(boxes, scores, iou_thresh):
    """Greedy non-maximum suppression; returns kept indices, score order."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        if len(boxes) > 1:
            ious = box_iou(boxes[i:i + 1], boxes).reshape(-1)
            suppressed |= ious > iou_thresh
            suppressed[i] = True
    return keep


def average_precision(records, num_gt):
    """All-point interpolated AP from (score, is_tp) records.

    records: iterable of (score, tp_flag); num_gt: total ground-truth count.
    """
    if num_gt == 0:
        return 1.0 if len(records) == 0 else 0.0
    if len(records) == 0:
        return 0.0
    records = sorted(records, key=lambda r: -r[0])
    tp = np.cumsum([r[1] for r in records])
    fp = np.cumsum([not r[1] for r in records])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope, then sum areas at recall change points
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def decode_and_eval(outputs_per_scene, gts, median_stride, score_thresh=0.05,
                    max_dets=100, nms_iou=0.6, match_iou=0.5):
    """Toy AP at IoU 0.5 over a set of scenes.

    Greedy score-sorted matching, one match per ground truth, class-aware.
    AP is 1.0 when both predictions and ground truth are empty everywhere.
    """
    records = []
    num_gt = 0
    for out, gt in zip(outputs_per_scene, gts):
        if isinstance(out, HeadOutputs):
            boxes, scores, classes = decode_predictions(
                out, median_stride, score_thresh, max_dets, nms_iou)
        else:
            boxes, scores, classes = out
        num_gt += len(gt.boxes)
        matched = np.zeros(len(gt.boxes), dtype=bool)
        order = np.argsort(-scores, kind="stable")
        for i in order:
            cand = np.nonzero((gt.classes == classes[i]) & ~matched)[0]
            tp = False
            if cand.size:
                ious = box_iou(boxes[i:i + 1], gt.boxes[cand]).reshape(-1)
                j = int(np.argmax(ious))
                if ious[j] >= match_iou:
                    matched[cand[j]] = True
                    tp = True
            records.append((float(scores[i]), tp))
    return average_precision(records, num_gt)


def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out
