"""Toy detection harness: synthetic scenes, backbone, trainer, ablations.

Everything is seeded through a self-contained PCG32 stream so scenes,
parameter draws and full training runs are bit-reproducible across
platforms. Scenes are 64x64 images of piecewise-constant background plus
axis-aligned rectangles whose fill pattern encodes the class.
"""

from __future__ import annotations

import csv
import io
import math
import os
import struct
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import attention, head as head_mod
from .pyramid import FeaturePyramid, align_pyramid
from .tensor import Parameter, Tensor, conv2d_3x3, relu
from .attention import DyHeadStack, scale_ratio_stats, stack_forward
from .head import GroundTruth, HeadParams, assign_targets, decode_and_eval, loss, predict

__all__ = [
    "Pcg32",
    "SyntheticScene",
    "gen_scene",
    "BackboneParams",
    "init_backbone",
    "backbone_forward",
    "Model",
    "build_model",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "train",
    "ablation_matrix",
    "dump_attention",
    "save_checkpoint",
    "load_checkpoint",
    "metrics_to_csv",
    "write_pgm",
    "write_ppm",
]

_MASK64 = (1 << 64) - 1


class Pcg32:
    """Minimal PCG-XSH-RR 32-bit generator; platform-independent."""

    MULT = 6364136223846793005

    def __init__(self, seed, seq=0x2545F4914F6CDD1D):
        self.state = 0
        self.inc = ((seq << 1) | 1) & _MASK64
        self._step()
        self.state = (self.state + (seed & _MASK64)) & _MASK64
        self._step()

    def _step(self):
        self.state = (self.state * self.MULT + self.inc) & _MASK64

    def next_u32(self):
        old = self.state
        self._step()
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def uniform(self, lo=0.0, hi=1.0):
        return lo + (hi - lo) * (self.next_u32() / 4294967296.0)

    def randint(self, lo, hi):
        """Uniform integer in [lo, hi)."""
        return lo + self.next_u32() % (hi - lo)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass
class SyntheticScene:
    image: np.ndarray          # [H, W, 3] float64 in [0, 1]
    gt: GroundTruth
    seed: int


MIN_SIDE = 6.0
MAX_SIDE = 48.0               # 8x scale range relative to MIN_SIDE


def gen_scene(seed, image_size=64, num_classes=3, max_rects=8):
    """Deterministic scene: banded background plus 1..max_rects rectangles.

    Rectangle side lengths are log-uniform in [MIN_SIDE, MAX_SIDE] (an 8x
    range) and boxes always lie fully inside the image. The fill pattern
    (solid / stripes / checkerboard, rotating color emphasis) encodes the
    class so classes are visually distinguishable.
    """
    rng = Pcg32(seed)
    img = np.zeros((image_size, image_size, 3))
    n_bands = rng.randint(2, 5)
    edges = sorted({rng.randint(1, image_size) for _ in range(n_bands - 1)})
    edges = [0] + edges + [image_size]
    for b in range(len(edges) - 1):
        val = [rng.uniform(0.05, 0.35) for _ in range(3)]
        img[edges[b]:edges[b + 1], :, :] = val

    n_rects = rng.randint(1, max_rects + 1)
    boxes, classes = [], []
    log_lo, log_hi = math.log(MIN_SIDE), math.log(MAX_SIDE)
    for _ in range(n_rects):
        w = math.exp(rng.uniform(log_lo, log_hi))
        h = math.exp(rng.uniform(log_lo, log_hi))
        w = min(w, image_size - 1.0)
        h = min(h, image_size - 1.0)
        x0 = rng.uniform(0.0, image_size - w)
        y0 = rng.uniform(0.0, image_size - h)
        cls = rng.randint(0, num_classes)
        base = 0.55 + 0.4 * rng.uniform()
        _fill_rect(img, x0, y0, x0 + w, y0 + h, cls, base)
        boxes.append((x0, y0, x0 + w, y0 + h))
        classes.append(cls)
    gt = GroundTruth(boxes=np.array(boxes), classes=np.array(classes))
    return SyntheticScene(image=img, gt=gt, seed=seed)


def _fill_rect(img, x0, y0, x1, y1, cls, base):
    xi0, yi0 = int(round(x0)), int(round(y0))
    xi1, yi1 = max(xi0 + 1, int(round(x1))), max(yi0 + 1, int(round(y1)))
    h, w = yi1 - yi0, xi1 - xi0
    pattern = cls % 3
    channel = cls % 3
    patch = np.full((h, w, 3), base * 0.25)
    if pattern == 0:
        patch[:, :, channel] = base
    elif pattern == 1:
        rows = (np.arange(yi0, yi1) // 2) % 2 == 0
        patch[rows, :, channel] = base
        patch[~rows, :, channel] = base * 0.4
    else:
        yyg, xxg = np.mgrid[yi0:yi1, xi0:xi1]
        checker = ((yyg // 3) + (xxg // 3)) % 2 == 0
        patch[checker, channel] = base
        patch[~checker, channel] = base * 0.4
    img[yi0:yi1, xi0:xi1] = patch


# ---------------------------------------------------------------------------
# Toy backbone
# ---------------------------------------------------------------------------

@dataclass
class BackboneParams:
    kernels: list              # Parameter[3,3,Cin,C] per level
    biases: list               # Parameter[C] per level
    strides: list              # cumulative stride per level (4, 8, 16, ...)


def init_backbone(num_levels, channels, rng, in_channels=5, prefix="backbone"):
    kernels, biases, strides = [], [], []
    cin = in_channels
    stride = 4
    for i in range(num_levels):
        bound = 1.0 / np.sqrt(9.0 * cin)
        kernels.append(Parameter(rng.uniform(-bound, bound, size=(3, 3, cin, channels)),
                                 f"{prefix}.conv{i}_w"))
        biases.append(Parameter(np.zeros(channels), f"{prefix}.conv{i}_b"))
        strides.append(stride)
        cin = channels
        stride *= 2
    return BackboneParams(kernels=kernels, biases=biases, strides=strides)


def backbone_forward(image, p: BackboneParams):
    """image Tensor[H,W,3] -> FeaturePyramid with strides 4, 8, 16, ...

    Two normalized coordinate channels are appended to the image so the
    per-position box regression readout can depend on location; the tiny
    receptive field of a 3-conv backbone carries no positional signal on
    piecewise-constant regions otherwise.
    """
    levels = []
    data = image.numpy() if isinstance(image, Tensor) else np.asarray(image)
    hh, ww = data.shape[0], data.shape[1]
    yy, xx = np.mgrid[0:hh, 0:ww]
    coords = np.stack([(yy + 0.5) / hh - 0.5, (xx + 0.5) / ww - 0.5], axis=-1)
    x = Tensor(np.concatenate([data, coords], axis=-1))
    for i, (K, b) in enumerate(zip(p.kernels, p.biases)):
        step = 4 if i == 0 else 2
        x = relu(conv2d_3x3(x, K, b))[::step, ::step]
        levels.append(x)
    return FeaturePyramid(levels=levels, strides=list(p.strides))


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    seed: int = 0
    depth: int = 2
    enable_scale: bool = True
    enable_spatial: bool = True
    enable_task: bool = True
    steps: int = 400
    lr: float = 0.01
    batch_size: int = 2
    num_levels: int = 3
    channels: int = 16
    num_classes: int = 3
    image_size: int = 64
    max_rects: int = 8
    train_scenes: int = 12
    eval_scenes: int = 8
    eval_interval: int = 60
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_points: tuple = (0.67, 0.89)
    lr_decay_factor: float = 0.1
    warmup_steps: int = 0
    descriptor_mode: str = "mean_sc"
    kernel_mode: str = "depthwise"
    reduction: int = 4
    score_thresh: float = 0.02

    @property
    def enables(self):
        return (self.enable_scale, self.enable_spatial, self.enable_task)


@dataclass
class Model:
    backbone: BackboneParams
    stack: DyHeadStack
    head: HeadParams
    config: TrainConfig

    def parameters(self):
        out = list(self.backbone.kernels) + list(self.backbone.biases)
        out.extend(attention.stack_parameters(self.stack))
        out.extend(head_mod.head_parameters(self.head))
        return out

    def forward(self, image, collect=None):
        pyr = backbone_forward(Tensor(image) if isinstance(image, np.ndarray)
                               else image, self.backbone)
        aligned = align_pyramid(pyr)
        F = stack_forward(aligned.data, self.stack, aligned.median_index,
                          enable=self.config.enables, collect=collect)
        return predict(F, self.head), aligned

    @property
    def median_stride(self):
        return self.backbone.strides[(self.config.num_levels - 1) // 2]


def build_model(config: TrainConfig):
    rng = np.random.default_rng(config.seed)
    backbone = init_backbone(config.num_levels, config.channels, rng)
    stack = attention.init_stack(
        config.depth, config.num_levels, config.channels, rng,
        descriptor_mode=config.descriptor_mode,
        kernel_mode=config.kernel_mode, reduction=config.reduction)
    hp = head_mod.init_head_params(config.channels, config.num_classes, rng)
    return Model(backbone=backbone, stack=stack, head=hp, config=config)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


def overfit_config(enable=(True, True, True), seed=0):
    """Single-scene memorization setup: one level (so level-averaging keeps
    full capacity), a single block, a small 2-rectangle scene, wide channels."""
    return TrainConfig(
        seed=seed, steps=500, eval_interval=0, train_scenes=1, eval_scenes=1,
        batch_size=1, depth=1, num_levels=1, image_size=32, max_rects=2,
        channels=64, lr=0.1, enable_scale=enable[0], enable_spatial=enable[1],
        enable_task=enable[2])


@dataclass
class TrainResult:
    metrics: list              # rows of (step, loss, toy_ap)
    model: Model
    final_ap: float
    wall_time: float = 0.0


def _scene_seeds(config, count, offset):
    base = config.seed * 1_000_003 + offset
    return [base + i for i in range(count)]


def scene_loss(model: Model, scene: SyntheticScene):
    out, aligned = model.forward(scene.image)
    _, H, W, _ = aligned.data.shape
    tgt = assign_targets(scene.gt, (H, W), model.config.num_levels,
                         model.median_stride, model.backbone.strides[0],
                         model.config.num_classes)
    return loss(out, tgt)


def evaluate(model: Model, scenes):
    outs = []
    for s in scenes:
        out, _ = model.forward(s.image)
        outs.append(out)
    return decode_and_eval(outs, [s.gt for s in scenes], model.median_stride,
                           score_thresh=model.config.score_thresh)


def train(config: TrainConfig, out_dir=None):
    """SGD (momentum 0.9, weight decay 1e-4, x0.1 decay at 67% / 89% of steps).

    Logs (step, loss, toy_ap) every eval_interval and at the final step.
    Raises TrainingDiverged on a non-finite loss, after dumping diagnostics
    into out_dir when given.
    """
    t0 = time.time()
    model = build_model(config)
    train_scenes = [gen_scene(s, config.image_size, config.num_classes,
                              config.max_rects)
                    for s in _scene_seeds(config, config.train_scenes, 0)]
    eval_scenes = [gen_scene(s, config.image_size, config.num_classes,
                             config.max_rects)
                   for s in _scene_seeds(config, config.eval_scenes, 10_000)]
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    metrics = []

    def diverged(detail, step):
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            save_checkpoint(os.path.join(out_dir, "diverged.ckpt"), params)
        raise TrainingDiverged(f"{detail} at step {step}")

    def log(step, loss_val):
        try:
            ap = evaluate(model, eval_scenes)
        except ValueError as e:
            if "non-finite" not in str(e):
                raise
            diverged(str(e), step)
        metrics.append((step, loss_val, ap))

    n_train = len(train_scenes)
    last_loss = float("nan")
    for step in range(config.steps):
        frac = step / max(1, config.steps)
        lr = config.lr
        if config.warmup_steps and step < config.warmup_steps:
            lr *= (step + 1) / config.warmup_steps
        for point in config.lr_decay_points:
            if frac >= point:
                lr *= config.lr_decay_factor
        for p in params:
            p.grad = None
        batch_losses = []
        for j in range(config.batch_size):
            scene = train_scenes[(step * config.batch_size + j) % n_train]
            try:
                sl = scene_loss(model, scene)
                (sl * (1.0 / config.batch_size)).backward()
            except ValueError as e:
                # non-finite intermediates (e.g. exploded sampling offsets)
                # surface before the loss itself goes non-finite
                if "non-finite" not in str(e):
                    raise
                diverged(str(e), step)
            batch_losses.append(sl.item())
        last_loss = float(np.mean(batch_losses))
        if not math.isfinite(last_loss):
            diverged(f"non-finite loss {last_loss}", step)
        for p, v in zip(params, velocity):
            g = (p.grad if p.grad is not None else 0.0) + config.weight_decay * p.data
            v *= config.momentum
            v += g
            p.data = p.data - lr * v
        if config.eval_interval and (step + 1) % config.eval_interval == 0:
            log(step + 1, last_loss)
    if config.steps == 0 or not metrics or metrics[-1][0] != config.steps:
        log(config.steps, last_loss)
    final_ap = metrics[-1][2]
    result = TrainResult(metrics=metrics, model=model, final_ap=final_ap,
                         wall_time=time.time() - t0)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as f:
            f.write(metrics_to_csv(metrics))
        save_checkpoint(os.path.join(out_dir, "checkpoint.ckpt"), params)
    return result


def metrics_to_csv(metrics):
    buf = io.StringIO()
    buf.write("step,loss,toy_ap\n")
    for step, lv, ap in metrics:
        buf.write(f"{step},{_fmt(lv)},{_fmt(ap)}\n")
    return buf.getvalue()


def _fmt(x):
    return "nan" if not math.isfinite(x) else f"{x:.12g}"


# ---------------------------------------------------------------------------
# Ablation matrix
# ---------------------------------------------------------------------------

ABLATION_CELLS = [
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (False, True, True),
    (True, False, True),
    (True, True, True),
]


def ablation_matrix(base_config: TrainConfig, seeds=(0, 1, 2, 3, 4),
                    out_dir=None, progress=None):
    """Train every on/off combination of the three attentions over seeds.

    Returns rows of (flags, median_ap, per-seed APs, errors). Per-cell
    failures are recorded and the matrix is still emitted.
    """
    rows = []
    for flags in ABLATION_CELLS:
        aps, errors = [], []
        for s in seeds:
            cfg = replace(base_config, seed=s, enable_scale=flags[0],
                          enable_spatial=flags[1], enable_task=flags[2])
            try:
                res = train(cfg)
                aps.append(res.final_ap)
            except TrainingDiverged as e:
                errors.append(str(e))
            if progress:
                progress(flags, s, aps[-1] if aps else None)
        med = float(np.median(aps)) if aps else float("nan")
        rows.append({"flags": flags, "median_ap": med, "aps": aps,
                     "errors": errors})
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as f:
            f.write(ablation_to_csv(rows, seeds))
    return rows


def ablation_to_csv(rows, seeds):
    buf = io.StringIO()
    cols = ",".join(f"ap_seed{s}" for s in seeds)
    buf.write(f"scale,spatial,task,median_ap,{cols},failures\n")
    for r in rows:
        f = ["1" if x else "0" for x in r["flags"]]
        aps = [_fmt(a) for a in r["aps"]]
        aps += [""] * (len(seeds) - len(aps))
        buf.write(",".join(f + [_fmt(r["median_ap"])] + aps
                           + [str(len(r["errors"]))]) + "\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"DYHD"
CKPT_VERSION = 1


def save_checkpoint(path, params):
    """Flat little-endian binary: magic, version, then per parameter
    (u32 name length, name bytes, u32 rank, u32 dims..., f64 values)."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        for p in params:
            name = p.name.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            shape = p.data.shape
            f.write(struct.pack("<I", len(shape)))
            for d in shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns an ordered list of (name, float64 array)."""
    out = []
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        while True:
            hdr = f.read(4)
            if not hdr:
                break
            (nlen,) = struct.unpack("<I", hdr)
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            out.append((name, data.astype(np.float64)))
    return out


def apply_checkpoint(model: Model, entries):
    by_name = {p.name: p for p in model.parameters()}
    for name, data in entries:
        if name not in by_name:
            raise ValueError(f"checkpoint parameter {name!r} not in model")
        if by_name[name].data.shape != data.shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{by_name[name].data.shape} vs {data.shape}")
        by_name[name].data = data.copy()


# ---------------------------------------------------------------------------
# Visualization dumps
# ---------------------------------------------------------------------------

def write_pgm(path, gray):
    """Binary PGM (P5) from a float array; min-max normalized, constants
    map to mid-gray."""
    g = np.asarray(gray, dtype=np.float64)
    lo, hi = g.min(), g.max()
    if hi - lo < 1e-12:
        norm = np.full_like(g, 0.5)
    else:
        norm = (g - lo) / (hi - lo)
    data = (norm * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def write_ppm(path, rgb):
    """Binary PPM (P6) from a float [H,W,3] array clipped to [0,1]."""
    data = (np.clip(np.asarray(rgb, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def annotate_scene(scene: SyntheticScene):
    img = scene.image.copy()
    for x0, y0, x1, y1 in scene.gt.boxes:
        xi0, yi0 = int(round(x0)), int(round(y0))
        xi1, yi1 = min(img.shape[1] - 1, int(round(x1))), min(img.shape[0] - 1, int(round(y1)))
        img[yi0, xi0:xi1 + 1] = (1.0, 1.0, 1.0)
        img[yi1, xi0:xi1 + 1] = (1.0, 1.0, 1.0)
        img[yi0:yi1 + 1, xi0] = (1.0, 1.0, 1.0)
        img[yi0:yi1 + 1, xi1] = (1.0, 1.0, 1.0)
    return img


def dump_attention(model: Model, scenes, out_dir):
    """Per-block channel-mean activation maps plus scale-ratio histogram.

    Emits, per scene, one PGM map per block (mean over levels and channels),
    an annotated PPM of the scene, and a single scale_ratios.csv whose
    counts conserve the number of retained samples.
    """
    os.makedirs(out_dir, exist_ok=True)
    all_weights = []
    for si, scene in enumerate(scenes):
        collect = {"scale_weights": [], "block_outputs": []}
        model.forward(scene.image, collect=collect)
        for w in collect["scale_weights"]:
            all_weights.append(w.numpy().copy())
        for bi, out in enumerate(collect["block_outputs"]):
            amap = out.numpy().mean(axis=(0, 3))        # [H, W]
            write_pgm(os.path.join(out_dir, f"scene{si:03d}_block{bi}.pgm"), amap)
        write_ppm(os.path.join(out_dir, f"scene{si:03d}_gt.ppm"),
                  annotate_scene(scene))
    files = []
    if all_weights:
        stats = scale_ratio_stats(all_weights)
        csv_path = os.path.join(out_dir, "scale_ratios.csv")
        with open(csv_path, "w", newline="") as f:
            wtr = csv.writer(f)
            wtr.writerow(["level", "bin_lo", "bin_hi", "count"])
            for level, counts in sorted(stats.counts.items()):
                for bi, c in enumerate(counts):
                    wtr.writerow([level, f"{stats.bin_edges[bi]:.6g}",
                                  f"{stats.bin_edges[bi + 1]:.6g}", int(c)])
                wtr.writerow([level, "dropped", "", stats.dropped[level]])
        files.append(csv_path)
    return files
