"""Command-line entry point.

Subcommands: gradcheck, flops, train, ablate, dump, eval. Configuration is a
plain UTF-8 key=value file (one pair per line, '#' comments) whose keys are
the TrainConfig fields; positional KEY=VALUE arguments override the file.
Every output directory receives the exact effective config and a run
manifest. Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from . import attention, flops as flops_mod, harness, head as head_mod
from .harness import TrainConfig, TrainingDiverged
from .pyramid import FeaturePyramid, align_pyramid
from .tensor import (
    Tensor, conv2d_3x3, gradcheck, hard_sigmoid, linear, maximum,
    bilinear_resize, bilinear_sample_map, global_avg_pool, mul, relu,
    sigmoid, tsum,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def parse_config_file(path):
    pairs = {}
    try:
        with open(path, encoding="utf-8") as f:
            for ln, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
                k, v = line.split("=", 1)
                pairs[k.strip()] = v.strip()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return pairs


def _coerce(name, raw):
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    typ = _FIELDS[name].type
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "tuple":
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"config key {name}: cannot parse {raw!r} as {typ}") from None


def build_train_config(args):
    pairs = {}
    if args.config:
        pairs.update(parse_config_file(args.config))
    for ov in getattr(args, "overrides", []) or []:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not KEY=VALUE")
        k, v = ov.split("=", 1)
        pairs[k.strip()] = v.strip()
    kwargs = {k: _coerce(k, v) for k, v in pairs.items()}
    if args.seed is not None:
        kwargs["seed"] = args.seed
    cfg = TrainConfig(**kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: TrainConfig):
    if cfg.num_levels < 1:
        raise ConfigError("num_levels must be >= 1")
    if cfg.channels % cfg.reduction != 0:
        raise ConfigError(f"reduction {cfg.reduction} must divide channels {cfg.channels}")
    if cfg.steps < 0 or cfg.batch_size < 1:
        raise ConfigError("steps must be >= 0 and batch_size >= 1")
    if cfg.descriptor_mode not in ("mean_sc", "mean_s_linear_c"):
        raise ConfigError(f"bad descriptor_mode {cfg.descriptor_mode!r}")
    if cfg.kernel_mode not in ("depthwise", "channel_mix"):
        raise ConfigError(f"bad kernel_mode {cfg.kernel_mode!r}")


def config_echo(cfg: TrainConfig):
    lines = []
    for f in dataclasses.fields(TrainConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def write_run_artifacts(out_dir, cfg, extra_manifest):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.echo"), "w", encoding="utf-8") as f:
        f.write(config_echo(cfg))
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as f:
        f.write(config_echo(cfg))
        for k, v in extra_manifest.items():
            f.write(f"{k}={v}\n")


def resolve_threads(args):
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("DYHEAD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"DYHEAD_THREADS={env!r} is not an integer") from None
    return 1


# ---------------------------------------------------------------------------
# gradcheck suite
# ---------------------------------------------------------------------------

def gradcheck_suite(inject_fault=False, rng=None):
    """Named finite-difference checks covering every op and the full model.

    Returns a list of (name, max_error, tol, passed). inject_fault corrupts
    one analytic gradient on purpose (used to test failure detection).
    """
    rng = rng or np.random.default_rng(0)
    checks = []

    def check(name, fn, inputs, tol=1e-5, max_entries=None):
        rep = gradcheck(fn, inputs, tol=tol, max_entries=max_entries)
        checks.append((name, rep.max_error, tol, rep.passed))

    t = lambda *s: Tensor(rng.normal(size=s))
    # elementwise ops, away from kinks
    check("add", lambda a, b: tsum(mul(a + b, a + b)), [t(3, 4), t(3, 4)])
    check("mul_broadcast", lambda a, b: tsum(mul(mul(a, b), mul(a, b))),
          [t(3, 1, 4), t(2, 4)])
    check("max", lambda a, b: tsum(mul(maximum(a, b), a)),
          [Tensor(rng.normal(size=(3, 4)) + 2.0), Tensor(rng.normal(size=(3, 4)) - 2.0)])
    check("relu", lambda a: tsum(mul(relu(a), a)),
          [Tensor(np.sign(rng.normal(size=(3, 4))) * rng.uniform(0.1, 2.0, (3, 4)))])
    check("sigmoid", lambda a: tsum(mul(sigmoid(a), a)), [t(3, 4)])
    check("hard_sigmoid", lambda a: tsum(mul(hard_sigmoid(a), a)),
          [Tensor(rng.uniform(-0.9, 0.9, size=(3, 4)))])
    check("linear", lambda x, W, b: tsum(mul(linear(x, W, b), linear(x, W, b))),
          [t(5, 3), t(3, 4), t(4)])
    check("conv2d_3x3", lambda x, K, b: tsum(mul(conv2d_3x3(x, K, b), x[:, :, :1])),
          [t(4, 5, 2), t(3, 3, 2, 3), t(3)])
    check("global_avg_pool", lambda x: tsum(mul(global_avg_pool(x, (0, 1)),
                                                global_avg_pool(x, (0, 1)))),
          [t(2, 3, 4)])
    check("bilinear_sample", lambda x, ys, xs: tsum(mul(bilinear_sample_map(x, ys, xs),
                                                        bilinear_sample_map(x, ys, xs))),
          [t(5, 5, 2), Tensor(rng.uniform(0.3, 3.4, 6)), Tensor(rng.uniform(0.3, 3.4, 6))])
    check("bilinear_resize", lambda x: tsum(mul(bilinear_resize(x, 5, 7),
                                                bilinear_resize(x, 5, 7))),
          [t(3, 4, 2)])

    # pyramid alignment
    def align_loss(a, b, c):
        pyr = FeaturePyramid(levels=[a, b, c], strides=[4, 8, 16])
        al = align_pyramid(pyr).data
        return tsum(mul(al, al))
    check("align_pyramid", align_loss, [t(8, 8, 2), t(4, 4, 2), t(2, 2, 2)])

    # attentions and full blocks
    L, H, W, C = 3, 4, 4, 8
    blk = attention.init_block_params(L, C, np.random.default_rng(1))
    for p in attention.block_parameters(blk):
        p.data = p.data + np.random.default_rng(2).normal(scale=0.3, size=p.data.shape)

    check("scale_attention",
          lambda F: tsum(mul(*[attention.scale_attention(F, blk.scale)[0]] * 2)),
          [t(L, H, W, C)])
    check("spatial_attention",
          lambda F: tsum(mul(*[attention.spatial_attention(F, blk.spatial, 1)] * 2)),
          [t(L, H, W, C)])
    check("task_attention",
          lambda F: tsum(mul(*[attention.task_attention(F, blk.task)] * 2)),
          [t(L, H, W, C)])

    def block_loss(F):
        out, _ = attention.dyhead_block(F, blk, median_index=1)
        return tsum(mul(out, out))
    check("dyhead_block_input", block_loss, [t(3, 4, 4, 8)])
    f_fixed = t(3, 4, 4, 8)
    params = attention.block_parameters(blk)
    check("dyhead_block_params", lambda *ps: block_loss(f_fixed), params,
          max_entries=24)

    # depth-6 stack at a smaller configuration, looser tolerance
    stack6 = attention.init_stack(6, 2, 4, np.random.default_rng(3))
    for p in attention.stack_parameters(stack6):
        p.data = p.data + np.random.default_rng(4).normal(scale=0.2, size=p.data.shape)

    def stack_loss(F):
        out = attention.stack_forward(F, stack6, 0)
        return tsum(mul(out, out))
    check("dyhead_stack_depth6", stack_loss, [t(2, 3, 3, 4)], tol=1e-4)

    # head loss wrt head parameters
    hp = head_mod.init_head_params(C, 3, np.random.default_rng(5))
    gt = head_mod.GroundTruth(boxes=[[4, 4, 28, 28], [10, 2, 20, 14]], classes=[0, 2])
    tgt = head_mod.assign_targets(gt, (H, W), L, 8, 4, 3)
    Floss = Tensor(np.random.default_rng(6).normal(size=(L, H, W, C)))

    def head_loss(*ps):
        return head_mod.loss(head_mod.predict(Floss, hp), tgt)
    check("head_loss_params", head_loss, head_mod.head_parameters(hp),
          tol=1e-4, max_entries=24)

    if inject_fault:
        def bad_fn(a):
            out = mul(a, a)
            node = tsum(out)
            orig_vjp = node._vjp
            node._vjp = lambda g: tuple(gr * 2.0 for gr in orig_vjp(g))
            return node
        rep = gradcheck(bad_fn, [t(3, 3)])
        checks.append(("injected_fault", rep.max_error, 1e-5, rep.passed))
    return checks


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    checks = gradcheck_suite(inject_fault=args.inject_fault, rng=rng)
    ok = True
    for name, err, tol, passed in checks:
        status = "PASS" if passed else "FAIL"
        print(f"{name:<24} max_rel_err={err:.3e}  tol={tol:.0e}  {status}")
        ok = ok and passed
    print(f"{len(checks)} checks, {'all passed' if ok else 'FAILURES present'}")
    return EXIT_OK if ok else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# flops
# ---------------------------------------------------------------------------

def cmd_flops(args):
    cfg = build_train_config(args)
    mid = (cfg.num_levels - 1) // 2
    stride = 4 * (2 ** mid)
    grid = cfg.image_size // stride
    bc = flops_mod.BlockConfig(
        num_levels=cfg.num_levels, height=grid, width=grid,
        channels=cfg.channels, depth=cfg.depth,
        descriptor_mode=cfg.descriptor_mode, kernel_mode=cfg.kernel_mode,
        reduction=cfg.reduction)
    depths = [int(x) for x in args.depths.split(",")] if args.depths else [cfg.depth]
    rows = flops_mod.stack_cost_curve(bc, depths)
    lines = ["# " + flops_mod.COUNTING_NOTE]
    header = "depth,total_macs,total_flops"
    if args.stage_breakdown:
        header += ",scale_macs,spatial_macs,task_macs"
    lines.append(header)
    for d, macs, fl, stages in rows:
        row = f"{d},{macs},{fl}"
        if args.stage_breakdown:
            row += f",{stages['scale']},{stages['spatial']},{stages['task']}"
        lines.append(row)
    out = "\n".join(lines) + "\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "flops.csv"), "w", encoding="utf-8") as f:
            f.write(out)
    print(out, end="")
    if args.verify_instrumented:
        small = flops_mod.BlockConfig(num_levels=min(cfg.num_levels, 2), height=4,
                                      width=4, channels=min(cfg.channels, 8),
                                      depth=1, descriptor_mode=cfg.descriptor_mode,
                                      kernel_mode=cfg.kernel_mode,
                                      reduction=min(cfg.reduction,
                                                    min(cfg.channels, 8)))
        ana = flops_mod.count_block(small).per_stage
        ins = flops_mod.instrumented_block_macs(small)
        if ana != ins:
            print(f"instrumented check FAILED: analytic {ana} vs executed {ins}",
                  file=sys.stderr)
            return EXIT_NUMERICAL
        print("# instrumented check passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / ablate / dump / eval
# ---------------------------------------------------------------------------

def cmd_train(args):
    cfg = build_train_config(args)
    out_dir = args.out or "run"
    t0 = time.time()
    try:
        result = harness.train(cfg, out_dir=out_dir)
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    write_run_artifacts(out_dir, cfg, {
        "wall_time_s": f"{time.time() - t0:.3f}",
        "final_toy_ap": f"{result.final_ap:.6g}" if result.metrics else "",
        "scene_seeds": ",".join(str(s) for s in
                                harness._scene_seeds(cfg, cfg.train_scenes, 0)),
    })
    if result.metrics:
        print(f"final loss {result.metrics[-1][1]:.6g}  toy_ap {result.final_ap:.4f}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = build_train_config(args)
    out_dir = args.out or "ablation"
    threads = resolve_threads(args)
    seeds = tuple(range(5))
    t0 = time.time()
    if threads > 1:
        rows = _ablate_parallel(cfg, seeds, threads)
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as f:
            f.write(harness.ablation_to_csv(rows, seeds))
    else:
        rows = harness.ablation_matrix(cfg, seeds=seeds, out_dir=out_dir,
                                       progress=_progress)
    write_run_artifacts(out_dir, cfg, {
        "wall_time_s": f"{time.time() - t0:.3f}",
        "seeds": ",".join(str(s) for s in seeds),
    })
    for r in rows:
        flags = "".join("x" if not f else "o" for f in r["flags"])
        print(f"{flags}  median_ap={r['median_ap']:.4f}  "
              f"aps={[round(a, 4) for a in r['aps']]}")
    return EXIT_OK


def _progress(flags, seed, ap):
    tag = "".join("o" if f else "x" for f in flags)
    print(f"  cell {tag} seed {seed}: ap={ap if ap is None else round(ap, 4)}",
          flush=True)


def _ablate_cell(payload):
    cfg_dict, flags, seed = payload
    cfg = TrainConfig(**{**cfg_dict, "seed": seed, "enable_scale": flags[0],
                         "enable_spatial": flags[1], "enable_task": flags[2]})
    try:
        return harness.train(cfg).final_ap, None
    except TrainingDiverged as e:
        return None, str(e)


def _ablate_parallel(cfg, seeds, threads):
    from concurrent.futures import ProcessPoolExecutor
    cfg_dict = dataclasses.asdict(cfg)
    jobs = [(cfg_dict, flags, s) for flags in harness.ABLATION_CELLS for s in seeds]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        results = list(ex.map(_ablate_cell, jobs))
    rows = []
    for ci, flags in enumerate(harness.ABLATION_CELLS):
        cell = results[ci * len(seeds):(ci + 1) * len(seeds)]
        aps = [ap for ap, err in cell if ap is not None]
        errors = [err for ap, err in cell if err]
        med = float(np.median(aps)) if aps else float("nan")
        rows.append({"flags": flags, "median_ap": med, "aps": aps, "errors": errors})
    return rows


def _load_model(args, cfg):
    model = harness.build_model(cfg)
    if args.ckpt:
        harness.apply_checkpoint(model, harness.load_checkpoint(args.ckpt))
    return model


def cmd_dump(args):
    cfg = build_train_config(args)
    out_dir = args.out or "dump"
    model = _load_model(args, cfg)
    scenes = [harness.gen_scene(s, cfg.image_size, cfg.num_classes, cfg.max_rects)
              for s in harness._scene_seeds(cfg, args.scenes, 10_000)]
    t0 = time.time()
    harness.dump_attention(model, scenes, out_dir)
    write_run_artifacts(out_dir, cfg, {"wall_time_s": f"{time.time() - t0:.3f}",
                                       "num_scenes": str(len(scenes))})
    print(f"wrote attention dumps for {len(scenes)} scenes to {out_dir}")
    return EXIT_OK


def cmd_eval(args):
    cfg = build_train_config(args)
    model = _load_model(args, cfg)
    scenes = [harness.gen_scene(s, cfg.image_size, cfg.num_classes, cfg.max_rects)
              for s in harness._scene_seeds(cfg, cfg.eval_scenes, 10_000)]
    ap = harness.evaluate(model, scenes)
    print(f"toy_ap {ap:.6f} over {len(scenes)} scenes")
    if args.out:
        write_run_artifacts(args.out, cfg, {"toy_ap": f"{ap:.6f}"})
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def make_parser():
    ap = argparse.ArgumentParser(prog="dyhead",
                                 description="attention detection-head toolkit")
    ap.add_argument("--config", help="key=value config file")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--seed", type=int, help="seed override")
    ap.add_argument("--threads", type=int,
                    help="worker count (env DYHEAD_THREADS as fallback)")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--inject-fault", action="store_true",
                   help="corrupt one gradient to exercise failure detection")
    g.set_defaults(fn=cmd_gradcheck)

    f = sub.add_parser("flops", help="analytic cost table")
    f.add_argument("--depths", help="comma-separated depths, e.g. 1,2,3")
    f.add_argument("--stage-breakdown", action="store_true")
    f.add_argument("--verify-instrumented", action="store_true")
    f.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
    f.set_defaults(fn=cmd_flops)

    for name, fn in (("train", cmd_train), ("ablate", cmd_ablate),
                     ("eval", cmd_eval)):
        p = sub.add_parser(name)
        p.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
        if name == "eval":
            p.add_argument("--ckpt", help="checkpoint to load")
        p.set_defaults(fn=fn)

    d = sub.add_parser("dump", help="attention maps and scale-ratio histogram")
    d.add_argument("--ckpt", help="checkpoint to load")
    d.add_argument("--scenes", type=int, default=4)
    d.add_argument("overrides", nargs="*", metavar="KEY=VALUE")
    d.set_defaults(fn=cmd_dump)
    return ap


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
