"""Synthetic scenes, trainer determinism, checkpoints, and dumps."""

import math
import os

import numpy as np
import pytest

from dyhead.harness import (
    Pcg32,
    TrainConfig,
    TrainingDiverged,
    ablation_to_csv,
    ablation_matrix,
    apply_checkpoint,
    backbone_forward,
    build_model,
    dump_attention,
    gen_scene,
    init_backbone,
    load_checkpoint,
    metrics_to_csv,
    overfit_config,
    save_checkpoint,
    train,
    write_pgm,
    write_ppm,
)
from dyhead.head import level_size_ranges
from dyhead.tensor import Tensor

FAST = TrainConfig(steps=4, eval_interval=2, train_scenes=2, eval_scenes=2,
                   batch_size=1, num_levels=2, channels=8, image_size=32,
                   max_rects=3, depth=1)


class TestPcg32:
    def test_known_sequence_stable(self):
        rng = Pcg32(42)
        seq = [rng.next_u32() for _ in range(4)]
        rng2 = Pcg32(42)
        assert seq == [rng2.next_u32() for _ in range(4)]
        assert all(0 <= v < 2 ** 32 for v in seq)

    def test_different_seeds_diverge(self):
        a = [Pcg32(1).next_u32() for _ in range(1)]
        b = [Pcg32(2).next_u32() for _ in range(1)]
        assert a != b

    def test_uniform_and_randint_bounds(self):
        rng = Pcg32(7)
        for _ in range(100):
            assert 0.25 <= rng.uniform(0.25, 0.75) < 0.75
            assert 3 <= rng.randint(3, 9) < 9


class TestSceneGeneration:
    def test_deterministic_repeat(self):
        a, b = gen_scene(123), gen_scene(123)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.gt.boxes, b.gt.boxes)
        assert np.array_equal(a.gt.classes, b.gt.classes)

    def test_boxes_inside_image(self):
        for seed in range(100):
            s = gen_scene(seed)
            assert np.all(s.gt.boxes[:, 0] >= 0)
            assert np.all(s.gt.boxes[:, 1] >= 0)
            assert np.all(s.gt.boxes[:, 2] <= 64)
            assert np.all(s.gt.boxes[:, 3] <= 64)
            assert np.all(s.gt.boxes[:, 2] > s.gt.boxes[:, 0])
            assert np.all(s.gt.boxes[:, 3] > s.gt.boxes[:, 1])

    def test_image_values_in_unit_range(self):
        for seed in range(10):
            img = gen_scene(seed).image
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_classes_within_bounds(self):
        for seed in range(50):
            s = gen_scene(seed, num_classes=3)
            assert np.all((s.gt.classes >= 0) & (s.gt.classes < 3))

    def test_max_sides_cover_three_level_ranges(self):
        """Over the seed stream the box max-side distribution hits every
        default assignment range (in level-0 grid units at stride 4)."""
        ranges = level_size_ranges(3)
        hit = [0, 0, 0]
        for seed in range(1000):
            s = gen_scene(seed)
            sides = np.maximum(s.gt.boxes[:, 2] - s.gt.boxes[:, 0],
                               s.gt.boxes[:, 3] - s.gt.boxes[:, 1]) / 4.0
            for i, (lo, hi) in enumerate(ranges):
                if np.any((sides >= lo) & (sides < hi)):
                    hit[i] += 1
        assert all(h > 0 for h in hit), hit


class TestBackbone:
    def test_pyramid_shapes_and_strides(self):
        rng = np.random.default_rng(0)
        p = init_backbone(3, 8, rng)
        pyr = backbone_forward(Tensor(rng.uniform(size=(64, 64, 3))), p)
        assert pyr.strides == [4, 8, 16]
        assert [lv.shape for lv in pyr.levels] == [
            (16, 16, 8), (8, 8, 8), (4, 4, 8)]


class TestTrainer:
    def test_zero_lr_timeline_constant(self):
        cfg = TrainConfig(**{**FAST.__dict__, "lr": 0.0, "steps": 6,
                             "eval_interval": 2})
        res = train(cfg)
        losses = [m[1] for m in res.metrics]
        assert all(lv == pytest.approx(losses[0], rel=1e-12) for lv in losses)

    def test_zero_steps_single_final_row(self):
        cfg = TrainConfig(**{**FAST.__dict__, "steps": 0})
        res = train(cfg)
        assert len(res.metrics) == 1
        assert res.metrics[0][0] == 0
        assert math.isnan(res.metrics[0][1])     # no loss was ever computed

    def test_metrics_rows_at_eval_interval(self):
        res = train(FAST)
        assert [m[0] for m in res.metrics] == [2, 4]

    def test_bit_identical_reruns(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        train(FAST, out_dir=str(d1))
        train(FAST, out_dir=str(d2))
        assert (d1 / "metrics.csv").read_bytes() == (d2 / "metrics.csv").read_bytes()
        assert (d1 / "checkpoint.ckpt").read_bytes() == (d2 / "checkpoint.ckpt").read_bytes()

    def test_divergence_raises_with_dump(self, tmp_path):
        cfg = TrainConfig(**{**FAST.__dict__, "lr": 1e30, "steps": 20})
        with pytest.raises(TrainingDiverged):
            train(cfg, out_dir=str(tmp_path))
        assert (tmp_path / "diverged.ckpt").exists()

    def test_overfit_config_is_single_scene(self):
        cfg = overfit_config()
        assert cfg.train_scenes == 1 and cfg.steps == 500

    def test_warmup_scales_early_lr(self):
        # warmup must not change determinism or the metric schema
        cfg = TrainConfig(**{**FAST.__dict__, "warmup_steps": 2})
        res = train(cfg)
        assert len(res.metrics) == 2


class TestCheckpoints:
    def test_round_trip_exact(self, tmp_path):
        model = build_model(FAST)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, model.parameters())
        entries = load_checkpoint(path)
        by_name = dict(entries)
        for p in model.parameters():
            assert np.array_equal(by_name[p.name], p.data)

    def test_apply_restores_parameters(self, tmp_path):
        model = build_model(FAST)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, model.parameters())
        for p in model.parameters():
            p.data = p.data + 1.0
        apply_checkpoint(model, load_checkpoint(path))
        model2 = build_model(FAST)
        for p, q in zip(model.parameters(), model2.parameters()):
            assert np.array_equal(p.data, q.data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(str(path))

    def test_unknown_parameter_rejected(self, tmp_path):
        model = build_model(FAST)
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, model.parameters())
        other = build_model(TrainConfig(**{**FAST.__dict__, "depth": 2}))
        with pytest.raises(ValueError, match="shape mismatch|not in model"):
            apply_checkpoint(other, load_checkpoint(path)[:1] + [
                ("no.such.param", np.zeros(3))])


class TestCsvAndImages:
    def test_metrics_csv_schema(self):
        text = metrics_to_csv([(10, 0.5, 0.25), (20, float("nan"), 0.5)])
        lines = text.strip().splitlines()
        assert lines[0] == "step,loss,toy_ap"
        assert lines[1] == "10,0.5,0.25"
        assert lines[2].startswith("20,nan,")

    def test_ablation_csv_has_eight_rows(self):
        rows = [{"flags": (bool(i & 4), bool(i & 2), bool(i & 1)),
                 "median_ap": 0.1 * i, "aps": [0.1] * 5, "errors": []}
                for i in range(8)]
        text = ablation_to_csv(rows, seeds=(0, 1, 2, 3, 4))
        lines = text.strip().splitlines()
        assert len(lines) == 9
        assert lines[0].startswith("scale,spatial,task,median_ap")

    def test_pgm_ppm_headers(self, tmp_path):
        g = np.linspace(0, 1, 12).reshape(3, 4)
        pgm = tmp_path / "x.pgm"
        write_pgm(str(pgm), g)
        data = pgm.read_bytes()
        assert data.startswith(b"P5\n4 3\n255\n")
        assert len(data) == len(b"P5\n4 3\n255\n") + 12

        rgb = np.zeros((2, 2, 3))
        ppm = tmp_path / "x.ppm"
        write_ppm(str(ppm), rgb)
        assert ppm.read_bytes().startswith(b"P6\n2 2\n255\n")

    def test_constant_pgm_mid_gray(self, tmp_path):
        path = tmp_path / "c.pgm"
        write_pgm(str(path), np.full((2, 2), 3.0))
        assert path.read_bytes().endswith(bytes([127] * 4))


class TestDumpAttention:
    def test_dump_emits_maps_and_conserving_histogram(self, tmp_path):
        model = build_model(FAST)
        scenes = [gen_scene(s, FAST.image_size) for s in (5, 6, 7)]
        dump_attention(model, scenes, str(tmp_path))
        pgms = sorted(f for f in os.listdir(tmp_path) if f.endswith(".pgm"))
        assert len(pgms) == 3 * FAST.depth
        ppms = [f for f in os.listdir(tmp_path) if f.endswith(".ppm")]
        assert len(ppms) == 3
        csv_path = tmp_path / "scale_ratios.csv"
        assert csv_path.exists()
        # counts + dropped must conserve the number of collected weight vectors
        total_weights = 3 * FAST.depth
        lines = csv_path.read_text().strip().splitlines()[1:]
        per_level = {}
        for ln in lines:
            parts = ln.split(",")
            lvl = int(parts[0])
            if parts[1] == "dropped":
                per_level[lvl] = per_level.get(lvl, 0) + int(parts[3])
            else:
                per_level[lvl] = per_level.get(lvl, 0) + int(parts[3])
        for lvl, total in per_level.items():
            assert total == total_weights


@pytest.mark.slow
class TestAblationMatrixSmall:
    def test_grid_shape_and_failure_tolerance(self, tmp_path):
        cfg = TrainConfig(**{**FAST.__dict__, "steps": 2, "eval_interval": 0})
        rows = ablation_matrix(cfg, seeds=(0,), out_dir=str(tmp_path))
        assert len(rows) == 8
        assert (tmp_path / "ablation.csv").exists()
        flags_seen = {r["flags"] for r in rows}
        assert len(flags_seen) == 8
