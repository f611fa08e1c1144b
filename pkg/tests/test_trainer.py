"""Tests for the training loop, mIoU evaluation, config handling, ablation."""

import numpy as np
import pytest

from pixseg.data import Sample, generate_dataset
from pixseg.errors import InvalidParameterError, ParseError
from pixseg.model import NetConfig, ToyNet
from pixseg.trainer import (METRICS_HEADER, TrainConfig, ablate, evaluate_miou,
                            load_config, run_training, train_step,
                            _labeled_batch, _unlabeled_batch)


def small_cfg(**kw):
    defaults = dict(total_steps=5, classes=4, labeled_fraction=0.5,
                    batch_labeled=2, batch_unlabeled=2, num_negatives=8,
                    proj_dim=4, seed=7)
    defaults.update(kw)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(16, seed=5, classes=4)


@pytest.fixture(scope="module")
def tiny_eval():
    return generate_dataset(4, seed=6, classes=4)


def miou_oracle(preds, masks, c):
    """Brute-force per-pixel confusion counting, one pair of loops."""
    conf = np.zeros((c, c), dtype=np.int64)
    for pred, mask in zip(preds, masks):
        for r in range(mask.shape[0]):
            for col in range(mask.shape[1]):
                if mask[r, col] != 255:
                    conf[mask[r, col], pred[r, col]] += 1
    ious = []
    for k in range(c):
        tp = conf[k, k]
        denom = conf[k, :].sum() + conf[:, k].sum() - tp
        if denom > 0:
            ious.append(tp / denom)
    return float(np.mean(ious)) if ious else 0.0


class TestConfig:
    def test_defaults_valid(self):
        cfg = TrainConfig()
        assert cfg.lambda1 == 0.3 and cfg.lambda2 == 1.0
        assert cfg.num_negatives == 200 and cfg.tau == 0.07

    def test_rejects_negative_coeffs(self):
        with pytest.raises(InvalidParameterError):
            TrainConfig(lambda1=-0.1)

    def test_rejects_late_delay(self):
        with pytest.raises(InvalidParameterError):
            TrainConfig(delayed_start=3000, total_steps=2000)

    def test_rejects_unknown_strategy(self):
        with pytest.raises(InvalidParameterError):
            TrainConfig(strategy="random")


class TestLoadConfig:
    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("lambda1 = 0.5\ntotal_steps = 100  # short\n\n"
                        "strategy = uniform\nshared_projection = true\n")
        cfg = load_config(str(path), {"total_steps": 50, "seed": None})
        assert cfg.lambda1 == 0.5
        assert cfg.total_steps == 50  # override wins
        assert cfg.strategy == "uniform"
        assert cfg.shared_projection is True

    def test_unknown_key_in_file(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("turbo = on\n")
        with pytest.raises(ParseError):
            load_config(str(path))

    def test_missing_equals(self, tmp_path):
        path = tmp_path / "bad2.cfg"
        path.write_text("lambda1 0.5\n")
        with pytest.raises(ParseError) as err:
            load_config(str(path))
        assert err.value.line == 1

    def test_unknown_override(self):
        with pytest.raises(InvalidParameterError):
            load_config(None, {"warp_speed": 9})

    def test_string_overrides_coerced(self):
        cfg = load_config(None, {"lambda1": "0.25", "total_steps": "10"})
        assert cfg.lambda1 == 0.25 and cfg.total_steps == 10


class TestEvaluateMiou:
    def test_perfect_prediction(self):
        net = ToyNet(NetConfig(num_classes=2, widths=(4, 4, 4), proj_dim=2))
        sample = generate_dataset(1, seed=1, classes=2)[0]
        out = net.forward(sample.image)
        forced = Sample(image=sample.image, mask=out.probs.argmax(axis=-1))
        _, miou = evaluate_miou(net, [forced])
        assert miou == pytest.approx(1.0)

    def test_half_right_hand_example(self):
        # truth half 0 / half 1, prediction all 0 -> IoU [0.5, 0.0], mIoU 0.25
        conf_pred = np.zeros((4, 4), dtype=int)
        truth = np.zeros((4, 4), dtype=np.uint8)
        truth[2:] = 1
        oracle = miou_oracle([conf_pred], [truth], 2)
        assert oracle == pytest.approx(0.25)

    def test_matches_oracle_on_random_masks(self):
        rng = np.random.default_rng(17)
        net = ToyNet(NetConfig(num_classes=3, widths=(4, 4, 4), proj_dim=2,
                               seed=2))
        samples = []
        preds = []
        masks = []
        for _ in range(50):
            image = rng.random((8, 8, 3))
            mask = rng.integers(0, 3, size=(8, 8)).astype(np.uint8)
            mask[rng.random((8, 8)) < 0.1] = 255  # sprinkle ignore pixels
            samples.append(Sample(image=image, mask=mask))
            preds.append(net.forward(image).probs.argmax(axis=-1))
            masks.append(mask)
        _, miou = evaluate_miou(net, samples)
        assert miou == pytest.approx(miou_oracle(preds, masks, 3), abs=1e-12)

    def test_empty_set_rejected(self):
        net = ToyNet(NetConfig(num_classes=2, widths=(4,), proj_dim=2,
                               feature_stage=1))
        with pytest.raises(InvalidParameterError):
            evaluate_miou(net, [])


class TestTrainStep:
    def test_loss_decomposition_identity(self, tiny_data):
        cfg = small_cfg()
        net = ToyNet(NetConfig(num_classes=4, proj_dim=4, seed=1))
        row = train_step(net, _labeled_batch(tiny_data, cfg, 0),
                         _unlabeled_batch(tiny_data, cfg, 0), cfg, 0)
        expect = (row.supervised_ce + cfg.lambda1 * row.contrastive
                  + cfg.lambda2 * row.consistency)
        assert row.total == pytest.approx(expect, abs=1e-12)

    def test_supervised_only_matches_zero_lambdas(self, tiny_data):
        # lambda1 = lambda2 = 0 must be bit-identical to never touching the
        # unlabeled stream at all
        def trajectory(unlabeled):
            cfg = small_cfg(lambda1=0.0, lambda2=0.0)
            net = ToyNet(NetConfig(num_classes=4, proj_dim=4, seed=1))
            for step in range(cfg.total_steps):
                train_step(net, _labeled_batch(tiny_data, cfg, step),
                           unlabeled, cfg, step)
            return net.params

        a = trajectory([])
        b = trajectory(tiny_data[:2])
        np.testing.assert_array_equal(a, b)

    def test_delayed_start_skips_unlabeled(self, tiny_data):
        def params_after_one(delay):
            cfg = small_cfg(delayed_start=delay)
            net = ToyNet(NetConfig(num_classes=4, proj_dim=4, seed=1))
            train_step(net, _labeled_batch(tiny_data, cfg, 0),
                       _unlabeled_batch(tiny_data, cfg, 0), cfg, 0)
            return net.params

        delayed = params_after_one(3)
        baseline_cfg = small_cfg(lambda1=0.0, lambda2=0.0)
        net = ToyNet(NetConfig(num_classes=4, proj_dim=4, seed=1))
        train_step(net, _labeled_batch(tiny_data, baseline_cfg, 0),
                   [], baseline_cfg, 0)
        np.testing.assert_array_equal(delayed, net.params)

    def test_fnr_reported_for_contrastive(self, tiny_data):
        cfg = small_cfg()
        net = ToyNet(NetConfig(num_classes=4, proj_dim=4, seed=1))
        row = train_step(net, _labeled_batch(tiny_data, cfg, 0),
                         _unlabeled_batch(tiny_data, cfg, 0), cfg, 0)
        assert row.fnr is not None and 0.0 <= row.fnr <= 1.0


class TestContrastiveStream:
    def test_gradient_matches_finite_differences(self):
        # the density and the sampled indices depend only on the pool, not on
        # the embeddings, so a fixed rng seed makes the stream differentiable
        from pixseg.sampling import CandidatePool
        from pixseg.trainer import _pixel_contrastive_stream

        rng = np.random.default_rng(3)
        m, d, c = 12, 6, 3
        z = rng.normal(size=(m, d))
        prob = rng.dirichlet(np.ones(c), size=m)
        k = m // 2
        partner = np.concatenate([np.arange(k) + k, np.arange(k)])
        pool = CandidatePool(
            image_id=np.tile(np.arange(3).repeat(2), 2), prob=prob,
            gt_label=rng.integers(0, c, size=m),
            anchor_exclusions={i: (i, int(partner[i])) for i in range(m)})
        cfg = small_cfg(num_negatives=4)

        def loss_of(zv):
            return _pixel_contrastive_stream(
                cfg, zv, pool, partner, np.random.default_rng(99))[0]

        _, dz, fnr, _ = _pixel_contrastive_stream(
            cfg, z, pool, partner, np.random.default_rng(99))
        assert 0.0 <= fnr <= 1.0
        step = 1e-6
        numeric = np.zeros_like(z)
        for i in range(m):
            for j in range(d):
                zp, zm = z.copy(), z.copy()
                zp[i, j] += step
                zm[i, j] -= step
                numeric[i, j] = (loss_of(zp) - loss_of(zm)) / (2 * step)
        scale = max(np.abs(numeric).max(), 1e-12)
        assert np.abs(numeric - dz).max() / scale < 1e-4

    def test_empty_densities_zero_gradient(self):
        # one shared image id: the diff strategy has no valid negatives
        from pixseg.sampling import CandidatePool
        from pixseg.trainer import _pixel_contrastive_stream

        rng = np.random.default_rng(4)
        z = rng.normal(size=(6, 4))
        partner = np.array([3, 4, 5, 0, 1, 2])
        pool = CandidatePool(image_id=np.zeros(6, dtype=int),
                             prob=rng.dirichlet(np.ones(3), size=6),
                             anchor_exclusions={i: (i, int(partner[i]))
                                                for i in range(6)})
        cfg = small_cfg(strategy="diff", num_negatives=3)
        loss, dz, fnr, shortfalls = _pixel_contrastive_stream(
            cfg, z, pool, partner, np.random.default_rng(0))
        assert loss == 0.0
        assert np.all(dz == 0.0)
        assert shortfalls == 6


class TestRunTraining:
    def test_metrics_csv_deterministic(self, tiny_data, tiny_eval, tmp_path):
        cfg = small_cfg()
        dir_a, dir_b = tmp_path / "a", tmp_path / "b"
        run_training(cfg, tiny_data, tiny_eval, str(dir_a))
        run_training(cfg, tiny_data, tiny_eval, str(dir_b))
        csv_a = (dir_a / "metrics.csv").read_bytes()
        assert csv_a == (dir_b / "metrics.csv").read_bytes()
        header = csv_a.decode().splitlines()[0].split(",")
        assert header == METRICS_HEADER

    def test_checkpoint_round_trip_bytes(self, tiny_data, tiny_eval, tmp_path):
        from pixseg.model import load_checkpoint, save_checkpoint
        cfg = small_cfg()
        out = tmp_path / "run"
        run_training(cfg, tiny_data, tiny_eval, str(out))
        ckpt = out / "checkpoint.ckpt"
        net, step = load_checkpoint(str(ckpt))
        again = tmp_path / "again.ckpt"
        save_checkpoint(net, str(again), step=step)
        assert ckpt.read_bytes() == again.read_bytes()

    def test_zero_steps_eval_only(self, tiny_data, tiny_eval):
        cfg = small_cfg(total_steps=0, delayed_start=0)
        _, rows, miou = run_training(cfg, tiny_data, tiny_eval)
        assert len(rows) == 1
        assert rows[0].eval_miou == miou

    def test_periodic_checkpoints(self, tiny_data, tiny_eval, tmp_path):
        cfg = small_cfg(total_steps=4, checkpoint_every=2)
        out = tmp_path / "run"
        run_training(cfg, tiny_data, tiny_eval, str(out))
        assert (out / "checkpoint_2.ckpt").exists()
        assert (out / "checkpoint_4.ckpt").exists()

    def test_final_miou_in_range(self, tiny_data, tiny_eval):
        _, _, miou = run_training(small_cfg(), tiny_data, tiny_eval)
        assert 0.0 <= miou <= 1.0


class TestAblate:
    def test_strategy_axis_rows(self, tiny_data, tiny_eval):
        cfg = small_cfg(total_steps=2)
        rows = ablate(cfg, "strategy", tiny_data, tiny_eval)
        assert [r["setting"] for r in rows] == ["uniform", "diff", "pseudo",
                                                "diff+pseudo", "oracle"]
        for r in rows:
            assert r["error"] == ""
            assert 0.0 <= r["final_miou"] <= 1.0

    def test_coeff_axis_has_six_cells(self, tiny_data, tiny_eval):
        rows = ablate(small_cfg(total_steps=1), "coeffs", tiny_data, tiny_eval)
        assert len(rows) == 6

    def test_unknown_axis(self, tiny_data, tiny_eval):
        with pytest.raises(InvalidParameterError):
            ablate(small_cfg(), "magic", tiny_data, tiny_eval)

    def test_per_cell_failures_recorded(self, tiny_eval):
        # a 2-sample dataset with fraction 0.5 leaves 1 labeled image; an
        # unpicklable failure inside one cell must not kill the grid
        rows = ablate(small_cfg(total_steps=1, labeled_fraction=0.01),
                      "delay", generate_dataset(4, seed=9, classes=4), tiny_eval)
        assert all(r["error"] != "" for r in rows)
        assert all(r["final_miou"] is None for r in rows)
