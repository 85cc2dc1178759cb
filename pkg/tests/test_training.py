import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from textscrub.model import ModelConfig, count_parameters, init_model
from textscrub.synth import Triplet, make_scene, make_triplet
from textscrub.training import (
    ABLATION_VARIANTS,
    LossReport,
    TrainConfig,
    TrainingDiverged,
    _crop_origin,
    build_model,
    derive_mask_variant,
    load_train_config,
    lr_schedule,
    run_ablation,
    save_train_config,
    train,
    train_epoch,
    weighted_l1_loss,
)

TOY_MODEL = ModelConfig(latent_channels=8, backbone_width=12, num_residual_blocks=1, iterations=2)


def toy_config(**kwargs):
    base = dict(
        base_lr=2e-3, epochs=2, batch_size=2, crop=32, iterations=2, seed=0, alpha=0.4
    )
    base.update(kwargs)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_triplets():
    out = []
    for seed in range(4):
        scene = make_scene(32, 32, seed=seed + 50, min_instances=1, max_instances=2)
        out.append(make_triplet(scene, alpha=0.3, seed=seed))
    return out


class TestWeightedL1Loss:
    def test_two_iteration_arithmetic(self):
        gt = np.zeros((2, 2))
        preds = [np.full((2, 2), 1.0), np.full((2, 2), 1.0)]
        report = weighted_l1_loss(preds, gt, 0.85)
        assert report.total == pytest.approx(0.85 + 1.0, abs=1e-12)
        assert report.per_iteration == [1.0, 1.0]

    def test_perfect_predictions_zero(self, rng):
        gt = rng.random((3, 4, 3))
        report = weighted_l1_loss([gt, gt, gt], gt, 0.85)
        assert report.total == 0.0

    def test_three_iteration_hand_arithmetic(self):
        gt = np.zeros((10,))
        preds = [np.full((10,), 0.3), np.full((10,), 0.2), np.full((10,), 0.1)]
        report = weighted_l1_loss(preds, gt, 0.85)
        assert report.total == pytest.approx(0.85 ** 2 * 0.3 + 0.85 * 0.2 + 0.1, abs=1e-15)
        assert report.total == pytest.approx(0.48675, abs=1e-12)

    def test_weight_ratio_is_exact_power(self):
        lam = 0.85
        k_total = 6
        weights = [lam ** (k_total - 1 - i) for i in range(k_total)]
        for k in range(k_total):
            for k2 in range(k, k_total):
                assert weights[k] / weights[k2] == pytest.approx(lam ** (k2 - k), rel=1e-12)

    def test_accepts_torch_tensors(self):
        gt = torch.zeros(2, 3)
        report = weighted_l1_loss([torch.ones(2, 3)], gt, 0.85)
        assert report.total == pytest.approx(1.0)

    def test_lambda_must_be_positive(self):
        with pytest.raises(ValueError):
            weighted_l1_loss([np.zeros(3)], np.zeros(3), 0.0)

    def test_nonnegative_on_random_inputs(self, rng):
        for _ in range(10):
            gt = rng.random((4, 4))
            preds = [rng.random((4, 4)) for _ in range(3)]
            assert weighted_l1_loss(preds, gt, 0.85).total >= 0.0


class TestLrSchedule:
    def test_start_value(self):
        assert lr_schedule(0, 1001, 1e-4) == pytest.approx(1e-4 / 25)

    def test_peak_at_30_percent(self):
        assert lr_schedule(300, 1001, 1e-4) == pytest.approx(1e-4)

    def test_final_value(self):
        assert lr_schedule(1000, 1001, 1e-4) == pytest.approx(1e-4 / 1e4, rel=1e-9)

    def test_monotone_up_then_down_on_grid(self):
        total = 1000
        values = [lr_schedule(s, total, 3e-4) for s in range(total)]
        peak = int(round(0.3 * (total - 1)))
        for i in range(peak):
            assert values[i] < values[i + 1]
        for i in range(peak, total - 1):
            assert values[i] > values[i + 1]
        assert all(v > 0 for v in values)

    def test_single_step_run(self):
        assert lr_schedule(0, 1, 1e-4) == pytest.approx(1e-4)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            lr_schedule(5, 5, 1e-4)


class TestConfigFile:
    def test_roundtrip(self, tmp_path):
        cfg = toy_config(lam=0.9, supervise="final_only", use_context=False)
        path = tmp_path / "train.cfg"
        save_train_config(path, cfg)
        assert load_train_config(path) == cfg
        text = path.read_text()
        assert "lambda = 0.9" in text

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("learning_rate = 0.1\n")
        with pytest.raises(ValueError, match="unknown config key"):
            load_train_config(path)

    def test_comments_and_blanks(self, tmp_path):
        path = tmp_path / "ok.cfg"
        path.write_text("# comment\n\nbase_lr = 0.001  # trailing\nepochs = 3\n")
        cfg = load_train_config(path)
        assert cfg.base_lr == 0.001
        assert cfg.epochs == 3

    def test_validation_bounds(self):
        with pytest.raises(ValueError):
            TrainConfig(lam=0.0).validate()
        with pytest.raises(ValueError):
            TrainConfig(lam=1.5).validate()
        with pytest.raises(ValueError):
            TrainConfig(supervise="sometimes").validate()
        with pytest.raises(ValueError):
            TrainConfig(mask_mode="most").validate()


class TestCropSampling:
    def test_windows_in_bounds_and_touch_mask(self, rng):
        mask = np.zeros((40, 40), dtype=np.uint8)
        mask[30:33, 2:5] = 1
        for _ in range(100):
            y, x = _crop_origin(rng, mask, 16)
            assert 0 <= y <= 24 and 0 <= x <= 24
            assert mask[y : y + 16, x : x + 16].any()

    def test_empty_mask_any_window(self, rng):
        mask = np.zeros((20, 20), dtype=np.uint8)
        y, x = _crop_origin(rng, mask, 8)
        assert 0 <= y <= 12 and 0 <= x <= 12

    def test_full_size_crop(self, rng):
        mask = np.ones((16, 16), dtype=np.uint8)
        assert _crop_origin(rng, mask, 16) == (0, 0)

    def test_oversized_crop_rejected(self, rng):
        with pytest.raises(ValueError):
            _crop_origin(rng, np.zeros((8, 8), np.uint8), 16)


class TestTrainLoop:
    def test_zero_epochs_leaves_weights(self, small_triplets):
        cfg = toy_config(epochs=0)
        model = build_model(TOY_MODEL, cfg)
        before = [p.detach().clone() for p in model.parameters()]
        model, reports = train(model, small_triplets, cfg)
        assert reports == []
        for p, b in zip(model.parameters(), before):
            assert torch.equal(p, b)

    def test_loss_decreases_on_average(self, small_triplets):
        cfg = toy_config(epochs=10, base_lr=3e-3)
        model = build_model(TOY_MODEL, cfg)
        model, reports = train(model, small_triplets, cfg)
        first = np.mean([r.total for r in reports[:4]])
        last = np.mean([r.total for r in reports[-4:]])
        assert last < first

    def test_deterministic_reports_single_threaded(self, small_triplets):
        n_threads = torch.get_num_threads()
        torch.set_num_threads(1)
        try:
            cfg = toy_config(epochs=2)
            runs = []
            for _ in range(2):
                model = build_model(TOY_MODEL, cfg)
                _, reports = train(model, small_triplets, cfg)
                runs.append([(r.step, r.lr, r.total, tuple(r.per_iteration)) for r in reports])
            assert runs[0] == runs[1]
        finally:
            torch.set_num_threads(n_threads)

    def test_report_fields_and_log(self, small_triplets, tmp_path):
        cfg = toy_config(epochs=1)
        model = build_model(TOY_MODEL, cfg)
        log_path = tmp_path / "train.jsonl"
        model, reports = train(model, small_triplets, cfg, log_path=log_path)
        lines = [json.loads(l) for l in log_path.read_text().splitlines()]
        assert len(lines) == len(reports) == 2  # 4 samples / batch 2
        for line, report in zip(lines, reports):
            assert line["step"] == report.step
            assert line["total"] == report.total
            assert len(line["per_iteration"]) == cfg.iterations

    def test_total_matches_weighted_sum(self, small_triplets):
        cfg = toy_config(epochs=1)
        model = build_model(TOY_MODEL, cfg)
        _, reports = train(model, small_triplets, cfg)
        for r in reports:
            expected = sum(
                cfg.lam ** (cfg.iterations - 1 - i) * v for i, v in enumerate(r.per_iteration)
            )
            assert r.total == pytest.approx(expected, rel=1e-5)

    def test_divergence_aborts_with_diagnostics(self, small_triplets):
        cfg = toy_config(epochs=1)
        model = build_model(TOY_MODEL, cfg)
        with torch.no_grad():
            model.context_head.weight[0, 0, 0, 0] = float("nan")
        with pytest.raises(TrainingDiverged) as err:
            train(model, small_triplets, cfg)
        assert err.value.step == 0
        assert len(err.value.terms) == cfg.iterations

    def test_empty_dataset_rejected(self):
        cfg = toy_config()
        model = build_model(TOY_MODEL, cfg)
        with pytest.raises(ValueError):
            train(model, [], cfg)

    def test_train_epoch_wrapper(self, small_triplets):
        cfg = toy_config(epochs=3)
        model = build_model(TOY_MODEL, cfg)
        model, reports = train_epoch(model, small_triplets, cfg)
        assert len(reports) == 2  # one epoch only


class TestSupervisionGradients:
    def _preds_and_grads(self, supervise):
        cfg = toy_config(iterations=3)
        model = build_model(TOY_MODEL, replace(cfg, supervise=supervise))
        image = torch.rand(1, 3, 16, 16)
        mask = (torch.rand(1, 1, 16, 16) > 0.7).float()
        gt = torch.rand(1, 3, 16, 16)
        preds = model(image, mask, iterations=3)
        from textscrub.training import _loss_terms

        total, _ = _loss_terms(preds, gt, 0.85, supervise)
        grads = torch.autograd.grad(total, preds, allow_unused=True)
        return grads

    def test_all_iterations_supervises_every_output(self):
        grads = self._preds_and_grads("all_iterations")
        assert all(g is not None and g.abs().sum() > 0 for g in grads)

    def test_final_only_supervises_last_output(self):
        grads = self._preds_and_grads("final_only")
        # gradients flow to earlier outputs only through the recurrence, which
        # autograd reports via the graph, so check the direct loss terms instead
        assert grads[-1] is not None and grads[-1].abs().sum() > 0


class TestMaskVariants:
    def _all_removed(self):
        out = []
        for seed in (3, 4):
            scene = make_scene(40, 40, seed=seed, min_instances=2, max_instances=3)
            t = make_triplet(scene, alpha=0.0, seed=seed)  # all instances removed
            out.append(t)
        return out

    def test_all_mode_keeps_dataset(self):
        base = self._all_removed()
        derived = derive_mask_variant(base, "all", 0.4, seed=0)
        assert derived[0] is base[0]

    def test_part_mode_composites_partial_gt(self):
        base = self._all_removed()
        derived = derive_mask_variant(base, "part", 0.4, seed=1)
        for orig, part in zip(base, derived):
            assert part.mask.sum() <= orig.mask.sum()
            # outside the new mask the partial gt equals the input
            outside = part.mask == 0
            assert np.array_equal(part.gt[outside], orig.image[outside])
            inside = part.mask == 1
            assert np.array_equal(part.gt[inside], orig.gt[inside])

    def test_part_mode_is_deterministic(self):
        base = self._all_removed()
        a = derive_mask_variant(base, "part", 0.4, seed=5)
        b = derive_mask_variant(base, "part", 0.4, seed=5)
        for x, y in zip(a, b):
            assert np.array_equal(x.mask, y.mask)


class TestRunAblation:
    def test_unknown_variant_lists_names(self, small_triplets):
        with pytest.raises(ValueError, match="no_erasing_module"):
            run_ablation("bogus", toy_config(), small_triplets)

    def test_variant_registry_complete(self):
        expected = {
            "full", "no_erasing_module", "direct_prediction", "no_context",
            "no_prev_image", "no_weight_sharing", "final_only", "no_mask", "all_mask",
        }
        assert set(ABLATION_VARIANTS) == expected

    def test_direct_prediction_row(self, small_triplets):
        cfg = toy_config(epochs=1, crop=24)
        row, model = run_ablation("direct_prediction", cfg, small_triplets, TOY_MODEL)
        assert model.predict == "direct"
        assert set(row) >= {"variant", "psnr", "mssim", "mse", "age", "peps", "pceps", "params_m"}

    def test_final_only_row(self, small_triplets):
        cfg = toy_config(epochs=1, crop=24)
        row, model = run_ablation("final_only", cfg, small_triplets, TOY_MODEL)
        assert row["variant"] == "final_only"

    def test_no_erasing_module_structure(self, small_triplets):
        cfg = toy_config(epochs=1, crop=24)
        row, model = run_ablation("no_erasing_module", cfg, small_triplets, TOY_MODEL)
        assert model.erasing is None
        assert row["params_m"] * 1e6 == count_parameters(model, "all")

    def test_no_mask_model_has_three_input_channels(self, small_triplets):
        cfg = toy_config(epochs=1, crop=24)
        _, model = run_ablation("no_mask", cfg, small_triplets, TOY_MODEL)
        assert model.backbone.entry.in_channels == 3


class TestBuildModel:
    def test_flags_propagate(self):
        cfg = toy_config(predict="direct", use_context=False, share_weights=False, mask_mode="none")
        model = build_model(TOY_MODEL, cfg)
        assert model.predict == "direct"
        assert isinstance(model.erasing, torch.nn.ModuleList)
        assert model.backbone.entry.in_channels == 3

    def test_iterations_follow_train_config(self):
        cfg = toy_config(iterations=5)
        model = build_model(TOY_MODEL, cfg)
        assert model.config.iterations == 5

    def test_seeded_build_deterministic(self):
        cfg = toy_config(seed=9)
        a = build_model(TOY_MODEL, cfg)
        b = build_model(TOY_MODEL, cfg)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
