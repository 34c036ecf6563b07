#!/usr/bin/env python3
"""
Tests for rectangle masks, checkpoints, training, registration and the evaluation report.

The network tests use a 64 px image with a 4 x 4 patch grid so they run on a CPU.
"""

import math
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd
import torch
from numpy.testing import assert_allclose

import main
import pipeline
from assignment import MatchSet
from config import RoTIRConfig, VariantConfig, load_config
from datasynth import RegistrationDataset, SynthesisRanges, load_sample, read_index, sample_rng, synth_blob, synth_pair
from errors import ConfigurationError, NumericalFailure
from geometry import PatchGrid, SimilarityTransform, rotate_image, warp_image
from model import RegistrationModel, TrainState, load_checkpoint, make_optimizer, save_checkpoint
from pipeline import (
    LOSS_HISTORY_NAME,
    REPORT_COLUMNS,
    Registrar,
    RegistrationResult,
    aggregate_report,
    apply_rectangle_mask,
    evaluate,
    fold_back,
    mask_bounding_rect,
    parse_rect,
    robustness,
    save_result,
    scale_rect,
    train,
)

SMALL = dict(
    image_size=64, grid_size=4, d_model=32, n_heads=2, n_blocks=1, batch_size=2, epochs=1,
    sinkhorn_iters_train=10, sinkhorn_iters_infer=20, seed=3,
)


def small_config(**overrides) -> RoTIRConfig:
    return RoTIRConfig(**{**SMALL, **overrides})


def small_samples(n, seed=11):
    ranges = SynthesisRanges(image_size=64, scale_enabled=False)
    grid = PatchGrid.for_image(64, 4)
    samples = []
    for i in range(n):
        rng = sample_rng(seed, i)
        samples.append(synth_pair(synth_blob(rng, area_range=(200.0, 350.0)), ranges, rng, grid))
    return samples


def two_matches(scale_exponent=1.0):
    return MatchSet(
        moving_idx=np.array([0, 5]),
        fixed_idx=np.array([0, 5]),
        confidence=np.array([0.9, 0.8]),
        sin=np.array([0.0, 0.0]),
        cos=np.array([1.0, 1.0]),
        scale_exponent=np.full(2, scale_exponent),
        moving_xy=np.array([[8.0, 8.0], [24.0, 24.0]]),
        fixed_xy=np.array([[11.0, 6.0], [27.0, 22.0]]),
        fixed_center_xy=np.array([[8.0, 8.0], [24.0, 24.0]]),
    )


class RectangleMaskTest(unittest.TestCase):

    def setUp(self):
        self.grid = PatchGrid(grid_size=4, patch_px=16, image_size=64)

    def test_parse_rect(self):
        self.assertEqual(parse_rect("10, 20,30,40"), (10.0, 20.0, 30.0, 40.0))
        with self.assertRaises(ConfigurationError):
            parse_rect("1,2,3")

    def test_overlapping_patches(self):
        valid = apply_rectangle_mask(self.grid, (16, 16, 32, 32))
        np.testing.assert_array_equal(np.flatnonzero(valid), [5, 6, 9, 10])
        self.assertTrue(apply_rectangle_mask(self.grid, (0, 0, 64, 64)).all())
        np.testing.assert_array_equal(np.flatnonzero(apply_rectangle_mask(self.grid, (0, 0, 1, 1))), [0])

    def test_bad_rectangles(self):
        with self.assertRaises(ConfigurationError):
            apply_rectangle_mask(self.grid, (10, 10, 0, 5))
        with self.assertRaises(ConfigurationError):
            apply_rectangle_mask(self.grid, (40, 40, 30, 10))

    def test_mask_bounding_rect(self):
        mask = np.zeros((64, 64), dtype=bool)
        mask[10:20, 5:15] = True
        self.assertEqual(mask_bounding_rect(mask), (5.0, 10.0, 10.0, 10.0))
        self.assertEqual(mask_bounding_rect(mask, 16), (0.0, 0.0, 31.0, 36.0))
        self.assertIsNone(mask_bounding_rect(np.zeros((8, 8), dtype=bool)))

    def test_scale_rect(self):
        self.assertEqual(scale_rect((10, 10, 100, 100), 0.5, 64), (5.0, 5.0, 50.0, 50.0))
        self.assertEqual(scale_rect((40, 40, 100, 100), 0.5, 64), (20.0, 20.0, 44.0, 44.0))


class FoldBackTest(unittest.TestCase):

    def test_unit_factors(self):
        transform = SimilarityTransform(0.3, 1.1, 2.0, -1.0, 32.0, 32.0)
        self.assertIs(fold_back(transform, 1.0, 1.0), transform)

    def test_matches_resized_coordinates(self):
        small = SimilarityTransform(0.7, 1.2, 3.0, -4.0, 128.0, 128.0)
        k_moving, k_fixed = 0.5, 0.25
        full = fold_back(small, k_moving, k_fixed)
        points = np.random.default_rng(0).uniform(0, 512, (20, 2))
        assert_allclose(full.apply(points), small.apply(k_moving * points) / k_fixed, atol=1e-9)


class CheckpointTest(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "run" / "checkpoint.pt"
        self.config = small_config()
        model = RegistrationModel(self.config)
        self.state = TrainState(model, make_optimizer(model), epoch=3, seed=5,
                                loss_history=[{"epoch": 1, "loss": 1.5}])

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        save_checkpoint(self.state, self.path)
        self.assertTrue((self.path.parent / "config.env").exists())
        model, state = load_checkpoint(self.path)
        self.assertEqual(model.config, self.config)
        self.assertEqual((state.epoch, state.seed), (3, 5))
        self.assertEqual(state.loss_history, [{"epoch": 1, "loss": 1.5}])
        original = self.state.model.state_dict()
        for name, tensor in model.state_dict().items():
            self.assertTrue(torch.equal(tensor, original[name]), name)

    def test_variant_override(self):
        save_checkpoint(self.state, self.path)
        model, _ = load_checkpoint(self.path, "FTT")
        self.assertEqual(model.config.variant, "FTT")
        with self.assertRaises(ConfigurationError):
            load_checkpoint(self.path, "TFT")

    def test_missing(self):
        with self.assertRaises(FileNotFoundError):
            load_checkpoint(self.path)


class RegistrarTest(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.sample = small_samples(1)[0]

    def test_match_and_register(self):
        registrar = Registrar(RegistrationModel(small_config()))
        matches, (small_moving, k_moving), _ = registrar.match(self.sample.moving, self.sample.fixed)
        self.assertEqual(small_moving.shape, (64, 64))
        self.assertEqual(k_moving, 1.0)
        self.assertEqual(len(set(matches.moving_idx)), len(matches))
        self.assertTrue(np.all(matches.confidence > registrar.threshold))

        result = registrar.register(self.sample.moving, self.sample.fixed)
        self.assertEqual(result.warped.shape, (64, 64))
        self.assertEqual(result.overlay.shape, (64, 64, 3))
        self.assertEqual(result.keypoints.shape, (64, 128, 3))

    def test_resized_input(self):
        registrar = Registrar(RegistrationModel(small_config(variant="FFF")))
        moving = np.kron(self.sample.moving, np.ones((2, 2), dtype=np.float32))
        fixed = np.kron(self.sample.fixed, np.ones((2, 2), dtype=np.float32))
        _, (small_moving, k_moving), _ = registrar.match(moving, fixed)
        self.assertEqual(small_moving.shape, (64, 64))
        self.assertEqual(k_moving, 0.5)
        result = registrar.register(moving, fixed)
        self.assertEqual(result.warped.shape, (128, 128))

    def test_non_square_rejected(self):
        registrar = Registrar(RegistrationModel(small_config()))
        with self.assertRaises(ConfigurationError):
            registrar.register(np.zeros((64, 32), np.float32), self.sample.fixed)

    def test_empty_match_set_reports_failure(self):
        registrar = Registrar(RegistrationModel(small_config()), threshold=0.99)
        image = self.sample.moving
        with mock.patch.object(Registrar, "match", return_value=(MatchSet(), (image, 1.0), (image, 1.0))):
            result = registrar.register(image, self.sample.fixed)
        self.assertTrue(result.failed)
        self.assertIn("no matches", result.message)
        self.assertTrue(result.transform.is_close(SimilarityTransform.identity((32.0, 32.0))))
        np.testing.assert_array_equal(result.warped, image)

    def test_scale_pinned_without_scale_detection(self):
        fixed_scale = Registrar(RegistrationModel(small_config(variant="FFT")))
        self.assertEqual(fixed_scale._estimate(two_matches(), refine=True).scale, 1.0)
        with_scale = Registrar(RegistrationModel(small_config(variant="FTT")))
        assert_allclose(with_scale._estimate(two_matches(), refine=True).scale, 1.5)

    def test_refinement_and_procrustes(self):
        registrar = Registrar(RegistrationModel(small_config()))
        refined = registrar._estimate(two_matches(), refine=True)
        assert_allclose(refined.translation, [3.0, -2.0], atol=1e-9)
        coarse = registrar._estimate(two_matches(), refine=False)
        assert_allclose(coarse.translation, [0.0, 0.0], atol=1e-9)

        procrustes = Registrar(RegistrationModel(small_config(estimator="procrustes")))
        transform = procrustes._estimate(two_matches(), refine=True)
        assert_allclose(transform.theta, 0.0, atol=1e-9)
        assert_allclose(transform.apply([[8.0, 8.0]]), [[11.0, 6.0]], atol=1e-9)

    def _register_capturing(self, registrar, **kwargs):
        captured = []

        def fake_extract(assignment, head, grid, threshold):
            captured.append(assignment)
            return two_matches()

        with mock.patch("pipeline.extract_matches", side_effect=fake_extract):
            result = registrar.register(self.sample.moving, self.sample.fixed, **kwargs)
        return result, captured[0]

    def test_full_image_rectangle_changes_nothing(self):
        model = RegistrationModel(small_config())
        masked, masked_assign = self._register_capturing(Registrar(model), rect=(0, 0, 64, 64))
        unmasked, unmasked_assign = self._register_capturing(Registrar(model, variant=VariantConfig.from_name("FFF")))
        torch.testing.assert_close(masked_assign.log_probs, unmasked_assign.log_probs)
        self.assertFalse(masked.failed)
        self.assertEqual(len(masked.matches), 2)
        self.assertTrue(masked.transform.is_close(unmasked.transform, atol=1e-9))

    def test_rectangle_sends_outside_patches_to_dustbin(self):
        registrar = Registrar(RegistrationModel(small_config()))
        _, assign = self._register_capturing(registrar, rect=(0, 0, 32, 32))
        probs = assign.probs[0]
        outside = ~torch.from_numpy(apply_rectangle_mask(registrar.grid, (0, 0, 32, 32)))
        self.assertLess(probs[:16, :16][outside].max().item(), 1e-6)
        self.assertLess(probs[:16, :16][:, outside].max().item(), 1e-6)

    def test_refinement_never_changes_match_indices(self):
        registrar = Registrar(RegistrationModel(small_config()))
        refined, _ = self._register_capturing(registrar, refine=True)
        coarse, _ = self._register_capturing(registrar, refine=False)
        self.assertEqual(len(refined.matches), 2)
        np.testing.assert_array_equal(refined.matches.moving_idx, coarse.matches.moving_idx)
        np.testing.assert_array_equal(refined.matches.fixed_idx, coarse.matches.fixed_idx)
        assert_allclose(refined.transform.translation, [3.0, -2.0], atol=1e-9)
        assert_allclose(coarse.transform.translation, [0.0, 0.0], atol=1e-9)

    def test_reloaded_checkpoint_registers_identically(self):
        model = RegistrationModel(small_config())
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(TrainState(model, make_optimizer(model)), Path(tmp) / "checkpoint.pt")
            reloaded = Registrar.from_checkpoint(path)
        before = Registrar(model).register(self.sample.moving, self.sample.fixed)
        after = reloaded.register(self.sample.moving, self.sample.fixed)
        self.assertEqual(before.transform.to_record(), after.transform.to_record())
        np.testing.assert_array_equal(before.warped, after.warped)

    def test_save_result(self):
        registrar = Registrar(RegistrationModel(small_config()))
        result = registrar.register(self.sample.moving, self.sample.fixed)
        with tempfile.TemporaryDirectory() as tmp:
            out = save_result(result, Path(tmp) / "result")
            record = (out / "transform.txt").read_text().strip()
            self.assertTrue(SimilarityTransform.from_record(record).is_close(result.transform))
            assert_allclose(np.loadtxt(out / "matrix.txt"), result.transform.to_matrix())
            for name in ("matches.csv", "warped.png", "overlay.png", "keypoints.png"):
                self.assertTrue((out / name).exists(), name)


class TrainTest(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.dataset = RegistrationDataset(samples=small_samples(4))

    def tearDown(self):
        self.tmp.cleanup()

    def test_one_epoch_is_deterministic(self):
        config = small_config()
        first = train(config, self.root / "a", dataset=self.dataset, progress=False)
        second = train(config, self.root / "b", dataset=self.dataset, progress=False)
        self.assertEqual(first.epoch, 1)
        self.assertEqual(len(first.loss_history), 1)
        self.assertTrue(math.isfinite(first.loss_history[0]["loss"]))
        self.assertEqual(first.loss_history, second.loss_history)
        for (name, a), b in zip(first.model.state_dict().items(), second.model.state_dict().values()):
            self.assertTrue(torch.equal(a, b), name)
        self.assertTrue((self.root / "a" / "checkpoint.pt").exists())
        history = pd.read_csv(self.root / "a" / LOSS_HISTORY_NAME)
        self.assertEqual(list(history["epoch"]), [1])

    def test_scale_variant_logs_scale_loss(self):
        state = train(small_config(variant="FTF"), self.root / "s", dataset=self.dataset, progress=False)
        self.assertIn("loss_scale", state.loss_history[0])
        self.assertNotIn("loss_scale", train(small_config(variant="FFF"), self.root / "n",
                                             dataset=self.dataset, progress=False).loss_history[0])

    def test_two_epochs_reduce_the_loss(self):
        dataset = RegistrationDataset(samples=small_samples(16))
        state = train(small_config(epochs=2), self.root / "t", dataset=dataset, progress=False)
        losses = [record["loss"] for record in state.loss_history]
        self.assertEqual(len(losses), 2)
        self.assertLess(losses[1], losses[0])

    def test_learning_rate_from_config_file(self):
        path = self.root / "train.env"
        path.write_text("learning_rate = 0.005\n")
        config = load_config(path, **SMALL)
        self.assertEqual(config.learning_rate, 0.005)
        state = train(config, self.root / "lr", dataset=self.dataset, progress=False)
        self.assertEqual(state.optimizer.param_groups[0]["lr"], 0.005)
        _, reloaded = load_checkpoint(self.root / "lr" / "checkpoint.pt")
        self.assertEqual(reloaded.optimizer.param_groups[0]["lr"], 0.005)

    def test_nan_loss_keeps_last_good_checkpoint(self):
        config = small_config(epochs=2)
        batches_per_epoch = len(self.dataset) // config.batch_size
        real_compute_losses = pipeline.compute_losses
        calls = []

        def failing_in_second_epoch(*args, **kwargs):
            calls.append(1)
            if len(calls) > batches_per_epoch:
                raise NumericalFailure("loss is NaN")
            return real_compute_losses(*args, **kwargs)

        with mock.patch("pipeline.compute_losses", side_effect=failing_in_second_epoch):
            with self.assertRaises(NumericalFailure):
                train(config, self.root / "nan", dataset=self.dataset, progress=False)

        model, state = load_checkpoint(self.root / "nan" / "checkpoint.pt")
        self.assertEqual(state.epoch, 1)
        self.assertEqual(len(state.loss_history), 1)
        history = pd.read_csv(self.root / "nan" / LOSS_HISTORY_NAME)
        self.assertEqual(list(history["epoch"]), [1])

        one_epoch = train(small_config(), self.root / "one", dataset=self.dataset, progress=False)
        for (name, a), b in zip(one_epoch.model.state_dict().items(), model.state_dict().values()):
            self.assertTrue(torch.equal(a, b), name)

    def test_training_needs_data(self):
        with self.assertRaises(ConfigurationError):
            train(small_config(), self.root / "x")
        with self.assertRaises(ConfigurationError):
            train(small_config(), self.root / "x", dataset=RegistrationDataset(samples=[]))


class ReportTest(unittest.TestCase):

    def test_aggregate_report(self):
        per_pair = pd.DataFrame([
            {"pair_id": "a", "variant": "FFT", "rotation": 0, "dice": 0.8, "cw_ssim": 0.6, "angle_residual_deg": 1.0},
            {"pair_id": "a", "variant": "FFT", "rotation": 90, "dice": 1.0, "cw_ssim": 0.8, "angle_residual_deg": 2.0},
            {"pair_id": "b", "variant": "FFT", "rotation": 0, "dice": 0.5, "cw_ssim": 0.5, "angle_residual_deg": 0.0},
            {"pair_id": "b", "variant": "FFT", "rotation": 90, "dice": np.nan, "cw_ssim": np.nan,
             "angle_residual_deg": np.nan},
        ], columns=REPORT_COLUMNS)
        row = aggregate_report(per_pair, "FFT").iloc[0]
        self.assertEqual(row["model"], "RoTIR_FFT")
        self.assertEqual((row["pairs"], row["registrations"], row["failed"]), (2, 3, 1))
        assert_allclose([row["dice_mean"], row["dice_std"]], [0.7, 0.2], atol=1e-12)
        assert_allclose([row["cw_ssim_mean"], row["cw_ssim_std"]], [0.6, 0.1], atol=1e-12)
        self.assertEqual(row["dice"], "0.700 ± 0.200")

    def test_evaluate_writes_reports(self):
        torch.manual_seed(0)
        registrar = Registrar(RegistrationModel(small_config()))
        dataset = RegistrationDataset(samples=small_samples(2, seed=4))
        with tempfile.TemporaryDirectory() as tmp:
            report = evaluate(registrar, dataset=dataset, report_path=Path(tmp) / "report.csv", progress=False)
            self.assertEqual(list(report.per_pair.columns), REPORT_COLUMNS)
            self.assertEqual(len(report.per_pair), 8)
            self.assertEqual(sorted(set(report.per_pair["rotation"])), [0, 90, 180, 270])
            self.assertEqual(len(report.robustness), 2)
            self.assertEqual(int(report.summary.iloc[0]["pairs"]), report.per_pair.dropna(subset=["dice"])["pair_id"].nunique())
            for path in report.paths:
                self.assertTrue(path.exists(), path)
            ok = report.per_pair.dropna(subset=["dice"])
            self.assertTrue(((ok["dice"] >= 0) & (ok["dice"] <= 1)).all())

    def test_ground_truth_registration_scores_perfectly(self):
        ranges = SynthesisRanges(image_size=256, scale_enabled=False)
        grid = PatchGrid.for_image(256, 4)
        samples = []
        for i in range(2):
            rng = sample_rng(21, i)
            samples.append(synth_pair(synth_blob(rng, area_range=(8000.0, 12000.0)), ranges, rng, grid))
        registrar = Registrar(RegistrationModel(small_config(image_size=256)))

        def ground_truth_register(self, moving, fixed, **kwargs):
            for sample in samples:
                if not np.array_equal(fixed, sample.fixed):
                    continue
                for q in range(4):
                    rotated, rotation = rotate_image(sample.moving, q)
                    if np.array_equal(moving, rotated):
                        transform = sample.gt_transform.compose(rotation.invert())
                        warped = warp_image(moving, transform, fixed.shape)
                        return RegistrationResult(transform, MatchSet(), warped, np.dstack([warped] * 3), warped)
            raise AssertionError("unknown image pair")

        with mock.patch.object(Registrar, "register", new=ground_truth_register):
            report = evaluate(registrar, dataset=RegistrationDataset(samples=samples), progress=False)

        self.assertEqual(len(report.per_pair), 8)
        self.assertTrue((report.per_pair["dice"] >= 0.98).all(), report.per_pair["dice"].tolist())
        self.assertFalse(report.robustness["failed"].any())
        self.assertTrue((report.robustness["std_deg"] < 1e-6).all())
        self.assertTrue((report.robustness["extreme_deg"] < 1e-6).all())
        self.assertGreaterEqual(report.summary.iloc[0]["dice_mean"], 0.98)
        for pair_id, sample in zip(["00000", "00001"], samples):
            residuals = report.per_pair[report.per_pair["pair_id"] == pair_id]["angle_residual_deg"]
            expected = np.degrees(sample.gt_transform.theta) % 360.0
            self.assertTrue(np.all(np.abs(np.angle(np.exp(1j * np.radians(residuals - expected)))) < 1e-6))

    def test_empty_dataset_gives_empty_reports(self):
        registrar = Registrar(RegistrationModel(small_config()))
        empty = RegistrationDataset(samples=[])
        report = evaluate(registrar, dataset=empty, progress=False)
        self.assertTrue(report.per_pair.empty)
        self.assertTrue(report.robustness.empty)
        self.assertEqual(int(report.summary.iloc[0]["pairs"]), 0)
        self.assertTrue(robustness(registrar, dataset=empty).empty)

    def test_robustness_report(self):
        registrar = Registrar(RegistrationModel(small_config()))
        dataset = RegistrationDataset(samples=small_samples(1, seed=5))
        with tempfile.TemporaryDirectory() as tmp:
            report = robustness(registrar, dataset=dataset, report_path=Path(tmp) / "robust.csv")
            self.assertTrue((Path(tmp) / "robust.csv").exists())
        self.assertEqual(list(report["pair_id"]), ["00000"])


class CommandLineTest(unittest.TestCase):

    def test_synth_data(self):
        with tempfile.TemporaryDirectory() as tmp:
            code = main.main(["synth-data", "--out", tmp, "--n", "1", "--seed", "2"])
            self.assertEqual(code, main.EXIT_OK)
            self.assertTrue((Path(tmp) / "00000_moving.png").exists())

    def test_scale_range_enables_scale_sampling(self):
        with tempfile.TemporaryDirectory() as tmp:
            args = ["synth-data", "--out", tmp, "--n", "3", "--seed", "2"]
            self.assertEqual(main.main(args + ["--scale-range", "1.15"]), main.EXIT_OK)
            self.assertTrue(read_index(tmp)["ranges"]["scale_enabled"])
            scales = [load_sample(tmp, i).gt_transform.scale for i in range(3)]
            self.assertTrue(any(s != 1.0 for s in scales), scales)
            self.assertTrue(all(1 / 1.15 <= s <= 1.15 for s in scales), scales)

            self.assertEqual(main.main(args), main.EXIT_OK)
            self.assertFalse(read_index(tmp)["ranges"]["scale_enabled"])
            self.assertEqual([load_sample(tmp, i).gt_transform.scale for i in range(3)], [1.0] * 3)

        with tempfile.TemporaryDirectory() as tmp:
            code = main.main(["synth-data", "--out", tmp, "--n", "1", "--scale-range", "0.5"])
        self.assertEqual(code, main.EXIT_VALIDATION)

    def test_validation_errors(self):
        self.assertEqual(main.main(["equiv-check", "--variant", "XYZ"]), main.EXIT_VALIDATION)
        with tempfile.TemporaryDirectory() as tmp:
            code = main.main(["evaluate", "--ckpt", str(Path(tmp) / "none.pt"), "--data", tmp,
                              "--report", str(Path(tmp) / "r.csv")])
        self.assertEqual(code, main.EXIT_VALIDATION)
        with tempfile.TemporaryDirectory() as tmp:
            code = main.main(["register", "--moving", "a.png", "--fixed", "b.png",
                              "--ckpt", str(Path(tmp) / "missing.pt"), "--out", tmp])
        self.assertEqual(code, main.EXIT_VALIDATION)


if __name__ == "__main__":
    unittest.main()
