import itertools
import os
import unittest
from pathlib import Path

import numpy as np

from cli.config import DATA_ROOT_ENV
from m2at import evaluation, masking, nn, training
from m2at.data import load_cifar10, subset, synth_blobs
from m2at.errors import ConfigError, TrainingError
from m2at.schemas.config import AblationFlags, AttackConfig, ModelConfig, OptimizerConfig, TrainConfig
from m2at.seeding import BatchStreams

EPS = 8 / 255
ATTACK = AttackConfig(method="pgd", epsilon=EPS, step_size=2 / 255, rounds=2, random_start=True)
MODEL = ModelConfig(arch="linear", input_shape=(1, 8, 8), num_classes=3)


def _batch(n: int = 4, seed: int = 0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.1, 0.9, size=(n, 1, 8, 8)), np.arange(n) % 3


def _train_config(**changes) -> TrainConfig:
    fields = dict(
        method="m2at",
        epochs=2,
        batch_size=16,
        optimizer=OptimizerConfig(lr=0.05),
        attack=ATTACK,
        seed=3,
        eval_rounds=2,
        select_rounds=3,
        eval_samples=24,
    )
    fields.update(changes)
    return TrainConfig(**fields)


class BatchBuilderTest(unittest.TestCase):
    def setUp(self):
        self.params = nn.init_params(MODEL, seed=0)
        self.x, self.labels = _batch()
        self.streams = BatchStreams(seed=1, epoch=0, indices=(0, 1, 2, 3))

    def test_every_ablation_row_respects_budget_and_simplex(self):
        for flags in itertools.product((False, True), repeat=3):
            with self.subTest(flags=flags):
                ablation = AblationFlags(masking=flags[0], mixing=flags[1], label_smoothing=flags[2])
                batch = training.build_batch_ablation(ablation, self.params, self.x, self.labels, ATTACK, 1.0, self.streams)
                training.check_batch(batch, EPS)
                expected = 8 if flags[0] and not flags[1] else 4
                self.assertEqual(batch.inputs.shape[0], expected)

    def test_standard_trains_on_clean_inputs(self):
        config = _train_config(method="standard")
        batch = training.build_training_batch(config, self.params, self.x, self.labels, self.streams)
        np.testing.assert_array_equal(batch.inputs, self.x)
        np.testing.assert_array_equal(batch.targets, nn.one_hot(self.labels, 3))

    def test_named_methods_match_their_ablation_rows(self):
        for method, flags in (("pgd_at", (0, 0, 0)), ("avmixup_g1", (0, 1, 1)), ("m2at", (1, 1, 1))):
            with self.subTest(method=method):
                named = training.build_training_batch(_train_config(method=method), self.params, self.x, self.labels, self.streams)
                ablation = _train_config(
                    method="ablation",
                    ablation=AblationFlags(masking=bool(flags[0]), mixing=bool(flags[1]), label_smoothing=bool(flags[2])),
                )
                row = training.build_training_batch(ablation, self.params, self.x, self.labels, self.streams)
                np.testing.assert_array_equal(named.inputs, row.inputs)
                np.testing.assert_array_equal(named.targets, row.targets)

    def test_pgd_ls_keeps_true_class_mass(self):
        _, targets = training.build_batch_pgd_ls(self.params, self.x, self.labels, ATTACK, self.streams)
        np.testing.assert_allclose(targets.sum(axis=1), np.ones(4))
        true_mass = targets[np.arange(4), self.labels]
        self.assertTrue(((true_mass >= 0) & (true_mass <= 1)).all())

    def test_empty_box_reduces_to_avmixup(self):
        delta = np.random.default_rng(2).uniform(-EPS, EPS, size=self.x.shape)
        lam = np.array([0.2, 0.4, 0.6, 0.8])
        av_inputs, av_targets = training.avmixup_inputs(self.x, delta, self.labels, 3, lam, smoothing=True)
        inputs, _ = masking.mask_and_mix(self.x, delta, self.labels, 3, 1.0, self.streams, lambda1=1.0, lambda2=lam)
        np.testing.assert_allclose(inputs, av_inputs, atol=1e-12)
        # With an empty box the outside image carries the hard label, so the label weight flips.
        _, targets = masking.mask_and_mix(self.x, delta, self.labels, 3, 1.0, self.streams, lambda1=1.0, lambda2=1.0 - lam)
        np.testing.assert_allclose(targets, av_targets, atol=1e-12)


class CheckBatchTest(unittest.TestCase):
    def setUp(self):
        self.x, labels = _batch()
        self.targets = nn.one_hot(labels, 3)

    def test_budget_violation(self):
        batch = training.TrainingBatch(self.x + 2 * EPS, self.targets, self.x)
        with self.assertRaisesRegex(TrainingError, "budget"):
            training.check_batch(batch, EPS)

    def test_targets_off_simplex(self):
        batch = training.TrainingBatch(self.x, self.targets * 0.5, self.x)
        with self.assertRaisesRegex(TrainingError, "sum to 1"):
            training.check_batch(batch, EPS)

    def test_negative_mass(self):
        targets = self.targets.copy()
        targets[0] = [1.5, -0.5, 0.0]
        with self.assertRaisesRegex(TrainingError, "negative"):
            training.check_batch(training.TrainingBatch(self.x, targets, self.x), EPS)


class TrainLoopTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.train_set = synth_blobs(3, 3, 48, c=1, h=8, w=8, split="train")
        cls.eval_set = synth_blobs(3, 3, 24, c=1, h=8, w=8, split="test")

    def _run(self, config: TrainConfig) -> training.TrainResult:
        return training.train(config, MODEL, self.train_set, self.eval_set)

    def test_records_per_epoch(self):
        result = self._run(_train_config())
        metrics = [(r.epoch, r.metric, r.attack) for r in result.records]
        for epoch in range(2):
            self.assertIn((epoch, "lr", None), metrics)
            self.assertIn((epoch, "loss", None), metrics)
            self.assertIn((epoch, "accuracy", "clean"), metrics)
            self.assertIn((epoch, "accuracy", "PGD-2"), metrics)
            self.assertIn((epoch, "accuracy", "PGD-3"), metrics)
        last = result.records[-1]
        self.assertEqual((last.metric, last.attack, last.epoch), ("best_accuracy", "PGD-3", result.best_epoch))
        self.assertEqual([r.timestamp for r in result.records[:2]], ["00000000", "00000001"])

    def test_best_model_tracks_selection_accuracy(self):
        result = self._run(_train_config())
        selection = [r.value for r in result.records if r.attack == "PGD-3" and r.metric == "accuracy"]
        self.assertEqual(result.best_accuracy, max(selection))
        self.assertEqual(result.best_epoch, selection.index(max(selection)))

    def test_reruns_are_identical(self):
        first, second = self._run(_train_config()), self._run(_train_config())
        self.assertTrue(first.params.equals(second.params))
        self.assertEqual([r.model_dump() for r in first.records], [r.model_dump() for r in second.records])

    def test_m2at_equals_full_ablation_row(self):
        named = self._run(_train_config(epochs=1))
        row = self._run(_train_config(epochs=1, method="ablation", ablation=AblationFlags(masking=True, mixing=True, label_smoothing=True)))
        self.assertTrue(named.params.equals(row.params))

    def test_seed_changes_the_run(self):
        a, b = self._run(_train_config(epochs=1)), self._run(_train_config(epochs=1, seed=4))
        self.assertFalse(a.params.equals(b.params))

    def test_sink_sees_every_record(self):
        seen = []
        result = training.train(_train_config(epochs=1), MODEL, self.train_set, self.eval_set, sink=seen.append)
        self.assertEqual(seen, result.records)

    def test_mismatched_classes(self):
        other = synth_blobs(3, 4, 16, c=1, h=8, w=8)
        with self.assertRaises(ConfigError):
            training.train(_train_config(epochs=1), MODEL, other, self.eval_set)


SLOW = os.environ.get("M2AT_SLOW") == "1"
TREND_ATTACK = AttackConfig(method="pgd", epsilon=EPS, step_size=2 / 255, rounds=10, random_start=True)
TREND_SUITE = [None, AttackConfig(method="fgsm", epsilon=EPS), TREND_ATTACK.replace(random_start=False)]


def _trend_run(method: str, model: ModelConfig, train_set, eval_set, augment: bool):
    config = TrainConfig(
        method=method,
        epochs=20,
        batch_size=64,
        optimizer=OptimizerConfig(lr=0.05),
        attack=TREND_ATTACK,
        augment=augment,
        eval_rounds=10,
        select_rounds=10,
    )
    result = training.train(config, model, train_set, eval_set)
    return evaluation.evaluate(result.params, eval_set, TREND_SUITE, model_id=method)


@unittest.skipUnless(SLOW, "set M2AT_SLOW=1 for training-trend checks")
class StandardTrainingTest(unittest.TestCase):
    def test_separable_data_is_learned_but_not_robust(self):
        # Per-pixel class signal (0.02) sits below the budget, so any accurate model can be flipped.
        model = ModelConfig(arch="small-cnn", input_shape=(3, 8, 8), num_classes=4, width=0.5)
        train_set = synth_blobs(0, 4, 2000, c=3, h=8, w=8, margin=0.04, noise=0.05)
        eval_set = synth_blobs(0, 4, 400, c=3, h=8, w=8, margin=0.04, noise=0.05, split="test")
        report = _trend_run("standard", model, train_set, eval_set, augment=False)
        self.assertGreaterEqual(report.accuracy("clean"), 0.95)
        self.assertLessEqual(report.accuracy("PGD-10"), 0.10)


@unittest.skipUnless(SLOW and os.environ.get(DATA_ROOT_ENV), f"set M2AT_SLOW=1 and {DATA_ROOT_ENV} for CIFAR-10 trends")
class RobustnessTrendTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        train_set, test_set = load_cifar10(Path(os.environ[DATA_ROOT_ENV]))
        train_set, eval_set = subset(train_set, 2000, 0), subset(test_set, 500, 0)
        model = ModelConfig(arch="small-cnn", input_shape=train_set.input_shape, num_classes=10)
        cls.reports = {m: _trend_run(m, model, train_set, eval_set, augment=True) for m in ("standard", "pgd_at", "m2at")}

    def test_standard_training_is_not_robust(self):
        self.assertLess(self.reports["standard"].accuracy("PGD-10"), 0.10)

    def test_m2at_gains_twenty_points_under_attack(self):
        gain = self.reports["m2at"].accuracy("PGD-10") - self.reports["standard"].accuracy("PGD-10")
        self.assertGreaterEqual(gain, 0.20)

    def test_m2at_keeps_clean_accuracy_within_fifteen_points(self):
        gap = self.reports["standard"].accuracy("clean") - self.reports["m2at"].accuracy("clean")
        self.assertLessEqual(gap, 0.15)

    def test_fgsm_pgd_gap_is_smaller_than_pgd_at(self):
        def gap(method):
            report = self.reports[method]
            return report.accuracy("FGSM") - report.accuracy("PGD-10")

        self.assertLess(gap("m2at"), gap("pgd_at"))


if __name__ == "__main__":
    unittest.main()
