import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from m2at import nn
from m2at import tensor as T
from m2at.errors import CheckpointError, NonFiniteError, ShapeError
from m2at.schemas.config import ModelConfig, OptimizerConfig

ARCHS = ("linear", "mlp", "small-cnn", "mini-wrn")


def _config(arch: str = "small-cnn", shape=(3, 8, 8), classes: int = 4, width: float = 0.5) -> ModelConfig:
    return ModelConfig(arch=arch, input_shape=shape, num_classes=classes, width=width)


class ForwardTest(unittest.TestCase):
    def test_every_arch_produces_logits(self):
        images = np.random.default_rng(0).uniform(size=(5, 3, 8, 8)).astype(np.float32)
        for arch in ARCHS:
            with self.subTest(arch=arch):
                params = nn.init_params(_config(arch), seed=0)
                logits = nn.forward_logits(params, images)
                self.assertEqual(logits.shape, (5, 4))
                self.assertEqual(logits.dtype, np.float32)

    def test_permuting_the_batch_permutes_logits(self):
        images = np.random.default_rng(1).uniform(size=(6, 3, 8, 8))
        order = np.array([4, 0, 5, 2, 1, 3])
        for arch in ARCHS:
            with self.subTest(arch=arch), T.deterministic_mode(True):
                params = nn.init_params(_config(arch), seed=2, dtype=np.float64)
                logits = nn.forward_logits(params, images).data
                permuted = nn.forward_logits(params, images[order]).data
                np.testing.assert_allclose(permuted, logits[order], rtol=0, atol=1e-12)

    def test_identical_rows_give_identical_logits(self):
        row = np.random.default_rng(2).uniform(size=(1, 3, 8, 8))
        images = np.repeat(row, 4, axis=0)
        for arch in ARCHS:
            with self.subTest(arch=arch), T.deterministic_mode(True):
                params = nn.init_params(_config(arch), seed=5, dtype=np.float64)
                logits = nn.forward_logits(params, images).data
                np.testing.assert_allclose(logits, np.repeat(logits[:1], 4, axis=0), rtol=0, atol=1e-12)

    def test_mlp_parameter_count(self):
        params = nn.init_params(_config("mlp", shape=(1, 4, 4), classes=2, width=1.0), seed=0)
        hidden = nn.MLP_HIDDEN
        self.assertEqual(params.num_parameters(), 16 * hidden + hidden + hidden * 2 + 2)

    def test_wrong_input_shape(self):
        params = nn.init_params(_config(), seed=0)
        with self.assertRaises(ShapeError):
            nn.forward_logits(params, np.zeros((2, 3, 16, 16), dtype=np.float32))

    def test_init_is_seeded(self):
        a = nn.init_params(_config("mini-wrn"), seed=3)
        b = nn.init_params(_config("mini-wrn"), seed=3)
        c = nn.init_params(_config("mini-wrn"), seed=4)
        self.assertTrue(a.equals(b))
        self.assertFalse(a.equals(c))

    def test_init_bounds_follow_fan_in(self):
        params = nn.init_params(_config("linear"), seed=0)
        bound = 1.0 / np.sqrt(3 * 8 * 8)
        self.assertLessEqual(float(np.abs(params["fc.weight"]).max()), bound)

    def test_wrn_shortcuts_only_where_shape_changes(self):
        names = [name for name, _, _ in nn.param_specs(_config("mini-wrn", width=1.0))]
        self.assertNotIn("g0.b0.shortcut.weight", names)
        self.assertIn("g1.b0.shortcut.weight", names)
        self.assertNotIn("g1.b1.shortcut.weight", names)
        self.assertNotIn("g1.b0.shortcut.bias", names)

    def test_parameters_are_read_only(self):
        params = nn.init_params(_config(), seed=0)
        with self.assertRaises(ValueError):
            params["fc.bias"][0] = 1.0

    def test_predict_ties_go_to_lowest_index(self):
        params = nn.zero_params(_config("linear"))
        pred = nn.predict(params, np.zeros((3, 3, 8, 8), dtype=np.float32))
        np.testing.assert_array_equal(pred, [0, 0, 0])


class GradientTest(unittest.TestCase):
    def test_loss_and_grads_cover_every_parameter(self):
        params = nn.init_params(_config(), seed=0)
        rng = np.random.default_rng(1)
        images = rng.uniform(size=(4, 3, 8, 8)).astype(np.float32)
        loss, grads = nn.loss_and_grads(params, images, nn.one_hot([0, 1, 2, 3], 4))
        self.assertGreater(loss, 0.0)
        self.assertEqual(set(grads), set(params.names))
        for name, grad in grads.items():
            self.assertEqual(grad.shape, params[name].shape)

    def test_every_arch_passes_gradient_check(self):
        rng = np.random.default_rng(2)
        images = rng.uniform(size=(2, 1, 8, 8))
        targets = nn.one_hot([0, 2], 3)
        for arch in ARCHS:
            with self.subTest(arch=arch), T.float64_mode():
                config = ModelConfig(arch=arch, input_shape=(1, 8, 8), num_classes=3, width=0.25)
                params = nn.init_params(config, seed=0, dtype=np.float64)
                graph, weights = nn.loss_graph(params, images, targets)
                report = T.grad_check(graph, tolerance=1e-4, wrt=list(weights.values()), max_entries=12)
                self.assertTrue(report.passed, report)

    def test_input_gradient_matches_finite_difference(self):
        with T.float64_mode():
            params = nn.init_params(ModelConfig(arch="mlp", input_shape=(1, 4, 4), num_classes=3), seed=0, dtype=np.float64)
            x = np.random.default_rng(0).uniform(size=(1, 1, 4, 4))
            grad = nn.input_gradient(params, x, [1])

            def loss(images):
                graph, _ = nn.loss_graph(params, images, nn.one_hot([1], 3))
                return float(graph.evaluate())

            h = 1e-6
            bumped = x.copy()
            bumped[0, 0, 2, 1] += h
            plus = loss(bumped)
            bumped[0, 0, 2, 1] -= 2 * h
            minus = loss(bumped)
        self.assertAlmostEqual(grad[0, 0, 2, 1], (plus - minus) / (2 * h), places=6)


class OptimizerTest(unittest.TestCase):
    def setUp(self):
        self.params = nn.init_params(_config("linear"), seed=0)
        self.grads = {name: np.ones_like(a) for name, a in self.params.tensors.items()}

    def test_schedule_milestones(self):
        opt = nn.OptimState.for_params(self.params, OptimizerConfig(lr=0.1, milestones=(0.5, 0.75), gamma=0.1))
        self.assertAlmostEqual(opt.lr_for_epoch(0, 200), 0.1)
        self.assertAlmostEqual(opt.lr_for_epoch(99, 200), 0.1)
        self.assertAlmostEqual(opt.lr_for_epoch(100, 200), 0.01)
        self.assertAlmostEqual(opt.lr_for_epoch(150, 200), 0.001)

    def test_weight_decay_skips_biases(self):
        opt = nn.OptimState.for_params(self.params, OptimizerConfig(lr=0.1, momentum=0.0, weight_decay=0.5))
        updated = nn.sgd_step(self.params, self.grads, opt)
        np.testing.assert_allclose(updated["fc.bias"], self.params["fc.bias"] - np.float32(0.1), rtol=1e-6)
        expected = self.params["fc.weight"] - np.float32(0.1) * (1 + np.float32(0.5) * self.params["fc.weight"])
        np.testing.assert_allclose(updated["fc.weight"], expected, rtol=1e-5, atol=1e-7)

    def test_momentum_accumulates(self):
        opt = nn.OptimState.for_params(self.params, OptimizerConfig(lr=1.0, momentum=0.9, weight_decay=0.0))
        first = nn.sgd_step(self.params, self.grads, opt)
        second = nn.sgd_step(first, self.grads, opt)
        np.testing.assert_allclose(first["fc.bias"] - second["fc.bias"], np.full(4, 1.9), rtol=1e-5)

    def test_non_finite_gradient_rejects_step(self):
        opt = nn.OptimState.for_params(self.params, OptimizerConfig())
        grads = dict(self.grads)
        grads["fc.bias"] = np.array([np.nan, 0, 0, 0], dtype=np.float32)
        with self.assertRaises(NonFiniteError):
            nn.sgd_step(self.params, grads, opt)
        for buffer in opt.buffers.values():
            self.assertFalse(buffer.any())

    def test_gradient_names_must_match(self):
        opt = nn.OptimState.for_params(self.params, OptimizerConfig())
        with self.assertRaises(ShapeError):
            nn.sgd_step(self.params, {"fc.weight": self.grads["fc.weight"]}, opt)


class CheckpointTest(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_save_and_load(self):
        params = nn.init_params(_config("mini-wrn"), seed=5)
        path = nn.save_checkpoint(params, self.tmp / "model.ckpt")
        self.assertTrue(nn.load_checkpoint(path).equals(params))

    def test_truncation_reports_offset(self):
        payload = nn.checkpoint_bytes(nn.init_params(_config(), seed=0))
        with self.assertRaisesRegex(CheckpointError, "byte offset"):
            nn.params_from_bytes(payload[:-3])

    def test_bad_magic(self):
        payload = nn.checkpoint_bytes(nn.init_params(_config(), seed=0))
        with self.assertRaisesRegex(CheckpointError, "magic"):
            nn.params_from_bytes(b"XXXX" + payload[4:])

    def test_trailing_bytes(self):
        payload = nn.checkpoint_bytes(nn.init_params(_config(), seed=0))
        with self.assertRaisesRegex(CheckpointError, "trailing"):
            nn.params_from_bytes(payload + b"\x00")

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            nn.load_checkpoint(self.tmp / "absent.ckpt")


if __name__ == "__main__":
    unittest.main()
