import unittest

import numpy as np

from m2at import masking, nn
from m2at.errors import ConfigError, MaskError, ShapeError
from m2at.schemas.config import AttackConfig, ModelConfig
from m2at.seeding import BatchStreams


def _dyadic(shape, seed):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=shape) / 256.0


class BoxTest(unittest.TestCase):
    def test_side_lengths_round_half_up(self):
        box = masking.box_at(32, 32, 0.75, 4, 6)
        self.assertEqual((box.x1, box.y1, box.x2, box.y2), (4, 6, 20, 22))

    def test_box_is_clipped_at_the_border(self):
        box = masking.box_at(32, 32, 0.75, 20, 30)
        self.assertEqual((box.x2, box.y2), (32, 32))
        self.assertEqual(box.area, 12 * 2)

    def test_lambda_one_gives_empty_box(self):
        box = masking.box_at(8, 8, 1.0, 3, 3)
        self.assertEqual(box.area, 0)
        self.assertEqual(masking.make_mask(box, 8, 8).sum(), 0)

    def test_lambda_zero_at_origin_covers_image(self):
        box = masking.box_at(8, 8, 0.0, 0, 0)
        self.assertEqual(masking.area_ratio(box, 8, 8), 1.0)

    def test_lambda_out_of_range(self):
        with self.assertRaises(ConfigError):
            masking.box_at(8, 8, 1.5, 0, 0)

    def test_sampled_corners_cover_inclusive_range(self):
        rng = np.random.default_rng(0)
        corners = {masking.sample_box(4, 4, 0.5, rng).x1 for _ in range(400)}
        self.assertEqual(corners, {0, 1, 2, 3, 4})

    def test_mask_matches_box(self):
        box = masking.MaskBox(1, 2, 4, 3)
        mask = masking.make_mask(box, 5, 5)
        self.assertEqual(mask.sum(), box.area)
        self.assertEqual(mask[2, 1], 1.0)
        self.assertEqual(mask[2, 4], 0.0)

    def test_box_outside_image_rejected(self):
        with self.assertRaises(MaskError):
            masking.make_mask(masking.MaskBox(0, 0, 9, 2), 8, 8)


class MaskTest(unittest.TestCase):
    def test_partition_identity_on_dyadic_grid(self):
        x = _dyadic((3, 8, 8), 0)
        delta = (_dyadic((3, 8, 8), 1) - 0.5) / 16
        mask = masking.make_mask(masking.box_at(8, 8, 0.6, 2, 1), 8, 8)
        xi, xi_bar = masking.apply_mask(x, delta, mask)
        np.testing.assert_array_equal(xi + xi_bar - x, x + delta)

    def test_partition_identity_general(self):
        rng = np.random.default_rng(3)
        x, delta = rng.uniform(size=(3, 8, 8)), rng.uniform(-0.03, 0.03, size=(3, 8, 8))
        pair = masking.perturbed_pair(x, delta, masking.box_at(8, 8, 0.3, 1, 1), 2, 10)
        np.testing.assert_array_equal(pair.delta_inside + pair.delta_outside, delta)
        np.testing.assert_allclose(pair.xi + pair.xi_bar - x, x + delta, atol=1e-6)

    def test_non_binary_mask_rejected(self):
        x = np.zeros((1, 4, 4))
        with self.assertRaises(MaskError):
            masking.apply_mask(x, x, np.full((4, 4), 0.5))

    def test_mask_shape_checked(self):
        x = np.zeros((1, 4, 4))
        with self.assertRaises(ShapeError):
            masking.apply_mask(x, x, np.zeros((3, 3)))


class LabelTest(unittest.TestCase):
    def test_off_class_uniform(self):
        np.testing.assert_allclose(masking.off_class_uniform(1, 5), [0.25, 0.0, 0.25, 0.25, 0.25])
        with self.assertRaises(ConfigError):
            masking.off_class_uniform(0, 1)

    def test_smoothed_labels_lie_on_simplex(self):
        for area in (0.0, 0.3, 1.0):
            t, t_bar = masking.smooth_labels(2, area, 10)
            self.assertAlmostEqual(t.sum(), 1.0)
            self.assertAlmostEqual(t_bar.sum(), 1.0)
            self.assertAlmostEqual(t[2], area)
            self.assertAlmostEqual(t_bar[2], 1.0 - area)

    def test_full_area_keeps_hard_label_inside(self):
        t, t_bar = masking.smooth_labels(0, 1.0, 3)
        np.testing.assert_array_equal(t, [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(t_bar, [0.0, 0.5, 0.5])


class MixTest(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(4)
        self.x = rng.uniform(size=(3, 8, 8))
        self.delta = rng.uniform(-8 / 255, 8 / 255, size=(3, 8, 8))
        self.pair = masking.perturbed_pair(self.x, self.delta, masking.box_at(8, 8, 0.5, 2, 2), 1, 4)

    def test_endpoints(self):
        inside = masking.mix(self.pair, 1.0)
        np.testing.assert_array_equal(inside.x_tilde, self.pair.xi)
        np.testing.assert_array_equal(inside.y_tilde, self.pair.t)
        outside = masking.mix(self.pair, 0.0)
        np.testing.assert_array_equal(outside.x_tilde, self.pair.xi_bar)

    def test_mixed_sample_stays_in_budget(self):
        for lam in (0.1, 0.5, 0.9):
            mixed = masking.mix(self.pair, lam)
            self.assertTrue((np.abs(mixed.x_tilde - self.x) <= np.abs(self.delta) + 1e-12).all())
            self.assertAlmostEqual(mixed.y_tilde.sum(), 1.0)
            self.assertTrue((mixed.y_tilde >= 0).all())

    def test_beta_draws(self):
        rng = np.random.default_rng(0)
        draws = [masking.sample_beta(0.2, rng) for _ in range(200)]
        self.assertTrue(all(0.0 <= d <= 1.0 for d in draws))
        self.assertGreater(sum(d < 0.1 or d > 0.9 for d in draws), 100)
        self.assertTrue(0.0 <= masking.sample_beta(1e-6, rng) <= 1.0)
        with self.assertRaises(ConfigError):
            masking.sample_beta(0.0, rng)


class _FixedCorners:
    """Stands in for a Generator whose integer draws are known in advance."""

    def __init__(self, *values):
        self.values = list(values)

    def integers(self, low, high):
        value = self.values.pop(0)
        assert low <= value < high
        return value


def _ks_uniform(draws: np.ndarray) -> float:
    ordered = np.sort(draws)
    n = len(ordered)
    above = np.arange(1, n + 1) / n - ordered
    below = ordered - np.arange(n) / n
    return float(max(above.max(), below.max()))


class WorkedExampleTest(unittest.TestCase):
    def test_sampled_box_on_eight_by_eight(self):
        box = masking.sample_box(8, 8, 0.75, _FixedCorners(2, 3))
        self.assertEqual((box.x1, box.y1, box.x2, box.y2), (2, 3, 6, 7))

    def test_three_class_labels_and_mix(self):
        t, t_bar = masking.smooth_labels(0, 0.25, 3)
        np.testing.assert_allclose(t, [0.25, 0.375, 0.375])
        np.testing.assert_allclose(t_bar, [0.75, 0.125, 0.125])
        x = np.zeros((1, 4, 4))
        pair = masking.perturbed_pair(x, np.full_like(x, 0.01), masking.MaskBox(0, 0, 2, 2), 0, 3)
        self.assertEqual(pair.area, 0.25)
        np.testing.assert_allclose(masking.mix(pair, 0.5).y_tilde, [0.5, 0.25, 0.25])

    def test_uniform_beta_passes_ks(self):
        rng = np.random.default_rng(2024)
        draws = np.array([masking.sample_beta(1.0, rng) for _ in range(100_000)])
        self.assertLess(_ks_uniform(draws), 0.01)


class AlgebraSuiteTest(unittest.TestCase):
    """10,000 randomized (x, delta, lambda1, lambda2, K) draws on a dyadic grid."""

    def test_masking_and_mixing_identities(self):
        rng = np.random.default_rng(99)
        for trial in range(10_000):
            c, h, w = int(rng.integers(1, 4)), int(rng.integers(1, 7)), int(rng.integers(1, 7))
            k = int(rng.integers(2, 11))
            label = int(rng.integers(0, k))
            x = rng.integers(0, 257, size=(c, h, w)) / 256.0
            delta = rng.integers(-32, 33, size=(c, h, w)) / 4096.0
            lambda1, lambda2 = float(rng.random()), float(rng.random())
            box = masking.sample_box(h, w, lambda1, rng)
            pair = masking.perturbed_pair(x, delta, box, label, k)
            mixed = masking.mix(pair, lambda2)
            mask = pair.mask

            np.testing.assert_array_equal(pair.xi + pair.xi_bar - 2 * x, delta)
            np.testing.assert_array_equal((pair.xi - x) * (pair.xi_bar - x), np.zeros_like(x))
            np.testing.assert_allclose(
                mixed.x_tilde - x, delta * (lambda2 * mask + (1 - lambda2) * (1 - mask)), rtol=0, atol=1e-6
            )
            self.assertEqual(pair.area, mask.sum() / (h * w))
            onehot = np.eye(k)[label]
            np.testing.assert_allclose(pair.t + pair.t_bar, onehot + masking.off_class_uniform(label, k), atol=1e-12)
            for vector in (pair.t, pair.t_bar, mixed.y_tilde):
                self.assertTrue((vector >= 0).all(), trial)
                self.assertAlmostEqual(float(vector.sum()), 1.0, delta=1e-6)

            empty = masking.perturbed_pair(x, delta, masking.box_at(h, w, 1.0, box.x1, box.y1), label, k)
            np.testing.assert_array_equal(
                masking.mix(empty, lambda2).x_tilde, lambda2 * x + (1 - lambda2) * (x + delta)
            )


class BatchTest(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(5)
        self.x = rng.uniform(0.1, 0.9, size=(4, 1, 6, 6))
        self.delta = rng.uniform(-8 / 255, 8 / 255, size=(4, 1, 6, 6))
        self.labels = np.array([0, 1, 2, 1])
        self.streams = BatchStreams(seed=3, epoch=1, indices=(40, 41, 42, 43))

    def test_draws_depend_only_on_sample_index(self):
        full = masking.masked_pairs(self.x, self.delta, self.labels, 3, self.streams)
        tail = masking.masked_pairs(self.x[2:], self.delta[2:], self.labels[2:], 3, BatchStreams(3, 1, (42, 43)))
        np.testing.assert_array_equal(full[2].mask, tail[0].mask)
        np.testing.assert_array_equal(full[3].xi, tail[1].xi)

    def test_forced_lambdas(self):
        x_tilde, y_tilde = masking.mask_and_mix(
            self.x, self.delta, self.labels, 3, 1.0, self.streams, lambda1=1.0, lambda2=[0.0, 0.0, 1.0, 1.0]
        )
        # lambda1 = 1 leaves an empty box: the outside image carries the whole perturbation.
        np.testing.assert_allclose(x_tilde[:2], self.x[:2] + self.delta[:2])
        np.testing.assert_allclose(x_tilde[2:], self.x[2:])
        np.testing.assert_allclose(y_tilde[0], [1.0, 0.0, 0.0])
        np.testing.assert_allclose(y_tilde[2], [0.5, 0.5, 0.0])

    def test_stream_count_must_match(self):
        with self.assertRaises(ShapeError):
            masking.mask_and_mix(self.x, self.delta, self.labels, 3, 1.0, BatchStreams(3, 1, (0, 1)))

    def test_m2at_batch_outputs(self):
        params = nn.init_params(ModelConfig(arch="linear", input_shape=(1, 6, 6), num_classes=3), seed=0)
        attack = AttackConfig(method="pgd", epsilon=8 / 255, step_size=2 / 255, rounds=3, random_start=True)
        x_tilde, y_tilde = masking.m2at_batch(params, self.x, self.labels, attack, 1.0, self.streams)
        self.assertEqual(x_tilde.shape, self.x.shape)
        self.assertTrue((np.abs(x_tilde - self.x) <= 8 / 255 + 1e-9).all())
        np.testing.assert_allclose(y_tilde.sum(axis=1), np.ones(4))

    def test_zero_budget_collapses_to_clean_images_with_smoothed_labels(self):
        params = nn.init_params(ModelConfig(arch="linear", input_shape=(1, 6, 6), num_classes=3), seed=0)
        attack = AttackConfig(method="pgd", epsilon=0.0, rounds=3, random_start=True)
        x_tilde, y_tilde = masking.m2at_batch(params, self.x, self.labels, attack, 1.0, self.streams)
        np.testing.assert_allclose(x_tilde, self.x, rtol=0, atol=1e-12)
        _, expected = masking.mask_and_mix(self.x, np.zeros_like(self.x), self.labels, 3, 1.0, self.streams)
        np.testing.assert_array_equal(y_tilde, expected)


if __name__ == "__main__":
    unittest.main()
