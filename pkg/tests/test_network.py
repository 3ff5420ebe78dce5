import unittest

import numpy as np

from src.network import (
    NetworkConfig,
    NetworkConfigError,
    forward_residual,
    init_model,
    parameter_count,
    receptive_field,
    restore,
    trainable_count,
)
from src.tensor_core import ShapeError, batchnorm_forward, conv2d_forward, relu_forward


def make_config(**overrides) -> NetworkConfig:
    values = dict(depth=3, kernel=3, width=2, in_channels=1, out_channels=1)
    values.update(overrides)
    return NetworkConfig(**values)


def positive_model(config: NetworkConfig, seed: int = 0):
    """Model whose activations stay positive so ReLU never cuts the footprint."""
    model = init_model(config, seed, dtype=np.float64)
    for layer in model.layers:
        layer.weights[...] = np.abs(layer.weights) + 0.05
    return model


def empirical_receptive_field(config: NetworkConfig) -> tuple[int, int]:
    model = positive_model(config)
    size = 2 * config.receptive_field + 3
    base = np.full((1, 1, size, size), 0.5)
    bumped = base.copy()
    bumped[0, 0, size // 2, size // 2] += 1.0
    diff = np.abs(forward_residual(model, bumped) - forward_residual(model, base))[0, 0]
    rows = np.flatnonzero(diff.max(axis=1) > 0)
    cols = np.flatnonzero(diff.max(axis=0) > 0)
    return int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1)


class ConfigTests(unittest.TestCase):
    def test_receptive_field_values(self) -> None:
        self.assertEqual(receptive_field(17, 5), 69)
        self.assertEqual(receptive_field(1, 3), 3)
        self.assertEqual(receptive_field(17, 3), 35)
        self.assertEqual(NetworkConfig().receptive_field, 69)

    def test_invalid_configs(self) -> None:
        with self.assertRaises(NetworkConfigError):
            make_config(depth=2)
        with self.assertRaises(NetworkConfigError):
            make_config(kernel=4)
        with self.assertRaises(NetworkConfigError):
            make_config(in_channels=3, out_channels=1)

    def test_full_scale_parameter_count(self) -> None:
        expected = 64 * 1 * 25 + 64 + 15 * (64 * 64 * 25 + 64 + 4 * 64) + 1 * 64 * 25 + 1
        self.assertEqual(parameter_count(NetworkConfig(17, 5, 64, 1, 1)), expected)

    def test_parameter_count_matches_model_arrays(self) -> None:
        config = make_config(depth=5, width=4, in_channels=3, out_channels=3)
        model = init_model(config, 0)
        stored = sum(p.size for p in model.parameters())
        stored += sum(bn.state.running_mean.size + bn.state.running_var.size for bn in model.bn_layers())
        self.assertEqual(parameter_count(config), stored)
        self.assertEqual(trainable_count(config), sum(p.size for p in model.parameters()))


class InitTests(unittest.TestCase):
    def test_same_seed_identical(self) -> None:
        a = init_model(make_config(depth=4), 11)
        b = init_model(make_config(depth=4), 11)
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa, pb)

    def test_full_scale_first_layer_shape_and_std(self) -> None:
        model = init_model(NetworkConfig(17, 5, 64, 1, 1), 0)
        first = model.layers[0].weights
        self.assertEqual(first.shape, (64, 1, 5, 5))
        self.assertLess(abs(first.std() / np.sqrt(2 / 25) - 1), 0.1)
        self.assertEqual(model.layers[-1].weights.shape, (1, 64, 5, 5))

    def test_bn_only_on_hidden_layers(self) -> None:
        model = init_model(make_config(depth=5), 0)
        self.assertIsNone(model.layers[0].bn)
        self.assertIsNone(model.layers[-1].bn)
        self.assertTrue(all(layer.bn is not None for layer in model.layers[1:-1]))
        np.testing.assert_array_equal(model.layers[1].bn.gamma, 1.0)
        np.testing.assert_array_equal(model.layers[1].bias, 0.0)


class ForwardTests(unittest.TestCase):
    def setUp(self) -> None:
        self.rng = np.random.default_rng(5)

    def test_zero_last_layer_gives_zero_map(self) -> None:
        model = init_model(make_config(), 0)
        model.layers[-1].weights[...] = 0
        model.layers[-1].bias[...] = 0
        y = self.rng.random((1, 6, 6)).astype(np.float32)
        np.testing.assert_array_equal(forward_residual(model, y), 0)
        np.testing.assert_array_equal(restore(model, y), y)

    def test_output_shape_matches_input(self) -> None:
        model = init_model(make_config(kernel=5), 0)
        for h, w in [(1, 1), (3, 7), (9, 4)]:
            y = self.rng.random((1, h, w)).astype(np.float32)
            self.assertEqual(forward_residual(model, y).shape, y.shape)

    def test_restore_is_input_minus_residual(self) -> None:
        model = init_model(make_config(depth=4, width=3), 2)
        y = self.rng.random((1, 8, 8)).astype(np.float32)
        residual = forward_residual(model, y)
        np.testing.assert_array_equal(restore(model, y), y - residual)
        np.testing.assert_allclose(restore(model, y) + residual, y, atol=1e-6)

    def test_matches_hand_composed_primitives(self) -> None:
        model = init_model(make_config(), 3, dtype=np.float64)
        for layer in model.layers:
            layer.bias[...] = self.rng.standard_normal(layer.bias.shape)
        y = self.rng.random((1, 1, 5, 5))
        l1, l2, l3 = model.layers
        h = relu_forward(conv2d_forward(y, l1.weights, l1.bias))
        z = conv2d_forward(h, l2.weights, l2.bias)
        z, _, _ = batchnorm_forward(z, l2.bn.gamma, l2.bn.beta, l2.bn.state, "infer")
        expected = conv2d_forward(relu_forward(z), l3.weights, l3.bias)
        np.testing.assert_allclose(forward_residual(model, y, "infer"), expected, atol=1e-12)

        z_train, _, _ = batchnorm_forward(conv2d_forward(h, l2.weights, l2.bias), l2.bn.gamma, l2.bn.beta, l2.bn.state, "train")
        expected_train = conv2d_forward(relu_forward(z_train), l3.weights, l3.bias)
        np.testing.assert_allclose(forward_residual(model, y, "train"), expected_train, atol=1e-12)

    def test_train_forward_does_not_touch_running_stats(self) -> None:
        model = init_model(make_config(), 0)
        forward_residual(model, self.rng.random((2, 1, 6, 6)).astype(np.float32), "train")
        np.testing.assert_array_equal(model.layers[1].bn.state.running_mean, 0)

    def test_infer_independent_of_batch_composition(self) -> None:
        model = init_model(make_config(depth=4, width=3), 1)
        a = self.rng.random((1, 1, 7, 7)).astype(np.float32)
        b = self.rng.random((1, 1, 7, 7)).astype(np.float32)
        alone = forward_residual(model, a)
        together = forward_residual(model, np.concatenate([a, b]))
        np.testing.assert_allclose(together[:1], alone, atol=1e-6)

    def test_channel_mismatch(self) -> None:
        model = init_model(make_config(), 0)
        with self.assertRaises(ShapeError):
            forward_residual(model, np.zeros((3, 5, 5), dtype=np.float32))

    def test_three_channel_model(self) -> None:
        model = init_model(make_config(in_channels=3, out_channels=3), 0)
        y = self.rng.random((3, 6, 6)).astype(np.float32)
        self.assertEqual(restore(model, y).shape, (3, 6, 6))


class ReceptiveFieldTests(unittest.TestCase):
    def test_empirical_footprint_matches_formula(self) -> None:
        for depth in (3, 4, 5):
            for kernel in (3, 5):
                config = make_config(depth=depth, kernel=kernel)
                with self.subTest(depth=depth, kernel=kernel):
                    rf = config.receptive_field
                    self.assertEqual(empirical_receptive_field(config), (rf, rf))


if __name__ == "__main__":
    unittest.main()
