import unittest

import numpy as np

from errors import ConfigError, ShapeError
from mask_util import IGNORE
from mini_psp import MiniPSP, NetworkConfig, forward_classifier, forward_detailer, layer_specs, one_hot_encode
from tensor_core import Tensor4, argmax_labels, softmax_ce_ignore
from test_utils.decorators import number
from tests.fixtures import INJECTIONS, random_batch, tiny_network
from tests.gradcheck import numeric_gradient, relative_error


class TestNetworkConfig(unittest.TestCase):

    @number("2.20")
    def test_defaults(self):
        cfg = NetworkConfig()
        self.assertEqual(cfg.num_classes, 5)
        self.assertEqual(cfg.encoder_channels, (16, 32, 64))
        self.assertEqual(cfg.ppm_bins, (1, 2, 3, 6))
        self.assertEqual(cfg.encoder_downsample, 4)
        self.assertEqual(cfg.embed_width, 64)
        self.assertEqual(cfg.encoder_strides(), [2, 2, 1])
        self.assertFalse(cfg.is_detailer)

    @number("2.21")
    def test_invalid(self):
        for overrides in [dict(num_classes=1), dict(embed_width=0), dict(ppm_bins=()), dict(ppm_bins=(0, 2)),
                          dict(encoder_downsample=3), dict(encoder_downsample=16), dict(injection="sideways")]:
            with self.subTest(overrides=overrides), self.assertRaises(ConfigError):
                NetworkConfig(**overrides)

    @number("2.22")
    def test_crop_check(self):
        cfg = NetworkConfig()
        cfg.check_crop(48)
        with self.assertRaises(ConfigError):
            cfg.check_crop(50)
        with self.assertRaises(ConfigError):
            cfg.check_crop(16)

    @number("2.23")
    def test_dict_round_trip(self):
        cfg = tiny_network("after-pool", embed_width=7, seed=3)
        self.assertEqual(NetworkConfig.from_dict(cfg.to_dict()), cfg)


class TestForward(unittest.TestCase):

    @number("2.30")
    def test_shapes_for_every_injection(self):
        image, coarse, _ = random_batch(0, dtype=np.float32)
        dims = set()
        for injection in ("none",) + INJECTIONS:
            net = MiniPSP(tiny_network(injection))
            logits, _ = net.forward(image, None if injection == "none" else coarse)
            self.assertEqual(logits.dims, (2, 3, 8, 8))
            self.assertEqual(logits.dtype, np.float32)
            self.assertTrue(logits.is_finite())
            dims.add(logits.dims)
        self.assertEqual(len(dims), 1)

    @number("2.31")
    def test_bit_identical(self):
        image, coarse, _ = random_batch(1, dtype=np.float32)
        for injection in ("none", "after-final"):
            net = MiniPSP(tiny_network(injection))
            c = None if injection == "none" else coarse
            self.assertEqual(net.logits(image, c).values.tobytes(), net.logits(image, c).values.tobytes())
            twin = MiniPSP(tiny_network(injection))
            self.assertEqual(net.logits(image, c).values.tobytes(), twin.logits(image, c).values.tobytes())

    @number("2.32")
    def test_entry_points_check_kind(self):
        image, coarse, _ = random_batch(2, dtype=np.float32)
        classifier = MiniPSP(tiny_network())
        detailer = MiniPSP(tiny_network("before-pool"))
        with self.assertRaises(ConfigError):
            forward_detailer(classifier, image, coarse)
        with self.assertRaises(ConfigError):
            forward_classifier(detailer, image)
        with self.assertRaises(ShapeError):
            forward_detailer(detailer, image, None)
        with self.assertRaises(ShapeError):
            forward_detailer(detailer, image, coarse[:, :4])
        with self.assertRaises(ShapeError):
            forward_classifier(classifier, Tensor4(np.zeros((1, 3, 7, 8), dtype=np.float32)))

    @number("2.33")
    def test_parameter_count_grows_with_embedding(self):
        for injection in INJECTIONS:
            counts = [MiniPSP(tiny_network(injection, embed_width=w)).parameter_count() for w in (1, 2, 8, 32)]
            self.assertEqual(counts, sorted(set(counts)))
        self.assertLess(MiniPSP(tiny_network()).parameter_count(),
                        MiniPSP(tiny_network("after-final", embed_width=1)).parameter_count())

    @number("2.34")
    def test_layer_paths(self):
        paths = [s.path for s in layer_specs(tiny_network("after-pool"))]
        self.assertEqual(paths, ["encoder.0", "encoder.1", "ppm.0", "ppm.1", "final", "classifier", "embed"])
        self.assertNotIn("embed", [s.path for s in layer_specs(tiny_network())])

    @number("2.35")
    def test_mismatched_parameters(self):
        params = MiniPSP(tiny_network()).params
        with self.assertRaises(ConfigError):
            MiniPSP(tiny_network("after-final"), params)


class TestSkipDominance(unittest.TestCase):

    @number("2.40")
    def test_zero_corrections_reproduce_coarse(self):
        for seed in range(3):
            image, coarse, _ = random_batch(seed, dtype=np.float32)
            for injection in INJECTIONS:
                net = MiniPSP(tiny_network(injection, seed=seed))
                net.zero_corrections()
                logits = net.forward_detailer(image, coarse)
                pred = argmax_labels(logits)
                labeled = coarse != IGNORE
                np.testing.assert_array_equal(pred[labeled], coarse[labeled])
                ignored = np.broadcast_to(~labeled[:, None], logits.dims)
                self.assertFalse(logits.values[ignored].any())

    @number("2.41")
    def test_zero_final_block_before_classifier(self):
        # zeroing the final 3x3 block silences p unless the embedding enters after it
        image, coarse, _ = random_batch(4, dtype=np.float32)
        one_hot = one_hot_encode(coarse, 3).values
        for injection in INJECTIONS:
            net = MiniPSP(tiny_network(injection))
            net.params["final"].weights.values[...] = 0
            net.params["final"].bias[...] = 0
            logits = net.forward_detailer(image, coarse).values
            if injection == "after-final":
                self.assertFalse(np.array_equal(logits, one_hot))
            else:
                np.testing.assert_array_equal(logits, one_hot)


class TestBackward(unittest.TestCase):

    def check_network_gradients(self, injection: str, seed: int):
        rng = np.random.default_rng(seed)
        net = MiniPSP(tiny_network(injection, seed=seed)).astype(np.float64)
        # larger head so upstream gradients are not vanishingly small
        net.params["classifier"].weights.values *= 50
        image, coarse, fine = random_batch(seed)
        fine[rng.random(fine.shape) < 0.2] = IGNORE
        c = None if injection == "none" else coarse

        def objective():
            return softmax_ce_ignore(net.forward(image, c)[0], fine)[0]

        logits, cache = net.forward(image, c)
        _, grad_logits = softmax_ce_ignore(logits, fine)
        grads = net.backward(cache, grad_logits)
        self.assertEqual(list(grads), list(net.params))
        for path, params in net.named_parameters():
            self.assertEqual(grads[path].weights.shape, params.weights.dims)
            sampled = [tuple(int(rng.integers(d)) for d in params.weights.dims) for _ in range(3)]
            numeric = numeric_gradient(objective, params.weights.values, eps=1e-6, indices=sampled)
            analytic = np.zeros_like(numeric)
            for idx in sampled:
                analytic[idx] = grads[path].weights[idx]
            self.assertLess(relative_error(analytic, numeric), 1e-3, f"{injection} {path}")
            numeric_bias = numeric_gradient(objective, params.bias, eps=1e-6, indices=[(0,)])
            self.assertLess(relative_error(grads[path].bias[0], numeric_bias[0]), 1e-3, f"{injection} {path}")

    @number("2.50")
    def test_classifier_gradients(self):
        for seed in range(2):
            self.check_network_gradients("none", seed)

    @number("2.51")
    def test_detailer_gradients(self):
        for injection in INJECTIONS:
            self.check_network_gradients(injection, 7)

    @number("2.52")
    def test_astype_and_copy_are_independent(self):
        net = MiniPSP(tiny_network("after-final"))
        twin = net.copy()
        twin.params["embed"].weights.values += 1
        self.assertFalse(np.array_equal(net.params["embed"].weights.values, twin.params["embed"].weights.values))
        self.assertEqual(net.astype(np.float64).params["final"].weights.dtype, np.float64)


if __name__ == "__main__":
    unittest.main()
