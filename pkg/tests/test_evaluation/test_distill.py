import unittest

import numpy as np

from errors import ConfigError, DataError
from evaluation import detail_masks, distill, distill_comparison
from mask_util import IGNORE
from mini_psp import MiniPSP
from synth_data import SampleTriplet
from test_utils.decorators import number
from tests.fixtures import tiny_dataset, tiny_network
from training import TrainConfig


def quick_config() -> TrainConfig:
    return TrainConfig(total_iters=2, batch_size=2, crop=16, eval_every=0)


class TestDistill(unittest.TestCase):

    def setUp(self):
        self.data = tiny_dataset(3, seed=4)
        self.val = tiny_dataset(2, seed=40)
        self.teacher = MiniPSP(tiny_network("after-final"))

    @number("5.40")
    def test_teacher_must_be_detailer(self):
        with self.assertRaises(ConfigError):
            distill(MiniPSP(tiny_network()), self.data, tiny_network(), quick_config(), self.val)
        with self.assertRaises(ConfigError):
            distill_comparison(MiniPSP(tiny_network()), self.data, tiny_network(), quick_config(), self.val)

    @number("5.41")
    def test_student_must_match(self):
        with self.assertRaises(ConfigError):
            distill(self.teacher, self.data, tiny_network("after-pool"), quick_config(), self.val)
        with self.assertRaises(ConfigError):
            distill(self.teacher, self.data, tiny_network(num_classes=4), quick_config(), self.val)
        no_coarse = [SampleTriplet(t.image, t.fine) for t in self.data]
        with self.assertRaises(DataError):
            distill(self.teacher, no_coarse, tiny_network(), quick_config(), self.val)

    @number("5.42")
    def test_detailed_masks_are_total(self):
        masks = detail_masks(self.teacher, self.data)
        self.assertEqual(len(masks), len(self.data))
        for mask, triplet in zip(masks, self.data):
            self.assertEqual(mask.shape, triplet.fine.shape)
            self.assertFalse((mask.labels == IGNORE).any())
            self.assertTrue(mask.classes() <= {0, 1, 2})

    @number("5.43")
    def test_comparison(self):
        first = distill_comparison(self.teacher, self.data, tiny_network(seed=5), quick_config(), self.val)
        second = distill_comparison(self.teacher, self.data, tiny_network(seed=5), quick_config(), self.val)
        self.assertEqual(first.report, second.report)
        self.assertEqual(first.coarse_report, second.coarse_report)
        self.assertEqual(first.difference, first.report.miou - first.coarse_report.miou)
        self.assertFalse(first.student.cfg.is_detailer)
        for path, params in first.student.named_parameters():
            np.testing.assert_array_equal(params.weights.values, second.student.params[path].weights.values)
        self.assertEqual(len(first.detailed), len(self.data))


if __name__ == "__main__":
    unittest.main()
