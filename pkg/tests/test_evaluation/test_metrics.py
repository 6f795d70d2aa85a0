import unittest
from fractions import Fraction

import numpy as np

from errors import ContractError, DataError, EvaluationError, ParseError, ShapeError
from evaluation import (
    CoarsePredictor,
    ConfusionMatrix,
    EvalReport,
    Predictor,
    accumulate,
    coarse_baseline,
    composite,
    evaluate_model,
    miou,
)
from mask_util import IGNORE, LabelMask
from mini_psp import MiniPSP
from synth_data import SampleTriplet
from test_utils.decorators import number
from tests.fixtures import tiny_dataset, tiny_network


class ConstantPredictor(Predictor):

    def __init__(self, num_classes, label=0):
        self.num_classes = num_classes
        self.label = label

    def predict(self, triplet):
        return LabelMask(np.full(triplet.fine.shape, self.label, dtype=np.uint8))


class OraclePredictor(Predictor):

    def __init__(self, num_classes):
        self.num_classes = num_classes

    def predict(self, triplet):
        return triplet.fine


def set_oracle_miou(pred, gt, num_classes):
    valid = gt != IGNORE
    ious = []
    for c in range(num_classes):
        predicted = set(zip(*np.nonzero((pred == c) & valid)))
        actual = set(zip(*np.nonzero(gt == c)))
        union = predicted | actual
        if union:
            ious.append(Fraction(len(predicted & actual), len(union)))
    return float(sum(ious) / len(ious))


class TestConfusionMatrix(unittest.TestCase):

    @number("5.1")
    def test_hand_case(self):
        gt = np.array([[0, 1], [1, 1]])
        pred = np.array([[0, 0], [1, 1]])
        cm = accumulate(ConfusionMatrix(2), pred, gt)
        np.testing.assert_array_equal(cm.counts, [[1, 0], [1, 2]])
        report = miou(cm)
        self.assertEqual(report.per_class_iou, [0.5, float(Fraction(2, 3))])
        self.assertEqual(report.miou, float(Fraction(7, 12)))

    @number("5.2")
    def test_perfect_prediction(self):
        gt = np.random.default_rng(0).integers(0, 4, (9, 9))
        self.assertEqual(miou(accumulate(ConfusionMatrix(4), gt, gt)).miou, 1.0)

    @number("5.3")
    def test_ignore_ground_truth_is_skipped(self):
        cm = accumulate(ConfusionMatrix(3), np.zeros((4, 4)), np.full((4, 4), IGNORE))
        self.assertEqual(cm, ConfusionMatrix(3))
        with self.assertRaises(EvaluationError):
            miou(cm)

    @number("5.4")
    def test_prediction_must_be_total(self):
        pred = np.zeros((3, 3))
        pred[1, 1] = IGNORE
        with self.assertRaises(ContractError):
            accumulate(ConfusionMatrix(2), pred, np.zeros((3, 3)))

    @number("5.5")
    def test_invalid_inputs(self):
        with self.assertRaises(ShapeError):
            accumulate(ConfusionMatrix(2), np.zeros((2, 3)), np.zeros((3, 2)))
        with self.assertRaises(DataError) as ctx:
            accumulate(ConfusionMatrix(2), np.zeros((2, 2)), np.array([[0, 0], [0, 5]]))
        self.assertIn("(1, 1)", str(ctx.exception))
        with self.assertRaises(ShapeError):
            ConfusionMatrix(2) + ConfusionMatrix(3)

    @number("5.6")
    def test_accumulation_is_additive(self):
        rng = np.random.default_rng(1)
        pairs = [(rng.integers(0, 3, (5, 6)), rng.integers(0, 3, (5, 6))) for _ in range(4)]
        running = ConfusionMatrix(3)
        separate = ConfusionMatrix(3)
        for pred, gt in pairs:
            running = accumulate(running, pred, gt)
            separate = separate + accumulate(ConfusionMatrix(3), pred, gt)
        self.assertEqual(running, separate)
        self.assertEqual(running.total(), 4 * 30)

    @number("5.7")
    def test_set_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            c = int(rng.integers(2, 6))
            h, w = rng.integers(1, 17, 2)
            gt = rng.integers(0, c, (h, w))
            gt[rng.random((h, w)) < 0.2] = IGNORE
            pred = rng.integers(0, c, (h, w))
            cm = accumulate(ConfusionMatrix(c), pred, gt)
            if cm.total() == 0:
                continue
            self.assertAlmostEqual(miou(cm).miou, set_oracle_miou(pred, gt, c), places=12)

    @number("5.8")
    def test_undefined_classes_excluded(self):
        gt = np.zeros((2, 2))
        report = miou(accumulate(ConfusionMatrix(3), np.zeros((2, 2)), gt))
        self.assertEqual(report.per_class_iou, [1.0, None, None])
        self.assertEqual(report.miou, 1.0)

    @number("5.9")
    def test_relabeling_classes_keeps_the_score(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            c = int(rng.integers(2, 7))
            gt = rng.integers(0, c, (9, 11))
            gt[rng.random((9, 11)) < 0.25] = IGNORE
            pred = rng.integers(0, c, (9, 11))
            relabel = np.full(256, IGNORE, dtype=np.int64)
            relabel[:c] = rng.permutation(c)
            before = miou(accumulate(ConfusionMatrix(c), pred, gt))
            after = miou(accumulate(ConfusionMatrix(c), relabel[pred], relabel[gt]))
            self.assertEqual(after.miou, before.miou)
            for k in range(c):
                self.assertEqual(after.per_class_iou[relabel[k]], before.per_class_iou[k])


class TestComposite(unittest.TestCase):

    @number("5.10")
    def test_fully_labeled_coarse(self):
        coarse = LabelMask(np.random.default_rng(0).integers(0, 3, (5, 5)))
        self.assertEqual(composite(coarse, LabelMask(np.zeros((5, 5)))), coarse)

    @number("5.11")
    def test_fully_ignore_coarse(self):
        pred = LabelMask(np.random.default_rng(1).integers(0, 3, (5, 5)))
        self.assertEqual(composite(LabelMask(np.full((5, 5), IGNORE)), pred), pred)

    @number("5.12")
    def test_hand_case(self):
        coarse = LabelMask(np.array([[0, IGNORE, 1], [IGNORE, IGNORE, 1], [2, 2, IGNORE]]))
        pred = LabelMask(np.array([[1, 1, 1], [0, 2, 0], [0, 0, 0]]))
        expected = np.array([[0, 1, 1], [0, 2, 1], [2, 2, 0]])
        np.testing.assert_array_equal(composite(coarse, pred).labels, expected)

    @number("5.13")
    def test_pixelwise(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            coarse = rng.integers(0, 4, (7, 9))
            coarse[rng.random((7, 9)) < 0.5] = IGNORE
            pred = rng.integers(0, 4, (7, 9))
            out = composite(LabelMask(coarse), LabelMask(pred)).labels
            for y, x in np.ndindex(7, 9):
                self.assertEqual(out[y, x], pred[y, x] if coarse[y, x] == IGNORE else coarse[y, x])
        with self.assertRaises(ShapeError):
            composite(LabelMask(np.zeros((2, 2))), LabelMask(np.zeros((2, 3))))

    @number("5.14")
    def test_idempotent(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            coarse = rng.integers(0, 4, (6, 8))
            coarse[rng.random((6, 8)) < 0.4] = IGNORE
            coarse = LabelMask(coarse)
            once = composite(coarse, LabelMask(rng.integers(0, 4, (6, 8))))
            self.assertEqual(composite(coarse, once), once)
            self.assertEqual(composite(once, LabelMask(rng.integers(0, 4, (6, 8)))), once)


class TestEvaluateModel(unittest.TestCase):

    def setUp(self):
        self.data = tiny_dataset(4, seed=3, bleed_prob=0.0)

    @number("5.20")
    def test_coarse_baseline_hand_case(self):
        fine = LabelMask(np.array([[0, 1], [1, 1]]))
        coarse = LabelMask(np.array([[0, IGNORE], [1, IGNORE]]))
        report = coarse_baseline([SampleTriplet(np.zeros((3, 2, 2)), fine, coarse)], 2)
        self.assertEqual(report.per_class_iou, [1.0, float(Fraction(1, 3))])
        self.assertEqual(report.miou, float(Fraction(2, 3)))
        self.assertEqual(report.precision, 1.0)
        self.assertEqual(report.coverage, 0.5)

    @number("5.21")
    def test_coarse_predictor_is_the_baseline(self):
        via_model = evaluate_model(CoarsePredictor(3), self.data, use_coarse_input=True)
        self.assertEqual(via_model, coarse_baseline(self.data, 3))
        self.assertEqual(via_model.precision, 1.0)
        self.assertLess(via_model.coverage, 1.0)

    @number("5.22")
    def test_composite_of_oracle_is_perfect(self):
        report = evaluate_model(OraclePredictor(3), self.data, composite_mode=True)
        self.assertEqual(report.miou, 1.0)

    @number("5.23")
    def test_composite_never_worse_without_bleed(self):
        plain = evaluate_model(ConstantPredictor(3), self.data)
        filled = evaluate_model(ConstantPredictor(3), self.data, composite_mode=True)
        self.assertGreaterEqual(filled.miou, plain.miou)

    @number("5.24")
    def test_network_contracts(self):
        detailer = MiniPSP(tiny_network("after-final"))
        with self.assertRaises(ContractError):
            evaluate_model(detailer, self.data)
        report = evaluate_model(detailer, self.data, use_coarse_input=True)
        self.assertEqual(report.num_classes, 3)
        self.assertEqual(report.coverage, 1.0)
        no_coarse = [SampleTriplet(t.image, t.fine) for t in self.data]
        with self.assertRaises(DataError):
            evaluate_model(detailer, no_coarse, use_coarse_input=True)
        with self.assertRaises(DataError):
            evaluate_model(MiniPSP(tiny_network()), [])

    @number("5.25")
    def test_deterministic(self):
        net = MiniPSP(tiny_network("before-pool"))
        first = evaluate_model(net, self.data, use_coarse_input=True, composite_mode=True)
        second = evaluate_model(net, self.data, use_coarse_input=True, composite_mode=True)
        self.assertEqual(first, second)


class TestEvalReport(unittest.TestCase):

    @number("5.30")
    def test_record_round_trip(self):
        report = EvalReport([0.5, None, float(Fraction(2, 3))], float(Fraction(7, 12)), 0.9, 0.75)
        text = report.to_record()
        self.assertIn("iou_1 = undefined", text)
        self.assertEqual(EvalReport.from_record(text), report)
        self.assertEqual(len(report.csv_row()), len(EvalReport.csv_header(3)))

    @number("5.31")
    def test_malformed_record(self):
        with self.assertRaises(ParseError) as ctx:
            EvalReport.from_record("miou = 0.5\nbroken line\n")
        self.assertEqual(ctx.exception.offset, 11)
        with self.assertRaises(ParseError):
            EvalReport.from_record("miou = 0.5\n")


if __name__ == "__main__":
    unittest.main()
