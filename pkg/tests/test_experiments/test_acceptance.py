"""
Directional checks on the default synthetic benchmark. These train dozens
of networks and only run with DETAILER_SLOW_TESTS=1 (run_tests.py --slow).
"""

import csv
import tempfile
import unittest

import numpy as np

import training
from evaluation import distill_comparison
from experiments import ExperimentPlan, benchmark, run_sweep
from mini_psp import NetworkConfig
from test_utils.decorators import number, slow


def table(path) -> dict[tuple[str, str], float]:
    with open(path) as handle:
        rows = list(csv.DictReader(handle))
    label = [c for c in rows[0] if c not in ("mean_miou", "std_miou", "n_seeds")][1]
    return {(row["size"], row[label]): float(row["mean_miou"]) for row in rows}


class TestBenchmark(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.plan = ExperimentPlan(out_dir=cls.tmp.name, resolutions=(48,), tables=("table1", "table2"))
        cls.written = None

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def sweep(self):
        if TestBenchmark.written is None:
            TestBenchmark.written = run_sweep(self.plan)
        return TestBenchmark.written

    @slow()
    @number("8.1")
    def test_detailer_beats_classifier_and_coarse(self):
        written = self.sweep()
        sizes = table(written["table1"])
        composite = table(written["table2"])
        coarse = composite[(str(self.plan.composite_size), "coarse")]
        for size in self.plan.sizes:
            detailer = sizes[(str(size), "detailer")]
            self.assertGreaterEqual(detailer - sizes[(str(size), "classifier")], 0.05, size)
            self.assertGreaterEqual(detailer - coarse, 0.02, size)

    @slow()
    @number("8.2")
    def test_composite_ordering(self):
        composite = table(self.sweep()["table2"])
        size = str(self.plan.composite_size)
        self.assertGreaterEqual(composite[(size, "detailer-composite")], composite[(size, "detailer")])
        self.assertGreater(composite[(size, "detailer-composite")], composite[(size, "classifier-composite")])

    @slow()
    @number("8.3")
    def test_rerun_is_bit_identical(self):
        written = self.sweep()
        with tempfile.TemporaryDirectory() as other:
            plan = ExperimentPlan(out_dir=other, resolutions=(48,), tables=("table1", "table2"))
            again = run_sweep(plan)
            for name in ("runs", "table1", "table2"):
                self.assertEqual(written[name].read_bytes(), again[name].read_bytes(), name)


class TestAblationHarness(unittest.TestCase):

    @slow()
    @number("8.4")
    def test_tables_complete(self):
        with tempfile.TemporaryDirectory() as out:
            plan = ExperimentPlan(out_dir=out, sizes=(10,), resolutions=(48,), tables=("table4", "table5"),
                                  train=training.TrainConfig(total_iters=200, eval_every=0))
            written = run_sweep(plan)
            for name, count in (("table4", 3), ("table5", 3)):
                with open(written[name]) as handle:
                    rows = list(csv.DictReader(handle))
                self.assertEqual(len(rows), count)
                for row in rows:
                    self.assertEqual(row["n_seeds"], "3")
                    self.assertNotEqual(row["std_miou"], "")


class TestDistillation(unittest.TestCase):

    @slow()
    @number("8.5")
    def test_detailed_masks_make_better_students(self):
        plan = ExperimentPlan()
        detailed, coarse = [], []
        for seed in plan.seeds:
            pool, val = benchmark(plan, 48, seed)
            train_set = pool[:50]
            teacher_cfg = NetworkConfig(injection="after-final", seed=seed)
            teacher, _ = training.train("detailer", train_set, training.TrainConfig(seed=seed, eval_every=0),
                                        teacher_cfg)
            result = distill_comparison(teacher.network, train_set, NetworkConfig(seed=seed),
                                        training.TrainConfig(seed=seed, eval_every=0), val)
            detailed.append(result.report.miou)
            coarse.append(result.coarse_report.miou)
        self.assertGreaterEqual(np.mean(detailed), np.mean(coarse))


if __name__ == "__main__":
    unittest.main()
