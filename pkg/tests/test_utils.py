import json
import os
import shutil
import tempfile
import unittest

import numpy as np

from dyadlab.utils import (
    ExperimentConfig,
    array_hash,
    fit_linear,
    fit_loglog,
    format_cell,
    load_experiment_config,
    rng_stream,
    write_csv,
)
from dyadlab.violation_tracker import ViolationTracker


class TestExperimentConfig(unittest.TestCase):
    def test_parse(self):
        text = """
        # small two-dimensional run
        dimension = 2
        power_exponents = 0.1, 0.2
        seed = 7  # inline comment

        shift_family = haar_multiplier
        """
        config = load_experiment_config(text)
        self.assertEqual(config.dimension, 2)
        self.assertEqual(config.power_exponents, [0.1, 0.2])
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.shift_family, "haar_multiplier")
        self.assertEqual(config.k_min, ExperimentConfig().k_min)

    def test_empty_text_gives_defaults(self):
        self.assertEqual(load_experiment_config(""), ExperimentConfig())

    def test_malformed_line(self):
        with self.assertRaises(ValueError) as context:
            load_experiment_config("seed = 1\ndimension 2\n")
        self.assertIn("Malformed config line 2", str(context.exception))

    def test_unknown_key(self):
        with self.assertRaises(ValueError) as context:
            load_experiment_config("colour = red")
        self.assertIn("Unknown config key 'colour'", str(context.exception))

    def test_invalid_values(self):
        cases = [
            ("dimension = 3", "dimension must be 1 or 2"),
            ("k_min = 0", "k_min must be <= -1"),
            ("n_samples = 0", "n_samples must be >= 1"),
            ("r0 = 0", "r0 must be a positive integer"),
            ("kernel = poisson", "unknown kernel"),
            ("weight_family = gaussian", "unknown weight family"),
        ]
        for text, message in cases:
            with self.subTest(text=text):
                with self.assertRaises(ValueError) as context:
                    load_experiment_config(text)
                self.assertIn("Invalid experiment config", str(context.exception))
                self.assertIn(message, str(context.exception))


class TestFits(unittest.TestCase):
    def test_two_points(self):
        fit = fit_linear([0.0, 1.0], [1.0, 3.0])
        self.assertAlmostEqual(fit.slope, 2.0)
        self.assertAlmostEqual(fit.intercept, 1.0)
        self.assertAlmostEqual(fit.r_squared, 1.0)
        self.assertEqual(fit.point_count, 2)
        self.assertFalse(fit.reportable)

    def test_power_law(self):
        fit = fit_loglog([1.0, 2.0, 4.0, 8.0], [3.0, 12.0, 48.0, 192.0])
        self.assertAlmostEqual(fit.slope, 2.0)
        self.assertAlmostEqual(fit.intercept, np.log2(3.0))
        self.assertTrue(fit.reportable)
        self.assertLess(fit.residual_max, 1e-9)

    def test_non_positive_pairs_are_dropped(self):
        fit = fit_loglog([1.0, 2.0, 4.0, 0.0], [1.0, 0.5, 0.25, 5.0])
        self.assertEqual(fit.point_count, 3)
        self.assertAlmostEqual(fit.slope, -1.0)

    def test_degenerate_abscissae(self):
        with self.assertRaises(ValueError) as context:
            fit_linear([1.0, 1.0], [2.0, 3.0])
        self.assertIn("Need at least two distinct abscissae", str(context.exception))


class TestOutputHelpers(unittest.TestCase):
    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_format_cell(self):
        self.assertEqual(format_cell(2.0), "2")
        self.assertEqual(format_cell(np.float64(0.1)), "0.10000000000000001")
        self.assertEqual(format_cell(True), "true")
        self.assertEqual(format_cell(np.bool_(False)), "false")
        self.assertEqual(format_cell(np.int64(-3)), "-3")
        self.assertEqual(format_cell(None), "")
        self.assertEqual(format_cell("power 0.5"), "power 0.5")

    def test_write_csv(self):
        path = write_csv(
            os.path.join(self.test_dir, "nested", "table.csv"),
            ["r", "norm", "converged"],
            [(1, 0.5, True), (2, 1.25, False)],
            preamble="seed=3",
        )
        with open(path, "r") as f:
            self.assertEqual(f.read().splitlines(), ["# seed=3", "r,norm,converged", "1,0.5,true", "2,1.25,false"])

    def test_rng_stream(self):
        a = rng_stream(5, 1, 2).random(4)
        rng_stream(5, 3).random(100)
        np.testing.assert_array_equal(a, rng_stream(5, 1, 2).random(4))
        self.assertFalse(np.array_equal(a, rng_stream(5, 2, 1).random(4)))

    def test_array_hash(self):
        values = np.linspace(0.0, 1.0, 9)
        self.assertEqual(array_hash(values), array_hash(values.copy()))
        self.assertEqual(len(array_hash(values)), 64)
        self.assertNotEqual(array_hash(values), array_hash(values[::-1]))


class TestViolationTracker(unittest.TestCase):
    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_all_passing(self):
        tracker = ViolationTracker("invariants", 4)
        self.assertTrue(tracker.check("haar.parseval", True))
        self.assertTrue(tracker.check("haar.parseval", np.bool_(True)))
        self.assertTrue(tracker.all_passed)
        self.assertEqual(tracker.summary()["checks"], {"haar.parseval": True})

    def test_single_failure_sticks(self):
        tracker = ViolationTracker("invariants", 4)
        tracker.check("shift.normalization", True)
        with self.assertLogs("dyadlab", level="WARNING") as logs:
            self.assertFalse(tracker.check("shift.normalization", False, "worst pair product 2", "CubeId(0)"))
        tracker.check("shift.normalization", True)
        self.assertIn("Invariant 'shift.normalization' failed", logs.output[0])
        self.assertFalse(tracker.all_passed)
        self.assertEqual(tracker.checks["shift.normalization"], False)
        violation = tracker.violations[0]
        self.assertEqual(violation["witness"], "CubeId(0)")
        self.assertEqual(violation["seed"], 4)
        self.assertEqual(len(violation["uuid"]), 36)

    def test_violation_ids_are_deterministic(self):
        def record(seed):
            tracker = ViolationTracker("invariants", seed)
            with self.assertLogs("dyadlab", level="WARNING"):
                tracker.check("shift.normalization", False, "worst pair product 2")
                tracker.check("shift.normalization", False, "worst pair product 3")
                tracker.check("decomp.packing", False, "packing bounds exceeded")
            return tracker.summary()["violations"]

        first, second = record(4), record(4)
        self.assertEqual(first, second)
        self.assertEqual(len({v["uuid"] for v in first}), 3)
        self.assertNotEqual(first[0]["uuid"], record(5)[0]["uuid"])
        for violation in first:
            self.assertNotIn("timestamp", violation)

    def test_write(self):
        tracker = ViolationTracker("invariants", 1)
        tracker.check("lattice.partition", True)
        tracker.check("decomp.packing", False, "packing bounds exceeded", {"lebesgue_ratio": 1.5})
        path = tracker.write(os.path.join(self.test_dir, "out", "invariants.json"))
        with open(path, "r") as f:
            data = json.load(f)
        self.assertFalse(data["passed"])
        self.assertEqual(data["checks"], {"decomp.packing": False, "lattice.partition": True})
        self.assertEqual(data["violations"][0]["witness"], {"lebesgue_ratio": 1.5})


if __name__ == "__main__":
    unittest.main(verbosity=2)
