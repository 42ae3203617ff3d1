import json
import os
import shutil
import tempfile
import unittest

import numpy as np
from hypothesis import given, seed, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dyadlab.lattice import CubeId, sample_lattice, standard_lattice
from dyadlab.signals import (
    StepFunction,
    Weight,
    a2_constant,
    a2_products,
    average,
    constant,
    distribution_function,
    joint_a2,
    lebesgue,
    power_weight,
    random_a2_weight,
    reciprocal,
    weighted_average,
    write_step_function,
)

ROOT_1D = CubeId(0, (0,))
positive_cells = arrays(np.float64, 16, elements=st.floats(0.1, 10.0))


class TestStepFunction(unittest.TestCase):
    def test_length_must_match_lattice(self):
        with self.assertRaises(ValueError) as context:
            StepFunction(standard_lattice(1, -2), np.ones(3))
        self.assertIn("Lattice mismatch", str(context.exception))

    def test_values_must_be_finite(self):
        with self.assertRaises(ValueError) as context:
            StepFunction(standard_lattice(1, -1), [1.0, np.nan])
        self.assertIn("finite", str(context.exception))

    def test_weight_must_be_positive(self):
        with self.assertRaises(ValueError) as context:
            Weight(standard_lattice(1, -1), [1.0, 0.0])
        self.assertIn("strictly positive", str(context.exception))

    def test_values_are_read_only(self):
        f = constant(standard_lattice(1, -2), 2.0)
        with self.assertRaises(ValueError):
            f.values[0] = 1.0

    def test_mixing_lattices_rejected(self):
        f = constant(standard_lattice(1, -2))
        g = constant(standard_lattice(1, -2).with_shifts({-1: (1,)}))
        with self.assertRaises(ValueError) as context:
            f + g
        self.assertIn("Lattice mismatch", str(context.exception))

    def test_norms(self):
        f = StepFunction(standard_lattice(1, -1), [3.0, -1.0])
        self.assertEqual(f.integral(), 1.0)
        self.assertEqual(f.l1_norm(), 2.0)
        self.assertAlmostEqual(f.l2_norm(), np.sqrt(5.0))
        self.assertEqual(f.sup_norm(), 3.0)


class TestAverages(unittest.TestCase):
    def test_constant(self):
        lat = standard_lattice(2, -2)
        f = constant(lat, 3.5)
        for Q in lat.all_cubes():
            self.assertAlmostEqual(average(f, Q), 3.5)

    def test_halves(self):
        lat = standard_lattice(1, -1)
        f = StepFunction(lat, [1.0, 3.0])
        self.assertEqual(average(f, ROOT_1D), 2.0)
        w = Weight(lat, [2.0, 1.0])
        self.assertAlmostEqual(weighted_average(f, w, ROOT_1D), 5.0 / 3.0)

    def test_zero_mass_convention(self):
        lat = standard_lattice(1, -1)
        mu = StepFunction(lat, [0.0, 1.0])
        self.assertEqual(weighted_average(constant(lat, 4.0), mu, CubeId(-1, (0,))), 0.0)

    @seed(101)
    @settings(max_examples=30, deadline=None)
    @given(values=arrays(np.float64, 16, elements=st.floats(-5, 5)), w=positive_cells, level=st.integers(-3, 0))
    def test_restriction_does_not_change_weighted_average(self, values, w, level):
        lat = standard_lattice(1, -4)
        f = StepFunction(lat, values)
        mu = Weight(lat, w)
        Q = CubeId(level, (0,))
        self.assertAlmostEqual(weighted_average(f.restrict(Q), mu, Q), weighted_average(f, mu, Q))


class TestA2(unittest.TestCase):
    def test_lebesgue(self):
        value, _ = a2_constant(lebesgue(standard_lattice(2, -3)))
        self.assertAlmostEqual(value, 1.0)

    def test_two_step_weight(self):
        lat = standard_lattice(1, -1)
        value, cube = a2_constant(Weight(lat, [2.0, 0.5]))
        self.assertAlmostEqual(value, 1.5625)
        self.assertEqual(cube, ROOT_1D)

    def test_joint_two_step(self):
        lat = standard_lattice(1, -1)
        value, cube = joint_a2(Weight(lat, [4.0, 1.0]), Weight(lat, [1.0, 4.0]))
        # the single cells give 4, the root gives 2.5 * 2.5
        self.assertAlmostEqual(value, 6.25)
        self.assertEqual(cube, ROOT_1D)

    def test_products_cover_every_level(self):
        lat = standard_lattice(1, -3)
        products = a2_products(power_weight(lat, 0.5, [0.0]))
        self.assertEqual(sorted(products), [-3, -2, -1, 0])
        self.assertEqual(products[-2].shape, (4,))
        np.testing.assert_allclose(products[-3], 1.0)

    @seed(202)
    @settings(max_examples=40, deadline=None)
    @given(w=positive_cells, c=st.floats(0.01, 100.0))
    def test_a2_properties(self, w, c):
        lat = standard_lattice(1, -4)
        weight = Weight(lat, w)
        value, _ = a2_constant(weight)
        self.assertGreaterEqual(value, 1.0 - 1e-12)
        self.assertAlmostEqual(a2_constant(reciprocal(weight))[0], value)
        self.assertAlmostEqual(a2_constant(weight.scaled(c))[0], value, places=6)
        self.assertAlmostEqual(joint_a2(weight, reciprocal(weight))[0], value)

    @seed(303)
    @settings(max_examples=30, deadline=None)
    @given(u=positive_cells, v=positive_cells)
    def test_joint_symmetric(self, u, v):
        lat = standard_lattice(2, -2)
        a, b = Weight(lat, u), Weight(lat, v)
        self.assertAlmostEqual(joint_a2(a, b)[0], joint_a2(b, a)[0])


class TestWeightGenerators(unittest.TestCase):
    def test_zero_power_is_lebesgue(self):
        w = power_weight(standard_lattice(2, -3), 0.0, [0.3, 0.7])
        np.testing.assert_array_equal(w.values, 1.0)

    def test_power_family_grows_towards_one(self):
        lat = standard_lattice(1, -10)
        values = [a2_constant(power_weight(lat, a, [0.0]))[0] for a in (0.0, 0.5, 0.9)]
        self.assertAlmostEqual(values[0], 1.0)
        self.assertLess(values[0], values[1])
        self.assertLess(values[1], values[2])

    def test_power_exponent_range(self):
        with self.assertRaises(ValueError) as context:
            power_weight(standard_lattice(1, -3), 1.0, [0.0])
        self.assertIn("|a| < 1", str(context.exception))

    def test_random_weight_hits_target(self):
        lat = sample_lattice(1, -8, 4)
        value, _ = a2_constant(random_a2_weight(lat, 50.0, seed=12))
        self.assertGreaterEqual(value, 40.0)
        self.assertLessEqual(value, 60.0)

    def test_random_weight_is_reproducible(self):
        lat = standard_lattice(2, -3)
        a = random_a2_weight(lat, 5.0, seed=1)
        b = random_a2_weight(lat, 5.0, seed=1)
        np.testing.assert_array_equal(a.values, b.values)

    def test_random_weight_target_below_one(self):
        with self.assertRaises(ValueError) as context:
            random_a2_weight(standard_lattice(1, -3), 0.5, seed=0)
        self.assertIn("A2 target must be >= 1", str(context.exception))


class TestDistributionFunction(unittest.TestCase):
    def test_examples(self):
        lat = standard_lattice(1, -1)
        np.testing.assert_array_equal(distribution_function(constant(lat, 0.0), [0.5, 1.0]), [0.0, 0.0])
        np.testing.assert_allclose(distribution_function(StepFunction(lat, [2.0, 0.0]), [1.0]), [0.5])

    def test_weighted_measure(self):
        lat = standard_lattice(1, -1)
        f = StepFunction(lat, [2.0, 0.0])
        curve = distribution_function(f, [1.0], measure=Weight(lat, [3.0, 1.0]))
        np.testing.assert_allclose(curve, [1.5])

    def test_thresholds_validated(self):
        lat = standard_lattice(1, -1)
        with self.assertRaises(ValueError) as context:
            distribution_function(constant(lat), [2.0, 1.0])
        self.assertIn("strictly increasing", str(context.exception))

    @seed(404)
    @settings(max_examples=30, deadline=None)
    @given(values=arrays(np.float64, 16, elements=st.floats(-10, 10)))
    def test_monotone_and_bounded(self, values):
        f = StepFunction(standard_lattice(1, -4), values)
        curve = distribution_function(f, np.linspace(0.1, 12.0, 25))
        self.assertTrue(np.all(np.diff(curve) <= 0))
        self.assertLessEqual(curve[0], 1.0)


class TestWriteStepFunction(unittest.TestCase):
    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_weight_header_records_a2(self):
        lat = standard_lattice(1, -1)
        path = write_step_function(Weight(lat, [2.0, 0.5]), os.path.join(self.test_dir, "w.csv"))
        with open(path, "r") as f:
            lines = f.read().splitlines()
        self.assertTrue(lines[0].startswith("# "))
        header = json.loads(lines[0][2:])
        self.assertAlmostEqual(header["a2"], 1.5625)
        self.assertEqual(header["a2_kind"], "dyadic")
        self.assertEqual(lines[1], "cell,value")
        self.assertEqual(lines[2], "0,2")

    def test_plain_function_has_no_header(self):
        lat = standard_lattice(1, -1)
        path = write_step_function(StepFunction(lat, [1.5, -1.0]), os.path.join(self.test_dir, "f.csv"))
        with open(path, "r") as f:
            self.assertEqual(f.read().splitlines(), ["cell,value", "0,1.5", "1,-1"])


if __name__ == "__main__":
    unittest.main(verbosity=2)
