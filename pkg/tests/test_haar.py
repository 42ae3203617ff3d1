import os
import shutil
import tempfile
import unittest

import numpy as np
from hypothesis import given, seed, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dyadlab.haar import (
    analyze,
    haar_function_values,
    haar_matrix,
    standard_haar,
    synthesize,
    weighted_delta,
    weighted_expectations,
    weighted_haar_basis,
    write_haar_coefficients,
)
from dyadlab.lattice import CubeId, sample_lattice, standard_lattice
from dyadlab.signals import StepFunction, Weight, constant, lebesgue
from dyadlab.utils import rng_stream


def all_haar_functions(lat):
    rows = []
    for k in range(0, lat.k_min, -1):
        for Q in lat.cubes(k):
            for j in range(1, lat.n_children):
                rows.append(standard_haar(lat, Q, j).values)
    return np.array(rows)


def mu_inner(f, g, mu):
    return float(np.sum(f.values * g.values * mu.values)) * mu.lattice.cell_volume


class TestStandardHaar(unittest.TestCase):
    def test_one_dimensional_root(self):
        lat = standard_lattice(1, -2)
        h = standard_haar(lat, CubeId(0, (0,)), 1)
        np.testing.assert_array_equal(h.values, [-1.0, -1.0, 1.0, 1.0])
        self.assertAlmostEqual(h.l2_norm(), 1.0)

    def test_two_dimensional_sign_pattern(self):
        lat = standard_lattice(2, -1)
        h = standard_haar(lat, CubeId(0, (0, 0)), 3)
        # children in C order: (0,0), (0,1), (1,0), (1,1)
        np.testing.assert_array_equal(h.values, [1.0, -1.0, -1.0, 1.0])
        np.testing.assert_array_equal(haar_matrix(2)[3], [1.0, -1.0, -1.0, 1.0])

    def test_sup_norm(self):
        lat = standard_lattice(2, -3)
        h = standard_haar(lat, CubeId(-1, (1, 0)), 2)
        self.assertAlmostEqual(h.sup_norm(), 2.0)

    def test_orthonormal_on_shifted_lattice(self):
        lat = sample_lattice(1, -5, 9)
        B = all_haar_functions(lat)
        gram = B @ B.T * lat.cell_volume
        np.testing.assert_allclose(gram, np.eye(B.shape[0]), atol=1e-10)

    def test_orthonormal_two_dimensional(self):
        lat = sample_lattice(2, -3, 2)
        B = all_haar_functions(lat)
        self.assertEqual(B.shape[0], (16 + 4 + 1) * 3)
        np.testing.assert_allclose(B @ B.T * lat.cell_volume, np.eye(B.shape[0]), atol=1e-10)

    def test_invalid_arguments(self):
        lat = standard_lattice(1, -2)
        with self.assertRaises(ValueError) as context:
            standard_haar(lat, CubeId(0, (0,)), 0)
        self.assertIn("Haar index must lie in [1, 1]", str(context.exception))
        with self.assertRaises(ValueError) as context:
            standard_haar(lat, CubeId(-2, (0,)), 1)
        self.assertIn("finest level", str(context.exception))


class TestAnalyzeSynthesize(unittest.TestCase):
    def test_constant(self):
        coeffs = analyze(constant(standard_lattice(2, -3), 1.0))
        self.assertAlmostEqual(coeffs.root_average, 1.0)
        for detail in coeffs.details.values():
            np.testing.assert_allclose(detail, 0.0, atol=1e-14)

    def test_single_haar_function(self):
        lat = standard_lattice(1, -3)
        root = CubeId(0, (0,))
        coeffs = analyze(standard_haar(lat, root, 1))
        self.assertAlmostEqual(coeffs.coefficient(root, 1), 1.0)
        self.assertAlmostEqual(coeffs.squared_norm(), 1.0)
        self.assertAlmostEqual(coeffs.root_average, 0.0)

    def test_coefficient_count(self):
        coeffs = analyze(constant(standard_lattice(2, -3)))
        self.assertEqual(coeffs.count(), (16 + 4 + 1) * 3 + 1)

    def test_large_round_trip_and_parseval(self):
        lat = sample_lattice(2, -5, 3)
        f = StepFunction(lat, rng_stream(3, 0).standard_normal(lat.n_cells))
        coeffs = analyze(f)
        back = synthesize(coeffs)
        self.assertLessEqual(np.max(np.abs(back.values - f.values)), 1e-10 * np.max(np.abs(f.values)))
        self.assertAlmostEqual(coeffs.squared_norm(), f.l2_norm() ** 2, delta=1e-10 * f.l2_norm() ** 2)

    @seed(17)
    @settings(max_examples=10, deadline=None)
    @given(values=arrays(np.float64, 256, elements=st.floats(-10, 10)), lattice_seed=st.integers(0, 2**16))
    def test_fast_transform_matches_inner_products(self, values, lattice_seed):
        lat = sample_lattice(1, -8, lattice_seed)
        f = StepFunction(lat, values)
        coeffs = analyze(f)
        for k in (0, -3, -7):
            for Q in list(lat.cubes(k))[:8]:
                direct = float(np.dot(f.values, standard_haar(lat, Q, 1).values)) * lat.cell_volume
                self.assertAlmostEqual(coeffs.coefficient(Q, 1), direct, places=9)

    def test_mismatched_lattice(self):
        lat = standard_lattice(1, -2)
        coeffs = analyze(constant(lat))
        with self.assertRaises(ValueError) as context:
            synthesize(coeffs, lat.with_shifts({-1: (1,)}))
        self.assertIn("Lattice mismatch", str(context.exception))

    def test_dense_values_match_haar_functions(self):
        lat = sample_lattice(2, -3, 5)
        Q = lat.cube(-1, 2)
        dense = haar_function_values(lat, -1, np.array([2]), np.array([[0.0, 2.0, 0.0, -1.0]]))
        expected = 2.0 * standard_haar(lat, Q, 1).values - standard_haar(lat, Q, 3).values
        np.testing.assert_allclose(dense[0], expected)
        finest = haar_function_values(lat, -3, np.array([5]), np.array([[1.0, 0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(finest[0], lat.indicator(lat.cube(-3, 5)) * 8.0)

    def test_write_coefficients(self):
        test_dir = tempfile.mkdtemp()
        try:
            coeffs = analyze(constant(standard_lattice(1, -2), 2.0))
            path = write_haar_coefficients(coeffs, os.path.join(test_dir, "haar.csv"))
            with open(path, "r") as f:
                lines = f.read().splitlines()
            self.assertEqual(lines[0], "level,cube_index,j,value")
            self.assertEqual(lines[1], "0,,0,2")
            self.assertEqual(len(lines) - 1, coeffs.count())
        finally:
            shutil.rmtree(test_dir)


class TestWeightedHaar(unittest.TestCase):
    def test_lebesgue_spans_standard_system(self):
        lat = standard_lattice(2, -2)
        Q = CubeId(-1, (1, 1))
        basis = weighted_haar_basis(lebesgue(lat), Q)
        self.assertEqual(len(basis), 3)
        standard = [standard_haar(lat, Q, j).values for j in range(1, 4)]
        for fn in basis.functions:
            projection = sum(np.dot(fn.values, h) * lat.cell_volume * h for h in standard)
            np.testing.assert_allclose(projection, fn.values, atol=1e-12)

    def test_two_child_weights(self):
        lat = standard_lattice(1, -1)
        basis = weighted_haar_basis(Weight(lat, [3.0, 1.0]), CubeId(0, (0,)))
        self.assertEqual(len(basis), 1)
        np.testing.assert_allclose(basis.child_values[0], [1 / np.sqrt(6), -3 / np.sqrt(6)])

    @seed(23)
    @settings(max_examples=25, deadline=None)
    @given(w=arrays(np.float64, 16, elements=st.floats(0.05, 20.0)))
    def test_gram_is_identity(self, w):
        lat = standard_lattice(2, -2)
        mu = Weight(lat, w)
        basis = weighted_haar_basis(mu, CubeId(0, (0, 0)))
        gram = np.array([[mu_inner(a, b, mu) for b in basis.functions] for a in basis.functions])
        np.testing.assert_allclose(gram, np.eye(3), atol=1e-10)
        for fn in basis.functions:
            self.assertAlmostEqual(float(np.dot(fn.values, mu.values)), 0.0, places=9)

    def test_zero_measure_children_skipped(self):
        lat = standard_lattice(2, -1)
        mu = StepFunction(lat, [1.0, 0.0, 2.0, 0.0])
        self.assertEqual(len(weighted_haar_basis(mu, CubeId(0, (0, 0)))), 1)
        self.assertEqual(len(weighted_haar_basis(constant(lat, 0.0), CubeId(0, (0, 0)))), 0)

    def test_finest_level_rejected(self):
        lat = standard_lattice(1, -2)
        with self.assertRaises(ValueError):
            weighted_haar_basis(lebesgue(lat), CubeId(-2, (1,)))


class TestWeightedDelta(unittest.TestCase):
    def setUp(self):
        self.lat = sample_lattice(1, -4, 8)
        self.mu = Weight(self.lat, rng_stream(8, 1).uniform(0.2, 5.0, self.lat.n_cells))
        self.f = StepFunction(self.lat, rng_stream(8, 2).standard_normal(self.lat.n_cells))

    def test_constant_has_no_differences(self):
        delta = weighted_delta(constant(self.lat, 3.0), self.mu, self.lat.cube(-1, 1))
        np.testing.assert_allclose(delta.values, 0.0, atol=1e-12)

    def test_reconstruction(self):
        total = np.full(self.lat.n_cells, weighted_expectations(self.f, self.mu)[0][0])
        for k in range(0, self.lat.k_min, -1):
            for Q in self.lat.cubes(k):
                total += weighted_delta(self.f, self.mu, Q).values
        np.testing.assert_allclose(total, self.f.values, atol=1e-10)

    def test_orthogonal_across_cubes(self):
        g = StepFunction(self.lat, rng_stream(8, 3).standard_normal(self.lat.n_cells))
        Q, R = self.lat.cube(-1, 0), self.lat.cube(-2, 1)
        a = weighted_delta(self.f, self.mu, Q)
        b = weighted_delta(g, self.mu, R)
        self.assertAlmostEqual(mu_inner(a, b, self.mu), 0.0, places=10)

    def test_projection_is_idempotent_and_mean_zero(self):
        Q = self.lat.cube(-2, 3)
        once = weighted_delta(self.f, self.mu, Q)
        twice = weighted_delta(once, self.mu, Q)
        np.testing.assert_allclose(twice.values, once.values, atol=1e-12)
        self.assertAlmostEqual(float(np.dot(once.values[self.lat.cells(Q)], self.mu.values[self.lat.cells(Q)])), 0.0)


if __name__ == "__main__":
    unittest.main(verbosity=2)
