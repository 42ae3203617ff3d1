import itertools
import os
import shutil
import tempfile
import unittest

import numpy as np

from dyadlab.lattice import CubeId, GoodnessParams, Lattice, long_distance, sample_lattice, standard_lattice
from dyadlab.represent import (
    ANTISYMMETRY_Z_BOUND,
    AveragedKernel,
    CZCoefficients,
    antisymmetry_defect,
    average_kernel,
    coefficient_decay_check,
    cz_coefficients,
    decay_bound,
    exact_translation_average,
    extract_shift,
    hilbert_kernel,
    kernel_quadrature,
    octave_flatness,
    petermichl_profile,
    pi0_level,
    pi_good_given_R,
    representation_weight,
    rho_qr,
    shift_ensemble,
    shift_pairs,
    write_averaged_kernel,
    write_decay_report,
)
from dyadlab.shift import dense_kernel, haar_multiplier, normalization_audit, petermichl_shift
from dyadlab.utils import fit_loglog


def zero_kernel(x, y):
    return np.zeros_like(x)


def symmetric_kernel(x, y):
    return 1.0 / np.abs(x - y)


class TestGoodnessProbabilities(unittest.TestCase):
    def test_pi0_level(self):
        self.assertEqual(pi0_level(0.25, 2), 14)
        self.assertEqual(pi0_level(0.5, 1), 5)

    def test_touching_offset_is_never_good(self):
        est = pi_good_given_R([0], 4, GoodnessParams(r0=1, gamma=0.25), 50, seed=0)
        self.assertEqual(est.estimate, 0.0)
        self.assertEqual(est.standard_error, 0.0)
        self.assertEqual(est.s0, 11)

    def test_central_offset_without_resampling(self):
        params = GoodnessParams(r0=4, gamma=0.5)
        est = pi_good_given_R([16], 6, params, 100, seed=0, horizon=6)
        self.assertEqual(est.estimate, 1.0)
        self.assertEqual(est.standard_error, 0.0)
        self.assertEqual(pi_good_given_R([16, 16], 6, params, 100, seed=0, horizon=6).estimate, 1.0)

    def test_resampled_estimate(self):
        params = GoodnessParams(r0=4, gamma=0.5)
        a = pi_good_given_R([16], 6, params, 500, seed=4)
        b = pi_good_given_R([16], 6, params, 500, seed=4)
        self.assertEqual(a.estimate, b.estimate)
        self.assertGreaterEqual(a.estimate, 0.0)
        self.assertLessEqual(a.estimate, 1.0)

    def test_invalid_arguments(self):
        params = GoodnessParams(r0=1, gamma=0.25)
        with self.assertRaises(ValueError) as context:
            pi_good_given_R([0], 3, params, 0, seed=0)
        self.assertIn("n_samples must be >= 1", str(context.exception))
        with self.assertRaises(ValueError) as context:
            pi_good_given_R([4], 2, params, 10, seed=0)
        self.assertIn("does not lie inside", str(context.exception))


class TestRho(unittest.TestCase):
    def test_root_pair(self):
        lat = sample_lattice(1, -5, 2)
        root = CubeId(0, (0,))
        est = rho_qr(lat, root, root, 1.0, GoodnessParams(r0=1, gamma=0.25), 10, seed=0)
        # D(root, root) = 2, one common ancestor of side 1
        self.assertEqual(est.estimate, 4.0)
        self.assertEqual(est.standard_error, 0.0)

    def test_bad_cube_contributes_nothing(self):
        lat = standard_lattice(1, -6)
        est = rho_qr(lat, CubeId(-6, (0,)), CubeId(-3, (0,)), 1.0, GoodnessParams(r0=1, gamma=0.5), 20, seed=0)
        self.assertEqual(est.estimate, 0.0)

    def test_sampled_value_is_non_negative(self):
        lat = sample_lattice(1, -6, 5)
        Q = lat.cube(-4, 5)
        est = rho_qr(lat, Q, lat.ancestor(Q, 2), 1.0, GoodnessParams(r0=1, gamma=0.25), 200, seed=1)
        self.assertGreaterEqual(est.estimate, 0.0)
        self.assertTrue(np.isfinite(est.standard_error))

    def test_level_order(self):
        lat = standard_lattice(1, -4)
        with self.assertRaises(ValueError) as context:
            rho_qr(lat, CubeId(-1, (0,)), CubeId(-2, (0,)), 1.0, GoodnessParams(r0=1, gamma=0.25), 10, seed=0)
        self.assertIn("needs l(Q) <= l(R)", str(context.exception))


class TestKernelQuadrature(unittest.TestCase):
    def test_hilbert_kernel(self):
        np.testing.assert_array_equal(hilbert_kernel(np.array([0.75]), np.array([0.25])), [2.0])

    def test_antisymmetry(self):
        lat = standard_lattice(1, -5)
        for refine in (1, 2):
            quad = kernel_quadrature(hilbert_kernel, lat, refine)
            np.testing.assert_allclose(quad.matrix, -quad.matrix.T, atol=1e-9)
            np.testing.assert_allclose(quad.t1, -quad.t_star1, atol=1e-9)
        np.testing.assert_array_equal(np.diag(kernel_quadrature(hilbert_kernel, lat).matrix), 0.0)

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError) as context:
            kernel_quadrature(hilbert_kernel, standard_lattice(2, -2))
        self.assertIn("dimension 1", str(context.exception))
        with self.assertRaises(ValueError):
            kernel_quadrature(hilbert_kernel, standard_lattice(1, -2), refine=0)


class TestCZCoefficients(unittest.TestCase):
    def test_zero_kernel(self):
        lat = sample_lattice(1, -5, 1)
        pairs = shift_pairs(lat, 1, 0)
        coeffs = cz_coefficients(zero_kernel, lat, pairs)
        np.testing.assert_array_equal(coeffs.values, 0.0)
        self.assertEqual(len(coeffs.pairs) + len(coeffs.flagged), len(pairs))

    def test_adjacent_pairs_are_flagged(self):
        lat = standard_lattice(1, -4)
        near = (CubeId(-3, (0,)), CubeId(-3, (1,)))
        far = (CubeId(-3, (0,)), CubeId(-3, (4,)))
        with self.assertLogs("dyadlab", level="WARNING") as logs:
            coeffs = cz_coefficients(hilbert_kernel, lat, [near, far])
        self.assertEqual(coeffs.flagged, [near])
        self.assertEqual(coeffs.pairs, [far])
        self.assertIn("excluded", logs.output[0])

    def test_finest_level_rejected(self):
        lat = standard_lattice(1, -3)
        with self.assertRaises(ValueError) as context:
            cz_coefficients(hilbert_kernel, lat, [(CubeId(-3, (0,)), CubeId(-1, (1,)))])
        self.assertIn("finest level", str(context.exception))

    def test_decay_bound(self):
        lat = standard_lattice(1, -4)
        # D = 1/4 + 1/4 + 1/4
        self.assertAlmostEqual(decay_bound(lat, CubeId(-2, (0,)), CubeId(-2, (2,)), 1.0), 1.0 / 9.0)

    def test_hilbert_coefficients_decay(self):
        lat = standard_lattice(1, -8)
        Q = CubeId(-5, (0,))
        pairs = [(Q, CubeId(-5, (j,))) for j in range(2, 16)]
        coeffs = cz_coefficients(hilbert_kernel, lat, pairs)
        self.assertEqual(coeffs.flagged, [])
        distances = [long_distance(lat, a, b) for a, b in coeffs.pairs]
        fit = fit_loglog(distances, np.abs(coeffs.values))
        self.assertEqual(fit.point_count, 14)
        self.assertLess(fit.slope, -1.7)

    def test_decay_check(self):
        lat = sample_lattice(1, -6, 1)
        with self.assertLogs("dyadlab", level="WARNING"):
            coeffs = cz_coefficients(hilbert_kernel, lat, shift_pairs(lat, 0, 1))
        # (M, child) pairs with the child one level above the finest
        self.assertEqual(len(coeffs.flagged), 32)
        report = coefficient_decay_check(coeffs, 1.0, GoodnessParams(r0=2, gamma=0.25))
        self.assertGreater(len(report.entries), 0)
        self.assertEqual(report.fitted_constant, report.max_ratio)
        self.assertTrue(all(e.ratio <= report.fitted_constant for e in report.entries))

    def test_decay_check_needs_a_good_cube(self):
        lat = standard_lattice(1, -6)
        coeffs = cz_coefficients(hilbert_kernel, lat, [(CubeId(-4, (0,)), CubeId(-4, (5,)))])
        with self.assertRaises(ValueError) as context:
            coefficient_decay_check(coeffs, 1.0, GoodnessParams(r0=1, gamma=1e-6))
        self.assertIn("No pair with a good smaller cube", str(context.exception))


class TestExtraction(unittest.TestCase):
    def test_shift_pairs(self):
        lat = standard_lattice(1, -3)
        diagonal = shift_pairs(lat, 0, 0)
        self.assertEqual(len(diagonal), 4 + 2 + 1)
        self.assertTrue(all(a == b for a, b in diagonal))
        down = shift_pairs(lat, 1, 0)
        self.assertEqual(len(down), 6)
        for child, M in down:
            self.assertEqual(lat.parent(child), M)
        self.assertEqual([(b, a) for a, b in shift_pairs(lat, 0, 1)], down)

    def test_representation_weight(self):
        self.assertEqual(representation_weight(0, 0, 1.0), 1.0)
        self.assertEqual(representation_weight(1, 1, 1.0), 0.5)
        self.assertEqual(representation_weight(1, 2, 2.0), 2.0**-3)

    def test_zero_kernel_gives_zero_shift(self):
        lat = sample_lattice(1, -5, 3)
        coeffs = cz_coefficients(zero_kernel, lat, shift_pairs(lat, 1, 0))
        S = extract_shift(coeffs, 1, 0, 1.0, 1.0, GoodnessParams(r0=2, gamma=0.25))
        self.assertTrue(S.is_zero())
        self.assertEqual(S.rescale_factor, 1.0)

    def test_hilbert_extraction_is_normalized(self):
        lat = sample_lattice(1, -6, 7)
        params = GoodnessParams(r0=2, gamma=0.25)
        quad = kernel_quadrature(hilbert_kernel, lat)
        coeffs = cz_coefficients(hilbert_kernel, lat, shift_pairs(lat, 0, 1), quadrature=quad)
        C = coefficient_decay_check(coeffs, 1.0, params).fitted_constant
        S = extract_shift(coeffs, 0, 1, 1.0, C, params)
        self.assertEqual((S.m, S.n), (0, 1))
        self.assertFalse(S.is_zero())
        self.assertEqual(S.rescale_factor, 1.0)
        self.assertTrue(normalization_audit(S)[0])

    def test_invalid_inputs(self):
        lat = standard_lattice(1, -4)
        params = GoodnessParams(r0=10, gamma=0.25)
        with self.assertRaises(ValueError) as context:
            extract_shift(CZCoefficients(lat, [], np.zeros(0)), 0, 0, 1.0, 0.0, params)
        self.assertIn("Decay constant must be positive", str(context.exception))
        with self.assertRaises(ValueError) as context:
            extract_shift(CZCoefficients(standard_lattice(2, -2), [], np.zeros(0)), 0, 0, 1.0, 1.0, params)
        self.assertIn("dimension 1", str(context.exception))
        with self.assertRaises(ValueError) as context:
            extract_shift(CZCoefficients(lat, [], np.zeros(0)), 0, 0, 1.0, 1.0, params)
        self.assertIn("Missing coefficient", str(context.exception))

    def test_ensemble(self):
        params = GoodnessParams(r0=2, gamma=0.25)
        ensemble = shift_ensemble(symmetric_kernel, -5, 1.0, params, n_lattices=2, seed=3)
        self.assertEqual(len(ensemble.samples), 2 * 3)
        self.assertEqual({(s.m, s.n) for s in ensemble.samples}, {(0, 0), (1, 0), (1, 1)})
        self.assertTrue(ensemble.weights_exact())
        for sample in ensemble.samples:
            self.assertTrue(normalization_audit(sample.shift)[0])


class TestAveragedKernel(unittest.TestCase):
    def test_accumulator(self):
        A = np.array([[0.0, 1.0], [-1.0, 0.0]])
        kernel = AveragedKernel()
        with self.assertRaises(ValueError) as context:
            kernel.matrix
        self.assertIn("no samples", str(context.exception))
        kernel.add(A)
        kernel.add(A)
        np.testing.assert_array_equal(kernel.matrix, A)
        np.testing.assert_array_equal(kernel.standard_error, 0.0)
        self.assertEqual(kernel.antisymmetry_z(), 0.0)
        symmetric = AveragedKernel()
        symmetric.add(np.ones((2, 2)))
        symmetric.add(np.ones((2, 2)))
        self.assertEqual(symmetric.antisymmetry_z(), float("inf"))

    def test_exact_average_matches_enumeration(self):
        k_min = -4
        total = np.zeros((16, 16))
        for bits in itertools.product((0, 1), repeat=-k_min):
            lat = Lattice(1, k_min, tuple((b,) for b in bits))
            total += dense_kernel(petermichl_shift(lat))
        exact = exact_translation_average(petermichl_shift, 1, k_min)
        np.testing.assert_allclose(exact, total / 2**-k_min, atol=1e-12)

    def test_translation_shortcut_matches_direct_average(self):
        direct = average_kernel(petermichl_shift, 1, -4, 6, seed=2)
        shortcut = average_kernel(petermichl_shift, 1, -4, 6, seed=2, translation_invariant=True)
        self.assertEqual(direct.n_samples, 6)
        np.testing.assert_allclose(shortcut.matrix, direct.matrix, atol=1e-12)

    def test_sample_count_validated(self):
        with self.assertRaises(ValueError) as context:
            average_kernel(petermichl_shift, 1, -3, 0, seed=0)
        self.assertIn("n_samples must be >= 1", str(context.exception))

    def test_exact_petermichl_average_is_antisymmetric(self):
        exact = exact_translation_average(petermichl_shift, 1, -6)
        self.assertGreater(np.abs(exact).max(), 0.0)
        self.assertLessEqual(antisymmetry_defect(exact), 1e-12)
        self.assertLessEqual(np.abs(exact + exact.T).max(), 1e-12 * np.abs(exact).max())

    def test_single_lattice_kernel_is_not_antisymmetric(self):
        K = dense_kernel(petermichl_shift(standard_lattice(1, -4)))
        self.assertGreater(antisymmetry_defect(K), 0.1)
        self.assertEqual(antisymmetry_defect(np.zeros((4, 4))), 0.0)

    def test_sampled_petermichl_average_is_antisymmetric(self):
        averaged = average_kernel(petermichl_shift, 1, -4, 2000, seed=11, translation_invariant=True)
        self.assertLessEqual(averaged.antisymmetry_z(), ANTISYMMETRY_Z_BOUND)
        self.assertTrue(averaged.is_antisymmetric())
        scores = averaged.antisymmetry_scores()
        self.assertEqual(scores.shape, (16, 16))
        self.assertTrue(np.all(np.isfinite(scores)))

    def test_symmetric_family_fails_antisymmetry(self):
        averaged = average_kernel(haar_multiplier, 1, -4, 50, seed=3, translation_invariant=True)
        self.assertFalse(averaged.is_antisymmetric())
        self.assertGreater(antisymmetry_defect(averaged.matrix), 1.0)

    def test_profile(self):
        np.testing.assert_allclose(petermichl_profile([0.5, 0.75, 1.0]), [-0.25, -0.09375, -0.25])
        self.assertAlmostEqual(float(petermichl_profile(0.75 - 1e-12)), float(petermichl_profile(0.75 + 1e-12)))

    def test_octave_flatness(self):
        lat = standard_lattice(1, -4)
        octaves = octave_flatness(exact_translation_average(petermichl_shift, 1, -4), lat)
        self.assertEqual([level for level, _, _ in octaves], [-3, -2, -1])
        for _, low, high in octaves:
            self.assertLessEqual(low, high)
        with self.assertRaises(ValueError):
            octave_flatness(np.zeros((16, 16)), standard_lattice(2, -2))


class TestWriters(unittest.TestCase):
    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_averaged_kernel_file(self):
        kernel = average_kernel(petermichl_shift, 1, -2, 3, seed=0)
        path = write_averaged_kernel(kernel, os.path.join(self.test_dir, "kernel.csv"))
        with open(path, "r") as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], "# samples=3")
        self.assertEqual(lines[1], "x_cell,y_cell,mean,standard_error")
        self.assertEqual(len(lines), 2 + 16)

    def test_decay_report_file(self):
        lat = standard_lattice(1, -5)
        coeffs = cz_coefficients(hilbert_kernel, lat, [(CubeId(-2, (0,)), CubeId(-2, (2,)))])
        report = coefficient_decay_check(coeffs, 1.0, GoodnessParams(r0=2, gamma=0.25))
        path = write_decay_report(report, os.path.join(self.test_dir, "decay.csv"))
        with open(path, "r") as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], "q_level,q_index,r_level,r_index,coefficient,bound,ratio,long_distance")
        self.assertTrue(lines[1].startswith("-2,0,-2,2,"))


if __name__ == "__main__":
    unittest.main(verbosity=2)
