#!/usr/bin/env python3
"""
Likelihood Tests
================

Monte Carlo step densities against closed forms and quadrature, invariances
of the estimator, and the forward/Viterbi recursions.
"""

import itertools
import math
import os
import sys
import unittest

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import ndtr

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from errors import InputError, ModelError
from habitat import HabitatRaster, RsfParams, raster_from_codes, utilisation_grid
from kernels import (FixedRadiusKernel, GammaRadiusKernel, NormalKernel, gamma_log_tail, lens_area, normal_density,
                     sample_radius_truncated)
from likelihood import (McConfig, TrackLikelihood, forward_loglik, hmm_track_loglik, segments,
                        step_loglik_fixed_radius, step_loglik_gamma_radius, step_loglik_normal, track_loglik,
                        tracks_loglik, viterbi_path)
from simulator import HmmSpec, Track, simulate_track


def flat_raster(size=200.0):
    return HabitatRaster(0.0, 0.0, size, np.ones((1, 1, 1)), ("G",), categorical_groups=((0,),))


def patterned_raster(size=5):
    rows, cols = np.indices((size, size))
    codes = np.where((rows + cols) % 3 == 0, 1, 2)
    return raster_from_codes(codes, ("A", "B"), cell_size=1.0)


def quadrature_normal_step_density(raster, params, x, y, sigma, nodes=401):
    """
    p(y | x) for the normal kernel by quadrature over mu

    The endpoint normalizer int w(z) phi(z | mu) dz is exact for a
    piecewise-constant w: a sum over cells of products of normal CDF
    differences.
    """
    w = utilisation_grid(raster, params)
    xs = raster.origin_x + np.arange(raster.n_cols + 1) * raster.cell_size
    ys = raster.origin_y + np.arange(raster.n_rows + 1) * raster.cell_size

    mux = np.linspace(x[0] - 6 * sigma, x[0] + 6 * sigma, nodes)
    muy = np.linspace(x[1] - 6 * sigma, x[1] + 6 * sigma, nodes)
    h = (mux[1] - mux[0]) * (muy[1] - muy[0])
    px = np.diff(ndtr((xs[None, :] - mux[:, None]) / sigma), axis=1)
    py = np.diff(ndtr((ys[None, :] - muy[:, None]) / sigma), axis=1)
    denominator = py @ w @ px.T

    gx, gy = np.meshgrid(mux, muy)
    mu = np.stack([gx, gy], axis=-1)
    integrand = normal_density(mu, x, sigma) * normal_density(y, mu, sigma) / denominator
    rows, cols = int((y[1] - raster.origin_y) // raster.cell_size), int((y[0] - raster.origin_x) // raster.cell_size)
    return math.log(w[rows, cols] * integrand.sum() * h)


def quadrature_disc_step_density(raster, params, x, y, radii, refine=25):
    """
    p(y | x) for uniform-disc kernels by quadrature, averaged over radii

    w is resampled on a grid refine times finer than the raster and padded
    with zeros. The endpoint normalizer at every grid node is the mean of w
    over a pixelated disc (an FFT convolution); the integral over mu is the
    exact lens area times the mean of 1 / normalizer over the nodes in the lens.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    w = utilisation_grid(raster, params)
    h = raster.cell_size / refine
    pad = int(math.ceil(max(radii) / h)) + 2
    fine = np.pad(np.kron(w, np.ones((refine, refine))), pad)
    gx, gy = np.meshgrid(raster.origin_x + (np.arange(fine.shape[1]) - pad + 0.5) * h,
                         raster.origin_y + (np.arange(fine.shape[0]) - pad + 0.5) * h)
    d = float(np.hypot(*(y - x)))
    mid = (x + y) / 2.0
    rows, cols = int((y[1] - raster.origin_y) // raster.cell_size), int((y[0] - raster.origin_x) // raster.cell_size)

    densities = []
    for r in radii:
        k = int(math.ceil(r / h))
        offsets = np.arange(-k, k + 1) * h
        disc = (offsets[:, None] ** 2 + offsets[None, :] ** 2 <= r ** 2).astype(float)
        normalizer = fftconvolve(fine, disc, mode="same") / disc.sum()
        lens = (np.hypot(gx - x[0], gy - x[1]) <= r) & (np.hypot(gx - y[0], gy - y[1]) <= r)
        if lens.any():
            inverse = float(np.mean(1.0 / normalizer[lens]))
        else:
            inverse = 1.0 / normalizer.flat[np.argmin(np.hypot(gx - mid[0], gy - mid[1]))]
        densities.append(w[rows, cols] * lens_area(d, r) * inverse / (math.pi ** 2 * r ** 4))
    return math.log(np.mean(densities))


def quadrature_gamma_step_density(raster, params, x, y, shape, rate, nodes=32):
    """Midpoint rule over the quantiles of the radius truncated at half the step length"""
    lower = float(np.hypot(*(np.asarray(y) - x))) / 2.0
    radii = sample_radius_truncated(shape, rate, lower, (np.arange(nodes) + 0.5) / nodes)
    return float(gamma_log_tail(shape, rate, lower)) + quadrature_disc_step_density(raster, params, x, y, radii)


class TestStepDensities(unittest.TestCase):

    def test_flat_target_is_normal_convolution(self):
        sigma = 0.2
        mc = McConfig(n_c=1000, n_z=1000, seed=3)
        x = np.array([100.0, 100.0])
        for k, d in enumerate([0.0, 0.5 * sigma, sigma]):
            y = x + np.array([d, 0.0])
            step = step_loglik_normal(x, y, flat_raster(), RsfParams([0.0]), sigma, mc, step_index=k)
            expected = -d ** 2 / (4 * sigma ** 2) - math.log(4 * math.pi * sigma ** 2)
            self.assertTrue(step.contributing)
            self.assertAlmostEqual(step.value, expected, delta=0.02)

    def test_flat_target_fixed_radius_is_exact(self):
        r, d = 0.5, 0.6
        x = np.array([100.0, 100.0])
        step = step_loglik_fixed_radius(x, x + [0.0, d], flat_raster(), RsfParams([0.0]), r,
                                        McConfig(n_c=20, n_z=20))
        # Convolution of two uniform discs: lens area / (pi r^2)^2
        self.assertAlmostEqual(step.value, math.log(lens_area(d, r) / (math.pi ** 2 * r ** 4)), places=10)

    def test_normal_kernel_matches_quadrature(self):
        raster, params = patterned_raster(), RsfParams([1.0, 0.0])
        x, y, sigma = np.array([2.3, 2.6]), np.array([2.9, 2.2]), 0.6
        step = step_loglik_normal(x, y, raster, params, sigma, McConfig(n_c=500, n_z=500, seed=1))
        self.assertAlmostEqual(step.value, quadrature_normal_step_density(raster, params, x, y, sigma), delta=0.05)

    def test_fixed_radius_out_of_reach(self):
        x = np.array([100.0, 100.0])
        step = step_loglik_fixed_radius(x, x + [1.0, 0.0], flat_raster(), RsfParams([0.0]), 0.5, McConfig())
        self.assertEqual(step.value, -math.inf)
        self.assertTrue(step.contributing)

    def test_concentrated_gamma_radius_approaches_fixed_radius(self):
        r, x = 0.5, np.array([100.0, 100.0])
        y = x + [0.3, 0.4]
        mc = McConfig(n_c=40, n_z=40, n_r=30)
        fixed = step_loglik_fixed_radius(x, y, flat_raster(), RsfParams([0.0]), r, mc)
        gamma = step_loglik_gamma_radius(x, y, flat_raster(), RsfParams([0.0]), 1e4, 1e4 / r, mc)
        self.assertAlmostEqual(gamma.value, fixed.value, delta=0.05)

    def test_gamma_radius_reaches_long_steps(self):
        # Steps beyond any fixed radius still have finite density
        x = np.array([100.0, 100.0])
        step = step_loglik_gamma_radius(x, x + [2.0, 0.0], flat_raster(), RsfParams([0.0]), 0.7, 3.0,
                                        McConfig(n_c=20, n_z=20, n_r=20))
        self.assertTrue(np.isfinite(step.value))

    def test_missing_endpoint(self):
        step = step_loglik_normal([1.0, 1.0], [np.nan, np.nan], patterned_raster(), RsfParams([1.0, 0.0]), 0.3,
                                  McConfig())
        self.assertEqual(step.value, 0.0)
        self.assertFalse(step.contributing)

    def test_invalid_mc_sizes(self):
        with self.assertRaises(InputError):
            McConfig(n_c=0)
        with self.assertRaises(InputError):
            McConfig(seed=-1)


class TestRasterEdge(unittest.TestCase):
    """Steps whose kernels reach past the bounding rectangle of the raster"""

    def setUp(self):
        self.raster, self.params = patterned_raster(8), RsfParams([1.0, 0.0])

    def test_few_endpoint_samples_stay_finite(self):
        # Intermediate points up to two kernel widths off the map, three endpoints each
        raster = patterned_raster(20)
        x, y = np.array([0.05, 10.3]), np.array([0.12, 10.1])
        mc = McConfig(n_c=50, n_z=3, n_r=10, seed=1)
        steps = (step_loglik_normal(x, y, raster, self.params, 1.0, mc),
                 step_loglik_fixed_radius(x, y, raster, self.params, 1.0, mc),
                 step_loglik_gamma_radius(x, y, raster, self.params, 4.0, 4.0, mc))
        for step in steps:
            self.assertTrue(step.contributing)
            self.assertTrue(np.isfinite(step.value))

    def test_normal_kernel_matches_quadrature(self):
        x, y, sigma = np.array([0.15, 4.3]), np.array([0.35, 4.0]), 0.6
        step = step_loglik_normal(x, y, self.raster, self.params, sigma, McConfig(n_c=400, n_z=400, seed=2))
        self.assertAlmostEqual(step.value, quadrature_normal_step_density(self.raster, self.params, x, y, sigma),
                               delta=0.05)

    def test_fixed_radius_matches_quadrature(self):
        x, y, r = np.array([0.1, 4.3]), np.array([0.4, 4.6]), 0.8
        step = step_loglik_fixed_radius(x, y, self.raster, self.params, r, McConfig(n_c=400, n_z=400, seed=3))
        self.assertAlmostEqual(step.value, quadrature_disc_step_density(self.raster, self.params, x, y, [r]),
                               delta=0.05)

    def test_nodata_only_kernel_reports_track_time(self):
        valid = np.zeros((40, 40), dtype=bool)
        valid[20, 20] = True
        raster = HabitatRaster(0.0, 0.0, 1.0, np.ones((1, 40, 40)), ("A",), ((0,),), valid=valid)
        track = Track(np.array([[20.3, 20.5], [20.6, 20.4]]), start_time=7)
        tl = TrackLikelihood(track, raster, McConfig(n_c=20, n_z=2))
        np.testing.assert_array_equal(tl.times, [7])
        with self.assertRaises(ModelError) as ctx:
            tl.step_logliks(RsfParams([0.0]), NormalKernel(3.0))
        self.assertEqual(ctx.exception.step, 7)
        self.assertIn("t=7", str(ctx.exception))


class TestMonteCarloConvergence(unittest.TestCase):
    """Median absolute error against quadrature over 30 interior steps as n_c = n_z grows"""

    SIZES = (10, 50, 250)

    @classmethod
    def setUpClass(cls):
        cls.raster, cls.params = patterned_raster(8), RsfParams([1.0, 0.0])
        rng = np.random.default_rng(12)
        cls.x = rng.uniform(2.5, 5.5, size=(30, 2))
        cls.normal_y = cls.x + rng.normal(0.0, 0.5, size=(30, 2))
        angle = rng.uniform(-math.pi, math.pi, 30)
        length = rng.uniform(0.2, 1.3, 30)
        cls.disc_y = cls.x + np.stack([length * np.cos(angle), length * np.sin(angle)], axis=1)

    def assert_converges(self, estimate, exact):
        errors = {n: float(np.median([abs(estimate(k, McConfig(n_c=n, n_z=n, n_r=20, seed=5)) - exact[k])
                                      for k in range(len(exact))]))
                  for n in self.SIZES}
        self.assertLess(errors[50], errors[10])
        self.assertLess(errors[250], errors[10])
        self.assertLess(errors[250], 0.05)

    def test_normal_kernel(self):
        sigma = 0.5
        exact = [quadrature_normal_step_density(self.raster, self.params, x, y, sigma)
                 for x, y in zip(self.x, self.normal_y)]
        self.assert_converges(lambda k, mc: step_loglik_normal(self.x[k], self.normal_y[k], self.raster, self.params,
                                                               sigma, mc, step_index=k).value, exact)

    def test_fixed_radius(self):
        r = 0.8
        exact = [quadrature_disc_step_density(self.raster, self.params, x, y, [r])
                 for x, y in zip(self.x, self.disc_y)]
        self.assert_converges(lambda k, mc: step_loglik_fixed_radius(self.x[k], self.disc_y[k], self.raster,
                                                                     self.params, r, mc, step_index=k).value, exact)

    def test_gamma_radius(self):
        shape, rate = 4.0, 4.0
        exact = [quadrature_gamma_step_density(self.raster, self.params, x, y, shape, rate)
                 for x, y in zip(self.x, self.disc_y)]
        self.assert_converges(lambda k, mc: step_loglik_gamma_radius(self.x[k], self.disc_y[k], self.raster,
                                                                     self.params, shape, rate, mc,
                                                                     step_index=k).value, exact)


class TestEstimatorInvariances(unittest.TestCase):

    def setUp(self):
        self.raster = patterned_raster(20)
        self.track = simulate_track(40, [10.5, 10.5], NormalKernel(0.4), self.raster, RsfParams([1.0, 0.0]),
                                    K=50, seed=21)
        self.mc = McConfig(n_c=30, n_z=30, seed=4)

    def test_beta_shift_invariance(self):
        tl = TrackLikelihood(self.track, self.raster, self.mc)
        for kernel in (NormalKernel(0.4), FixedRadiusKernel(0.8), GammaRadiusKernel(0.7, 3.0)):
            base = tl.step_logliks(RsfParams([1.0, 0.0]), kernel)
            shifted = tl.step_logliks(RsfParams([3.5, 2.5]), kernel)
            finite = np.isfinite(base)
            np.testing.assert_array_equal(finite, np.isfinite(shifted))
            np.testing.assert_allclose(shifted[finite], base[finite], rtol=0, atol=1e-12)

    def test_step_values_do_not_depend_on_evaluation_order(self):
        params = RsfParams([1.0, 0.0])
        for kernel, single in ((NormalKernel(0.4), lambda x, y, t: step_loglik_normal(
                                    x, y, self.raster, params, 0.4, self.mc, step_index=t, track_index=2)),
                               (FixedRadiusKernel(0.8), lambda x, y, t: step_loglik_fixed_radius(
                                    x, y, self.raster, params, 0.8, self.mc, step_index=t, track_index=2))):
            values = TrackLikelihood(self.track, self.raster, self.mc, track_index=2).step_logliks(params, kernel)
            points = self.track.points
            for t in reversed(range(len(self.track) - 1)):
                expected = single(points[t], points[t + 1], t).value
                if np.isfinite(expected):
                    self.assertAlmostEqual(values[t], expected, places=12)
                else:
                    self.assertEqual(values[t], expected)

    def test_common_random_numbers(self):
        params, kernel = RsfParams([1.0, 0.0]), NormalKernel(0.4)
        a = track_loglik(self.track, self.raster, params, kernel, self.mc)
        b = track_loglik(self.track, self.raster, params, kernel, self.mc)
        c = track_loglik(self.track, self.raster, params, kernel, McConfig(n_c=30, n_z=30, seed=5))
        self.assertEqual(a, b)
        self.assertNotEqual(a, c)

    def test_missing_locations_are_skipped(self):
        points = self.track.points.copy()[:6]
        points[2] = np.nan
        gappy = Track(points)
        params, kernel = RsfParams([1.0, 0.0]), NormalKernel(0.4)
        tl = TrackLikelihood(gappy, self.raster, self.mc)
        np.testing.assert_array_equal(tl.steps, [0, 3, 4])
        expected = sum(step_loglik_normal(points[t], points[t + 1], self.raster, params, 0.4, self.mc,
                                          step_index=t).value for t in range(5))
        self.assertAlmostEqual(track_loglik(gappy, self.raster, params, kernel, self.mc), expected, places=10)

    def test_tracks_are_independent(self):
        params, kernel = RsfParams([1.0, 0.0]), NormalKernel(0.4)
        other = simulate_track(20, [9.5, 11.5], NormalKernel(0.4), self.raster, params, K=50, seed=22)
        joint = tracks_loglik([self.track, other], self.raster, params, kernel, self.mc)
        separate = (track_loglik(self.track, self.raster, params, kernel, self.mc, track_index=0)
                    + track_loglik(other, self.raster, params, kernel, self.mc, track_index=1))
        self.assertAlmostEqual(joint, separate, places=10)

    def test_single_state_hmm_is_plain_likelihood(self):
        params = RsfParams([1.0, 0.0])
        hmm = HmmSpec([[1.0]], (NormalKernel(0.4),))
        self.assertAlmostEqual(hmm_track_loglik(self.track, self.raster, params, hmm, self.mc),
                               track_loglik(self.track, self.raster, params, NormalKernel(0.4), self.mc),
                               places=10)


def brute_force_loglik(log_p, steps, gamma, delta0):
    total = 0.0
    for seg in segments(steps):
        likelihood = 0.0
        for path in itertools.product(range(len(delta0)), repeat=len(seg)):
            prob = delta0[path[0]] * math.exp(log_p[seg[0], path[0]])
            for j in range(1, len(seg)):
                prob *= gamma[path[j - 1], path[j]] * math.exp(log_p[seg[j], path[j]])
            likelihood += prob
        total += math.log(likelihood)
    return total


class TestHmmRecursions(unittest.TestCase):

    def test_forward_matches_enumeration(self):
        rng = np.random.default_rng(8)
        for n_states in (2, 3):
            for n_steps in range(1, 6):
                log_p = rng.normal(-1.0, 2.0, size=(n_steps, n_states))
                gamma = rng.dirichlet(np.ones(n_states), size=n_states)
                delta0 = rng.dirichlet(np.ones(n_states))
                steps = np.arange(n_steps)
                self.assertAlmostEqual(forward_loglik(log_p, steps, gamma, delta0),
                                       brute_force_loglik(log_p, steps, gamma, delta0), delta=1e-10)

    def test_gaps_restart_the_chain(self):
        rng = np.random.default_rng(9)
        log_p = rng.normal(size=(4, 2))
        gamma = np.array([[0.8, 0.2], [0.3, 0.7]])
        delta0 = np.array([0.6, 0.4])
        steps = np.array([0, 1, 3, 4])
        expected = (forward_loglik(log_p[:2], np.arange(2), gamma, delta0)
                    + forward_loglik(log_p[2:], np.arange(2), gamma, delta0))
        self.assertAlmostEqual(forward_loglik(log_p, steps, gamma, delta0), expected, places=12)
        self.assertAlmostEqual(forward_loglik(log_p, steps, gamma, delta0),
                               brute_force_loglik(log_p, steps, gamma, delta0), delta=1e-10)

    def test_segments(self):
        parts = segments(np.array([0, 1, 2, 5, 6, 9]))
        self.assertEqual([p.tolist() for p in parts], [[0, 1, 2], [3, 4], [5]])
        self.assertEqual(segments(np.array([], dtype=int)), [])

    def test_viterbi_identity_transitions(self):
        # With Gamma = I the path is constant; the state with the larger total wins
        log_p = np.array([[0.0, -1.0], [-3.0, 0.0], [0.0, -0.5]])
        path = viterbi_path(log_p, np.arange(3), np.eye(2), np.array([0.5, 0.5]))
        np.testing.assert_array_equal(path, [1, 1, 1])

    def test_viterbi_matches_enumeration(self):
        rng = np.random.default_rng(10)
        log_p = rng.normal(size=(5, 3))
        gamma = rng.dirichlet(np.ones(3), size=3)
        delta0 = rng.dirichlet(np.ones(3))
        best, best_score = None, -math.inf
        for path in itertools.product(range(3), repeat=5):
            score = math.log(delta0[path[0]]) + log_p[0, path[0]]
            for j in range(1, 5):
                score += math.log(gamma[path[j - 1], path[j]]) + log_p[j, path[j]]
            if score > best_score:
                best, best_score = path, score
        np.testing.assert_array_equal(viterbi_path(log_p, np.arange(5), gamma, delta0), best)

    def test_viterbi_ties_go_to_lower_state(self):
        log_p = np.zeros((4, 2))
        path = viterbi_path(log_p, np.arange(4), np.full((2, 2), 0.5), np.array([0.5, 0.5]))
        np.testing.assert_array_equal(path, [0, 0, 0, 0])

    def test_decoded_rows_without_steps(self):
        raster = patterned_raster(20)
        points = np.array([[10.5, 10.5], [10.7, 10.4], [np.nan, np.nan], [11.5, 11.5], [11.6, 11.4]])
        hmm = HmmSpec([[0.9, 0.1], [0.1, 0.9]], (NormalKernel(0.1), NormalKernel(1.0)))
        decoded = TrackLikelihood(Track(points), raster, McConfig(n_c=20, n_z=20)).viterbi(RsfParams([1.0, 0.0]),
                                                                                             hmm)
        self.assertEqual(decoded.shape, (5,))
        self.assertEqual(decoded[1], -1)
        self.assertEqual(decoded[2], -1)
        self.assertEqual(decoded[4], -1)
        self.assertTrue(set(decoded[[0, 3]]) <= {0, 1})


if __name__ == "__main__":
    unittest.main()
