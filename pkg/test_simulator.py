#!/usr/bin/env python3
"""
Simulator Tests
===============

The local Gibbs step, track simulation (single and state-switching), the
stationarity of the local Gibbs transition kernel, and the track CSV format.
"""

import math
import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
from scipy import stats

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from errors import InputError, ModelError
from habitat import HabitatRaster, RsfParams, SelectionSurface, raster_from_codes
from kernels import FixedRadiusKernel, GammaRadiusKernel, NormalKernel, normal_density
from simulator import (FROM_TARGET, HmmSpec, Track, local_gibbs_step, read_track_csv, sample_from_target,
                       simulate_multistate, simulate_track, simulate_visiting_all, stationary_distribution,
                       visited_categories, write_track_csv)


def flat_raster(size=200.0):
    return HabitatRaster(0.0, 0.0, size, np.ones((1, 1, 1)), ("G",), categorical_groups=((0,),))


def small_raster():
    rows, cols = np.indices((5, 5))
    codes = np.where((rows + cols) % 3 == 0, 1, 2)
    return raster_from_codes(codes, ("A", "B"), cell_size=1.0)


def lattice_transition_matrix(raster, params, kernel, nodes_per_cell, margin_cells):
    """
    Cell-to-cell transition matrix of the local Gibbs kernel by quadrature

    Locations are the cell centres; intermediate points run over a lattice
    aligned with them, so every centre sees the same set of offsets.
    Returns (P, w) with w the RSF value of every cell.
    """
    n = nodes_per_cell
    n_cells = raster.n_rows * raster.n_cols
    w = np.exp(SelectionSurface(raster, params).log_w(raster.cell_centers().reshape(-1, 2)))
    rows, cols = np.divmod(np.arange(n_cells), raster.n_cols)
    centres = np.stack([cols * n, rows * n], axis=1)

    m = margin_cells * n
    gx, gy = np.meshgrid(np.arange(-m, (raster.n_cols - 1) * n + m + 1),
                         np.arange(-m, (raster.n_rows - 1) * n + m + 1))
    lattice = np.stack([gx.ravel(), gy.ravel()], axis=1)
    offsets = lattice[None, :, :] - centres[:, None, :]
    h = raster.cell_size / n

    if isinstance(kernel, NormalKernel):
        phi = normal_density(offsets * h, np.zeros(2), kernel.sigma)
    else:
        r_nodes = int(round(kernel.radius / h))
        phi = (np.sum(offsets ** 2, axis=-1) <= r_nodes ** 2) / (math.pi * kernel.radius ** 2)

    denominator = (w[:, None] * phi).sum(axis=0)
    inverse = np.divide(1.0, denominator, out=np.zeros_like(denominator), where=denominator > 0)
    mass = phi.sum(axis=1)
    return (phi * inverse) @ phi.T * w[None, :] / mass[:, None], w


class TestStationarity(unittest.TestCase):
    """The local Gibbs kernel leaves the utilisation distribution invariant"""

    def check_balance(self, kernel, nodes_per_cell, margin_cells):
        raster = small_raster()
        P, w = lattice_transition_matrix(raster, RsfParams([1.0, 0.0]), kernel, nodes_per_cell, margin_cells)
        pi = w / w.sum()
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(pi @ P, pi, atol=1e-6)
        flux = pi[:, None] * P
        np.testing.assert_allclose(flux, flux.T, atol=1e-6)

    def test_normal_kernel(self):
        self.check_balance(NormalKernel(1.5), nodes_per_cell=20, margin_cells=9)

    def test_fixed_radius_kernel(self):
        self.check_balance(FixedRadiusKernel(2.0), nodes_per_cell=40, margin_cells=2)


class TestLocalGibbsStep(unittest.TestCase):

    def test_flat_target_steps_are_rayleigh(self):
        surface = SelectionSurface(flat_raster(), RsfParams([0.0]))
        rng = np.random.default_rng(11)
        x = np.array([100.0, 100.0])
        steps = np.array([local_gibbs_step(x, NormalKernel(0.2), surface, 20, rng) for _ in range(20_000)])
        lengths = np.hypot(*(steps - x).T)
        result = stats.kstest(lengths, stats.rayleigh(scale=math.sqrt(2.0) * 0.2).cdf)
        self.assertGreater(result.pvalue, 0.001)

    def test_fixed_radius_steps_are_bounded(self):
        surface = SelectionSurface(flat_raster(), RsfParams([0.0]))
        rng = np.random.default_rng(12)
        x = np.array([100.0, 100.0])
        lengths = [np.hypot(*(local_gibbs_step(x, FixedRadiusKernel(0.5), surface, 10, rng) - x))
                   for _ in range(2000)]
        self.assertLessEqual(max(lengths), 1.0)
        self.assertGreater(max(lengths), 0.8)

    def test_candidates_outside_are_never_chosen(self):
        raster = small_raster()
        surface = SelectionSurface(raster, RsfParams([1.0, 0.0]))
        rng = np.random.default_rng(13)
        x = np.array([0.1, 0.1])
        for _ in range(500):
            self.assertTrue(np.isfinite(surface.log_w(local_gibbs_step(x, NormalKernel(1.0), surface, 5, rng))))

    def test_gives_up_after_redraws(self):
        raster = HabitatRaster(0.0, 0.0, 1e-6, np.ones((1, 1, 1)), ("G",))
        surface = SelectionSurface(raster, RsfParams([0.0]))
        with self.assertRaises(ModelError):
            local_gibbs_step(np.zeros(2), NormalKernel(10.0), surface, 1, np.random.default_rng(0))

    def test_candidate_count(self):
        surface = SelectionSurface(flat_raster(), RsfParams([0.0]))
        with self.assertRaises(InputError):
            local_gibbs_step(np.ones(2), NormalKernel(0.2), surface, 0, np.random.default_rng(0))

    def test_target_draws_are_inside(self):
        raster = small_raster()
        surface = SelectionSurface(raster, RsfParams([5.0, 0.0]))
        rng = np.random.default_rng(14)
        draws = np.array([sample_from_target(surface, rng) for _ in range(300)])
        # With beta_A = 5 nearly every draw lands in category A
        in_a = surface.log_w(draws) == 5.0
        self.assertGreater(in_a.mean(), 0.9)


class TestSimulateTrack(unittest.TestCase):

    def test_deterministic_given_seed(self):
        raster = small_raster()
        params = RsfParams([1.0, 0.0])
        a = simulate_track(50, FROM_TARGET, NormalKernel(0.4), raster, params, K=20, seed=3)
        b = simulate_track(50, FROM_TARGET, NormalKernel(0.4), raster, params, K=20, seed=3)
        np.testing.assert_array_equal(a.points, b.points)
        self.assertEqual(len(a), 50)

    def test_occupancy_matches_utilisation(self):
        raster = small_raster()
        params = RsfParams([1.0, 0.0])
        track = simulate_track(30_000, FROM_TARGET, NormalKernel(0.5), raster, params, K=200, seed=4)
        in_a = SelectionSurface(raster, params).log_w(track.points) == 1.0
        n_a = int(raster.layers[0].sum())
        expected = math.e * n_a / (math.e * n_a + (25 - n_a))
        self.assertAlmostEqual(float(in_a.mean()), expected, delta=0.03)

    def test_gamma_radius_track_stays_inside(self):
        raster = small_raster()
        params = RsfParams([1.0, 0.0])
        track = simulate_track(200, [2.5, 2.5], GammaRadiusKernel(0.7, 3.0), raster, params, K=30, seed=5)
        self.assertTrue(np.all(np.isfinite(SelectionSurface(raster, params).log_w(track.points))))
        np.testing.assert_array_equal(track.points[0], [2.5, 2.5])

    def test_invalid_initial_location(self):
        with self.assertRaises(InputError):
            simulate_track(10, [-1.0, 2.0], NormalKernel(0.2), small_raster(), RsfParams([1.0, 0.0]))
        with self.assertRaises(InputError):
            simulate_track(1, FROM_TARGET, NormalKernel(0.2), small_raster(), RsfParams([1.0, 0.0]))


class TestStateSwitching(unittest.TestCase):

    def test_stationary_distribution(self):
        np.testing.assert_allclose(stationary_distribution(np.array([[0.9, 0.1], [0.3, 0.7]])), [0.75, 0.25])

    def test_hmm_validation(self):
        kernels = (NormalKernel(0.2), NormalKernel(1.0))
        with self.assertRaises(InputError):
            HmmSpec(np.array([[0.9, 0.2], [0.1, 0.9]]), kernels)
        with self.assertRaises(InputError):
            HmmSpec(np.eye(2), kernels, delta0=[0.5, 0.6])
        with self.assertRaises(InputError):
            HmmSpec(np.eye(3), kernels)

    def test_absorbing_chain(self):
        hmm = HmmSpec(np.eye(2), (NormalKernel(0.2), NormalKernel(1.0)), delta0=[1.0, 0.0])
        track, states = simulate_multistate(100, FROM_TARGET, hmm, small_raster(), RsfParams([1.0, 0.0]),
                                            K=10, seed=6)
        self.assertTrue(np.all(states == 0))
        np.testing.assert_array_equal(track.states, states)

    def test_switching_rate(self):
        hmm = HmmSpec(np.array([[0.9, 0.1], [0.1, 0.9]]), (NormalKernel(0.2), NormalKernel(1.0)))
        _, states = simulate_multistate(4000, FROM_TARGET, hmm, small_raster(), RsfParams([1.0, 0.0]),
                                        K=10, seed=7)
        switches = np.mean(states[1:] != states[:-1])
        self.assertAlmostEqual(float(switches), 0.1, delta=0.025)

    def test_fast_state_moves_further(self):
        hmm = HmmSpec(np.array([[0.9, 0.1], [0.1, 0.9]]), (NormalKernel(0.05), NormalKernel(0.5)))
        raster = flat_raster(size=1000.0)
        track, states = simulate_multistate(2000, [500.0, 500.0], hmm, raster, RsfParams([0.0]), K=5, seed=8)
        lengths = np.hypot(*np.diff(track.points, axis=0).T)
        self.assertLess(np.median(lengths[states[:-1] == 0]), np.median(lengths[states[:-1] == 1]) / 4)


class TestCategories(unittest.TestCase):

    def test_visited_categories(self):
        raster = small_raster()
        track = Track(np.array([[0.5, 0.5], [1.5, 0.5], [np.nan, np.nan]]))
        self.assertEqual(visited_categories(track, raster), {"A", "B"})
        self.assertEqual(visited_categories(Track(np.array([[0.5, 0.5], [0.6, 0.6]])), raster), {"A"})

    def test_rejects_until_all_visited(self):
        raster = small_raster()
        hmm = HmmSpec([[1.0]], (NormalKernel(0.5),))
        track, states, attempts = simulate_visiting_all(100, FROM_TARGET, hmm, raster, RsfParams([1.0, 0.0]),
                                                        K=20, seed=9)
        self.assertEqual(visited_categories(track, raster), {"A", "B"})
        self.assertIsNone(states)
        self.assertGreaterEqual(attempts, 1)

    def test_retry_cap(self):
        # Category B is a single column 19 km away from the start
        raster = raster_from_codes(np.array([[1] * 19 + [2]]), ("A", "B"))
        hmm = HmmSpec([[1.0]], (NormalKernel(0.2),))
        with self.assertRaises(ModelError):
            simulate_visiting_all(5, [0.5, 0.5], hmm, raster, RsfParams([0.0, 0.0]), K=5, seed=1, max_tries=3)


class TestTrackFiles(unittest.TestCase):

    def test_csv_with_missing_rows_and_states(self):
        points = np.array([[0.0, 0.0], [0.1, 0.2], [np.nan, np.nan], [0.4, 0.1]])
        track = Track(points, states=np.array([0, 1, -1, 1]), start_time=5)
        with tempfile.TemporaryDirectory() as temp_dir:
            path = Path(temp_dir) / "track.csv"
            write_track_csv(track, path)
            text = path.read_text().splitlines()
            self.assertEqual(text[0], "t,x,y,state")
            self.assertEqual(text[3], "7,,,")
            loaded = read_track_csv(path)
        np.testing.assert_array_equal(loaded.times, [5, 6, 7, 8])
        np.testing.assert_array_equal(loaded.states, [0, 1, -1, 1])
        np.testing.assert_allclose(loaded.points, points)
        np.testing.assert_array_equal(loaded.step_index(), [0])

    def test_absent_time_indices_are_missing(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            path = Path(temp_dir) / "gappy.csv"
            path.write_text("t,x,y\n1,0.0,0.0\n2,0.1,0.0\n4,0.3,0.0\n5,0.4,0.1\n")
            track = read_track_csv(path)
        self.assertEqual(len(track), 5)
        self.assertFalse(track.observed[2])
        self.assertIsNone(track.states)
        np.testing.assert_array_equal(track.step_index(), [0, 3])

    def test_bad_time_column(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            path = Path(temp_dir) / "bad.csv"
            path.write_text("t,x,y\n1,0,0\n1,1,1\n")
            with self.assertRaises(InputError):
                read_track_csv(path)
            path.write_text("time,x,y\n1,0,0\n2,1,1\n")
            with self.assertRaises(InputError):
                read_track_csv(path)
            with self.assertRaises(InputError):
                read_track_csv(Path(temp_dir) / "missing.csv")

    def test_non_numeric_fields(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            path = Path(temp_dir) / "garbled.csv"
            path.write_text("t,x,y\n1,0,0\nabc,1,1\n")
            with self.assertRaises(InputError):
                read_track_csv(path)
            path.write_text("t,x,y\n1,0,0\n2,oops,1\n")
            with self.assertRaises(InputError) as ctx:
                read_track_csv(path)
            self.assertIn("t=2", str(ctx.exception))
            path.write_text("t,x,y,state\n1,0,0,1\n2,1,1,slow\n")
            with self.assertRaises(InputError):
                read_track_csv(path)

    def test_track_needs_two_observations(self):
        with self.assertRaises(InputError):
            Track(np.array([[0.0, 0.0], [np.nan, np.nan]]))


if __name__ == "__main__":
    unittest.main()
