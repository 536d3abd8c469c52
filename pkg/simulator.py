#!/usr/bin/env python3
"""
Local Gibbs Track Simulator
===========================

Generates movement tracks from the local Gibbs sampler on a habitat raster:
1. Draw an intermediate point mu from phi(.|x_t)
2. Draw K candidate endpoints from phi(.|mu)
3. Pick x_{t+1} among the candidates with probability proportional to w

The state-switching variant runs a Markov chain over N movement kernels that
share the same habitat selection. Tracks are read from and written to CSV
files with columns t,x,y,state (empty fields mark missing locations or a
single-state track).
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import softmax

from errors import InputError, ModelError
from habitat import HabitatRaster, RsfParams, SelectionSurface, cell_index
from kernels import GammaRadiusKernel, KernelSpec, NormalKernel, kernel_radius_draw, sample_kernel

logger = logging.getLogger(__name__)

FROM_TARGET = "target"
DEFAULT_CANDIDATES = 200
MAX_REDRAWS = 1000
MAX_TRACK_RETRIES = 100
TRACK_FORMAT_VERSION = 1

SeedLike = Union[int, np.random.SeedSequence, None]


@dataclass(eq=False)
class Track:
    """Regularly spaced locations (km); NaN rows are missing observations"""

    points: np.ndarray
    states: Optional[np.ndarray] = None
    start_time: int = 1
    name: str = "track"

    def __post_init__(self):
        self.points = np.array(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise InputError(f"track points must have shape (T, 2), got {self.points.shape}")
        if self.observed.sum() < 2:
            raise InputError(f"track '{self.name}' needs at least 2 observed locations")
        if self.states is not None:
            self.states = np.asarray(self.states, dtype=int)
            if self.states.shape != (len(self.points),):
                raise InputError("state sequence length does not match the track")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.start_time, self.start_time + len(self.points))

    @property
    def observed(self) -> np.ndarray:
        return np.all(np.isfinite(self.points), axis=1)

    def step_index(self) -> np.ndarray:
        """Row indices t with both x_t and x_{t+1} observed"""
        obs = self.observed
        return np.flatnonzero(obs[:-1] & obs[1:])

    def step_lengths(self) -> np.ndarray:
        idx = self.step_index()
        return np.hypot(*(self.points[idx + 1] - self.points[idx]).T)


@dataclass(frozen=True, eq=False)
class HmmSpec:
    """N-state Markov switching between movement kernels"""

    gamma: np.ndarray
    kernels: Tuple[KernelSpec, ...]
    delta0: Optional[np.ndarray] = None

    def __post_init__(self):
        gamma = np.array(self.gamma, dtype=float)
        n = len(self.kernels)
        if n < 1:
            raise InputError("an HMM needs at least one state")
        if gamma.shape != (n, n):
            raise InputError(f"transition matrix must be {n}x{n}, got {gamma.shape}")
        if np.any(gamma < 0) or np.any(gamma > 1) or not np.allclose(gamma.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise InputError("transition matrix rows must be probability vectors")
        delta0 = stationary_distribution(gamma) if self.delta0 is None else np.array(self.delta0, dtype=float)
        if delta0.shape != (n,) or np.any(delta0 < 0) or not np.isclose(delta0.sum(), 1.0, rtol=0, atol=1e-12):
            raise InputError("initial distribution must be a probability vector over the states")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "delta0", delta0)
        object.__setattr__(self, "kernels", tuple(self.kernels))

    @property
    def n_states(self) -> int:
        return len(self.kernels)


def stationary_distribution(gamma: np.ndarray) -> np.ndarray:
    """Solve delta Gamma = delta with delta summing to one"""
    n = gamma.shape[0]
    try:
        delta = np.linalg.solve((np.eye(n) - gamma + np.ones((n, n))).T, np.ones(n))
    except np.linalg.LinAlgError:
        logger.warning("⚠️ Transition matrix is reducible; using a uniform initial distribution")
        return np.full(n, 1.0 / n)
    delta = np.clip(delta, 0.0, None)
    return delta / delta.sum()


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def local_gibbs_step(x: np.ndarray, kernel: KernelSpec, surface: SelectionSurface, K: int,
                     rng: np.random.Generator) -> np.ndarray:
    """
    One iteration of the local Gibbs sampler

    Args:
        x: Current location
        kernel: Transition density
        surface: Selection surface (raster and RSF parameters)
        K: Number of candidate endpoints
        rng: Random stream

    Returns:
        Next location, always inside the study region
    """
    if K < 1:
        raise InputError(f"candidate count K must be >= 1, got {K}")
    x = np.asarray(x, dtype=float)
    for _ in range(MAX_REDRAWS):
        radius = kernel_radius_draw(kernel, rng.random())
        mu = sample_kernel(x, kernel, rng.random(2), radius)
        candidates = sample_kernel(mu, kernel, rng.random((K, 2)), radius)
        weights = surface.log_w(candidates)
        if np.isfinite(weights).any():
            return candidates[rng.choice(K, p=softmax(weights))]
    raise ModelError(f"all candidates had zero weight in {MAX_REDRAWS} redraws from ({x[0]:.4g}, {x[1]:.4g})")


def sample_from_target(surface: SelectionSurface, rng: np.random.Generator) -> np.ndarray:
    """Exact draw from the utilisation distribution: weighted cell, then uniform within it"""
    raster = surface.raster
    grid = surface.grid.ravel()
    if not np.isfinite(grid).any():
        raise ModelError("every cell has w = 0; cannot sample an initial location")
    cell = rng.choice(grid.size, p=softmax(grid))
    row, col = divmod(int(cell), raster.n_cols)
    offset = rng.random(2)
    return np.array([raster.origin_x + (col + offset[0]) * raster.cell_size,
                     raster.origin_y + (row + offset[1]) * raster.cell_size])


def _initial_point(init, surface: SelectionSurface, rng: np.random.Generator) -> np.ndarray:
    if isinstance(init, str):
        if init != FROM_TARGET:
            raise InputError(f"initial location must be a point or '{FROM_TARGET}', got '{init}'")
        return sample_from_target(surface, rng)
    x0 = np.asarray(init, dtype=float)
    if x0.shape != (2,) or not np.isfinite(surface.log_w(x0)):
        raise InputError(f"initial location {init} is not inside the study region")
    return x0


def simulate_track(T: int, init, kernel: KernelSpec, raster: HabitatRaster, params: RsfParams,
                   K: int = DEFAULT_CANDIDATES, seed: SeedLike = None) -> Track:
    """Simulate T locations from the local Gibbs sampler; deterministic given seed"""
    if T < 2:
        raise InputError(f"track length T must be >= 2, got {T}")
    rng = np.random.default_rng(seed)
    surface = SelectionSurface(raster, params)
    points = np.empty((T, 2))
    points[0] = _initial_point(init, surface, rng)
    for t in range(1, T):
        points[t] = local_gibbs_step(points[t - 1], kernel, surface, K, rng)
    return Track(points)


def simulate_multistate(T: int, init, hmm: HmmSpec, raster: HabitatRaster, params: RsfParams,
                        K: int = DEFAULT_CANDIDATES, seed: SeedLike = None) -> Tuple[Track, np.ndarray]:
    """
    Simulate from the state-switching local Gibbs model

    Returns:
        Tuple of (track, states); states[t] is the 0-based state that drives
        the step from row t to row t+1
    """
    if T < 2:
        raise InputError(f"track length T must be >= 2, got {T}")
    rng = np.random.default_rng(seed)
    surface = SelectionSurface(raster, params)
    points = np.empty((T, 2))
    states = np.empty(T, dtype=int)
    points[0] = _initial_point(init, surface, rng)
    states[0] = rng.choice(hmm.n_states, p=hmm.delta0)
    for t in range(1, T):
        points[t] = local_gibbs_step(points[t - 1], hmm.kernels[states[t - 1]], surface, K, rng)
        states[t] = rng.choice(hmm.n_states, p=hmm.gamma[states[t - 1]])
    return Track(points, states=states), states


def simulate_visiting_all(T: int, init, hmm: HmmSpec, raster: HabitatRaster, params: RsfParams,
                          K: int = DEFAULT_CANDIDATES, seed: SeedLike = None,
                          max_tries: int = MAX_TRACK_RETRIES) -> Tuple[Track, Optional[np.ndarray], int]:
    """
    Simulate until the track visits every habitat category

    Returns:
        Tuple of (track, states or None, number of attempts)
    """
    wanted = {raster.layer_names[i] for group in raster.categorical_groups for i in group}
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    for attempt, child in enumerate(root.spawn(max_tries), start=1):
        if hmm.n_states == 1:
            track, states = simulate_track(T, init, hmm.kernels[0], raster, params, K, child), None
        else:
            track, states = simulate_multistate(T, init, hmm, raster, params, K, child)
        missing = wanted - visited_categories(track, raster)
        if not missing:
            return track, states, attempt
        logger.debug(f"Attempt {attempt}: track misses {sorted(missing)}")
    raise ModelError(f"no simulated track visited every habitat category in {max_tries} attempts")


def visited_categories(track: Track, raster: HabitatRaster) -> Set[str]:
    """Names of the one-hot layers that contain at least one observed location"""
    rows, cols, inside = cell_index(raster, track.points[track.observed])
    visited = set()
    for group in raster.categorical_groups:
        for i in group:
            if np.any(raster.layers[i, rows[inside], cols[inside]] > 0):
                visited.add(raster.layer_names[i])
    return visited


def movement_summary(kernel: KernelSpec) -> str:
    if isinstance(kernel, NormalKernel):
        return f"normal(sigma={kernel.sigma:g})"
    if isinstance(kernel, GammaRadiusKernel):
        return f"gamma-radius(shape={kernel.shape:g}, rate={kernel.rate:g})"
    return f"fixed-radius(r={kernel.radius:g})"


# ---------------------------------------------------------------------------
# Track CSV files
# ---------------------------------------------------------------------------

def write_track_csv(track: Track, path: Union[str, Path]):
    """Write t,x,y,state; states are written 1-based"""
    frame = pd.DataFrame({"t": track.times, "x": track.points[:, 0], "y": track.points[:, 1]})
    if track.states is None:
        frame["state"] = pd.array([pd.NA] * len(track), dtype="Int64")
    else:
        frame["state"] = pd.array([s + 1 if s >= 0 else pd.NA for s in track.states], dtype="Int64")
    frame.to_csv(path, index=False, na_rep="")


def read_track_csv(path: Union[str, Path]) -> Track:
    """
    Read a track CSV with columns t,x,y[,state]

    Time indices must be strictly increasing integers; indices absent from
    the file are treated as missing locations.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"track file not found: {path}")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"cannot parse track file {path}: {e}")
    missing = {"t", "x", "y"} - set(frame.columns)
    if missing:
        raise InputError(f"track file {path} lacks columns {sorted(missing)}")

    t = pd.to_numeric(frame["t"], errors="coerce").to_numpy(dtype=float)
    if (len(t) == 0 or not np.all(np.isfinite(t)) or not np.all(np.equal(np.mod(t, 1), 0))
            or np.any(np.diff(t) <= 0)):
        raise InputError(f"track file {path}: 't' must be strictly increasing integers")
    coords = frame[["x", "y"]].apply(pd.to_numeric, errors="coerce")
    # Empty fields are missing locations; anything else must parse
    garbled = coords.isna() & frame[["x", "y"]].notna()
    if garbled.any().any():
        row = int(np.flatnonzero(garbled.any(axis=1).to_numpy())[0])
        raise InputError(f"track file {path}: non-numeric coordinate at t={frame['t'].iloc[row]}")
    t = t.astype(int)
    start = int(t[0])
    points = np.full((t[-1] - start + 1, 2), np.nan)
    points[t - start] = coords.to_numpy(dtype=float)

    states = None
    if "state" in frame.columns and frame["state"].notna().any():
        state = pd.to_numeric(frame["state"], errors="coerce")
        known = frame["state"].notna().to_numpy()
        if state[known].isna().any() or np.any(np.mod(state[known], 1) != 0):
            raise InputError(f"track file {path}: 'state' must hold integers")
        states = np.full(len(points), -1, dtype=int)
        states[t[known] - start] = state.to_numpy()[known].astype(int) - 1
    return Track(points, states=states, start_time=start, name=path.stem)


def read_tracks(paths: Sequence[Union[str, Path]]) -> List[Track]:
    return [read_track_csv(p) for p in paths]
