#!/usr/bin/env python3
"""
Monte Carlo Likelihood of the Local Gibbs Model
===============================================

Approximates the step density p(y | x) of the local Gibbs sampler by nested
Monte Carlo integration over the intermediate point mu and the endpoint
normalizer, for three transition densities:
- normal kernel:  mu_i ~ N(x, s^2 I), z_ij ~ N(mu_i, s^2 I)
- fixed radius:   mu_i ~ U(lens(x, y, r)), z_ij ~ U(D_r(mu_i))
- gamma radius:   r_i ~ gamma truncated to [d/2, inf), then as fixed radius

Only ratios of w enter the estimates, so the RSF normalizer is never needed.
All sums are evaluated in log space.

w vanishes off the raster, so endpoints are only drawn inside its bounding
rectangle: normal endpoints from the kernel truncated to the rectangle, with
the estimate scaled by the rectangle's probability mass, and endpoints of
discs that cross the edge from the part of the disc inside, with area
weights. Only intermediate points whose kernel reaches nothing but NODATA
cells leave a zero normalizer.

Base uniforms are derived from (seed, track index, step index, layer), so a
step's value does not depend on evaluation order, and they are reused across
parameter values (common random numbers). The state-switching likelihood is
computed with the forward algorithm; missing locations split a track into
segments that restart from the initial distribution.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, ndtri

from errors import InputError, ModelError
from habitat import HabitatRaster, RsfParams, SelectionSurface
from kernels import (FixedRadiusKernel, GammaRadiusKernel, KernelSpec, NormalKernel, gamma_log_tail, lens_area,
                     normal_log_density, sample_disc_in_box, sample_disc_uniform, sample_lens_uniform,
                     sample_normal_in_box, sample_radius_truncated, uniforms)
from simulator import HmmSpec, Track

logger = logging.getLogger(__name__)

LAYER_RADIUS, LAYER_CENTRE, LAYER_ENDPOINT = 0, 1, 2
LOG_PI = math.log(math.pi)

# Base samples of a track are kept in memory up to this many floats
CACHE_LIMIT = 25_000_000
# Steps evaluated together in the vectorized normal-kernel path
CHUNK_STEPS = 64

NODATA_MESSAGE = "every endpoint sample has w = 0 for some intermediate point; the kernel only reaches NODATA cells"


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo sample sizes and seed for the approximate likelihood"""

    n_c: int = 50
    n_z: int = 50
    n_r: int = 30
    seed: int = 0
    lhs: bool = True

    def __post_init__(self):
        for name in ("n_c", "n_z", "n_r"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InputError(f"{name} must be a positive integer, got {value}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise InputError(f"seed must be a non-negative integer, got {self.seed}")

    def scaled(self, factor: float) -> "McConfig":
        """Same seed, every sample size multiplied by factor"""
        return McConfig(n_c=max(1, int(round(self.n_c * factor))), n_z=max(1, int(round(self.n_z * factor))),
                        n_r=max(1, int(round(self.n_r * factor))), seed=self.seed, lhs=self.lhs)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class StepLogLik:
    """Log step density (log per km^2); non-contributing steps carry 0"""

    value: float
    contributing: bool


@dataclass(frozen=True, eq=False)
class BaseSamples:
    """Frozen Monte Carlo inputs of one step

    Normal kernel: standard normal deviates for the centres (n_c, 2) and
    endpoint uniforms (n_c, n_z, 2), turned into normal deviates truncated to
    the raster rectangle once the centres are known. Disc kernels: endpoint
    uniforms ((n_r,) n_c, n_z, 2), radius uniforms (n_r,) for the gamma
    radius, and the entropy of the stream that feeds lens rejection sampling.
    """

    centre: Optional[np.ndarray]
    endpoint: np.ndarray
    radius: Optional[np.ndarray]
    centre_entropy: Tuple[int, ...]


def _stream(mc: McConfig, track_index: int, t: int, layer: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(mc.seed), int(track_index), int(t), layer]))


def step_base_samples(kernel: KernelSpec, mc: McConfig, track_index: int, t: int) -> BaseSamples:
    """Base samples of step t, identical whenever (seed, track, t, kernel type) are"""
    entropy = (int(mc.seed), int(track_index), int(t), LAYER_CENTRE)
    if isinstance(kernel, NormalKernel):
        centre = ndtri(uniforms(_stream(mc, track_index, t, LAYER_CENTRE), mc.n_c, 2, lhs=mc.lhs))
        endpoint = uniforms(_stream(mc, track_index, t, LAYER_ENDPOINT), mc.n_z, 2, leading=(mc.n_c,), lhs=mc.lhs)
        return BaseSamples(centre, endpoint, None, entropy)
    if isinstance(kernel, FixedRadiusKernel):
        endpoint = uniforms(_stream(mc, track_index, t, LAYER_ENDPOINT), mc.n_z, 2, leading=(mc.n_c,), lhs=mc.lhs)
        return BaseSamples(None, endpoint, None, entropy)
    radius = uniforms(_stream(mc, track_index, t, LAYER_RADIUS), mc.n_r, 1, lhs=mc.lhs)[:, 0]
    endpoint = uniforms(_stream(mc, track_index, t, LAYER_ENDPOINT), mc.n_z, 2,
                        leading=(mc.n_r, mc.n_c), lhs=mc.lhs)
    return BaseSamples(None, endpoint, radius, entropy)


def _log_denominators(surface: SelectionSurface, z: np.ndarray) -> np.ndarray:
    """log sum_j w(z_..j) over the second-to-last axis of z"""
    with np.errstate(divide="ignore"):
        return logsumexp(surface.log_w(z), axis=-1)


def _raster_box(raster: HabitatRaster) -> Tuple[np.ndarray, np.ndarray]:
    xmin, xmax, ymin, ymax = raster.extent
    return np.array([xmin, ymin]), np.array([xmax, ymax])


def _disc_log_denominators(surface: SelectionSurface, mu: np.ndarray, r, u: np.ndarray) -> np.ndarray:
    """
    log sum_j w(z_j) for endpoints uniform on D_r(mu)

    Discs that reach past the raster rectangle are sampled on their part
    inside it, with area weights, so a centre near the edge never ends up
    with every endpoint off the map.
    """
    r = np.broadcast_to(np.asarray(r, dtype=float), mu.shape[:-1])
    z = sample_disc_uniform(mu[..., None, :], r[..., None], u[..., 0], u[..., 1])
    log_den = _log_denominators(surface, z)
    lo, hi = _raster_box(surface.raster)
    crossing = (np.any(mu - r[..., None] < lo, axis=-1)) | (np.any(mu + r[..., None] > hi, axis=-1))
    if np.any(crossing):
        z, log_weight = sample_disc_in_box(mu[crossing], r[crossing], u[crossing], lo, hi)
        with np.errstate(divide="ignore"):
            log_den[crossing] = logsumexp(surface.log_w(z) + log_weight, axis=-1)
    return log_den


# ---------------------------------------------------------------------------
# Step densities
# ---------------------------------------------------------------------------

def _normal_values(surface: SelectionSurface, x: np.ndarray, y: np.ndarray, sigma: float,
                   centre: np.ndarray, endpoint: np.ndarray, times: Sequence[int], mc: McConfig) -> np.ndarray:
    """Vectorized normal-kernel estimate for S steps; x, y are (S, 2)"""
    log_wy = surface.log_w(y)
    mu = x[:, None, :] + sigma * centre
    lo, hi = _raster_box(surface.raster)
    z, log_mass = sample_normal_in_box(mu, sigma, endpoint, lo, hi)
    log_den = _log_denominators(surface, z) + log_mass
    bad = np.isfinite(log_wy) & ~np.all(np.isfinite(log_den), axis=1)
    if bad.any():
        raise ModelError(NODATA_MESSAGE, step=int(times[np.argmax(bad)]))
    with np.errstate(invalid="ignore", divide="ignore"):
        log_phi = normal_log_density(y[:, None, :], mu, sigma)
        value = log_wy + math.log(mc.n_z) - math.log(mc.n_c) + logsumexp(log_phi - log_den, axis=1)
    return np.where(np.isfinite(log_wy), value, -np.inf)


def _fixed_radius_value(surface: SelectionSurface, x: np.ndarray, y: np.ndarray, r: float,
                        base: BaseSamples, time: int, mc: McConfig) -> float:
    d = float(np.hypot(*(y - x)))
    log_wy = float(surface.log_w(y))
    if d >= 2.0 * r or not np.isfinite(log_wy):
        return -np.inf
    rng = np.random.default_rng(np.random.SeedSequence(list(base.centre_entropy)))
    mu = sample_lens_uniform(x, y, r, mc.n_c, rng, lhs=mc.lhs)
    log_den = _disc_log_denominators(surface, mu, r, base.endpoint)
    if not np.all(np.isfinite(log_den)):
        raise ModelError(NODATA_MESSAGE, step=time)
    return (log_wy - 2.0 * LOG_PI + math.log(mc.n_z) - math.log(mc.n_c)
            + math.log(lens_area(d, r)) - 4.0 * math.log(r) + float(logsumexp(-log_den)))


def _gamma_radius_value(surface: SelectionSurface, x: np.ndarray, y: np.ndarray, shape: float, rate: float,
                        base: BaseSamples, time: int, mc: McConfig) -> float:
    d = float(np.hypot(*(y - x)))
    log_wy = float(surface.log_w(y))
    if not np.isfinite(log_wy):
        return -np.inf
    lower = d / 2.0
    try:
        radii = sample_radius_truncated(shape, rate, lower, base.radius)
    except ModelError as e:
        raise ModelError(str(e), step=time)
    # The lens must be non-empty
    radii = np.maximum(radii, lower * (1.0 + 1e-12) + 1e-15)
    log_tail = float(gamma_log_tail(shape, rate, lower))

    rng = np.random.default_rng(np.random.SeedSequence(list(base.centre_entropy)))
    mu = sample_lens_uniform(x, y, radii, mc.n_c, rng, lhs=mc.lhs)
    log_den = _disc_log_denominators(surface, mu, radii[:, None], base.endpoint)
    if not np.all(np.isfinite(log_den)):
        raise ModelError(NODATA_MESSAGE, step=time)
    with np.errstate(divide="ignore"):
        log_area = np.log(lens_area(d, radii))
    inner = logsumexp(-log_den, axis=1)
    return (log_wy - 2.0 * LOG_PI + log_tail + math.log(mc.n_z) - math.log(mc.n_r * mc.n_c)
            + float(logsumexp(log_area - 4.0 * np.log(radii) + inner)))


def _single_step(kernel: KernelSpec, x, y, raster: HabitatRaster, params: RsfParams, mc: McConfig,
                 step_index: int, track_index: int) -> StepLogLik:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        return StepLogLik(0.0, False)
    surface = SelectionSurface(raster, params)
    base = step_base_samples(kernel, mc, track_index, step_index)
    if isinstance(kernel, NormalKernel):
        value = _normal_values(surface, x[None], y[None], kernel.sigma, base.centre[None],
                               base.endpoint[None], [step_index], mc)[0]
    elif isinstance(kernel, FixedRadiusKernel):
        value = _fixed_radius_value(surface, x, y, kernel.radius, base, step_index, mc)
    else:
        value = _gamma_radius_value(surface, x, y, kernel.shape, kernel.rate, base, step_index, mc)
    return StepLogLik(float(value), True)


def step_loglik_normal(x, y, raster: HabitatRaster, params: RsfParams, sigma: float, mc: McConfig,
                       step_index: int = 0, track_index: int = 0) -> StepLogLik:
    """Approximate log density of the step x -> y under the normal kernel"""
    return _single_step(NormalKernel(sigma), x, y, raster, params, mc, step_index, track_index)


def step_loglik_fixed_radius(x, y, raster: HabitatRaster, params: RsfParams, r: float, mc: McConfig,
                             step_index: int = 0, track_index: int = 0) -> StepLogLik:
    """Approximate log density of the step x -> y under the fixed availability radius r"""
    return _single_step(FixedRadiusKernel(r), x, y, raster, params, mc, step_index, track_index)


def step_loglik_gamma_radius(x, y, raster: HabitatRaster, params: RsfParams, shape: float, rate: float,
                             mc: McConfig, step_index: int = 0, track_index: int = 0) -> StepLogLik:
    """Approximate log density of the step x -> y under a gamma(shape, rate) availability radius"""
    return _single_step(GammaRadiusKernel(shape, rate), x, y, raster, params, mc, step_index, track_index)


# ---------------------------------------------------------------------------
# Tracks
# ---------------------------------------------------------------------------

class TrackLikelihood:
    """
    Likelihood of one track with its base samples frozen

    Base samples are generated on first use for each kernel type and kept for
    the lifetime of the object (when they fit in CACHE_LIMIT floats), so
    repeated evaluations during an optimization are deterministic and cheap.
    """

    def __init__(self, track: Track, raster: HabitatRaster, mc: McConfig, track_index: int = 0):
        self.track = track
        self.raster = raster
        self.mc = mc
        self.track_index = track_index
        self.steps = track.step_index()
        self.times = track.times[self.steps]
        self.x = track.points[self.steps]
        self.y = track.points[self.steps + 1]
        self._cache: Dict[type, List[BaseSamples]] = {}
        self._normal_cache: Optional[Tuple[np.ndarray, np.ndarray]] = None

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def _fits_cache(self, kernel: KernelSpec) -> bool:
        mc = self.mc
        per_step = mc.n_c * mc.n_z * 2 * (mc.n_r if isinstance(kernel, GammaRadiusKernel) else 1)
        return per_step * self.n_steps <= CACHE_LIMIT

    def _base(self, kernel: KernelSpec, k: int) -> BaseSamples:
        kind = type(kernel)
        if kind in self._cache:
            return self._cache[kind][k]
        if self._fits_cache(kernel):
            self._cache[kind] = [step_base_samples(kernel, self.mc, self.track_index, t) for t in self.steps]
            return self._cache[kind][k]
        return step_base_samples(kernel, self.mc, self.track_index, self.steps[k])

    def _normal_arrays(self, kernel: NormalKernel, lo: int, hi: int) -> Tuple[np.ndarray, np.ndarray]:
        if self._normal_cache is None and self._fits_cache(kernel):
            bases = [self._base(kernel, k) for k in range(self.n_steps)]
            self._normal_cache = (np.stack([b.centre for b in bases]), np.stack([b.endpoint for b in bases]))
        if self._normal_cache is not None:
            return self._normal_cache[0][lo:hi], self._normal_cache[1][lo:hi]
        bases = [self._base(kernel, k) for k in range(lo, hi)]
        return np.stack([b.centre for b in bases]), np.stack([b.endpoint for b in bases])

    def step_logliks(self, params: RsfParams, kernel: KernelSpec,
                     surface: Optional[SelectionSurface] = None) -> np.ndarray:
        """Log density of every contributing step, in track order"""
        surface = surface or SelectionSurface(self.raster, params)
        out = np.empty(self.n_steps)
        if self.n_steps == 0:
            return out
        if isinstance(kernel, NormalKernel):
            for lo in range(0, self.n_steps, CHUNK_STEPS):
                hi = min(lo + CHUNK_STEPS, self.n_steps)
                centre, endpoint = self._normal_arrays(kernel, lo, hi)
                out[lo:hi] = _normal_values(surface, self.x[lo:hi], self.y[lo:hi], kernel.sigma,
                                            centre, endpoint, self.times[lo:hi], self.mc)
            return out
        for k, time in enumerate(self.times):
            base = self._base(kernel, k)
            if isinstance(kernel, FixedRadiusKernel):
                out[k] = _fixed_radius_value(surface, self.x[k], self.y[k], kernel.radius, base, int(time), self.mc)
            else:
                out[k] = _gamma_radius_value(surface, self.x[k], self.y[k], kernel.shape, kernel.rate,
                                             base, int(time), self.mc)
        return out

    def loglik(self, params: RsfParams, kernel: KernelSpec) -> float:
        return float(np.sum(self.step_logliks(params, kernel)))

    def state_logliks(self, params: RsfParams, kernels: Sequence[KernelSpec]) -> np.ndarray:
        """(n_steps, N) matrix of log step densities, one column per state kernel"""
        surface = SelectionSurface(self.raster, params)
        if self.n_steps == 0:
            return np.empty((0, len(kernels)))
        return np.column_stack([self.step_logliks(params, k, surface) for k in kernels])

    def hmm_loglik(self, params: RsfParams, hmm: HmmSpec) -> float:
        log_p = self.state_logliks(params, hmm.kernels)
        return forward_loglik(log_p, self.steps, hmm.gamma, hmm.delta0)

    def viterbi(self, params: RsfParams, hmm: HmmSpec) -> np.ndarray:
        """Most likely state (0-based) per track row; -1 where no step starts"""
        log_p = self.state_logliks(params, hmm.kernels)
        path = np.full(len(self.track), -1, dtype=int)
        path[self.steps] = viterbi_path(log_p, self.steps, hmm.gamma, hmm.delta0)
        return path


def track_loglik(track: Track, raster: HabitatRaster, params: RsfParams, kernel: KernelSpec,
                 mc: McConfig, track_index: int = 0) -> float:
    """Sum of the log densities of all steps with both endpoints observed"""
    return TrackLikelihood(track, raster, mc, track_index).loglik(params, kernel)


def tracks_loglik(tracks: Sequence[Track], raster: HabitatRaster, params: RsfParams, kernel: KernelSpec,
                  mc: McConfig) -> float:
    """Joint log-likelihood of independent tracks"""
    return sum(track_loglik(track, raster, params, kernel, mc, i) for i, track in enumerate(tracks))


def hmm_track_loglik(track: Track, raster: HabitatRaster, params: RsfParams, hmm: HmmSpec,
                     mc: McConfig, track_index: int = 0) -> float:
    """Log-likelihood of the state-switching model by the forward algorithm"""
    return TrackLikelihood(track, raster, mc, track_index).hmm_loglik(params, hmm)


# ---------------------------------------------------------------------------
# Forward algorithm and Viterbi
# ---------------------------------------------------------------------------

def segments(steps: np.ndarray) -> List[np.ndarray]:
    """Positions (into steps) of runs of consecutive step indices"""
    if len(steps) == 0:
        return []
    breaks = np.flatnonzero(np.diff(steps) != 1) + 1
    return np.split(np.arange(len(steps)), breaks)


def forward_loglik(log_p: np.ndarray, steps: np.ndarray, gamma: np.ndarray, delta0: np.ndarray) -> float:
    """
    Log of delta0 P_1 Gamma P_2 ... Gamma P_n 1' summed over segments

    Args:
        log_p: (n_steps, N) log step densities per state
        steps: Track row of every step (gaps start a new segment)
        gamma: Transition probability matrix
        delta0: Initial distribution of each segment
    """
    with np.errstate(divide="ignore"):
        log_gamma = np.log(gamma)
        log_delta = np.log(delta0)
    total = 0.0
    for seg in segments(steps):
        log_alpha = log_delta + log_p[seg[0]]
        for k in seg[1:]:
            log_alpha = logsumexp(log_alpha[:, None] + log_gamma, axis=0) + log_p[k]
        total += float(logsumexp(log_alpha))
    return total


def viterbi_path(log_p: np.ndarray, steps: np.ndarray, gamma: np.ndarray, delta0: np.ndarray) -> np.ndarray:
    """Max-product decoding per segment; ties go to the lower state index"""
    with np.errstate(divide="ignore"):
        log_gamma = np.log(gamma)
        log_delta = np.log(delta0)
    path = np.empty(len(steps), dtype=int)
    for seg in segments(steps):
        score = log_delta + log_p[seg[0]]
        pointers = np.empty((len(seg), len(delta0)), dtype=int)
        for j, k in enumerate(seg[1:], start=1):
            candidates = score[:, None] + log_gamma
            pointers[j] = np.argmax(candidates, axis=0)
            score = candidates[pointers[j], np.arange(len(delta0))] + log_p[k]
        state = int(np.argmax(score))
        for j in range(len(seg) - 1, -1, -1):
            path[seg[j]] = state
            state = int(pointers[j, state])
    return path
