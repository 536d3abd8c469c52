#!/usr/bin/env python3
"""
Transition Kernels and Sampling Primitives
==========================================

Radially symmetric transition densities of the local Gibbs sampler and the
geometric primitives needed to simulate from them and to approximate the
likelihood:
- Normal(sigma): circular bivariate normal
- FixedRadius(r): uniform on the disc of radius r
- GammaRadius(shape, rate): uniform on a disc whose radius is drawn from a
  gamma distribution at every step

Every sampler here is a deterministic transform of uniform variates, so a
fixed set of base uniforms gives common random numbers across parameter
values. Base uniforms come from Latin hypercube sampling, one stratum per
point on every one-dimensional margin.
"""

import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy.special import gammaincc, gammainccinv, ndtr, ndtri

from errors import InputError, ModelError

# Lens rejection sampling gives up after this many proposals per accepted point
MAX_LENS_PROPOSALS = 10 ** 6

_U_LOW = np.finfo(float).tiny
_U_HIGH = np.nextafter(1.0, 0.0)


def _check_positive(name: str, value: float):
    if not (np.isfinite(value) and value > 0):
        raise InputError(f"{name} must be a positive finite number, got {value}")


@dataclass(frozen=True)
class NormalKernel:
    """Circular normal transition density with standard deviation sigma (km)"""

    sigma: float
    name = "normal"

    def __post_init__(self):
        _check_positive("sigma", self.sigma)

    def describe(self) -> Dict[str, float]:
        # Resource-independent steps are Rayleigh with scale sqrt(2)*sigma
        scale = math.sqrt(2.0) * self.sigma
        return {"rayleigh_scale": scale, "mean_step_length": scale * math.sqrt(math.pi / 2.0)}


@dataclass(frozen=True)
class FixedRadiusKernel:
    """Uniform density on the disc of radius r (km)"""

    radius: float
    name = "fixed-radius"

    def __post_init__(self):
        _check_positive("radius", self.radius)

    def describe(self) -> Dict[str, float]:
        return {"max_step_length": 2.0 * self.radius}


@dataclass(frozen=True)
class GammaRadiusKernel:
    """Uniform disc density whose radius is gamma(shape, rate) distributed"""

    shape: float
    rate: float
    name = "gamma-radius"

    def __post_init__(self):
        _check_positive("shape", self.shape)
        _check_positive("rate", self.rate)

    def describe(self) -> Dict[str, float]:
        return {"mean_radius": self.shape / self.rate,
                "radius_p95": float(gammainccinv(self.shape, 0.05) / self.rate)}


KernelSpec = Union[NormalKernel, FixedRadiusKernel, GammaRadiusKernel]
KERNEL_TYPES = {k.name: k for k in (NormalKernel, FixedRadiusKernel, GammaRadiusKernel)}
KERNEL_NAMES = tuple(KERNEL_TYPES)


def kernel_to_dict(kernel: KernelSpec) -> Dict:
    return {"kernel": kernel.name, **asdict(kernel)}


# ---------------------------------------------------------------------------
# Base uniforms
# ---------------------------------------------------------------------------

def latin_hypercube(rng: np.random.Generator, count: int, dims: int,
                    leading: Tuple[int, ...] = ()) -> np.ndarray:
    """
    Latin hypercube uniforms of shape leading + (count, dims)

    Each (count, dims) block is an independent Latin hypercube: along every
    margin, exactly one point falls in each stratum [k/count, (k+1)/count).
    """
    shape = tuple(leading) + (count, dims)
    strata = np.broadcast_to(np.arange(count, dtype=float)[:, None], shape).copy()
    strata = rng.permuted(strata, axis=-2)
    u = (strata + rng.random(shape)) / count
    return np.clip(u, _U_LOW, _U_HIGH)


def uniforms(rng: np.random.Generator, count: int, dims: int, leading: Tuple[int, ...] = (),
             lhs: bool = True) -> np.ndarray:
    """Base uniforms in (0, 1), stratified when lhs is set"""
    if lhs:
        return latin_hypercube(rng, count, dims, leading)
    return np.clip(rng.random(tuple(leading) + (count, dims)), _U_LOW, _U_HIGH)


def lhs_uniform(count: int, dims: int, seed: int) -> np.ndarray:
    """count Latin hypercube points in (0,1)^dims, deterministic given seed"""
    if count < 1 or dims < 1:
        raise InputError(f"count and dims must be >= 1, got {count}, {dims}")
    return latin_hypercube(np.random.default_rng(seed), count, dims)


# ---------------------------------------------------------------------------
# Normal kernel
# ---------------------------------------------------------------------------

def sample_normal_step(x: np.ndarray, sigma: float, u: np.ndarray) -> np.ndarray:
    """x + sigma * (Phi^-1(u1), Phi^-1(u2)); u has shape (..., 2)"""
    return np.asarray(x, dtype=float) + sigma * ndtri(np.asarray(u, dtype=float))


def sample_normal_in_box(mu: np.ndarray, sigma: float, u: np.ndarray, lo, hi) -> Tuple[np.ndarray, np.ndarray]:
    """
    Normal endpoints conditioned on the rectangle [lo, hi]

    Each coordinate is drawn from N(mu, sigma^2) truncated to the rectangle's
    side by quantile transform of u. The mean of w over these points times the
    rectangle's probability mass is the integral of w against the untruncated
    kernel when w vanishes outside the rectangle.

    Args:
        mu: Centres, shape (..., 2)
        sigma: Kernel standard deviation
        u: Uniforms of shape (..., n, 2)
        lo: Lower-left corner (x, y)
        hi: Upper-right corner (x, y)

    Returns:
        Points of shape (..., n, 2) and the log mass of the rectangle, shape (...)
    """
    mu = np.asarray(mu, dtype=float)
    a = (np.asarray(lo, dtype=float) - mu) / sigma
    b = (np.asarray(hi, dtype=float) - mu) / sigma
    # Reflected so both bounds sit in the lower tail, where ndtr keeps its precision
    flip = a > 0
    lower = np.where(flip, -b, a)
    upper = np.where(flip, -a, b)
    p_lower = ndtr(lower)
    mass = ndtr(upper) - p_lower
    q = ndtri(p_lower[..., None, :] + np.asarray(u, dtype=float) * mass[..., None, :])
    q = np.clip(q, lower[..., None, :], upper[..., None, :])
    q = np.where(flip[..., None, :], -q, q)
    with np.errstate(divide="ignore"):
        log_mass = np.sum(np.log(mass), axis=-1)
    return mu[..., None, :] + sigma * q, log_mass


def normal_log_density(y: np.ndarray, centre: np.ndarray, sigma: float) -> np.ndarray:
    sq = np.sum((np.asarray(y, dtype=float) - np.asarray(centre, dtype=float)) ** 2, axis=-1)
    return -sq / (2.0 * sigma ** 2) - np.log(2.0 * np.pi * sigma ** 2)


def normal_density(y: np.ndarray, centre: np.ndarray, sigma: float) -> np.ndarray:
    """Circular bivariate normal density (per km^2)"""
    return np.exp(normal_log_density(y, centre, sigma))


# ---------------------------------------------------------------------------
# Radius distribution
# ---------------------------------------------------------------------------

def gamma_log_tail(shape: float, rate: float, lower) -> np.ndarray:
    """log(1 - F(lower)) for the gamma(shape, rate) radius"""
    with np.errstate(divide="ignore"):
        return np.log(gammaincc(shape, rate * np.asarray(lower, dtype=float)))


def sample_radius_truncated(shape: float, rate: float, lower, u) -> np.ndarray:
    """
    Gamma radius truncated to [lower, inf) by quantile transform

    Computes F^-1[F(lower) + u (1 - F(lower))], written through the survival
    function as S^-1[(1 - u) S(lower)] so it stays accurate far in the tail.

    Raises:
        ModelError: if S(lower) underflows to 0 (no plausible radius reaches lower)
    """
    lower = np.asarray(lower, dtype=float)
    u = np.asarray(u, dtype=float)
    tail = gammaincc(shape, rate * lower)
    if np.any(tail <= 0.0):
        raise ModelError(f"radius tail probability underflows beyond {float(np.max(lower)):.4g} km "
                         f"(shape={shape:.4g}, rate={rate:.4g}); the step is numerically impossible")
    r = gammainccinv(shape, (1.0 - u) * tail) / rate
    return np.maximum(r, lower)


# ---------------------------------------------------------------------------
# Disc geometry
# ---------------------------------------------------------------------------

def lens_area(d, r):
    """Area of the intersection of two discs of radius r whose centres are d apart"""
    d = np.asarray(d, dtype=float)
    r = np.asarray(r, dtype=float)
    ratio = np.clip(d / (2.0 * r), 0.0, 1.0)
    area = 2.0 * r ** 2 * np.arccos(ratio) - 0.5 * d * np.sqrt(np.maximum(4.0 * r ** 2 - d ** 2, 0.0))
    area = np.where(d >= 2.0 * r, 0.0, area)
    return area if area.ndim else float(area)


def lens_proposals(x: np.ndarray, y: np.ndarray, r, u: np.ndarray) -> np.ndarray:
    """
    Map uniforms on the unit square to the smallest rectangle containing the lens

    Square of side 1 -> scaled to (2r - d) x 2 sqrt(r^2 - d^2/4) -> rotated by
    the step heading -> translated to the midpoint of x and y.

    Args:
        x, y: Disc centres, shape (2,)
        r: Radius, scalar or array broadcasting against u[..., 0]
        u: Uniforms of shape (..., 2)
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = np.asarray(r, dtype=float)
    d = float(np.hypot(*(y - x)))
    ux = (2.0 * r - d) * (u[..., 0] - 0.5)
    uy = 2.0 * np.sqrt(np.maximum(r ** 2 - d ** 2 / 4.0, 0.0)) * (u[..., 1] - 0.5)
    length = np.hypot(ux, uy)
    theta = np.arctan2(uy, ux) + np.arctan2(y[1] - x[1], y[0] - x[0])
    mid = (x + y) / 2.0
    return np.stack([length * np.cos(theta) + mid[0], length * np.sin(theta) + mid[1]], axis=-1)


def in_lens(x: np.ndarray, y: np.ndarray, r, points: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    dx = np.hypot(*np.moveaxis(points - np.asarray(x, dtype=float), -1, 0))
    dy = np.hypot(*np.moveaxis(points - np.asarray(y, dtype=float), -1, 0))
    return (dx <= r) & (dy <= r)


def sample_lens_uniform(x: np.ndarray, y: np.ndarray, radii, count: int, rng: np.random.Generator,
                        lhs: bool = True, max_proposals: int = MAX_LENS_PROPOSALS) -> np.ndarray:
    """
    Uniform points on the lens D_r(x) ∩ D_r(y) by rectangle rejection sampling

    Args:
        x, y: Disc centres
        radii: A radius or an array of R radii
        count: Accepted points wanted per radius
        rng: Stream supplying the proposal uniforms
        lhs: Stratify each batch of proposals
        max_proposals: Cap on proposals per accepted point

    Returns:
        Array of shape (count, 2) for a scalar radius, else (R, count, 2)
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    scalar = np.ndim(radii) == 0
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    d = float(np.hypot(*(y - x)))
    if np.any(d >= 2.0 * radii):
        raise ModelError(f"empty lens: distance {d:.4g} km is not below twice the radius {float(radii.min()):.4g} km")

    out = np.empty((radii.size, count, 2))
    filled = np.zeros(radii.size, dtype=int)
    proposed = np.zeros(radii.size, dtype=int)
    while True:
        pending = np.flatnonzero(filled < count)
        if pending.size == 0:
            break
        if np.any(proposed[pending] > max_proposals * count):
            raise ModelError(f"lens rejection sampling exceeded {max_proposals} proposals per point")
        batch = int(math.ceil(1.6 * (count - filled[pending].min()))) + 4
        u = uniforms(rng, batch, 2, leading=(pending.size,), lhs=lhs)
        pts = lens_proposals(x, y, radii[pending][:, None], u)
        accepted = in_lens(x, y, radii[pending][:, None], pts)
        for row, k in enumerate(pending):
            good = pts[row][accepted[row]][: count - filled[k]]
            out[k, filled[k]:filled[k] + len(good)] = good
            filled[k] += len(good)
            proposed[k] += batch
    return out[0] if scalar else out


def sample_disc_uniform(centre: np.ndarray, r, u1, u2) -> np.ndarray:
    """centre + sqrt(l) (cos t, sin t) with l ~ U(0, r^2), t ~ U(-pi, pi)"""
    centre = np.asarray(centre, dtype=float)
    length = np.sqrt(np.asarray(u1, dtype=float) * np.asarray(r, dtype=float) ** 2)
    theta = -np.pi + 2.0 * np.pi * np.asarray(u2, dtype=float)
    return centre + np.stack([length * np.cos(theta), length * np.sin(theta)], axis=-1)


def sample_disc_in_box(centre: np.ndarray, r, u: np.ndarray, lo, hi) -> Tuple[np.ndarray, np.ndarray]:
    """
    Weighted points on the part of the disc D_r(centre) inside the rectangle [lo, hi]

    x is uniform over the stretch of the rectangle's x-range that the disc
    reaches, y uniform on the disc's chord at x clipped to the rectangle.
    With weight width * chord / (pi r^2) per point, the weighted mean of w
    is the mean of w over the whole disc when w vanishes outside the
    rectangle. Points of a disc that misses the rectangle get weight 0.

    Args:
        centre: Disc centres, shape (..., 2)
        r: Radii broadcasting to centre.shape[:-1]
        u: Uniforms of shape (..., n, 2)

    Returns:
        Points of shape (..., n, 2) and their log weights, shape (..., n)
    """
    centre = np.asarray(centre, dtype=float)
    r = np.broadcast_to(np.asarray(r, dtype=float), centre.shape[:-1])
    u = np.asarray(u, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    cx, cy = centre[..., 0], centre[..., 1]

    gap_y = np.maximum(np.maximum(lo[1] - cy, cy - hi[1]), 0.0)
    reach = np.sqrt(np.maximum(r ** 2 - gap_y ** 2, 0.0))
    x_lo = np.maximum(cx - reach, lo[0])
    width = np.maximum(np.minimum(cx + reach, hi[0]) - x_lo, 0.0)
    zx = x_lo[..., None] + u[..., 0] * width[..., None]

    half = np.sqrt(np.maximum(r[..., None] ** 2 - (zx - cx[..., None]) ** 2, 0.0))
    y_lo = np.maximum(cy[..., None] - half, lo[1])
    chord = np.maximum(np.minimum(cy[..., None] + half, hi[1]) - y_lo, 0.0)
    zy = y_lo + u[..., 1] * chord

    with np.errstate(divide="ignore"):
        log_weight = np.log(width)[..., None] + np.log(chord) - np.log(np.pi * r ** 2)[..., None]
    return np.stack([zx, zy], axis=-1), log_weight


def kernel_radius_draw(kernel: KernelSpec, u: float) -> Optional[float]:
    """Radius used for one step: fixed, gamma quantile of u, or None for the normal kernel"""
    if isinstance(kernel, FixedRadiusKernel):
        return kernel.radius
    if isinstance(kernel, GammaRadiusKernel):
        return float(sample_radius_truncated(kernel.shape, kernel.rate, 0.0, u))
    return None


def sample_kernel(centre: np.ndarray, kernel: KernelSpec, u: np.ndarray, radius: Optional[float] = None) -> np.ndarray:
    """Draw points from phi(.|centre) for uniforms u of shape (..., 2)"""
    if isinstance(kernel, NormalKernel):
        return sample_normal_step(centre, kernel.sigma, u)
    if radius is None:
        raise InputError("disc kernels need the step radius")
    return sample_disc_uniform(centre, radius, u[..., 0], u[..., 1])
