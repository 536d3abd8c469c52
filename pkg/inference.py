#!/usr/bin/env python3
"""
Maximum Likelihood Inference for the Local Gibbs Model
======================================================

Fits habitat selection and movement parameters by maximizing the Monte Carlo
likelihood with a multi-start Nelder-Mead simplex, then derives standard
errors from a finite-difference Hessian. Also provides Viterbi decoding of
behavioural states and a simulation-based goodness-of-fit check on step
lengths.

Parameters are optimized on an unconstrained working scale:
- beta: free coefficients as they are (reference categories fixed to 0)
- movement: log sigma | log r | (log shape, log rate), one set per state
- transitions: per-row multinomial logits of Gamma, diagonal as reference
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import minimize
from scipy.special import expit
from scipy.stats import ks_2samp

from errors import InputError, ModelError
from habitat import HabitatRaster, RsfParams, SelectionSurface, habitat_utilisation
from kernels import KERNEL_NAMES, KERNEL_TYPES, KernelSpec
from likelihood import McConfig, TrackLikelihood
from simulator import (DEFAULT_CANDIDATES, FROM_TARGET, HmmSpec, Track, simulate_multistate, simulate_track,
                       visited_categories)

logger = logging.getLogger(__name__)

FIT_FORMAT_VERSION = 1
PENALTY = 1e12
Z_95 = 1.959963984540054

KERNEL_FIELDS = {"normal": ("sigma",), "fixed-radius": ("radius",), "gamma-radius": ("shape", "rate")}

# Rayleigh mean / scale, used to turn step-length quantiles into sigma
RAYLEIGH_MEAN = math.sqrt(math.pi / 2.0)


@dataclass(frozen=True)
class ModelSpec:
    """Kernel variant and number of behavioural states"""

    kernel: str = "normal"
    n_states: int = 1

    def __post_init__(self):
        if self.kernel not in KERNEL_NAMES:
            raise InputError(f"unknown kernel '{self.kernel}', expected one of {list(KERNEL_NAMES)}")
        if int(self.n_states) != self.n_states or self.n_states < 1:
            raise InputError(f"number of states must be a positive integer, got {self.n_states}")


@dataclass(frozen=True, eq=False)
class NaturalParams:
    params: RsfParams
    kernels: Tuple[KernelSpec, ...]
    gamma: Optional[np.ndarray] = None

    def to_hmm(self, delta0: Optional[np.ndarray] = None) -> HmmSpec:
        gamma = self.gamma if self.gamma is not None else np.ones((1, 1))
        return HmmSpec(gamma, self.kernels, delta0)


class ParameterMap:
    """Bijection between natural parameters and the optimizer's working vector"""

    def __init__(self, model: ModelSpec, layer_names: Sequence[str], reference_indices: Sequence[int]):
        self.model = model
        self.layer_names = tuple(layer_names)
        self.reference_indices = frozenset(int(i) for i in reference_indices)
        self.free_indices = [i for i in range(len(self.layer_names)) if i not in self.reference_indices]
        self.kernel_fields = KERNEL_FIELDS[model.kernel]

    @property
    def n_states(self) -> int:
        return self.model.n_states

    @property
    def size(self) -> int:
        n = self.n_states
        return len(self.free_indices) + n * len(self.kernel_fields) + n * (n - 1)

    def _state_suffix(self, k: int) -> str:
        return f"_{k + 1}" if self.n_states > 1 else ""

    def working_names(self) -> List[str]:
        names = [f"beta_{self.layer_names[i]}" for i in self.free_indices]
        for k in range(self.n_states):
            names += [f"log_{f}{self._state_suffix(k)}" for f in self.kernel_fields]
        names += [f"logit_gamma_{i + 1}{j + 1}" for i, j in self._off_diagonal()]
        return names

    def _off_diagonal(self) -> List[Tuple[int, int]]:
        n = self.n_states
        return [(i, j) for i in range(n) for j in range(n) if i != j]

    def to_working(self, natural: NaturalParams) -> np.ndarray:
        theta = [natural.params.beta[i] for i in self.free_indices]
        for kernel in natural.kernels:
            theta += [math.log(getattr(kernel, f)) for f in self.kernel_fields]
        if self.n_states > 1:
            gamma = np.asarray(natural.gamma, dtype=float)
            theta += [math.log(gamma[i, j] / gamma[i, i]) for i, j in self._off_diagonal()]
        return np.array(theta, dtype=float)

    def to_natural(self, theta: Sequence[float]) -> NaturalParams:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise InputError(f"working vector must have {self.size} entries, got {theta.shape}")
        n_beta = len(self.free_indices)
        params = RsfParams.from_free(len(self.layer_names), theta[:n_beta], self.reference_indices)

        pos = n_beta
        kernel_type = KERNEL_TYPES[self.model.kernel]
        kernels = []
        with np.errstate(over="ignore"):
            for _ in range(self.n_states):
                values = np.exp(theta[pos:pos + len(self.kernel_fields)])
                kernels.append(kernel_type(*[float(v) for v in values]))
                pos += len(self.kernel_fields)

        gamma = None
        if self.n_states > 1:
            logits = np.zeros((self.n_states, self.n_states))
            for (i, j), eta in zip(self._off_diagonal(), theta[pos:]):
                logits[i, j] = eta
            logits -= logits.max(axis=1, keepdims=True)
            gamma = np.exp(logits)
            gamma /= gamma.sum(axis=1, keepdims=True)
        return NaturalParams(params, tuple(kernels), gamma)

    def natural_names(self) -> List[str]:
        names = [f"beta_{name}" for name in self.layer_names]
        for k in range(self.n_states):
            names += [f"{f}{self._state_suffix(k)}" for f in self.kernel_fields]
        if self.n_states > 1:
            names += [f"gamma_{i + 1}{j + 1}" for i in range(self.n_states) for j in range(self.n_states)]
        return names

    def natural_values(self, natural: NaturalParams) -> Dict[str, float]:
        values = [float(b) for b in natural.params.beta]
        for kernel in natural.kernels:
            values += [float(getattr(kernel, f)) for f in self.kernel_fields]
        if self.n_states > 1:
            values += [float(g) for g in np.asarray(natural.gamma).ravel()]
        return dict(zip(self.natural_names(), values))

    def to_model_dict(self) -> Dict:
        return {"kernel": self.model.kernel, "n_states": self.n_states, "layer_names": list(self.layer_names),
                "reference_indices": sorted(self.reference_indices)}

    @classmethod
    def from_model_dict(cls, data: Dict) -> "ParameterMap":
        try:
            model = ModelSpec(data["kernel"], int(data["n_states"]))
            return cls(model, data["layer_names"], data["reference_indices"])
        except KeyError as e:
            raise InputError(f"fit report model block lacks {e}")


@dataclass
class FitResult:
    """Estimates, uncertainty and optimizer trace of one fit"""

    model: Dict
    estimates: Dict[str, float]
    loglik: float
    mc: Dict
    seed: int
    working: List[float]
    starts: List[Dict] = field(default_factory=list)
    convergence: Dict = field(default_factory=dict)
    se: Dict[str, Optional[float]] = field(default_factory=dict)
    ci95: Dict[str, Optional[List[float]]] = field(default_factory=dict)
    working_se: Optional[List[float]] = None
    mc_hessian: Optional[Dict] = None
    derived: Dict = field(default_factory=dict)
    format_version: int = FIT_FORMAT_VERSION

    @property
    def parameter_map(self) -> ParameterMap:
        return ParameterMap.from_model_dict(self.model)

    def natural(self) -> NaturalParams:
        return self.parameter_map.to_natural(self.working)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "FitResult":
        version = data.get("format_version")
        if version != FIT_FORMAT_VERSION:
            raise InputError(f"unsupported fit report format_version {version} (expected {FIT_FORMAT_VERSION})")
        known = {f for f in cls.__dataclass_fields__}
        try:
            return cls(**{k: v for k, v in data.items() if k in known})
        except TypeError as e:
            raise InputError(f"incomplete fit report: {e}")

    def save(self, path: Union[str, Path], metadata: Optional[Dict] = None):
        data = self.to_dict()
        if metadata is not None:
            data["metadata"] = metadata
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FitResult":
        path = Path(path)
        if not path.exists():
            raise InputError(f"fit report not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise InputError(f"invalid JSON in fit report {path}: {e}")
        return cls.from_dict(data)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

class Objective:
    """Negative log-likelihood of the working vector over all tracks"""

    def __init__(self, tracks: Sequence[Track], raster: HabitatRaster, pmap: ParameterMap, mc: McConfig,
                 delta0: Optional[np.ndarray] = None):
        self.pmap = pmap
        self.mc = mc
        self.delta0 = delta0
        self.likelihoods = [TrackLikelihood(track, raster, mc, i) for i, track in enumerate(tracks)]

    def loglik(self, theta: Sequence[float]) -> float:
        natural = self.pmap.to_natural(theta)
        if self.pmap.n_states == 1:
            return sum(lik.loglik(natural.params, natural.kernels[0]) for lik in self.likelihoods)
        hmm = natural.to_hmm(self.delta0)
        return sum(lik.hmm_loglik(natural.params, hmm) for lik in self.likelihoods)

    def __call__(self, theta: Sequence[float]) -> float:
        try:
            value = self.loglik(theta)
        except (ModelError, InputError) as e:
            logger.debug(f"Objective failed at {np.round(theta, 4).tolist()}: {e}")
            return PENALTY
        return -value if np.isfinite(value) else PENALTY


def resolve_reference(raster: HabitatRaster, reference_categories: Sequence[str] = ()) -> List[int]:
    """
    Layer indices whose beta is fixed to 0

    Every categorical group needs exactly one reference category; groups with
    a single category are their own reference.
    """
    if isinstance(reference_categories, str):
        reference_categories = [reference_categories]
    indices = [raster.layer_index(name) for name in reference_categories]
    for i, name in zip(indices, reference_categories):
        if not any(i in group for group in raster.categorical_groups):
            raise InputError(f"reference category '{name}' is not a categorical layer")
    for group in raster.categorical_groups:
        chosen = [i for i in indices if i in group]
        if len(group) == 1 and not chosen:
            chosen = list(group)
            indices += chosen
        if len(chosen) != 1:
            names = [raster.layer_names[i] for i in group]
            raise InputError(f"name exactly one reference category among {names}")
    return sorted(indices)


def check_visited(tracks: Sequence[Track], raster: HabitatRaster, reference_indices: Sequence[int]):
    """Every category with a free coefficient must contain some observed location"""
    visited = set()
    for track in tracks:
        visited |= visited_categories(track, raster)
    for group in raster.categorical_groups:
        for i in group:
            name = raster.layer_names[i]
            if i not in reference_indices and name not in visited:
                raise InputError(f"habitat category '{name}' is never visited; its coefficient is not estimable")


def _step_length_quantiles(tracks: Sequence[Track]) -> np.ndarray:
    lengths = np.concatenate([t.step_lengths() for t in tracks])
    lengths = lengths[lengths > 0]
    if lengths.size == 0:
        raise InputError("all observed steps have zero length; movement parameters are not estimable")
    return np.quantile(lengths, [0.1, 0.25, 0.75, 0.9, 1.0])


def initial_working(pmap: ParameterMap, tracks: Sequence[Track], rng: np.random.Generator) -> np.ndarray:
    """
    Random starting point

    beta ~ U(-2, 2). Movement parameters are drawn around step-length
    quantiles; with several states the range is split so that state 1 is the
    slowest. Gamma diagonals start in (0.7, 0.95).
    """
    q10, q25, q75, q90, qmax = _step_length_quantiles(tracks)
    n = pmap.n_states
    lo, hi = (q25, q75) if n == 1 else (q10, q90)
    bounds = np.exp(np.linspace(math.log(lo), math.log(max(hi, lo * 1.01)), n + 1))

    theta = list(rng.uniform(-2.0, 2.0, len(pmap.free_indices)))
    for k in range(n):
        scale = math.exp(rng.uniform(math.log(bounds[k]), math.log(bounds[k + 1])))
        if pmap.model.kernel == "normal":
            theta.append(math.log(scale / (math.sqrt(2.0) * RAYLEIGH_MEAN)))
        elif pmap.model.kernel == "fixed-radius":
            # Steps longer than 2r have zero density
            floor = 0.55 * qmax if n == 1 else 0.5 * scale
            theta.append(math.log(max(scale, floor) * rng.uniform(1.0, 1.5)))
        else:
            shape = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
            theta += [math.log(shape), math.log(shape / scale)]
    if n > 1:
        for i in range(n):
            stay = rng.uniform(0.7, 0.95)
            theta += [math.log((1.0 - stay) / (n - 1) / stay)] * (n - 1)
    return np.array(theta, dtype=float)


def _run_start(objective: Objective, x0: np.ndarray, index: int, max_iter: int, tol: float) -> Dict:
    record = {"start": index, "x0": [float(v) for v in x0]}
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            result = minimize(objective, x0, method="Nelder-Mead",
                              options={"maxiter": max_iter, "xatol": tol, "fatol": tol, "adaptive": True})
    except Exception as e:
        record.update({"error": str(e), "converged": False, "loglik": None})
        return record
    failed = not np.isfinite(result.fun) or result.fun >= PENALTY
    record.update({
        "x": [float(v) for v in result.x],
        "loglik": None if failed else float(-result.fun),
        "iterations": int(result.nit),
        "evaluations": int(result.nfev),
        "converged": bool(result.success) and not failed,
        "message": "no finite likelihood reached" if failed else str(result.message),
    })
    return record


def fit(tracks: Sequence[Track], raster: HabitatRaster, model: ModelSpec, mc: McConfig, starts: int = 10,
        seed: int = 0, reference_categories: Sequence[str] = (), workers: int = 1,
        max_iter: int = 2000, tol: float = 1e-4, delta0: Optional[Sequence[float]] = None) -> FitResult:
    """
    Multi-start maximum likelihood fit

    Args:
        tracks: Observed tracks (independent)
        raster: Habitat covariates
        model: Kernel variant and number of states
        mc: Monte Carlo sizes; base samples are frozen for the whole fit
        starts: Number of random starting points
        seed: Seed for the starting points
        reference_categories: Category names whose beta is fixed to 0
        workers: Worker processes for the starts
        delta0: Initial state distribution (stationary when omitted)

    Returns:
        FitResult at the best local optimum (no standard errors yet)
    """
    if starts < 1:
        raise InputError(f"starts must be >= 1, got {starts}")
    if not tracks:
        raise InputError("no tracks to fit")
    if sum(len(t.step_index()) for t in tracks) < 1:
        raise InputError("no contributing steps: every step has a missing endpoint")

    reference = resolve_reference(raster, reference_categories)
    check_visited(tracks, raster, reference)
    pmap = ParameterMap(model, raster.layer_names, reference)
    delta0 = None if delta0 is None else np.asarray(delta0, dtype=float)
    objective = Objective(tracks, raster, pmap, mc, delta0)

    children = np.random.SeedSequence(seed).spawn(starts)
    initial = [initial_working(pmap, tracks, np.random.default_rng(child)) for child in children]
    logger.info(f"🔍 Fitting {model.kernel} model with {model.n_states} state(s): "
                f"{pmap.size} parameters, {starts} starts, {sum(len(l.steps) for l in objective.likelihoods)} steps")

    if workers > 1 and starts > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_start, objective, x0, k, max_iter, tol) for k, x0 in enumerate(initial)]
            records = [f.result() for f in futures]
    else:
        records = [_run_start(objective, x0, k, max_iter, tol) for k, x0 in enumerate(initial)]

    for record in records:
        if record["loglik"] is None:
            logger.warning(f"⚠️ Start {record['start']} failed: {record.get('error') or record.get('message')}")
        else:
            logger.debug(f"Start {record['start']}: loglik {record['loglik']:.4f}, "
                         f"{record['iterations']} iterations, converged={record['converged']}")

    finished = [r for r in records if r["loglik"] is not None]
    if not finished:
        raise ModelError(f"all {starts} optimizer starts failed")
    best = max(finished, key=lambda r: r["loglik"])
    natural = pmap.to_natural(best["x"])
    logger.info(f"✅ Best start {best['start']}: loglik {best['loglik']:.4f}")

    return FitResult(
        model=pmap.to_model_dict(),
        estimates=pmap.natural_values(natural),
        loglik=best["loglik"],
        mc=mc.to_dict(),
        seed=int(seed),
        working=best["x"],
        starts=records,
        convergence={"best_start": best["start"], "converged": sum(r["converged"] for r in records),
                     "failed": starts - len(finished), "best_converged": best["converged"]},
        derived=derived_quantities(natural, raster),
    )


def derived_quantities(natural: NaturalParams, raster: HabitatRaster) -> Dict:
    """Resource-independent movement summaries and habitat utilisation values"""
    derived: Dict = {"movement": [kernel.describe() for kernel in natural.kernels]}
    if raster.is_one_hot():
        values = habitat_utilisation(raster, natural.params)
        derived["utilisation"] = dict(zip(raster.layer_names, (float(v) for v in values)))
    return derived


# ---------------------------------------------------------------------------
# Standard errors
# ---------------------------------------------------------------------------

def finite_difference_hessian(f: Callable[[np.ndarray], float], theta: Sequence[float],
                              rel_step: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian with steps h_i = rel_step * max(1, |theta_i|)"""
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    h = rel_step * np.maximum(1.0, np.abs(theta))
    f0 = f(theta)
    hess = np.zeros((n, n))

    def shifted(*moves):
        x = theta.copy()
        for i, s in moves:
            x[i] += s * h[i]
        return f(x)

    for i in range(n):
        hess[i, i] = (shifted((i, 1)) - 2.0 * f0 + shifted((i, -1))) / h[i] ** 2
    for i, j in zip(*np.triu_indices(n, k=1)):
        hess[i, j] = hess[j, i] = (shifted((i, 1), (j, 1)) - shifted((i, 1), (j, -1))
                                   - shifted((i, -1), (j, 1)) + shifted((i, -1), (j, -1))) / (4.0 * h[i] * h[j])
    if not np.all(np.isfinite(hess)):
        raise ModelError("Hessian has non-finite entries; the optimum is on the edge of the parameter space")
    return hess


def covariance_from_hessian(hess: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of the Hessian of the negative log-likelihood, and its root diagonal"""
    try:
        chol = np.linalg.cholesky(hess)
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(hess)
        raise ModelError(f"Hessian is not positive definite (smallest eigenvalue {eig.min():.3g}); "
                         f"the fit is not at a maximum or a parameter is not identifiable")
    inv_chol = np.linalg.inv(chol)
    cov = inv_chol.T @ inv_chol
    return cov, np.sqrt(np.diag(cov))


def hessian_se(result: FitResult, tracks: Sequence[Track], raster: HabitatRaster,
               mc_hessian: Optional[McConfig] = None, growth: float = 1.5, tol: float = 0.02,
               max_rounds: int = 3, delta0: Optional[Sequence[float]] = None) -> FitResult:
    """
    Hessian-based standard errors and 95% confidence intervals

    The Hessian is recomputed with Monte Carlo sizes multiplied by growth
    until successive standard error vectors agree within tol (relative).
    """
    pmap = result.parameter_map
    theta = np.asarray(result.working, dtype=float)
    mc = mc_hessian or McConfig(**result.mc)
    delta0 = None if delta0 is None else np.asarray(delta0, dtype=float)

    if max_rounds < 1:
        raise InputError(f"max_rounds must be >= 1, got {max_rounds}")
    previous = None
    for round_ in range(max_rounds):
        used = mc
        objective = Objective(tracks, raster, pmap, mc, delta0)
        with np.errstate(over="ignore", invalid="ignore"):
            hess = finite_difference_hessian(lambda th: -objective.loglik(th), theta)
        _, se = covariance_from_hessian(hess)
        logger.info(f"📐 Hessian round {round_ + 1} (n_c={mc.n_c}, n_z={mc.n_z}): SE {np.round(se, 4).tolist()}")
        if previous is not None and np.all(np.abs(se - previous) <= tol * np.abs(previous)):
            break
        previous = se
        mc = mc.scaled(growth)
    else:
        if max_rounds > 1:
            logger.warning(f"⚠️ Standard errors did not stabilise within {max_rounds} rounds")

    result.working_se = [float(s) for s in se]
    result.se, result.ci95 = _natural_uncertainty(pmap, theta, se)
    result.mc_hessian = used.to_dict()
    return result


def _natural_uncertainty(pmap: ParameterMap, theta: np.ndarray, se: np.ndarray):
    """Map working-scale SEs to natural names; CIs are transformed working CIs"""
    names = pmap.natural_names()
    se_out: Dict[str, Optional[float]] = {name: None for name in names}
    ci_out: Dict[str, Optional[List[float]]] = {name: None for name in names}

    pos = 0
    for i in pmap.free_indices:
        name = f"beta_{pmap.layer_names[i]}"
        se_out[name] = float(se[pos])
        ci_out[name] = [float(theta[pos] - Z_95 * se[pos]), float(theta[pos] + Z_95 * se[pos])]
        pos += 1
    for i in pmap.reference_indices:
        se_out[f"beta_{pmap.layer_names[i]}"] = 0.0

    for k in range(pmap.n_states):
        for f in pmap.kernel_fields:
            name = f"{f}{pmap._state_suffix(k)}"
            value = math.exp(theta[pos])
            # Delta method on the natural scale
            se_out[name] = float(value * se[pos])
            ci_out[name] = [math.exp(theta[pos] - Z_95 * se[pos]), math.exp(theta[pos] + Z_95 * se[pos])]
            pos += 1

    if pmap.n_states == 2:
        for (i, j) in pmap._off_diagonal():
            lo, hi = expit(theta[pos] - Z_95 * se[pos]), expit(theta[pos] + Z_95 * se[pos])
            ci_out[f"gamma_{i + 1}{j + 1}"] = [float(lo), float(hi)]
            ci_out[f"gamma_{i + 1}{i + 1}"] = [float(1.0 - hi), float(1.0 - lo)]
            p = expit(theta[pos])
            se_out[f"gamma_{i + 1}{j + 1}"] = se_out[f"gamma_{i + 1}{i + 1}"] = float(p * (1.0 - p) * se[pos])
            pos += 1
    return se_out, ci_out


# ---------------------------------------------------------------------------
# Decoding and goodness of fit
# ---------------------------------------------------------------------------

def viterbi(track: Track, raster: HabitatRaster, params: RsfParams, hmm: HmmSpec, mc: McConfig,
            track_index: int = 0) -> np.ndarray:
    """
    Most likely state sequence (0-based)

    Returns:
        One entry per track row: the state driving the step from that row,
        -1 where no step starts (missing locations and the last row)
    """
    if hmm.n_states < 2:
        raise InputError("decoding requires N >= 2 states")
    return TrackLikelihood(track, raster, mc, track_index).viterbi(params, hmm)


@dataclass
class GofResult:
    table: pd.DataFrame
    ks_statistic: float
    p_value: float
    n_observed: int
    n_simulated: int

    def summary(self) -> Dict:
        return {"ks_statistic": self.ks_statistic, "p_value": self.p_value,
                "n_observed": self.n_observed, "n_simulated": self.n_simulated}


def step_length_table(observed: np.ndarray, simulated: np.ndarray, bin_width: float = 0.05) -> pd.DataFrame:
    """Binned densities of two step-length samples over [0, max]"""
    top = max(float(observed.max()), float(simulated.max()))
    edges = np.arange(0.0, top + bin_width, bin_width)
    if edges.size < 2:
        edges = np.array([0.0, bin_width])
    obs, _ = np.histogram(observed, bins=edges, density=True)
    sim, _ = np.histogram(simulated, bins=edges, density=True)
    return pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "observed_density": obs,
                         "simulated_density": sim})


def gof_steplengths(result: FitResult, tracks: Sequence[Track], raster: HabitatRaster, sim_length: int = 10_000,
                    seed: int = 0, bin_width: float = 0.05, K: int = DEFAULT_CANDIDATES) -> GofResult:
    """
    Compare observed step lengths with a track simulated from the fitted model

    The simulation starts at the first observed location when it lies in the
    study region, otherwise from the fitted utilisation distribution.
    """
    observed = np.concatenate([t.step_lengths() for t in tracks]) if tracks else np.empty(0)
    if observed.size < 2:
        raise InputError(f"too few steps for comparison: {observed.size} observed step(s)")

    natural = result.natural()
    first = tracks[0].points[tracks[0].observed][0]
    inside = np.isfinite(SelectionSurface(raster, natural.params).log_w(first))
    init = first if inside else FROM_TARGET
    logger.info(f"🎲 Simulating {sim_length} locations from the fitted model")
    if len(natural.kernels) == 1:
        sim = simulate_track(sim_length, init, natural.kernels[0], raster, natural.params, K=K, seed=seed)
    else:
        sim, _ = simulate_multistate(sim_length, init, natural.to_hmm(), raster, natural.params, K=K, seed=seed)
    simulated = sim.step_lengths()

    ks = ks_2samp(observed, simulated)
    return GofResult(step_length_table(observed, simulated, bin_width), float(ks.statistic), float(ks.pvalue),
                     int(observed.size), int(simulated.size))
