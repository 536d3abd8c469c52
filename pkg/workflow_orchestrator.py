#!/usr/bin/env python3
"""
Local Gibbs Workflow Orchestrator
=================================

Command-line front end tying the modules together:
1. landscape  - write a synthetic patchy habitat map (ASCII grid + manifest)
2. simulate   - simulate a track from the local Gibbs model
3. fit        - maximum likelihood fit with Hessian-based confidence intervals
4. decode     - Viterbi decoding of behavioural states from a fitted model
5. gof        - step-length goodness of fit against a simulated track
6. experiment - replicated simulation study for one of the three scenarios

Every command writes a metadata block with its effective settings and the
tool version next to its results. Exit codes: 0 success, 1 numerical or model
failure, 2 invalid input.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from batch_experiments import ExperimentSettings, ensure_directories, run_experiment, write_experiment
from config import load_config, mc_sizes, metadata, resolve_settings, write_metadata
from errors import InputError, ModelError
from fit_report import write_report
from habitat import RsfParams, load_raster, make_patchy_codes, write_categorical_raster
from inference import FitResult, ModelSpec, fit, gof_steplengths, hessian_se, viterbi
from kernels import KERNEL_NAMES, FixedRadiusKernel, GammaRadiusKernel, KernelSpec, NormalKernel, kernel_to_dict
from likelihood import McConfig
from simulator import (FROM_TARGET, TRACK_FORMAT_VERSION, HmmSpec, Track, movement_summary, read_track_csv,
                       read_tracks, simulate_multistate, simulate_track, simulate_visiting_all, write_track_csv)

EXIT_OK, EXIT_MODEL, EXIT_INPUT = 0, 1, 2
DEFAULT_CONFIG_FILE = "config.json"


def build_kernels(kernel: str, n_states: int, settings: Dict[str, Any]) -> List[KernelSpec]:
    """One kernel per state from the per-state parameter lists"""
    def per_state(key: str) -> List[float]:
        values = settings.get(key)
        values = [values] if np.isscalar(values) else list(values or [])
        if len(values) != n_states:
            raise InputError(f"--{key} needs {n_states} value(s) for {n_states} state(s), got {values}")
        return [float(v) for v in values]

    if kernel == "normal":
        return [NormalKernel(s) for s in per_state("sigma")]
    if kernel == "fixed-radius":
        return [FixedRadiusKernel(r) for r in per_state("radius")]
    if kernel == "gamma-radius":
        return [GammaRadiusKernel(a, r) for a, r in zip(per_state("alpha"), per_state("rho"))]
    raise InputError(f"unknown kernel '{kernel}', expected one of {list(KERNEL_NAMES)}")


def persistence_matrix(n_states: int, stay: float) -> np.ndarray:
    """Gamma with stay on the diagonal and the rest spread evenly"""
    if n_states == 1:
        return np.ones((1, 1))
    if not 0.0 <= stay <= 1.0:
        raise InputError(f"--stay must be a probability, got {stay}")
    gamma = np.full((n_states, n_states), (1.0 - stay) / (n_states - 1))
    np.fill_diagonal(gamma, stay)
    return gamma


def parse_init(value):
    if value is None or value == FROM_TARGET or value == [FROM_TARGET]:
        return FROM_TARGET
    try:
        point = [float(v) for v in value]
    except (TypeError, ValueError):
        raise InputError(f"--init must be '{FROM_TARGET}' or two coordinates, got {value}")
    if len(point) != 2:
        raise InputError(f"--init must be '{FROM_TARGET}' or two coordinates, got {value}")
    return np.array(point)


def _required(settings: Dict[str, Any], key: str) -> Any:
    if settings.get(key) in (None, [], ""):
        raise InputError(f"--{key.replace('_', '-')} is required")
    return settings[key]


class WorkflowOrchestrator:
    """Runs the commands of the local Gibbs toolkit"""

    def __init__(self, config_file: Optional[str] = None, log_level: Optional[str] = None):
        """
        Initialize the orchestrator

        Args:
            config_file: JSON config file (config.json is used when present)
            log_level: Overrides the configured logging level
        """
        if config_file is None and Path(DEFAULT_CONFIG_FILE).exists():
            config_file = DEFAULT_CONFIG_FILE
        self.config = load_config(config_file)

        level = (log_level or self.config.get("logging", {}).get("level", "INFO")).upper()
        logging.basicConfig(
            level=getattr(logging, level, logging.INFO),
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )
        self.logger = logging.getLogger(__name__)

    def _output_path(self, path: Optional[str], default_name: str) -> Path:
        if path:
            out = Path(path)
            out.parent.mkdir(parents=True, exist_ok=True)
            return out
        return ensure_directories(self.config) / default_name

    def cmd_landscape(self, flags: Dict[str, Any]) -> Dict[str, Any]:
        """Write a synthetic categorical habitat map"""
        s = resolve_settings(self.config, "landscape", flags)
        directory = self._output_path(s.get("output"), "landscape")
        codes = make_patchy_codes(int(s["rows"]), int(s["cols"]), len(s["categories"]), float(s["smoothness"]),
                                  seed=int(s["seed"]))
        manifest = write_categorical_raster(directory, codes, s["categories"], cell_size=float(s["cell_size"]))
        write_metadata(manifest.with_suffix(".meta.json"), metadata("landscape", s))
        self.logger.info(f"🗺️ Landscape written: {manifest}")
        return {"manifest": manifest, "cells": codes.size}

    def cmd_simulate(self, flags: Dict[str, Any]) -> Dict[str, Any]:
        """Simulate a track (optionally rejecting tracks that miss a habitat category)"""
        s = resolve_settings(self.config, "simulate", flags)
        raster = load_raster(_required(s, "raster"))
        n_states = int(s["states"])
        kernels = build_kernels(s["kernel"], n_states, s)
        hmm = HmmSpec(persistence_matrix(n_states, float(s["stay"])), kernels)

        beta = list(s["beta"])
        if len(beta) != raster.n_layers:
            raise InputError(f"--beta needs {raster.n_layers} values for layers {list(raster.layer_names)}")
        params = RsfParams(beta)
        init = parse_init(s.get("init"))
        T, K, seed = int(s["T"]), int(s["K"]), int(s["seed"])

        movement = ", ".join(movement_summary(k) for k in kernels)
        self.logger.info(f"🎲 Simulating {T} locations ({movement}, {n_states} state(s), K={K}, seed={seed})")
        attempts = 1
        if s.get("require_all_categories"):
            track, _, attempts = simulate_visiting_all(T, init, hmm, raster, params, K, seed)
        elif n_states == 1:
            track = simulate_track(T, init, kernels[0], raster, params, K, seed)
        else:
            track, _ = simulate_multistate(T, init, hmm, raster, params, K, seed)

        out = self._output_path(s.get("output"), "track.csv")
        write_track_csv(track, out)
        meta = metadata("simulate", s, format_version=TRACK_FORMAT_VERSION)
        meta["kernels"] = [kernel_to_dict(k) for k in kernels]
        write_metadata(out.with_suffix(".meta.json"), meta)
        self.logger.info(f"✅ Track saved: {out}")
        return {"track": out, "locations": len(track), "attempts": attempts}

    def cmd_fit(self, flags: Dict[str, Any]) -> Dict[str, Any]:
        """Fit a model and compute standard errors"""
        s = resolve_settings(self.config, "fit", flags)
        raster = load_raster(_required(s, "raster"))
        tracks = read_tracks(_required(s, "tracks"))
        model = ModelSpec(s["kernel"], int(s["states"]))
        mc = McConfig(**mc_sizes(s, s["kernel"]), seed=int(s["mc_seed"]), lhs=bool(s["lhs"]))
        s["mc"] = mc.to_dict()

        result = fit(tracks, raster, model, mc, starts=int(s["starts"]), seed=int(s["seed"]),
                     reference_categories=s.get("reference_category") or [], workers=int(s["workers"]),
                     max_iter=int(s["max_iter"]))

        hessian_error = None
        if s.get("hessian"):
            try:
                hessian_se(result, tracks, raster)
            except ModelError as e:
                hessian_error = e
                self.logger.error(f"❌ Standard errors failed: {e}")

        out = self._output_path(s.get("output"), "fit.json")
        result.save(out, metadata("fit", s))
        reports = write_report(result, out.with_suffix(".md"), out.with_suffix(".html") if s.get("html") else None)
        self.logger.info(f"✅ Fit report saved: {out}")
        if hessian_error is not None:
            raise hessian_error
        return {"fit": out, "report": reports["markdown"], "loglik": result.loglik,
                "converged": f"{result.convergence['converged']}/{len(result.starts)}"}

    def cmd_decode(self, flags: Dict[str, Any]) -> Dict[str, Any]:
        """Viterbi state sequence of a track under a fitted state-switching model"""
        s = resolve_settings(self.config, "decode", flags)
        result = FitResult.load(_required(s, "fit"))
        raster = load_raster(_required(s, "raster"))
        if list(raster.layer_names) != list(result.model["layer_names"]):
            raise InputError(f"raster layers {list(raster.layer_names)} do not match the fitted model's "
                             f"{result.model['layer_names']}")
        track = read_track_csv(_required(s, "track"))
        natural = result.natural()
        mc = McConfig(**result.mc)

        states = viterbi(track, raster, natural.params, natural.to_hmm(), mc)
        out = self._output_path(s.get("output"), "states.csv")
        write_track_csv(Track(track.points, states=states, start_time=track.start_time, name=track.name), out)
        write_metadata(out.with_suffix(".meta.json"), metadata("decode", s, format_version=TRACK_FORMAT_VERSION))
        counts = np.bincount(states[states >= 0], minlength=natural.to_hmm().n_states)
        self.logger.info(f"✅ States saved: {out}")
        return {"states": out, **{f"state {k + 1} steps": int(c) for k, c in enumerate(counts)}}

    def cmd_gof(self, flags: Dict[str, Any]) -> Dict[str, Any]:
        """Compare observed step lengths with a simulation from the fitted model"""
        s = resolve_settings(self.config, "gof", flags)
        result = FitResult.load(_required(s, "fit"))
        raster = load_raster(_required(s, "raster"))
        tracks = read_tracks(_required(s, "tracks"))

        gof = gof_steplengths(result, tracks, raster, sim_length=int(s["sim_length"]), seed=int(s["seed"]),
                              bin_width=float(s["bin_width"]))
        out = self._output_path(s.get("output"), "gof_steplengths.csv")
        gof.table.to_csv(out, index=False)
        write_metadata(out.with_suffix(".json"), {**gof.summary(), "metadata": metadata("gof", s)})
        self.logger.info(f"✅ Step-length table saved: {out}")
        return {"table": out, "KS statistic": f"{gof.ks_statistic:.4f}", "p-value": f"{gof.p_value:.4g}"}

    def cmd_experiment(self, flags: Dict[str, Any]) -> Dict[str, Any]:
        """Replicated simulation study"""
        s = resolve_settings(self.config, "experiment", flags)
        sizes = {"n_c": s.get("nc"), "n_z": s.get("nz"), "n_r": s.get("nr")}
        settings = ExperimentSettings(
            scenario=int(s["scenario"]), reps=int(s["reps"]), T=int(s["T"]), starts=int(s["starts"]),
            seed=int(s["seed"]), workers=int(s["workers"]),
            mc_overrides={k: int(v) for k, v in sizes.items() if v is not None},
            mc_seed=int(s["mc_seed"]), lhs=bool(s["lhs"]), hessian=bool(s.get("hessian")),
        )
        if settings.reps < 1:
            raise InputError(f"--reps must be >= 1, got {settings.reps}")
        raster = load_raster(s["raster"]) if s.get("raster") else None

        frame, summary = run_experiment(settings, raster, landscape_seed=int(s["seed"]))
        out_dir = self._output_path(s.get("output"), f"experiment_scenario{settings.scenario}")
        csv_path, json_path = write_experiment(frame, summary, out_dir, metadata("experiment", s))
        results = {"replications": csv_path, "summary": json_path,
                   "succeeded": f"{summary['succeeded']}/{settings.reps}"}
        accuracy = summary["columns"].get("state_accuracy")
        if accuracy:
            results["median state accuracy"] = f"{accuracy['median']:.3f}"
        return results

    def _print_workflow_summary(self, command: str, results: Dict[str, Any]):
        """Print a summary of command results"""
        print("=" * 50)
        print(f"📊 {command.upper()} SUMMARY")
        print("=" * 50)
        for key, value in results.items():
            print(f"   • {key}: {value}")
        print("=" * 50)

    def run(self, command: str, flags: Dict[str, Any]) -> Dict[str, Any]:
        handler = getattr(self, f"cmd_{command}")
        results = handler(flags)
        self._print_workflow_summary(command, results)
        return results


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument('--config', '-c', help=f'Configuration file path (default: {DEFAULT_CONFIG_FILE} if present)')
    parser.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help='Logging level')
    parser.add_argument('--output', '-o', help='Output file (or directory for landscape/experiment)')


def _add_mc(parser: argparse.ArgumentParser):
    parser.add_argument('--nc', type=int, help='Intermediate point samples per step (default 50, 30 for gamma-radius)')
    parser.add_argument('--nz', type=int, help='Endpoint samples per intermediate point (default 50, 30 for gamma-radius)')
    parser.add_argument('--nr', type=int, help='Radius samples per step for gamma-radius (default 30)')
    parser.add_argument('--mc-seed', type=int, help='Seed of the Monte Carlo base samples')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Local Gibbs movement model toolkit",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s landscape -o habitat/
  %(prog)s simulate --raster habitat/habitat.yaml --kernel normal --sigma 0.2 --T 1000 --K 200 --seed 1
  %(prog)s simulate --raster habitat/habitat.yaml --kernel gamma-radius --alpha 0.7 --rho 3
  %(prog)s fit --raster habitat/habitat.yaml --tracks track.csv --reference-category W --starts 10
  %(prog)s decode --fit fit.json --raster habitat/habitat.yaml --track track.csv
  %(prog)s gof --fit fit.json --raster habitat/habitat.yaml --tracks track.csv
  %(prog)s experiment --scenario 1 --reps 10 --T 500
        """
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('landscape', help='Write a synthetic patchy habitat map')
    _add_common(p)
    p.add_argument('--rows', type=int)
    p.add_argument('--cols', type=int)
    p.add_argument('--cell-size', type=float, help='Cell size in km')
    p.add_argument('--categories', nargs='+')
    p.add_argument('--smoothness', type=float, help='Patch size in cells')
    p.add_argument('--seed', type=int)

    p = sub.add_parser('simulate', help='Simulate a track from the local Gibbs model')
    _add_common(p)
    p.add_argument('--raster', help='Raster manifest (YAML)')
    p.add_argument('--kernel', choices=KERNEL_NAMES)
    p.add_argument('--sigma', type=float, nargs='+', help='Normal kernel sigma per state (km)')
    p.add_argument('--radius', type=float, nargs='+', help='Availability radius per state (km)')
    p.add_argument('--alpha', type=float, nargs='+', help='Gamma radius shape per state')
    p.add_argument('--rho', type=float, nargs='+', help='Gamma radius rate per state (1/km)')
    p.add_argument('--states', type=int, help='Number of behavioural states')
    p.add_argument('--stay', type=float, help='Probability of staying in the current state')
    p.add_argument('--beta', type=float, nargs='+', help='Selection coefficient per layer')
    p.add_argument('--T', type=int, help='Number of locations')
    p.add_argument('--K', type=int, help='Candidate endpoints per step')
    p.add_argument('--seed', type=int)
    p.add_argument('--init', nargs='+', help=f"'{FROM_TARGET}' or two coordinates")
    p.add_argument('--require-all-categories', action='store_true', default=None,
                   help='Redraw tracks that miss a habitat category (up to 100 times)')

    p = sub.add_parser('fit', help='Fit a model to tracks')
    _add_common(p)
    _add_mc(p)
    p.add_argument('--raster', help='Raster manifest (YAML)')
    p.add_argument('--tracks', nargs='+', help='Track CSV files')
    p.add_argument('--kernel', choices=KERNEL_NAMES)
    p.add_argument('--states', type=int)
    p.add_argument('--starts', type=int, help='Random optimizer starts')
    p.add_argument('--seed', type=int, help='Seed of the starting points')
    p.add_argument('--reference-category', nargs='+', help='Category whose coefficient is fixed to 0')
    p.add_argument('--workers', type=int, help='Processes running starts in parallel')
    p.add_argument('--max-iter', type=int, help='Simplex iterations per start')
    p.add_argument('--no-hessian', dest='hessian', action='store_const', const=False, default=None,
                   help='Skip standard errors')
    p.add_argument('--html', action='store_true', default=None, help='Also write an HTML report')

    p = sub.add_parser('decode', help='Decode behavioural states')
    _add_common(p)
    p.add_argument('--fit', help='Fit report (JSON)')
    p.add_argument('--raster', help='Raster manifest (YAML)')
    p.add_argument('--track', help='Track CSV file')

    p = sub.add_parser('gof', help='Step-length goodness of fit')
    _add_common(p)
    p.add_argument('--fit', help='Fit report (JSON)')
    p.add_argument('--raster', help='Raster manifest (YAML)')
    p.add_argument('--tracks', nargs='+', help='Track CSV files')
    p.add_argument('--sim-length', type=int, help='Simulated locations (default 10000)')
    p.add_argument('--bin-width', type=float, help='Histogram bin width in km')
    p.add_argument('--seed', type=int)

    p = sub.add_parser('experiment', help='Replicated simulation study')
    _add_common(p)
    _add_mc(p)
    p.add_argument('--scenario', type=int, choices=[1, 2, 3])
    p.add_argument('--reps', type=int)
    p.add_argument('--T', type=int)
    p.add_argument('--starts', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--workers', type=int)
    p.add_argument('--raster', help='Raster manifest (synthetic landscape when omitted)')
    p.add_argument('--hessian', action='store_true', default=None,
                   help='Standard errors and interval coverage per replication')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """CLI interface for the workflow orchestrator"""
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ('command', 'config', 'log_level')}

    print("🐾 Local Gibbs Workflow Orchestrator")
    print("=" * 40)

    try:
        orchestrator = WorkflowOrchestrator(args.config, args.log_level)
        orchestrator.run(args.command, flags)
        print("✅ Command completed successfully!")
        return EXIT_OK
    except InputError as e:
        print(f"❌ Invalid input: {e}")
        return EXIT_INPUT
    except ModelError as e:
        print(f"❌ Model failure: {e}")
        return EXIT_MODEL
    except Exception as e:
        print(f"❌ Command failed: {e}")
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
