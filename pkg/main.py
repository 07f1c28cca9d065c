#!/usr/bin/env python3
"""
Quasiseparable cyclic reduction experiment runner

Runs the decay-bound, block tridiagonal solve, generalized Sylvester and
scaling benchmark experiments and writes plot-ready whitespace-delimited
data files plus a run manifest into the output directory.

Usage:
    python main.py decay --problem poisson --m 200
    python main.py decay --problem random-qbd --m 300 --seed 12648430
    python main.py solve --problem poisson --n 127 --m 127 --backend hodlr
    python main.py sylvester --sizes 127 255 511 1023 --reference
    python main.py bench --sizes 63 127 255 511 --repeats 3
    python main.py decay --spec specs/poisson.yaml --config config.yaml
"""

import argparse
import json
import logging
import os
import platform
import sys
import time
import traceback
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import numpy as np
import pandas as pd
import scipy
import yaml
from pydantic import BaseModel, Field, ValidationError

import decay_bounds
import hodlr
import linalg_kernel
import problems
import qcr_solver
import sylvester
from cyclic_reduction import StoppingRule, central_coefficient, solve_quadratic_equations, telemetry_lines
from errors import QcrError
from hodlr import TruncationPolicy
from parallel import thread_count
from problems import ProblemSpec

__version__ = "0.1.0"


class ResidualTolerances(BaseModel):
    dense: float = Field(1e-10, gt=0)
    hodlr_factor: float = Field(100.0, gt=0)
    sylvester: float = Field(1e-8, gt=0)


class DecaySettings(BaseModel):
    max_l: int = Field(25, ge=1)
    circle_samples: int = Field(512, ge=8)
    prior_gamma: float = Field(decay_bounds.PRIOR_GAMMA, gt=0)
    prior_rate: Optional[float] = Field(None, gt=0, lt=1)
    estimator: Literal["auto", "greedy", "markov"] = "auto"


class RunConfig(BaseModel):
    """Everything one run needs; built from config.yaml plus command-line overrides."""

    command: Literal["decay", "solve", "sylvester", "bench"]
    problem: ProblemSpec
    backend: Literal["dense", "hodlr"] = "hodlr"
    truncation: TruncationPolicy = Field(default_factory=TruncationPolicy)
    stop: StoppingRule = Field(default_factory=StoppingRule)
    residuals: ResidualTolerances = Field(default_factory=ResidualTolerances)
    decay: DecaySettings = Field(default_factory=DecaySettings)
    output: Path = Path("results")
    emit: Literal["dat", "csv"] = "dat"
    sizes: List[int] = Field(default_factory=list)
    repeats: int = Field(3, ge=1)
    reference: bool = False

    def residual_tolerance(self, backend: Optional[str] = None) -> float:
        if (backend or self.backend) == "hodlr":
            return self.residuals.hodlr_factor * self.truncation.rel_tol
        return self.residuals.dense


class ExperimentRunner:
    """Runs one command and records what it did."""

    def __init__(self, run: RunConfig, config: Dict):
        self.run = run
        self.config = config
        self.run_id = datetime.now().strftime('%Y%m%d_%H%M%S')
        self.output_dir = Path(run.output)
        self.output_dir.mkdir(parents=True, exist_ok=True)

        self._setup_logging()
        linalg_kernel.configure(**config.get('numeric', {}))

        self.stats = {
            'problems_run': 0,
            'checks_passed': 0,
            'checks_failed': 0,
            'files_written': [],
            'wall_times': {},
            'start_time': datetime.now(),
        }
        self.results: Dict[str, Any] = {}

        self.logger.info(f"Experiment runner initialized - Run ID: {self.run_id}, command: {run.command}")

    def _setup_logging(self):
        """Configure logging based on configuration."""
        log_config = self.config.get('logging', {})
        log_level = getattr(logging, log_config.get('level', 'INFO'))
        log_file = log_config.get('file', 'logs/qcr.log')

        os.makedirs(os.path.dirname(log_file) or '.', exist_ok=True)

        logging.basicConfig(
            level=log_level,
            format=log_config.get('format', '%(asctime)s - %(name)s - %(levelname)s - %(message)s'),
            handlers=[
                logging.FileHandler(log_file),
                logging.StreamHandler() if log_config.get('console_output', True) else logging.NullHandler()
            ]
        )

        self.logger = logging.getLogger(__name__)

    def _check(self, name: str, passed: bool, detail: str = ""):
        key = 'checks_passed' if passed else 'checks_failed'
        self.stats[key] += 1
        if passed:
            self.logger.info(f"Check passed: {name} {detail}")
        else:
            self.logger.warning(f"Check FAILED: {name} {detail}")

    def _table_path(self, stem: str) -> Path:
        return self.output_dir / f"{stem}.{self.run.emit}"

    def _write_table(self, table: pd.DataFrame, stem: str) -> Path:
        path = self._table_path(stem)
        if self.run.emit == 'dat':
            decay_bounds.write_dat(table, path)
        else:
            table.to_csv(path, index=False)
        self.stats['files_written'].append(path.name)
        self.logger.info(f"Wrote {len(table)} rows to {path}")
        return path

    def _append_timing(self, size: int, seconds: float, residual: float, stem: str = "timings"):
        """'size seconds residual' lines, appendable across runs."""
        path = self.output_dir / f"{stem}.dat"
        new_file = not path.exists()
        with open(path, 'a') as handle:
            if new_file:
                handle.write("# size seconds residual\n")
            handle.write(f"{size} {seconds:.6f} {residual:.6e}\n")
        if path.name not in self.stats['files_written']:
            self.stats['files_written'].append(path.name)

    # ------------------------------------------------------------------
    # decay
    # ------------------------------------------------------------------

    def cmd_decay(self):
        """CR to convergence, off-diagonal decay of H_0 and every applicable bound curve."""
        spec = self.run.problem
        if spec.kind not in ('poisson', 'random-qbd'):
            raise ValueError(f"decay runs on poisson or random-qbd problems, not {spec.kind}")
        settings = self.run.decay
        started = time.perf_counter()

        phi = problems.build(spec)
        split = decay_bounds.spectral_split(phi)
        self.results['split'] = {'t': split.t, 'inside': len(split.inside),
                                 'outside': len(split.outside), 'infinite': split.infinite_count}
        if spec.kind == 'random-qbd':
            self.results['clusters'] = problems.cluster_report(split)

        # truncation noise would sit above the tail of the bound curves
        solutions = solve_quadratic_equations(phi, self.run.truncation, self.run.stop, 'dense')
        state = solutions.state
        self._write_lines(telemetry_lines(state), "cr_telemetry.dat",
                          "# h norm_Aminus norm_Aplus max_offdiag_rank elapsed_seconds")
        self.results['cr_steps'] = state.step
        self.results['residuals'] = {k: float(v) for k, v in solutions.residuals.items()}

        H0 = solutions.H0
        sigmas = hodlr.offdiag_singular_values(H0, 0, 0, leaf_size=1)
        raw_sigmas = hodlr.offdiag_singular_values(central_coefficient(state, raw=True), 0, 0, leaf_size=1)
        C_ref = hodlr.offdiag_block(H0, 0, 0, leaf_size=1)

        E, F = decay_bounds.point_sets(phi, 0, 0, leaf_size=1)
        symmetric = (np.array_equal(phi.A_minus, phi.A_plus)
                     and np.array_equal(phi.A_zero, phi.A_zero.T))
        mode = 'symmetric-palindromic' if symmetric else 'general'

        estimator = settings.estimator
        if estimator == 'auto':
            estimator = 'greedy' if spec.kind == 'poisson' else 'markov'
        if estimator == 'greedy':
            estimates = decay_bounds.greedy_rational_curve(
                E, F, decay_bounds.seed_point(split), settings.max_l)
        else:
            lambda1, lambda2 = split.closest_to_one()
            estimates = decay_bounds.markov_rational_curve(E, F, lambda1, lambda2, settings.max_l)

        bound = decay_bounds.bound_curve(split, C_ref, mode, estimates, solutions)
        delta = decay_bounds.real_sets_delta(E, F)
        zolotarev = decay_bounds.zolotarev_curve(delta, settings.max_l) if delta else None
        rate = settings.prior_rate or split.t
        prior = decay_bounds.prior_line(settings.max_l, rate, settings.prior_gamma)

        table = decay_bounds.decay_table(sigmas, bound, zolotarev, prior, rows=settings.max_l)
        self._write_table(table, "decay")

        finite_step = decay_bounds.finite_step_rate(E, min(settings.max_l, 12),
                                                    count=settings.circle_samples)
        self.results['decay'] = {
            'mode': mode,
            'estimator': estimator,
            'gamma': bound.gamma,
            'parity': bound.parity,
            'condition_factor': bound.condition_factor,
            'measured_gamma': decay_bounds.measured_gamma(sigmas, estimates, bound.parity),
            'zolotarev_delta': delta,
            'prior_rate': rate,
            'sigma_ratio': float(sigmas[min(20, len(sigmas) - 1)] / sigmas[0]) if sigmas[0] > 0 else 0.0,
            'raw_limit_sigma_ratio': (float(raw_sigmas[min(20, len(raw_sigmas) - 1)] / raw_sigmas[0])
                                      if raw_sigmas[0] > 0 else 0.0),
            'finite_step_rate': [float(v) for v in finite_step],
        }

        floor = max(1e-15, 100 * np.finfo(float).eps * sigmas[0])
        relevant = table[table['sigma_l'] > floor]
        dominated = bool(np.all(relevant['sigma_l'] <= relevant['bound_rational'] * (1 + 1e-8)))
        self._check('bound dominates singular values', dominated, f"({len(relevant)} rows)")

        self.stats['problems_run'] += 1
        self.stats['wall_times']['decay'] = time.perf_counter() - started

    def _write_lines(self, lines: List[str], name: str, header: str):
        path = self.output_dir / name
        path.write_text("\n".join([header] + lines) + "\n")
        self.stats['files_written'].append(name)

    # ------------------------------------------------------------------
    # solve
    # ------------------------------------------------------------------

    def cmd_solve(self):
        """Block tridiagonal solves for the problem spec, one per size when a sweep is given."""
        spec = self.run.problem
        sizes = self.run.sizes or [None]
        for size in sizes:
            current = spec if size is None else spec.model_copy(update={'n': size, 'm': size})
            system = problems.build_system(current)
            solution = qcr_solver.solve(system, self.run.truncation, backend=self.run.backend,
                                        tol_res=self.run.residual_tolerance())
            stem = f"solution_n{system.n}_m{system.m}"
            np.savetxt(self.output_dir / f"{stem}.dat", solution.x)
            self.stats['files_written'].append(f"{stem}.dat")
            self._append_timing(system.n, solution.seconds, solution.relative_residual)
            self._check(f"residual n={system.n} m={system.m}", True,
                        f"{solution.relative_residual:.3e}")
            self.results.setdefault('solve', []).append({
                'n': system.n, 'm': system.m, 'seconds': solution.seconds,
                'residual': solution.relative_residual, 'levels': solution.levels,
                'max_offdiag_rank': solution.max_offdiag_rank, 'fallback': solution.fallback,
            })
            self.stats['problems_run'] += 1

    # ------------------------------------------------------------------
    # sylvester
    # ------------------------------------------------------------------

    def cmd_sylvester(self):
        """Convection-diffusion sweep; optional reference solver timings."""
        spec = self.run.problem
        epsilon = float(spec.params.get('epsilon', sylvester.DEFAULT_EPSILON))
        sizes = self.run.sizes or [spec.m]
        for size in sizes:
            problem = problems.cd_problem(size, epsilon, spec.seed)
            started = time.perf_counter()
            X = sylvester.solve_sylvester(problem, self.run.truncation, backend=self.run.backend,
                                          tol_res=self.run.residuals.sylvester)
            seconds = time.perf_counter() - started
            residual = sylvester.sylvester_residual(problem, X)
            np.save(self.output_dir / f"sylvester_n{size}.npy", X)
            self.stats['files_written'].append(f"sylvester_n{size}.npy")
            self._append_timing(size, seconds, residual)
            self._check(f"sylvester residual n={size}", True, f"{residual:.3e}")
            record = {'n': size, 'seconds': seconds, 'residual': residual}

            if self.run.reference:
                started = time.perf_counter()
                X_ref = sylvester.reference_solve(problem)
                ref_seconds = time.perf_counter() - started
                ref_residual = sylvester.sylvester_residual(problem, X_ref)
                self._append_timing(size, ref_seconds, ref_residual, stem="reference_timings")
                record.update({
                    'reference_seconds': ref_seconds,
                    'reference_residual': ref_residual,
                    'relative_difference': float(np.linalg.norm(X - X_ref) / np.linalg.norm(X_ref)),
                })
            self.results.setdefault('sylvester', []).append(record)
            self.stats['problems_run'] += 1

    # ------------------------------------------------------------------
    # bench
    # ------------------------------------------------------------------

    def _time_solve(self, size: int, backend: str) -> Dict[str, float]:
        system = problems.poisson_system(size, size, self.run.problem.seed)
        timings = []
        solution = None
        for _ in range(self.run.repeats):
            solution = qcr_solver.solve(system, self.run.truncation, backend=backend,
                                        tol_res=self.run.residual_tolerance(backend))
            timings.append(solution.seconds)
        return {'size': size, 'seconds': float(np.median(timings)),
                'residual': solution.relative_residual}

    def cmd_bench(self):
        """Median-of-repeats Poisson sweep with n = m and a log-log slope fit."""
        sizes = self.run.sizes or [63, 127, 255, 511]
        backends = [self.run.backend]
        if self.run.reference and self.run.backend != 'dense':
            backends.append('dense')

        for backend in backends:
            rows = [self._time_solve(size, backend) for size in sizes]
            table = pd.DataFrame(rows, columns=['size', 'seconds', 'residual'])
            self._write_table(table, f"bench_{backend}")
            for row in rows:
                self._append_timing(row['size'], row['seconds'], row['residual'], stem=f"timings_{backend}")
            exponent = fit_exponent(table['size'], table['seconds'])
            self.results.setdefault('bench', {})[backend] = {
                'exponent': exponent,
                'theoretical_target': 2.0 if backend == 'hodlr' else 3.0,
                'rows': rows,
            }
            if exponent is None:
                self.logger.info(f"{backend}: a single size gives no exponent")
            else:
                self.logger.info(f"{backend}: empirical exponent {exponent:.3f}")
            self.stats['problems_run'] += len(sizes)

    # ------------------------------------------------------------------

    def write_manifest(self):
        manifest = {
            'run_id': self.run_id,
            'version': __version__,
            'command': self.run.command,
            'problem': self.run.problem.model_dump(),
            'backend': self.run.backend,
            'truncation': self.run.truncation.model_dump(),
            'stop': self.run.stop.model_dump(),
            'residuals': self.run.residuals.model_dump(),
            'decay': self.run.decay.model_dump(),
            'numeric': linalg_kernel.settings.model_dump(),
            'sizes': self.run.sizes,
            'repeats': self.run.repeats,
            'threads': thread_count(),
            'platform': {
                'python': platform.python_version(),
                'system': platform.platform(),
                'numpy': np.__version__,
                'scipy': scipy.__version__,
                'pandas': pd.__version__,
            },
            'wall_times': self.stats['wall_times'],
            'checks': {'passed': self.stats['checks_passed'], 'failed': self.stats['checks_failed']},
            'files': self.stats['files_written'],
            'results': self.results,
        }
        path = self.output_dir / 'manifest.yaml'
        with open(path, 'w') as handle:
            yaml.safe_dump(_plain(manifest), handle, sort_keys=False)
        self.logger.info(f"Manifest written to {path}")

    def run_command(self) -> int:
        """Run the configured command; exit status 0 iff every check passed."""
        self.logger.info(f"Starting {self.run.command} run")
        started = time.perf_counter()
        try:
            getattr(self, f"cmd_{self.run.command}")()
        finally:
            self.stats['wall_times']['total'] = time.perf_counter() - started
            self.write_manifest()
        self.print_summary()
        return 0 if self.stats['checks_failed'] == 0 else 3

    def print_summary(self):
        """Print run summary."""
        duration = datetime.now() - self.stats['start_time']

        print("\n" + "=" * 60)
        print(f"{self.run.command.upper()} RUN SUMMARY")
        print("=" * 60)
        print(f"Run ID: {self.run_id}")
        print(f"Duration: {duration}")
        print(f"Problem: {self.run.problem.kind} m={self.run.problem.m} n={self.run.problem.n}")
        print(f"Backend: {self.run.backend}")
        print(f"Problems Run: {self.stats['problems_run']}")
        print(f"Checks Passed: {self.stats['checks_passed']}")
        print(f"Checks Failed: {self.stats['checks_failed']}")
        print(f"Output: {self.output_dir}")

        if 'decay' in self.results:
            decay = self.results['decay']
            print(f"Bound mode: {decay['mode']} (gamma={decay['gamma']:.4e}, parity {decay['parity']})")
            print(f"sigma_21 / sigma_1: {decay['sigma_ratio']:.3e}")
        for backend, bench in self.results.get('bench', {}).items():
            exponent = bench['exponent']
            shown = 'unavailable' if exponent is None else f"{exponent:.3f}"
            print(f"Exponent ({backend}): {shown} (target {bench['theoretical_target']})")

        print("=" * 60)


def fit_exponent(sizes, seconds) -> Optional[float]:
    """Least-squares slope of log(seconds) against log(size); None for fewer than two sizes."""
    sizes = np.asarray(sizes, dtype=float)
    seconds = np.asarray(seconds, dtype=float)
    if len(np.unique(sizes)) < 2:
        return None
    slope, _ = np.polyfit(np.log(sizes), np.log(seconds), 1)
    return float(slope)


def _plain(value):
    """Convert numpy scalars, paths and arrays into YAML-safe builtins."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, complex):
        return [value.real, value.imag]
    return value


def _load_config(config_path: str) -> Dict:
    """Load configuration from YAML file."""
    try:
        with open(config_path, 'r') as file:
            loaded = yaml.safe_load(file) or {}
    except FileNotFoundError:
        print(f"Configuration file {config_path} not found. Using defaults.")
        return _get_default_config()
    except yaml.YAMLError as e:
        print(f"Error parsing configuration file: {e}")
        return _get_default_config()

    config = _get_default_config()
    for section, values in loaded.items():
        if isinstance(values, dict) and isinstance(config.get(section), dict):
            config[section] = {**config[section], **values}
        else:
            config[section] = values
    return config


def _get_default_config() -> Dict:
    """Return default configuration if config file is not available."""
    return {
        'problem': {'kind': 'poisson', 'm': 200, 'n': 127, 'seed': problems.DEFAULT_SEED},
        'backend': 'hodlr',
        'numeric': {'pivot_threshold_factor': 1.0, 'infinite_eig_tol': 1e-13,
                    'svd_orthogonality_tol': 1e-12},
        'truncation': {'rel_tol': 1e-12, 'abs_tol': 0.0, 'max_rank': None, 'leaf_size': 32},
        'cyclic_reduction': {'tol': 1e-14, 'max_steps': 50},
        'residuals': {'dense': 1e-10, 'hodlr_factor': 100.0, 'sylvester': 1e-8},
        'decay': {'max_l': 25, 'circle_samples': 512, 'prior_gamma': decay_bounds.PRIOR_GAMMA,
                  'prior_rate': None, 'estimator': 'auto'},
        'output': {'directory': 'results', 'emit': 'dat'},
        'bench': {'sizes': [], 'repeats': 3},
        'logging': {'level': 'INFO', 'file': 'logs/qcr.log', 'console_output': True},
    }


def build_run_config(args: argparse.Namespace, config: Dict) -> RunConfig:
    """Merge config file values with command-line overrides."""
    problem = dict(config.get('problem', {}))
    if args.spec:
        problem = problems.load_spec(args.spec).model_dump()
    overrides = {'kind': args.problem, 'm': args.m, 'n': args.n, 'seed': args.seed}
    problem.update({k: v for k, v in overrides.items() if v is not None})
    if args.epsilon is not None:
        problem.setdefault('params', {})['epsilon'] = args.epsilon
    if args.command == 'sylvester' and problem.get('kind') != 'convection-diffusion':
        problem['kind'] = 'convection-diffusion'

    truncation = dict(config.get('truncation', {}))
    for key, value in (('rel_tol', args.tol), ('max_rank', args.max_rank), ('leaf_size', args.leaf_size)):
        if value is not None:
            truncation[key] = value

    output = config.get('output', {})
    bench = config.get('bench', {})
    return RunConfig(
        command=args.command,
        problem=ProblemSpec(**problem),
        backend=args.backend or config.get('backend', 'hodlr'),
        truncation=TruncationPolicy(**truncation),
        stop=StoppingRule(**config.get('cyclic_reduction', {})),
        residuals=ResidualTolerances(**config.get('residuals', {})),
        decay=DecaySettings(**config.get('decay', {})),
        output=Path(args.out or output.get('directory', 'results')),
        emit=args.emit or output.get('emit', 'dat'),
        sizes=args.sizes or bench.get('sizes', []),
        repeats=args.repeats or bench.get('repeats', 3),
        reference=args.reference,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Quasiseparable cyclic reduction experiments')
    parser.add_argument('command', choices=['decay', 'solve', 'sylvester', 'bench'])
    parser.add_argument('--config', default='config.yaml', help='Configuration file path')
    parser.add_argument('--spec', help='YAML problem spec (kind, m, n, seed, params)')
    parser.add_argument('--problem', choices=['poisson', 'random-qbd', 'convection-diffusion'])
    parser.add_argument('--m', type=int, help='Block size')
    parser.add_argument('--n', type=int, help='Block count')
    parser.add_argument('--seed', type=int, help='Random seed')
    parser.add_argument('--epsilon', type=float, help='Diffusion coefficient (convection-diffusion)')
    parser.add_argument('--tol', type=float, help='Relative truncation tolerance')
    parser.add_argument('--max-rank', type=int, help='Off-diagonal rank cap')
    parser.add_argument('--leaf-size', type=int, help='HODLR leaf size')
    parser.add_argument('--backend', choices=['dense', 'hodlr'])
    parser.add_argument('--out', help='Output directory')
    parser.add_argument('--emit', choices=['dat', 'csv'])
    parser.add_argument('--sizes', type=int, nargs='+', help='Size sweep')
    parser.add_argument('--repeats', type=int, help='Repetitions per size (median is reported)')
    parser.add_argument('--reference', action='store_true', help='Also run the reference solver')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the experiment runner."""
    args = build_parser().parse_args(argv)
    config = _load_config(args.config)

    try:
        run = build_run_config(args, config)
    except ValidationError as e:
        print(json.dumps({'error': 'InvalidConfiguration', 'message': str(e)}), file=sys.stderr)
        return 2

    runner = None
    try:
        runner = ExperimentRunner(run, config)
        return runner.run_command()
    except QcrError as e:
        if runner is not None:
            runner.logger.error(f"Run failed: {e}")
            runner.logger.error(traceback.format_exc())
        print(json.dumps(_plain(e.as_record())), file=sys.stderr)
        return 1
    except Exception as e:
        if runner is not None:
            runner.logger.error(f"Run failed: {e}")
            runner.logger.error(traceback.format_exc())
        print(json.dumps({'error': type(e).__name__, 'message': str(e)}), file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
