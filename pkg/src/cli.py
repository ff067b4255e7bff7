"""
Command-line entry point for OCN experiments.

Subcommands: generate, train, eval, check and scale resolve a RunConfig from
a named preset and/or a JSON file, write their artifacts to the output
directory and record the run in the registry. runs lists the registry.

Exit codes: 0 success, 1 numeric/runtime failure, 2 configuration error.
"""

import argparse
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .artifacts import (
    load_checkpoint, read_dataset, read_json, save_checkpoint, write_dataset, write_history,
    write_json, write_predictions, write_table,
)
from .config import Config, RunConfig, merge_documents, setup_logging
from .db_adapters import MEMORY_PATHS, RunStore, create_run_store
from .diag import (
    compare_losses, constant_spread, evaluate_model, loss_histogram, run_check_suite, scaling_study,
)
from .errors import ConfigurationError, NumericError
from .field import MlpField, init_field
from .solver import StepControl, get_tableau
from .systems import (
    SystemSpec, domain_dim, domain_from_document, generate_dataset, get_preset, get_system,
    sample_initials,
)
from .train import Dataset, LossSpec, OptimizerSpec, SolverSettings, TrainConfig, loss_only, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_CONFIG = 2

DEFAULT_SCALING_DTS = (0.2, 0.1, 0.05)
CHECK_POINTS = 5
RECORDED_COMMANDS = ('generate', 'train', 'eval', 'check', 'scale')


def resolve_document(preset: Optional[str], config_path: Optional[str],
                     seed: Optional[int] = None) -> Dict[str, Any]:
    """Preset document, deep-merged with the config file, then the seed override."""
    if preset is None and config_path is None:
        raise ConfigurationError("Need --preset and/or --config")
    document: Dict[str, Any] = get_preset(preset).to_document() if preset else {}
    if config_path:
        document = merge_documents(document, read_json(config_path))
    if seed is not None:
        document = merge_documents(document, {'system': {'seed': seed}})
    return document


def build_solver(run_config: RunConfig) -> SolverSettings:
    s = run_config.solver
    ctrl = StepControl(mode=s.mode, rtol=s.rtol, atol=s.atol, h=s.h, h_min=s.h_min,
                       h_max=s.h_max, safety=s.safety, max_steps=s.max_steps)
    return SolverSettings(ctrl, get_tableau(s.method))


def build_train_config(run_config: RunConfig, workers: int = 1) -> TrainConfig:
    t = run_config.training
    opt = t.optimizer
    return TrainConfig(
        dims=tuple(run_config.network.dims),
        mode=run_config.network.mode,
        batch_len=t.batch_len,
        loss=LossSpec(t.loss.kind, t.loss.omega),
        optimizer=OptimizerSpec(opt.kind, opt.eta, opt.beta1, opt.beta2, opt.eps, opt.K),
        solver=build_solver(run_config),
        seed=run_config.system.seed,
        threshold=opt.threshold,
        log_every=t.log_every,
        workers=workers,
    )


class ExperimentRunner:
    """Runs one subcommand against a resolved configuration."""

    def __init__(self, config: Config, out_dir: str, document: Optional[Dict[str, Any]] = None,
                 preset: Optional[str] = None):
        self.config = config
        self.out_dir = Path(out_dir)
        self.preset = preset
        self.document = document
        self.run_config = RunConfig.from_dict(document) if document is not None else None
        self.store = self._open_store()
        self.run_id: Optional[int] = None

    def _open_store(self) -> Optional[RunStore]:
        self.config.ensure_directories(str(self.out_dir))
        try:
            return create_run_store(self.config)
        except Exception as e:
            logger.warning(f"Run registry unavailable, continuing without it: {e}")
            return None

    # -- resolved objects ---------------------------------------------------

    def _require_config(self) -> RunConfig:
        if self.run_config is None:
            raise ConfigurationError("This command needs --preset and/or --config")
        return self.run_config

    @property
    def system(self) -> SystemSpec:
        return get_system(self._require_config().system.name)

    def _domain(self):
        section = self._require_config().system.domain
        domain = domain_from_document({k: v for k, v in asdict(section).items() if v is not None})
        if domain_dim(domain) != self.system.dim:
            raise ConfigurationError(
                f"Domain dimension {domain_dim(domain)} does not match system {self.system.name} ({self.system.dim})"
            )
        return domain

    def _dataset(self, dataset_path: Optional[str]) -> Dataset:
        """Read the given dataset, or generate one from the configuration and write it."""
        if dataset_path:
            dataset = read_dataset(dataset_path)
            logger.info(f"Loaded {dataset.m} trajectories from {dataset_path}")
            return dataset
        s = self._require_config().system
        initials = sample_initials(self._domain(), s.m, s.seed)
        dataset = generate_dataset(self.system, initials, s.T, s.dt, seed=s.seed, workers=self.config.workers)
        write_dataset(dataset, self.out_dir / 'dataset.csv')
        return dataset

    def _write_config(self):
        if self.run_config is not None:
            write_json(self.run_config.to_dict(), self.out_dir / 'config.json')

    # -- registry -----------------------------------------------------------

    def start(self, command: str):
        if self.store is not None:
            self.run_id = self.store.start_run(command, self.document, self.preset)

    def finish(self, status: str, message: Optional[str] = None, final_loss: Optional[float] = None,
               artifacts: Optional[Dict[str, str]] = None, metrics: Optional[Dict[str, float]] = None,
               history=None):
        if self.store is None or self.run_id is None:
            return
        if history:
            self.store.add_history(self.run_id, history)
        if metrics:
            self.store.add_metrics(self.run_id, metrics)
        self.store.finish_run(self.run_id, status, message, final_loss, artifacts)

    def close(self):
        if self.store is not None:
            self.store.close()

    # -- commands -----------------------------------------------------------

    def generate(self) -> Dict[str, str]:
        self._write_config()
        dataset = self._dataset(None)
        logger.info(f"Dataset: {dataset.m} trajectories, n={dataset.n}, dt={dataset.dt}")
        return {'dataset': str(self.out_dir / 'dataset.csv')}

    def train(self, dataset_path: Optional[str]) -> Dict[str, Any]:
        run_config = self._require_config()
        self._write_config()
        dataset = self._dataset(dataset_path)
        if abs(dataset.dt - run_config.system.dt) > 1e-12 * max(1.0, dataset.dt):
            logger.warning(f"Dataset spacing dt={dataset.dt} differs from system.dt={run_config.system.dt}; using the dataset's")
        train_config = build_train_config(run_config, self.config.workers)
        field, history = train(train_config, dataset)

        checkpoint = save_checkpoint(field, self.out_dir / 'model.json')
        history_path = write_history(history, self.out_dir / 'history.csv')
        final_loss = loss_only(field, dataset, train_config.loss, train_config.batch_len, train_config.solver)
        logger.info(f"Final J={final_loss:.6e} after {len(history)} iterations")
        return {
            'artifacts': {'checkpoint': str(checkpoint), 'history': str(history_path)},
            'final_loss': final_loss,
            'history': history,
        }

    def evaluate(self, checkpoint_path: Optional[str], dataset_path: Optional[str]) -> Dict[str, Any]:
        run_config = self._require_config()
        if not checkpoint_path:
            raise ConfigurationError("eval needs --checkpoint")
        field = load_checkpoint(checkpoint_path)
        dataset = self._dataset(dataset_path)
        evaluation = run_config.evaluation

        unseen = None
        if evaluation.samples > 0:
            unseen = sample_initials(self._domain(), evaluation.samples, evaluation.seed)

        report, seen, unseen_comparisons = evaluate_model(
            field, self.system, dataset,
            loss_spec=LossSpec(run_config.training.loss.kind, run_config.training.loss.omega),
            batch_len=run_config.training.batch_len,
            solver=build_solver(run_config),
            horizon=evaluation.T,
            grid_factor=evaluation.grid_factor,
            unseen=unseen,
        )
        artifacts = {'report': str(write_json(report.to_dict(), self.out_dir / 'report.json'))}

        output = run_config.output
        if output.emit_plots_data:
            stride = evaluation.grid_factor
            artifacts['predictions'] = str(write_predictions(seen, self.out_dir / 'predictions.csv', stride))
            if unseen_comparisons:
                artifacts['unseen_predictions'] = str(
                    write_predictions(unseen_comparisons, self.out_dir / 'unseen_predictions.csv', stride))
        if output.emit_csv and unseen_comparisons:
            losses = [c.loss_at(evaluation.grid_factor) for c in unseen_comparisons]
            rows = ([i, loss, c.e_max] for i, (loss, c) in enumerate(zip(losses, unseen_comparisons)))
            artifacts['test_losses'] = str(write_table(['traj_id', 'loss', 'e_max'], rows, self.out_dir / 'test_losses.csv'))
            artifacts['loss_histogram'] = str(write_table(
                ['left', 'right', 'count'], loss_histogram(losses), self.out_dir / 'loss_histogram.csv'))

        return {'artifacts': artifacts, 'final_loss': report.loss, 'metrics': report.metrics(), 'report': report}

    def check(self, checkpoint_path: Optional[str], seed: int) -> Dict[str, Any]:
        if self.run_config is not None:
            run_config = self.run_config
            system = self.system
            domain = self._domain()
            dims = run_config.network.dims
            mode = run_config.network.mode
            dt = run_config.system.dt
            m = min(2, run_config.system.m)
        else:
            preset = get_preset('linear-gf')
            system = get_system(preset.system)
            domain = preset.domain
            dims, mode, dt, m = [2, 8, 1], 'scalar', preset.dt, 2

        field: MlpField = load_checkpoint(checkpoint_path) if checkpoint_path else init_field(dims, mode, seed)
        if field.dim != system.dim:
            raise ConfigurationError(f"Field dimension {field.dim} does not match system {system.name} ({system.dim})")
        initials = sample_initials(domain, m, seed)
        dataset = generate_dataset(system, initials, (CHECK_POINTS - 1) * dt, dt, seed=seed)

        outcome = run_check_suite(field, dataset, seed)
        metrics = {
            'grad_fd_max_rel_err': outcome.gradient.max_rel_err,
            'grad_fd_max_abs_err': outcome.gradient.max_abs_err,
            'invariant_drift_max': outcome.invariant,
        }
        report = dict(metrics, passed=outcome.passed, checked=outcome.gradient.checked,
                      directional=outcome.gradient.directional)
        path = write_json(report, self.out_dir / 'check.json')
        return {'artifacts': {'check': str(path)}, 'metrics': metrics, 'passed': outcome.passed}

    def scale(self, dts: List[float], compare: bool = False, omega: float = 1.0) -> Dict[str, Any]:
        run_config = self._require_config()
        self._write_config()
        s = run_config.system
        initials = sample_initials(self._domain(), s.m, s.seed)
        if compare:
            return self._compare_losses(initials, dts, omega)
        unseen = None
        if run_config.evaluation.samples > 0:
            unseen = sample_initials(self._domain(), run_config.evaluation.samples, run_config.evaluation.seed)

        rows = scaling_study(self.system, initials, s.T, dts, build_train_config(run_config, self.config.workers),
                             unseen=unseen, grid_factor=run_config.evaluation.grid_factor)
        header = ['dt', 'J', 'e_max', 'field_err', 'C1', 'C2']
        table = write_table(header, ([r.dt, r.loss, r.e_max, r.field_err, r.bound_ratio, r.field_bound_ratio]
                                     for r in rows), self.out_dir / 'scaling.csv')
        metrics = {
            'c1_spread': constant_spread([r.bound_ratio for r in rows]),
            'c2_spread': constant_spread([r.field_bound_ratio for r in rows]),
        }
        logger.info(f"C1 spread {metrics['c1_spread']:.3f}, C2 spread {metrics['c2_spread']:.3f}")
        summary = write_json(dict(metrics, rows=[asdict(r) for r in rows]), self.out_dir / 'scaling.json')
        return {'artifacts': {'scaling': str(table), 'summary': str(summary)}, 'metrics': metrics}

    def _compare_losses(self, initials: np.ndarray, dts: List[float], omega: float) -> Dict[str, Any]:
        if omega <= 0:
            raise ConfigurationError(f"--omega must be positive, got {omega}")
        s = self.run_config.system
        train_config = build_train_config(self.run_config, self.config.workers)
        comparisons = []
        for dt in dts:
            dataset = generate_dataset(self.system, initials, s.T, dt, seed=s.seed, workers=self.config.workers)
            comparisons.append(compare_losses(self.system, dataset, train_config, omega))

        header = ['dt', 'J', 'J_augmented', 'field_err', 'field_err_augmented', 'ratio', 'C2_augmented']
        table = write_table(header, ([c.dt, c.standard_loss, c.augmented_loss, c.standard_field_err,
                                      c.augmented_field_err, c.field_err_ratio, c.augmented_bound_ratio]
                                     for c in comparisons), self.out_dir / 'loss_comparison.csv')
        metrics = {'field_err_ratio_max': max(c.field_err_ratio for c in comparisons)}
        rows = [dict(asdict(c), field_err_ratio=c.field_err_ratio, improved=c.improved) for c in comparisons]
        summary = write_json(dict(metrics, omega=omega, rows=rows), self.out_dir / 'loss_comparison.json')
        return {'artifacts': {'loss_comparison': str(table), 'summary': str(summary)}, 'metrics': metrics}


def _format_time(value) -> str:
    return value.strftime('%Y-%m-%d %H:%M:%S') if value else '-'


def show_runs(config: Config, command: Optional[str] = None, limit: int = 20,
              run_id: Optional[int] = None) -> int:
    """Print recorded runs, or one run in detail."""
    if not config.record_runs:
        raise ConfigurationError("Run recording is disabled (OCN_RECORD_RUNS=false)")
    if limit < 1:
        raise ConfigurationError(f"--limit must be >= 1, got {limit}")
    if config.database_path not in MEMORY_PATHS and not os.path.exists(config.database_path):
        print("No runs recorded yet")
        return EXIT_OK

    store = create_run_store(config)
    try:
        if run_id is not None:
            run = store.get_run(run_id)
            if run is None:
                raise ConfigurationError(f"Run {run_id} not found")
            _print_run(run, store.get_metrics(run_id), store.get_history(run_id))
            return EXIT_OK

        runs = store.list_runs(command=command, limit=limit)
        print("\n" + "=" * 80)
        print("Recorded Runs")
        print("=" * 80)
        print(f"{'ID':<6} {'Command':<10} {'Preset':<14} {'Status':<9} {'Final J':<14} {'Started':<20}")
        print("-" * 80)
        for run in runs:
            final_loss = f"{run['final_loss']:.6e}" if run['final_loss'] is not None else '-'
            print(f"{run['id']:<6} {run['command']:<10} {run['preset'] or '-':<14} {run['status']:<9} "
                  f"{final_loss:<14} {_format_time(run['started_at']):<20}")
        print("=" * 80)
        print(f"Total: {len(runs)} runs\n")
        return EXIT_OK
    finally:
        store.close()


def _print_run(run: Dict[str, Any], metrics: Dict[str, float], history: List[Dict[str, Any]]):
    print("\n" + "=" * 60)
    print(f"Run {run['id']}: {run['command']}")
    print("=" * 60)
    print(f"Status:     {run['status']}" + (f" ({run['message']})" if run['message'] else ''))
    print(f"Preset:     {run['preset'] or '-'}")
    print(f"System:     {run['system'] or '-'} (seed {run['seed']})")
    print(f"Started:    {_format_time(run['started_at'])}")
    print(f"Finished:   {_format_time(run['finished_at'])}")
    if run['final_loss'] is not None:
        print(f"Final J:    {run['final_loss']:.6e}")
    for name, path in sorted(run['artifacts'].items()):
        print(f"  {name}: {path}")
    if metrics:
        print("\nMetrics:")
        for name, value in sorted(metrics.items()):
            print(f"  {name}: {value:.6e}")
    if history:
        print(f"\nHistory: {len(history)} iterations, J {history[0]['loss']:.6e} -> {history[-1]['loss']:.6e}")
    print("=" * 60 + "\n")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--preset', help='Named experiment preset')
    common.add_argument('--config', help='RunConfig JSON file (merged over the preset)')
    common.add_argument('--seed', type=int, help='Override system.seed')
    common.add_argument('--out', help='Output directory (default: $OCN_OUTPUT_DIR/<preset or run>)')

    parser = argparse.ArgumentParser(
        prog='ocn',
        description='Learn vector fields from trajectory data with optimal-control training'
    )
    subparsers = parser.add_subparsers(dest='command', help='Command to execute')

    subparsers.add_parser('generate', parents=[common], help='Generate a dataset from a true system')

    train_parser = subparsers.add_parser('train', parents=[common], help='Train a surrogate field')
    train_parser.add_argument('--dataset', help='Dataset CSV (generated from the config if omitted)')

    eval_parser = subparsers.add_parser('eval', parents=[common], help='Evaluate a checkpoint')
    eval_parser.add_argument('--checkpoint', required=True, help='Model checkpoint JSON')
    eval_parser.add_argument('--dataset', help='Dataset CSV (generated from the config if omitted)')

    check_parser = subparsers.add_parser('check', parents=[common], help='Gradient and invariant checks')
    check_parser.add_argument('--checkpoint', help='Model checkpoint JSON (fresh network if omitted)')

    scale_parser = subparsers.add_parser('scale', parents=[common], help='Error scaling with dt')
    scale_parser.add_argument('--dts', type=float, nargs='+', default=list(DEFAULT_SCALING_DTS),
                              help='Data spacings to sweep')
    scale_parser.add_argument('--compare-losses', action='store_true',
                              help='Train with the standard and the augmented loss at each spacing and compare field errors')
    scale_parser.add_argument('--omega', type=float, default=1.0, help='Augmented-loss weight for --compare-losses')

    runs_parser = subparsers.add_parser('runs', help='List runs recorded in the registry')
    runs_parser.add_argument('--command', dest='filter_command', choices=RECORDED_COMMANDS,
                             help='Only runs of this command')
    runs_parser.add_argument('--limit', type=int, default=20, help='Number of runs to list')
    runs_parser.add_argument('--id', dest='run_id', type=int, help='Show one run with its metrics and history')
    return parser


def _run(args, config: Config) -> int:
    if args.command == 'runs':
        return show_runs(config, args.filter_command, args.limit, args.run_id)
    needs_config = args.command in ('generate', 'train', 'eval', 'scale')
    document = None
    if needs_config or args.preset or args.config:
        document = resolve_document(args.preset, args.config, args.seed)
    out_dir = args.out or os.path.join(config.output_dir, args.preset or 'run')

    runner = ExperimentRunner(config, out_dir, document, args.preset)
    runner.start(args.command)
    try:
        if args.command == 'generate':
            result = {'artifacts': runner.generate()}
        elif args.command == 'train':
            result = runner.train(args.dataset)
        elif args.command == 'eval':
            result = runner.evaluate(args.checkpoint, args.dataset)
        elif args.command == 'check':
            result = runner.check(args.checkpoint, args.seed if args.seed is not None else 0)
        else:
            result = runner.scale(args.dts, args.compare_losses, args.omega)
    except Exception as e:
        runner.finish('failed', message=str(e))
        runner.close()
        raise

    passed = result.get('passed', True)
    runner.finish('ok' if passed else 'failed', final_loss=result.get('final_loss'),
                  artifacts=result.get('artifacts'), metrics=result.get('metrics'),
                  history=result.get('history'))
    runner.close()
    logger.info(f"{args.command} finished; outputs in {out_dir}")
    return EXIT_OK if passed else EXIT_NUMERIC


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    parser = _build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return EXIT_CONFIG

    try:
        config = Config()
        setup_logging(config)
        return _run(args, config)
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except NumericError as e:
        logger.error(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_NUMERIC


if __name__ == '__main__':
    sys.exit(main())
