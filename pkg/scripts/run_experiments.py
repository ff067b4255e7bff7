#!/usr/bin/env python3
"""
Desk-scale replication of the reference experiments.

Trains the preset networks and prints the measured quantities next to their
targets. These runs take minutes (lorenz-short with --full: tens of minutes)
and are kept out of the unit test suite.

Usage: python scripts/run_experiments.py [augmented|linear-gf|pendulum|lorenz-short|scaling|all] [--full]
"""
import argparse
import os
import sys

import numpy as np

# Add project root to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.cli import build_train_config
from src.config import Config, RunConfig, merge_documents, setup_logging
from src.diag import (
    LOSS_COMPARISON_SLACK, compare_losses, compare_trajectory, constant_spread, evaluate_model, scaling_study,
)
from src.systems import generate_dataset, get_preset, get_system, observation_times, sample_initials
from src.train import train


def _prepare(preset_name, override):
    preset = get_preset(preset_name)
    run_config = RunConfig.from_dict(merge_documents(preset.to_document(), override))
    s = run_config.system
    system = get_system(s.name)
    initials = sample_initials(preset.domain, s.m, s.seed)
    dataset = generate_dataset(system, initials, s.T, s.dt, seed=s.seed)
    return preset, run_config, system, dataset


def _report(name, value, target, ok):
    print(f"  {'✓' if ok else '✗'} {name}: {value:.4g} (target {target})")
    return ok


def linear_gf(full: bool) -> bool:
    print("\n=== linear-gf: 8 trajectories on [-2,2]^2, T=5, dt=0.05 ===")
    preset, run_config, system, dataset = _prepare('linear-gf', {'training': {'optimizer': {'K': 20000}}})
    field, history = train(build_train_config(run_config), dataset)
    print(f"  trained {len(history)} iterations, final J={history[-1].loss:.3e}")

    unseen = sample_initials(preset.domain, preset.eval_samples, run_config.evaluation.seed)
    report, _, _ = evaluate_model(field, system, dataset, solver=build_train_config(run_config).solver,
                                  unseen=unseen)
    ok = _report('unseen e_max over [0,5]', report.extra['unseen_e_max'], '<= 0.05',
                 report.extra['unseen_e_max'] <= 0.05)
    ok &= _report('shifted potential RMS', report.potential_rms_after_shift, '<= 0.05',
                  report.potential_rms_after_shift <= 0.05)
    return ok


def pendulum(full: bool) -> bool:
    print("\n=== pendulum: one trajectory from (-1,-1), T=5, predicted over [0,20] ===")
    preset, run_config, system, dataset = _prepare(
        'pendulum', {'training': {'optimizer': {'K': 20000, 'threshold': 1e-6}}})
    field, history = train(build_train_config(run_config), dataset)
    print(f"  trained {len(history)} iterations, final J={history[-1].loss:.3e}")

    times = observation_times(preset.eval_T, dataset.dt)
    comparison = compare_trajectory(field, system, dataset.trajectories[0].states[0], times)
    ok = _report('max state error over [0,20]', comparison.e_max, '<= 0.3', comparison.e_max <= 0.3)
    final_norm = float(np.linalg.norm(comparison.predicted[-1]))
    ok &= _report('final state norm', final_norm, '<= 0.2', final_norm <= 0.2)
    return ok


def lorenz_short(full: bool) -> bool:
    dims = [3, 300, 300, 300, 3] if full else [3, 64, 64, 3]
    threshold = 50.0 if full else 100.0
    print(f"\n=== lorenz-short: net {dims}, T=1.5, loss over [0,3] ===")
    preset, run_config, system, dataset = _prepare('lorenz-short', {
        'network': {'dims': dims},
        'training': {'optimizer': {'K': 5000, 'threshold': 1e-4}},
    })
    field, history = train(build_train_config(run_config), dataset)
    print(f"  trained {len(history)} iterations, final J={history[-1].loss:.3e}")

    times = observation_times(preset.eval_T, dataset.dt)
    comparison = compare_trajectory(field, system, dataset.trajectories[0].states[0], times)
    return _report('loss over [0,3]', comparison.loss_at(1), f'<= {threshold:g}', comparison.loss_at(1) <= threshold)


def scaling(full: bool) -> bool:
    print("\n=== scaling: linear-gf at dt in {0.2, 0.1, 0.05}, J driven to 1e-8 ===")
    preset, run_config, system, _ = _prepare('linear-gf', {
        'training': {'optimizer': {'K': 50000, 'threshold': 1e-8}},
    })
    initials = sample_initials(preset.domain, run_config.system.m, run_config.system.seed)
    rows = scaling_study(system, initials, run_config.system.T, (0.2, 0.1, 0.05), build_train_config(run_config))
    for row in rows:
        print(f"  dt={row.dt}: J={row.loss:.3e} e_max={row.e_max:.3e} C1={row.bound_ratio:.3f}")
    spread = constant_spread([row.bound_ratio for row in rows])
    ok = _report('C1 spread', spread, '<= 3', spread <= 3.0)
    shrink = rows[0].e_max / rows[-1].e_max
    ok &= _report('e_max shrink from dt=0.2 to dt=0.05', shrink, '>= 8', shrink >= 8.0)
    return ok


def augmented_loss(full: bool) -> bool:
    print("\n=== augmented loss: linear-gf, standard vs omega=1 on the same data ===")
    _, run_config, system, dataset = _prepare('linear-gf', {'training': {'optimizer': {'K': 20000}}})
    comparison = compare_losses(system, dataset, build_train_config(run_config), omega=1.0)
    print(f"  standard: J={comparison.standard_loss:.3e} field err={comparison.standard_field_err:.3e}")
    print(f"  augmented: J~={comparison.augmented_loss:.3e} field err={comparison.augmented_field_err:.3e}")
    ok = _report('field err ratio augmented/standard', comparison.field_err_ratio,
                 f'<= {LOSS_COMPARISON_SLACK:g}', comparison.improved)
    print(f"  C2 against sqrt(J~) + dt: {comparison.augmented_bound_ratio:.3f}")
    return ok


EXPERIMENTS = {
    'augmented': augmented_loss,
    'linear-gf': linear_gf,
    'pendulum': pendulum,
    'lorenz-short': lorenz_short,
    'scaling': scaling,
}


def main():
    parser = argparse.ArgumentParser(description='Run desk-scale replication experiments')
    parser.add_argument('experiment', nargs='?', default='all', choices=sorted(EXPERIMENTS) + ['all'])
    parser.add_argument('--full', action='store_true', help='Use the full lorenz network')
    args = parser.parse_args()

    setup_logging(Config())
    names = sorted(EXPERIMENTS) if args.experiment == 'all' else [args.experiment]
    results = {name: EXPERIMENTS[name](args.full) for name in names}

    print("\n=== Summary ===")
    for name, ok in results.items():
        print(f"  {'✓' if ok else '✗'} {name}")
    return 0 if all(results.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
