"""Desk-scale reproduction of the headline claims. Run with ``pytest -m slow``."""
import csv
from collections import defaultdict

import numpy as np
import pytest

from experiments.cell_segmentation.cli import main
from experiments.cell_segmentation.common import EXIT_OK

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
MOVING_AVERAGE = 20
# relative rise allowed between consecutive moving-average values
MOVING_AVERAGE_TOLERANCE = 0.01


def read_rows(path):
    with open(path, newline='') as csv_file:
        return list(csv.DictReader(csv_file))


def run_protocol(tmp_path_factory, label, extra_train_args):
    results = {}
    for seed in SEEDS:
        out = tmp_path_factory.mktemp(f'{label}{seed}')
        assert main(['train', '--out', str(out), '--generate', '--seed', str(seed), '--count', '100',
                     '--size', '64', '--epochs', '10'] + extra_train_args) == EXIT_OK
        assert main(['sweep', '--out', str(out), '--seed', str(seed), '-p', '4']) == EXIT_OK
        metrics = defaultdict(dict)
        for row in read_rows(out / 'metrics.csv'):
            metrics[row['model']][(row['noise_kind'], float(row['level']))] = row
        logs = {model: read_rows(out / f'{model}_train_log.csv') for model in ('plain', 'regularized')}
        results[seed] = (metrics, logs)
    return results


@pytest.fixture(scope='module')
def clean_runs(tmp_path_factory):
    return run_protocol(tmp_path_factory, 'clean', [])


@pytest.fixture(scope='module')
def noisy_runs(tmp_path_factory):
    return run_protocol(tmp_path_factory, 'noisy', ['--noise-train', 'paper'])


def majority(flags):
    return sum(flags) * 2 > len(flags)


def points(runs):
    metrics, _ = runs[SEEDS[0]]
    return sorted(metrics['plain'])


def metric(m, model, point, name):
    return float(m[model][point][name])


def test_regularized_has_lower_re_everywhere(clean_runs):
    for point in points(clean_runs):
        flags = [metric(m, 'regularized', point, 're') < metric(m, 'plain', point, 're')
                 for m, _ in clean_runs.values()]
        assert majority(flags), point


def test_regularized_has_lower_re_when_trained_on_noise(noisy_runs):
    for point in points(noisy_runs):
        flags = [metric(m, 'regularized', point, 're') < metric(m, 'plain', point, 're')
                 for m, _ in noisy_runs.values()]
        assert majority(flags), point


def test_regularized_is_more_robust_to_strong_gaussian_noise(clean_runs):
    for kind, level in points(clean_runs):
        if kind != 'gaussian' or level < 0.05:
            continue
        flags = [metric(m, 'regularized', (kind, level), 'miou') >= metric(m, 'plain', (kind, level), 'miou')
                 for m, _ in clean_runs.values()]
        assert majority(flags), (kind, level)


def test_post_tv_lowers_re_but_trails_regularized_training(clean_runs):
    for point in points(clean_runs):
        flags = [metric(m, 'plain+tv', point, 're') < metric(m, 'plain', point, 're')
                 for m, _ in clean_runs.values()]
        assert majority(flags), point
    strong = ('gaussian', 0.09)
    flags = [metric(m, 'regularized', strong, 'miou') >= metric(m, 'plain+tv', strong, 'miou')
             for m, _ in clean_runs.values()]
    assert majority(flags)


def test_lambda_stays_finite_and_loss_moving_average_never_rises(clean_runs):
    for _, logs in clean_runs.values():
        lambdas = np.array([float(row['lambda']) for row in logs['regularized']])
        assert np.all(np.isfinite(lambdas)) and np.all(lambdas >= 0)
        losses = np.array([float(row['loss']) for row in logs['regularized']])
        assert len(losses) > MOVING_AVERAGE
        ma = np.convolve(losses, np.ones(MOVING_AVERAGE) / MOVING_AVERAGE, 'valid')
        assert np.all(np.diff(ma) <= MOVING_AVERAGE_TOLERANCE * ma[:-1])
