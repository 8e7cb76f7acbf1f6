"""Finite-difference validation of every analytic backward pass: the
activation Jacobians, the one-step and unrolled regularized softmax, the
lambda gradient, the regularized ReLU, the loss and the whole network."""
import logging
import multiprocessing
import os
import sys
from collections import namedtuple
from functools import partial
from multiprocessing import Pool
from typing import Callable, Dict, List, Optional
sys.path.append(os.path.dirname(os.path.abspath(__file__)) + "/../../")

import numpy as np

from experiments.cell_segmentation.common import EXIT_GRADCHECK, EXIT_OK, EXIT_RUNTIME, open_stores, write_manifest
from experiments.cell_segmentation.table import GRADCHECK_FIELDS, GradCheck
from tvseg.mini_net import FinalActivation, MiniUnet, NetSpec, build, cross_entropy
from tvseg.reg_activation import (
    ActivationMode,
    RegActConfig,
    reg_relu_onestep,
    reg_softmax_iterative,
    reg_softmax_onestep,
    softmax,
)
from tvseg.reg_backward import (
    GradReport,
    finite_diff_check,
    lambda_gradient,
    merge_reports,
    reg_relu_onestep_backward,
    reg_softmax_onestep_backward,
    reg_softmax_unrolled_backward,
    softmax_jvp,
)
from tvseg.grid_calculus import div
from utils.database_utils import DataBaseType, init_database
from utils.experiment_util import ExperimentConfig, ExperimentUtil, Outcome
from utils.helper import derive_seed, split_chunk
from utils.logger_util import queue_logger

logger = logging.getLogger('gradcheck')

ONE_STEP_TOLERANCE = 1e-6
UNROLLED_TOLERANCE = 1e-5
NETWORK_TOLERANCE = 1e-5
DEFAULT_INSTANCES = 50
NETWORK_PROBES = 3
# small enough that a probe almost never crosses a ReLU kink
NETWORK_EPSILON = 1e-7

GradTask = namedtuple('GradTask', ['index', 'check', 'instances', 'seed', 'inject'])


def _instance(rng: np.random.Generator, max_channels: int = 4, max_side: int = 6) -> np.ndarray:
    channels = int(rng.integers(2, max_channels + 1))
    height, width = (int(side) for side in rng.integers(2, max_side + 1, size=2))
    return rng.normal(size=(channels, height, width))


def _scale(gradient: np.ndarray, inject: bool) -> np.ndarray:
    return 2.0 * gradient if inject else gradient


def check_softmax_jvp(rng: np.random.Generator, inject: bool) -> GradReport:
    o = _instance(rng)
    w = rng.normal(size=o.shape)
    analytic = softmax_jvp(softmax(o), w)
    return finite_diff_check(lambda x: float(np.vdot(w, softmax(x))), o, _scale(analytic, inject),
                             tolerance=ONE_STEP_TOLERANCE)


def check_onestep(rng: np.random.Generator, inject: bool) -> GradReport:
    o = _instance(rng)
    w = rng.normal(size=o.shape)
    # kappa 2 pushes part of the dual field outside the unit disc
    cfg = RegActConfig(lam=float(rng.uniform(0.1, 1.0)), kappa=float(rng.choice([0.25, 2.0])))
    _, tape = reg_softmax_onestep(o, cfg)
    analytic = reg_softmax_onestep_backward(tape, w)
    return finite_diff_check(lambda x: float(np.vdot(w, reg_softmax_onestep(x, cfg)[0])), o,
                             _scale(analytic, inject), tolerance=ONE_STEP_TOLERANCE)


def _check_unrolled(iterations: int, rng: np.random.Generator, inject: bool) -> GradReport:
    o = _instance(rng)
    w = rng.normal(size=o.shape)
    cfg = RegActConfig(lam=float(rng.uniform(0.1, 1.0)), iterations=iterations, mode=ActivationMode.ITERATIVE)
    _, _, tape = reg_softmax_iterative(o, cfg)
    analytic = reg_softmax_unrolled_backward(tape, w)
    return finite_diff_check(lambda x: float(np.vdot(w, reg_softmax_iterative(x, cfg)[0])), o,
                             _scale(analytic, inject), tolerance=UNROLLED_TOLERANCE)


def check_lambda(rng: np.random.Generator, inject: bool) -> GradReport:
    o = _instance(rng)
    w = rng.normal(size=o.shape)
    cfg = RegActConfig(lam=float(rng.uniform(0.1, 1.0)), kappa=float(rng.choice([0.25, 2.0])))
    _, tape = reg_softmax_onestep(o, cfg)
    shift = div(tape.etas[-1])
    analytic = np.array([lambda_gradient(tape, w)])
    return finite_diff_check(lambda lam: float(np.vdot(w, softmax(o - lam[0] * shift))), np.array([cfg.lam]),
                             _scale(analytic, inject), tolerance=ONE_STEP_TOLERANCE)


def check_relu_onestep(rng: np.random.Generator, inject: bool) -> GradReport:
    o = _instance(rng, max_channels=2, max_side=3)
    w = rng.normal(size=o.shape)
    cfg = RegActConfig(lam=float(rng.uniform(0.1, 1.0)), kappa=float(rng.choice([0.25, 2.0])))
    _, tape = reg_relu_onestep(o, cfg)
    analytic = reg_relu_onestep_backward(tape, w)
    return finite_diff_check(lambda x: float(np.vdot(w, reg_relu_onestep(x, cfg)[0])), o,
                             _scale(analytic, inject), tolerance=ONE_STEP_TOLERANCE)


def check_cross_entropy(rng: np.random.Generator, inject: bool) -> GradReport:
    a = softmax(_instance(rng))
    target = rng.integers(0, a.shape[0], size=a.shape[1:])
    _, analytic = cross_entropy(a, target)
    return finite_diff_check(lambda x: cross_entropy(x, target)[0], a, _scale(analytic, inject),
                             tolerance=ONE_STEP_TOLERANCE)


def _network_forward(network: MiniUnet, image: np.ndarray, label: np.ndarray) -> Callable[[np.ndarray], float]:
    """Loss as a function of every parameter flattened in declaration order,
    followed by lambda."""
    names = network.params.names()

    def forward(vector: np.ndarray) -> float:
        saved = dict(network.params.params), network.lam
        offset = 0
        try:
            for name in names:
                shape = saved[0][name].shape
                size = saved[0][name].size
                network.params.params[name] = vector[offset:offset + size].reshape(shape)
                offset += size
            network.lam = float(vector[offset])
            _, a, _ = network.forward(image)
            return cross_entropy(a, label)[0]
        finally:
            network.params.params.update(saved[0])
            network.lam = saved[1]
    return forward


def _check_network(final: FinalActivation, rng: np.random.Generator, inject: bool) -> GradReport:
    spec = NetSpec(in_channels=3, classes=3, levels=1, widths=(4,), final=final,
                   reg=RegActConfig(lam=float(rng.uniform(0.2, 1.0)), kappa=2.0))
    network = build(spec, seed=int(rng.integers(2 ** 31)))
    for name in network.params.names():
        if name.endswith('.b'):
            network.params.params[name] = rng.normal(scale=0.1, size=network.params[name].shape)
    image = rng.uniform(size=(3, 8, 8))
    label = rng.integers(0, 3, size=(8, 8))

    _, a, tape = network.forward(image)
    _, d_a = cross_entropy(a, label)
    grads, lambda_grad = network.backward(tape, d_a)

    point = np.concatenate([network.params[name].ravel() for name in network.params.names()] + [[network.lam]])
    analytic = np.concatenate([grads[name].ravel() for name in network.params.names()] + [[lambda_grad or 0.0]])
    probes = []
    offset = 0
    for name in network.params.names():
        size = network.params[name].size
        probes.extend(offset + rng.choice(size, size=min(NETWORK_PROBES, size), replace=False))
        offset += size
    if lambda_grad is not None:
        probes.append(offset)
    return finite_diff_check(_network_forward(network, image, label), point, _scale(analytic, inject),
                             epsilon=NETWORK_EPSILON, tolerance=NETWORK_TOLERANCE, probes=probes)


CHECKS: Dict[str, Callable[[np.random.Generator, bool], GradReport]] = {
    'softmax_jvp': check_softmax_jvp,
    'onestep': check_onestep,
    'unrolled_t1': partial(_check_unrolled, 1),
    'unrolled_t3': partial(_check_unrolled, 3),
    'unrolled_t5': partial(_check_unrolled, 5),
    'lambda': check_lambda,
    'relu_onestep': check_relu_onestep,
    'cross_entropy': check_cross_entropy,
    'network_plain': partial(_check_network, FinalActivation.PLAIN),
    'network_regularized': partial(_check_network, FinalActivation.REGULARIZED),
}

# whole-network checks are far slower per instance
_INSTANCE_DIVISOR = {'network_plain': 10, 'network_regularized': 10, 'relu_onestep': 5}


def run_check(check: str, instances: int, seed: int, inject: bool = False) -> GradReport:
    rng = np.random.default_rng(derive_seed(seed, check))
    count = max(1, instances // _INSTANCE_DIVISOR.get(check, 1))
    return merge_reports(CHECKS[check](rng, inject) for _ in range(count))


def report_row(check: str, instances: int, report: GradReport) -> Dict[str, object]:
    return {
        'check': check,
        'instances': instances,
        'max_relative_error': report.max_relative_error,
        'max_absolute_error': report.max_absolute_error,
        'probes': report.probes,
        'non_finite': report.non_finite,
        'tolerance': report.tolerance,
        'passed': report.passed,
    }


def check_task(queue: Optional[multiprocessing.Queue], tasks: List[GradTask]) -> List[Outcome]:
    sub_logger = queue_logger(queue, 'gradcheck')
    outcomes = []
    for task in tasks:
        report = run_check(task.check, task.instances, task.seed, task.inject)
        count = max(1, task.instances // _INSTANCE_DIVISOR.get(task.check, 1))
        level = logging.INFO if report.passed else logging.ERROR
        sub_logger.log(level, "Check %s: max relative error %.3e over %s probes (%s)",
                       task.check, report.max_relative_error, report.probes, 'passed' if report.passed else 'FAILED')
        failure = None if report.passed else {'check': task.check, 'max_relative_error': report.max_relative_error}
        outcomes.append(Outcome(index=task.index, rows=[report_row(task.check, count, report)], failure=failure))
    return outcomes


def run_gradcheck(config: ExperimentConfig) -> int:
    tasks = [
        GradTask(index=index, check=check, instances=config.instances, seed=config.seed,
                 inject=(check == config.inject_failure))
        for index, check in enumerate(CHECKS)
    ]
    report, extra = open_stores(config, 'gradcheck', GRADCHECK_FIELDS, GradCheck)
    failures = init_database(name='failures', database_type=DataBaseType.JSON, path=config.out)
    experiment_util = config.experiment_util or ExperimentUtil(database=report, failures=failures, extra_databases=extra)

    pool = Pool(processes=config.process_num) if config.process_num > 1 else None
    queue = config.logger_queue if pool is not None else None
    try:
        outcomes = experiment_util.imap(pool, partial(check_task, queue), list(split_chunk(tasks, config.chunk_size)))
    except Exception as error:
        logger.critical("Gradient check aborted: %s", error)
        return EXIT_RUNTIME
    finally:
        experiment_util.save()
        experiment_util.close(pool)

    failed = [outcome.failure['check'] for outcome in outcomes if outcome.failure]
    write_manifest(config, {'report': report.path, 'failed': failed})
    if failed:
        logger.error("Gradient checks failed: %s", ', '.join(failed))
        return EXIT_GRADCHECK
    logger.info("All %s gradient checks passed", len(outcomes))
    return EXIT_OK
