"""Plain and TV-regularized activations.

The regularized softmax solves

    min_A  -<A, o> + <A, log A> + lambda * TV(A)   over per-pixel simplices

by alternating an unprojected dual step, a projection onto the unit disc and
a softmax of shifted logits. The regularized ReLU replaces the entropy by
0.5 * ||o - A||^2 and the softmax by max(0, .).
"""
import logging
from collections import namedtuple
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from .grid_calculus import as_field, div, grad, project_unit_disc, tv_value

logger = logging.getLogger('reg_activation')


class ActivationMode(Enum):
    ONE_STEP = 'one_step'
    ITERATIVE = 'iterative'


class ActivationKind(Enum):
    SOFTMAX = 'softmax'
    RELU = 'relu'


DEFAULT_TAU = 1.0 / 8.0
DEFAULT_KAPPA = 0.25
DEFAULT_TEST_ITERATIONS = 100


class RegActConfig:
    """Settings of a regularized activation.

    ``lam`` is the trainable regularization weight. ``kappa`` is the fixed
    scaled step of the one-step scheme and does not follow ``lam`` once it is
    trained. ``tau`` is the dual step of the iterative scheme, which steps by
    ``tau * lam``.
    """

    def __init__(
            self,
            lam: float = 0.5,
            kappa: float = DEFAULT_KAPPA,
            tau: float = DEFAULT_TAU,
            iterations: int = 1,
            mode: ActivationMode = ActivationMode.ONE_STEP,
        ) -> None:
        self.lam = float(lam)
        self.kappa = float(kappa)
        self.tau = float(tau)
        self.iterations = int(iterations)
        self.mode = ActivationMode(mode)

        problems = self.problems()
        if problems:
            raise ValueError('; '.join(problems))

    def problems(self) -> List[str]:
        problems = []
        if not np.isfinite(self.lam) or self.lam < 0:
            problems.append(f'lambda must be finite and >= 0, got {self.lam}')
        if not np.isfinite(self.kappa) or self.kappa <= 0:
            problems.append(f'kappa must be > 0, got {self.kappa}')
        if not (0 < self.tau <= DEFAULT_TAU):
            problems.append(f'tau must be in (0, 1/8], got {self.tau}')
        if self.iterations < 1:
            problems.append(f'iterations must be >= 1, got {self.iterations}')
        return problems

    def replace(self, **changes) -> 'RegActConfig':
        values = dict(lam=self.lam, kappa=self.kappa, tau=self.tau, iterations=self.iterations, mode=self.mode)
        values.update(changes)
        return RegActConfig(**values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegActConfig):
            return NotImplemented
        return (self.lam, self.kappa, self.tau, self.iterations, self.mode) == \
            (other.lam, other.kappa, other.tau, other.iterations, other.mode)

    def __repr__(self) -> str:
        return 'RegActConfig(lam={!r}, kappa={!r}, tau={!r}, iterations={!r}, mode={})'.format(
            self.lam, self.kappa, self.tau, self.iterations, self.mode.value)


# activations[k], xis[k], etas[k] are A^k, xi^k, eta^k for k = 0..T; xi^0 = eta^0 = 0.
# Without recorded history only the last two activations and the final xi, eta are kept.
# step is the scale applied to grad(A^k) in the dual update: kappa (one-step) or tau * lam.
RegActTape = namedtuple(
    'RegActTape',
    ['kind', 'mode', 'config', 'logits', 'step', 'activations', 'xis', 'etas', 'residual', 'recorded'],
)


def softmax(o: np.ndarray) -> np.ndarray:
    shifted = o - o.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def relu(o: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, o)


def _xlogx(a: np.ndarray) -> np.ndarray:
    return a * np.log(np.where(a > 0, a, 1.0))


def softmax_energy(a: np.ndarray, o: np.ndarray, lam: float) -> float:
    return float(-np.vdot(a, o) + _xlogx(a).sum() + lam * tv_value(a))


def relu_energy(a: np.ndarray, o: np.ndarray, lam: float) -> float:
    return float(0.5 * np.sum((o - a) ** 2) + lam * tv_value(a))


def _primal(kind: ActivationKind):
    return softmax if kind is ActivationKind.SOFTMAX else relu


def _run_dual_iterations(
        kind: ActivationKind,
        o: np.ndarray,
        cfg: RegActConfig,
        step: float,
        iterations: int,
        record: bool = True,
    ) -> RegActTape:
    primal = _primal(kind)
    a = primal(o)
    xi = np.zeros((2,) + o.shape, dtype=np.float64)
    eta = xi
    activations = [a]
    xis = [xi]
    etas = [eta]
    for _ in range(iterations):
        xi = xi - step * grad(a)
        eta = project_unit_disc(xi)
        a = primal(o - cfg.lam * div(eta))
        if record:
            activations.append(a)
            xis.append(xi)
            etas.append(eta)
        else:
            activations = [activations[-1], a]
    if not record:
        xis, etas = [xi], [eta]
    residual = float(np.max(np.abs(activations[-1] - activations[-2])))
    logger.debug('%s %s: %d iterations, residual %.3e', kind.value, cfg.mode.value, iterations, residual)
    return RegActTape(
        kind=kind,
        mode=cfg.mode,
        config=cfg,
        logits=o,
        step=step,
        activations=activations,
        xis=xis,
        etas=etas,
        residual=residual,
        recorded=record,
    )


def _require_mode(cfg: RegActConfig, mode: ActivationMode) -> None:
    if cfg.mode is not mode:
        raise ValueError(f'expected a {mode.value} config, got {cfg.mode.value}')


def reg_softmax_iterative(
        o: np.ndarray,
        cfg: RegActConfig,
        record: bool = True,
    ) -> Tuple[np.ndarray, np.ndarray, RegActTape]:
    """Full dual iteration. With ``record=False`` the tape keeps no history
    and cannot be differentiated."""
    _require_mode(cfg, ActivationMode.ITERATIVE)
    o = as_field(o, 'logits')
    tape = _run_dual_iterations(ActivationKind.SOFTMAX, o, cfg, cfg.tau * cfg.lam, cfg.iterations, record)
    return tape.activations[-1], tape.etas[-1], tape


def reg_softmax_onestep(o: np.ndarray, cfg: RegActConfig) -> Tuple[np.ndarray, RegActTape]:
    _require_mode(cfg, ActivationMode.ONE_STEP)
    o = as_field(o, 'logits')
    tape = _run_dual_iterations(ActivationKind.SOFTMAX, o, cfg, cfg.kappa, 1)
    return tape.activations[-1], tape


def reg_relu_iterative(o: np.ndarray, cfg: RegActConfig) -> Tuple[np.ndarray, np.ndarray]:
    _require_mode(cfg, ActivationMode.ITERATIVE)
    o = as_field(o, 'input')
    tape = _run_dual_iterations(ActivationKind.RELU, o, cfg, cfg.tau * cfg.lam, cfg.iterations, record=False)
    return tape.activations[-1], tape.etas[-1]


def reg_relu_onestep(o: np.ndarray, cfg: RegActConfig) -> Tuple[np.ndarray, RegActTape]:
    _require_mode(cfg, ActivationMode.ONE_STEP)
    o = as_field(o, 'input')
    tape = _run_dual_iterations(ActivationKind.RELU, o, cfg, cfg.kappa, 1)
    return tape.activations[-1], tape


def post_tv(
        o: np.ndarray,
        lam: float,
        iterations: int = DEFAULT_TEST_ITERATIONS,
        tau: Optional[float] = None,
    ) -> np.ndarray:
    """Full dual iteration on the logits of a network trained without it."""
    cfg = RegActConfig(
        lam=lam,
        tau=DEFAULT_TAU if tau is None else tau,
        iterations=iterations,
        mode=ActivationMode.ITERATIVE,
    )
    a, _, _ = reg_softmax_iterative(o, cfg, record=False)
    return a
