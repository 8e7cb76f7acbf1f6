"""Reverse-mode gradients of the regularized activations and a central
finite-difference harness to check them."""
import logging
from collections import namedtuple
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .grid_calculus import div, grad, magnitude
from .reg_activation import ActivationKind, ActivationMode, RegActTape

logger = logging.getLogger('reg_backward')


class TapeError(ValueError):
    pass


GradReport = namedtuple(
    'GradReport',
    ['max_relative_error', 'max_absolute_error', 'probes', 'passed', 'tolerance', 'non_finite'],
)

FULL_CHECK_LIMIT = 64
RELATIVE_FLOOR = 1e-8


def softmax_jvp(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """(diag(s) - s s^T) g per pixel; the Jacobian is symmetric, so this is
    also the vector-Jacobian product."""
    return a * (g - np.sum(a * g, axis=0, keepdims=True))


def relu_vjp(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.where(a > 0, g, 0.0)


def project_unit_disc_vjp(xi: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the unit-disc projection at xi.

    Identity where |xi| <= 1, (I - y y^T / |y|^2) / |y| outside.
    """
    norm = magnitude(xi)
    outside = norm > 1.0
    if not np.any(outside):
        return g.copy()
    safe = np.where(outside, norm, 1.0)
    radial = (xi[0] * g[0] + xi[1] * g[1]) / safe ** 2
    projected = (g - xi * radial) / safe
    return np.where(outside, projected, g)


def _activation_vjp(kind: ActivationKind, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if kind is ActivationKind.SOFTMAX:
        return softmax_jvp(a, g)
    return relu_vjp(a, g)


def _check_shape(tape: RegActTape, d_a: np.ndarray) -> np.ndarray:
    d_a = np.asarray(d_a, dtype=np.float64)
    if d_a.shape != tape.logits.shape:
        raise TapeError(f'gradient shape {d_a.shape} does not match tape shape {tape.logits.shape}')
    return d_a


def _reverse_sweep(tape: RegActTape, d_a: np.ndarray) -> np.ndarray:
    lam = tape.config.lam
    acts = tape.activations
    g_a = d_a
    g_xi = np.zeros_like(tape.xis[-1])
    g_o = np.zeros_like(d_a)
    for k in range(len(acts) - 1, 0, -1):
        g_z = _activation_vjp(tape.kind, acts[k], g_a)
        g_o += g_z
        g_xi = g_xi + project_unit_disc_vjp(tape.xis[k], lam * grad(g_z))
        g_a = tape.step * div(g_xi)
    g_o += _activation_vjp(tape.kind, acts[0], g_a)
    return g_o


def _require(tape: RegActTape, kind: ActivationKind, mode: ActivationMode) -> None:
    if tape.kind is not kind:
        raise TapeError(f'expected a {kind.value} tape, got {tape.kind.value}')
    if tape.mode is not mode:
        raise TapeError(f'expected a {mode.value} tape, got {tape.mode.value}')
    if not tape.recorded:
        raise TapeError('tape was recorded without history')


def reg_softmax_onestep_backward(tape: RegActTape, d_a: np.ndarray) -> np.ndarray:
    _require(tape, ActivationKind.SOFTMAX, ActivationMode.ONE_STEP)
    return _reverse_sweep(tape, _check_shape(tape, d_a))


def reg_softmax_unrolled_backward(tape: RegActTape, d_a: np.ndarray) -> np.ndarray:
    _require(tape, ActivationKind.SOFTMAX, ActivationMode.ITERATIVE)
    return _reverse_sweep(tape, _check_shape(tape, d_a))


def reg_relu_onestep_backward(tape: RegActTape, d_a: np.ndarray) -> np.ndarray:
    _require(tape, ActivationKind.RELU, ActivationMode.ONE_STEP)
    return _reverse_sweep(tape, _check_shape(tape, d_a))


def lambda_gradient(tape: RegActTape, d_a: np.ndarray) -> float:
    """dL/dlambda with eta held fixed, exact for one-step tapes."""
    if tape.mode is not ActivationMode.ONE_STEP:
        raise TapeError('lambda gradient is only exact for one-step tapes')
    d_a = _check_shape(tape, d_a)
    g_z = _activation_vjp(tape.kind, tape.activations[-1], d_a)
    return float(-np.vdot(g_z, div(tape.etas[-1])))


def update_lambda(lam: float, gradient: float, tau_lambda: float) -> float:
    if tau_lambda <= 0:
        raise ValueError(f'tau_lambda must be > 0, got {tau_lambda}')
    return max(0.0, lam - tau_lambda * gradient)


def finite_diff_check(
        forward: Callable[[np.ndarray], float],
        point: np.ndarray,
        analytic: np.ndarray,
        epsilon: float = 1e-5,
        tolerance: float = 1e-6,
        max_probes: int = 200,
        seed: int = 0,
        probes: Optional[Sequence[int]] = None,
    ) -> GradReport:
    """Compare ``analytic`` to central differences of ``forward`` at ``point``.

    The relative error is the largest absolute deviation over the probed
    coordinates divided by the largest numerical derivative magnitude.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f'epsilon must be in [1e-7, 1e-3], got {epsilon}')
    x = np.array(point, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    if analytic.size != flat.size:
        raise ValueError(f'analytic gradient has {analytic.size} entries, point has {flat.size}')

    if probes is not None:
        indices = np.asarray(list(probes), dtype=np.int64)
    elif flat.size <= FULL_CHECK_LIMIT:
        indices = np.arange(flat.size)
    else:
        rng = np.random.default_rng(seed)
        indices = np.sort(rng.choice(flat.size, size=min(flat.size, max_probes), replace=False))

    numeric = np.empty(indices.size, dtype=np.float64)
    with np.errstate(all='ignore'):
        for n, index in enumerate(indices):
            original = flat[index]
            flat[index] = original + epsilon
            plus = forward(x)
            flat[index] = original - epsilon
            minus = forward(x)
            flat[index] = original
            numeric[n] = (plus - minus) / (2 * epsilon)

    finite = np.isfinite(numeric)
    non_finite = int(indices.size - finite.sum())
    if non_finite:
        logger.warning('%d of %d probes produced non-finite evaluations', non_finite, indices.size)
    deviation = np.abs(analytic[indices][finite] - numeric[finite])
    max_abs = float(deviation.max()) if deviation.size else 0.0
    scale = max(float(np.abs(numeric[finite]).max()) if deviation.size else 0.0, RELATIVE_FLOOR)
    max_rel = max_abs / scale if not non_finite else float('inf')
    return GradReport(
        max_relative_error=max_rel,
        max_absolute_error=max_abs,
        probes=int(indices.size),
        passed=bool(max_rel <= tolerance),
        tolerance=tolerance,
        non_finite=non_finite,
    )


def merge_reports(reports: Iterable[GradReport]) -> GradReport:
    reports = list(reports)
    if not reports:
        raise ValueError('no reports to merge')
    tolerance = max(report.tolerance for report in reports)
    max_rel = max(report.max_relative_error for report in reports)
    non_finite = sum(report.non_finite for report in reports)
    return GradReport(
        max_relative_error=max_rel,
        max_absolute_error=max(report.max_absolute_error for report in reports),
        probes=sum(report.probes for report in reports),
        passed=all(report.passed for report in reports),
        tolerance=tolerance,
        non_finite=non_finite,
    )
