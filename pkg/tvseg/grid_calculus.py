"""Discrete differential operators on C x N1 x N2 pixel grids.

Fields are float64 arrays of shape (C, N1, N2). Dual fields carry one
2-vector per channel per pixel and are stored as (2, C, N1, N2): index 0 is
the component along rows (i), index 1 the component along columns (j).
"""
import logging

import numpy as np

logger = logging.getLogger('grid_calculus')


class ShapeError(ValueError):
    pass


def as_field(values, name: str = 'field') -> np.ndarray:
    field = np.asarray(values, dtype=np.float64)
    if field.ndim != 3 or min(field.shape) < 1:
        raise ShapeError(f'{name} must have shape (C, N1, N2), got {field.shape}')
    if not np.all(np.isfinite(field)):
        raise ValueError(f'{name} contains non-finite values')
    return field


def as_dual(values, name: str = 'dual field') -> np.ndarray:
    dual = np.asarray(values, dtype=np.float64)
    if dual.ndim != 4 or dual.shape[0] != 2 or min(dual.shape) < 1:
        raise ShapeError(f'{name} must have shape (2, C, N1, N2), got {dual.shape}')
    if not np.all(np.isfinite(dual)):
        raise ValueError(f'{name} contains non-finite values')
    return dual


def grad(u: np.ndarray) -> np.ndarray:
    """Forward differences, zero on the last row / last column."""
    p = np.zeros((2,) + u.shape, dtype=np.float64)
    p[0, :, :-1, :] = u[:, 1:, :] - u[:, :-1, :]
    p[1, :, :, :-1] = u[:, :, 1:] - u[:, :, :-1]
    return p


def div(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of grad: <grad u, p> = -<u, div p>."""
    p = as_dual(p)
    d = np.zeros(p.shape[1:], dtype=np.float64)
    d[:, :-1, :] += p[0, :, :-1, :]
    d[:, 1:, :] -= p[0, :, :-1, :]
    d[:, :, :-1] += p[1, :, :, :-1]
    d[:, :, 1:] -= p[1, :, :, :-1]
    return d


def magnitude(p: np.ndarray) -> np.ndarray:
    return np.sqrt(p[0] ** 2 + p[1] ** 2)


def project_unit_disc(p: np.ndarray) -> np.ndarray:
    p = as_dual(p)
    return p / np.maximum(1.0, magnitude(p))


def tv_value(u: np.ndarray) -> float:
    """Isotropic total variation, summed over channels."""
    return float(magnitude(grad(u)).sum())


def inner(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.vdot(a, b))
