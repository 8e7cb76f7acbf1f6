"""Brute-force reference minimizers, written without the solvers under test.

Both problems are solved through their smooth duals

    softmax:  min_{|xi| <= 1}  sum_pixels logsumexp(o - lam * div xi)
    relu:     min_{|xi| <= 1}  0.5 * || max(0, o - lam * div xi) ||^2

with accelerated projected gradient (FISTA), then mapped back to the primal.
"""
import numpy as np


def forward_differences(u):
    p = np.zeros((2,) + u.shape)
    p[0, :, :-1, :] = np.diff(u, axis=1)
    p[1, :, :, :-1] = np.diff(u, axis=2)
    return p


def negative_adjoint(p):
    """-(forward_differences)^T p, assembled edge by edge."""
    _, channels, rows, cols = p.shape
    d = np.zeros((channels, rows, cols))
    for i in range(rows):
        for j in range(cols):
            if i + 1 < rows:
                d[:, i, j] += p[0, :, i, j]
                d[:, i + 1, j] -= p[0, :, i, j]
            if j + 1 < cols:
                d[:, i, j] += p[1, :, i, j]
                d[:, i, j + 1] -= p[1, :, i, j]
    return d


def clip_to_disc(p):
    norm = np.sqrt(p[0] ** 2 + p[1] ** 2)
    return p / np.maximum(norm, 1.0)


def channel_softmax(z):
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def _fista(gradient, shape, lipschitz, iterations):
    xi = np.zeros(shape)
    y = xi.copy()
    t = 1.0
    for _ in range(iterations):
        nxt = clip_to_disc(y - gradient(y) / lipschitz)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = nxt + ((t - 1.0) / t_next) * (nxt - xi)
        xi, t = nxt, t_next
    return xi


def softmax_tv_minimizer(o, lam, iterations=30000):
    o = np.asarray(o, dtype=np.float64)
    if lam == 0:
        return channel_softmax(o)

    def gradient(xi):
        return lam * forward_differences(channel_softmax(o - lam * negative_adjoint(xi)))

    xi = _fista(gradient, (2,) + o.shape, 4.0 * lam * lam, iterations)
    return channel_softmax(o - lam * negative_adjoint(xi))


def relu_tv_minimizer(o, lam, iterations=30000):
    o = np.asarray(o, dtype=np.float64)
    if lam == 0:
        return np.maximum(o, 0.0)

    def gradient(xi):
        return lam * forward_differences(np.maximum(o - lam * negative_adjoint(xi), 0.0))

    xi = _fista(gradient, (2,) + o.shape, 8.0 * lam * lam, iterations)
    return np.maximum(o - lam * negative_adjoint(xi), 0.0)


def nonnegative_least_squares(o, iterations=2000, step=0.5):
    """argmin_{A >= 0} 0.5 * ||o - A||^2 by projected gradient."""
    a = np.zeros_like(o, dtype=np.float64)
    for _ in range(iterations):
        a = np.maximum(a - step * (a - o), 0.0)
    return a


def isotropic_tv(u):
    p = forward_differences(u)
    return float(np.sqrt(p[0] ** 2 + p[1] ** 2).sum())


def dual_form_tv(u, iterations=500, step=1.0, seed=0):
    """sup over unit-disc fields p of <u, div p>, by projected ascent from a
    random start."""
    u = np.asarray(u, dtype=np.float64)
    rng = np.random.default_rng(seed)
    p = clip_to_disc(rng.normal(size=(2,) + u.shape))
    g = forward_differences(u)
    for _ in range(iterations):
        p = clip_to_disc(p - step * g)
    return float(np.vdot(u, negative_adjoint(p)))
