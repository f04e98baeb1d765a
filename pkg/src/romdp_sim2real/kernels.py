"""Hot numeric kernels, each with a numba implementation and a numpy twin.

The public entry points (``kde_eval``, ``bump_mixture_eval``,
``interp_uniform``) dispatch on :data:`romdp_sim2real._accel.HAS_NUMBA`. The
``*_numpy`` twins are always importable so tests and the benchmark can
compare both paths in one process.
"""
from __future__ import annotations

import numpy as np

from ._accel import HAS_NUMBA, njit

# Chunk size (samples) for the broadcasting numpy KDE; bounds peak memory.
_KDE_CHUNK = 4096


def _horner_numpy(coefs: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t)
    for c in coefs[::-1]:
        out = out * t + c
    return out


def kde_eval_numpy(samples: np.ndarray, points: np.ndarray, h: float, coefs: np.ndarray) -> np.ndarray:
    """Evaluate ``(1/(n h^d)) sum_i prod_k g((x_ik - z_jk)/h)`` at every point z_j.

    ``g`` is the polynomial with ascending power-basis ``coefs`` restricted to
    [-1, 1].
    """
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    n, d = samples.shape
    out = np.zeros(points.shape[0])
    for start in range(0, n, _KDE_CHUNK):
        chunk = samples[start:start + _KDE_CHUNK]
        prod = np.ones((chunk.shape[0], points.shape[0]))
        for k in range(d):
            t = (chunk[:, k][:, None] - points[:, k][None, :]) / h
            inside = np.abs(t) <= 1.0
            prod *= np.where(inside, _horner_numpy(coefs, t), 0.0)
        out += prod.sum(axis=0)
    return out / (n * h ** d)


@njit(cache=True, nogil=True)
def _kde_eval_1d_sorted(sorted_x, points, h, coefs):
    n = sorted_x.shape[0]
    m = points.shape[0]
    deg = coefs.shape[0]
    out = np.zeros(m)
    for j in range(m):
        z = points[j]
        lo = np.searchsorted(sorted_x, z - h, side="left")
        hi = np.searchsorted(sorted_x, z + h, side="right")
        acc = 0.0
        for i in range(lo, hi):
            t = (sorted_x[i] - z) / h
            if t < -1.0 or t > 1.0:
                continue
            v = 0.0
            for c in range(deg - 1, -1, -1):
                v = v * t + coefs[c]
            acc += v
        out[j] = acc
    return out / (n * h)


@njit(cache=True, nogil=True)
def _kde_eval_nd(samples, points, h, coefs):
    n, d = samples.shape
    m = points.shape[0]
    deg = coefs.shape[0]
    out = np.zeros(m)
    for j in range(m):
        acc = 0.0
        for i in range(n):
            prod = 1.0
            for k in range(d):
                t = (samples[i, k] - points[j, k]) / h
                if t < -1.0 or t > 1.0:
                    prod = 0.0
                    break
                v = 0.0
                for c in range(deg - 1, -1, -1):
                    v = v * t + coefs[c]
                prod *= v
            acc += prod
        out[j] = acc
    return out / (n * h ** d)


def kde_eval(samples: np.ndarray, points: np.ndarray, h: float, coefs: np.ndarray) -> np.ndarray:
    if not HAS_NUMBA:
        return kde_eval_numpy(samples, points, h, coefs)
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    coefs = np.ascontiguousarray(coefs, dtype=np.float64)
    if samples.shape[1] == 1:
        return _kde_eval_1d_sorted(np.sort(samples[:, 0]), points[:, 0].copy(), float(h), coefs)
    return _kde_eval_nd(samples, points, float(h), coefs)


def bump_mixture_eval_numpy(
    points: np.ndarray, centers: np.ndarray, half_widths: np.ndarray, weights: np.ndarray, power: int
) -> np.ndarray:
    """Mixture of product bumps ``prod_j (1 - u_j^2)^power / (w_j * Z)``.

    ``Z`` is the 1-d normaliser so each component integrates to one; weights
    are used as given.
    """
    points = np.asarray(points, dtype=np.float64)
    norm = _bump_norm(power)
    out = np.zeros(points.shape[0])
    for k in range(centers.shape[0]):
        comp = np.full(points.shape[0], weights[k])
        for j in range(points.shape[1]):
            u = (points[:, j] - centers[k, j]) / half_widths[k, j]
            comp *= np.where(np.abs(u) < 1.0, (1.0 - u * u) ** power, 0.0) / (half_widths[k, j] * norm)
        out += comp
    return out


@njit(cache=True, nogil=True)
def _bump_mixture_eval(points, centers, half_widths, weights, power, norm):
    m, d = points.shape
    out = np.zeros(m)
    for i in range(m):
        acc = 0.0
        for k in range(centers.shape[0]):
            comp = weights[k]
            for j in range(d):
                u = (points[i, j] - centers[k, j]) / half_widths[k, j]
                if u <= -1.0 or u >= 1.0:
                    comp = 0.0
                    break
                comp *= (1.0 - u * u) ** power / (half_widths[k, j] * norm)
            acc += comp
        out[i] = acc
    return out


def bump_mixture_eval(points, centers, half_widths, weights, power: int) -> np.ndarray:
    if not HAS_NUMBA:
        return bump_mixture_eval_numpy(points, centers, half_widths, weights, power)
    return _bump_mixture_eval(
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(centers, dtype=np.float64),
        np.ascontiguousarray(half_widths, dtype=np.float64),
        np.ascontiguousarray(weights, dtype=np.float64),
        int(power),
        _bump_norm(power),
    )


def _bump_norm(power: int) -> float:
    # integral of (1 - u^2)^p over [-1, 1] = 2^(2p+1) (p!)^2 / (2p+1)!
    from math import factorial

    return 2.0 ** (2 * power + 1) * factorial(power) ** 2 / factorial(2 * power + 1)


def interp_uniform_numpy(x: np.ndarray, lo: float, step: float, table: np.ndarray) -> np.ndarray:
    """Piecewise-linear interpolation of ``table`` (nodes x cols) on uniform nodes.

    Values outside the node range are clamped to the end nodes.
    """
    n_nodes = table.shape[0]
    pos = np.clip((np.asarray(x, dtype=np.float64) - lo) / step, 0.0, n_nodes - 1.0)
    i0 = np.minimum(pos.astype(np.int64), n_nodes - 2)
    frac = (pos - i0)[:, None]
    return table[i0] * (1.0 - frac) + table[i0 + 1] * frac


@njit(cache=True, nogil=True)
def _interp_uniform(x, lo, step, table):
    n_nodes, cols = table.shape
    out = np.empty((x.shape[0], cols))
    for i in range(x.shape[0]):
        pos = (x[i] - lo) / step
        if pos < 0.0:
            pos = 0.0
        elif pos > n_nodes - 1.0:
            pos = n_nodes - 1.0
        i0 = int(pos)
        if i0 > n_nodes - 2:
            i0 = n_nodes - 2
        frac = pos - i0
        for c in range(cols):
            out[i, c] = table[i0, c] * (1.0 - frac) + table[i0 + 1, c] * frac
    return out


def interp_uniform(x: np.ndarray, lo: float, step: float, table: np.ndarray) -> np.ndarray:
    if not HAS_NUMBA:
        return interp_uniform_numpy(x, lo, step, table)
    return _interp_uniform(
        np.ascontiguousarray(x, dtype=np.float64), float(lo), float(step),
        np.ascontiguousarray(table, dtype=np.float64),
    )
