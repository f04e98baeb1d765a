"""Higher-order product kernels built from orthonormal Legendre polynomials.

The one-dimensional factor is

    gamma(t) = sum_{m=0}^{ceil(alpha)-1} psi_m(0) psi_m(t) * 1[-1 <= t <= 1]

where ``psi_m = sqrt((2m+1)/2) P_m`` is orthonormal on [-1, 1]. The d-dim
kernel is the product of ``gamma`` over coordinates. Because ``gamma`` is a
polynomial times an indicator, the translated/rescaled kernel class is a
VC-type class; that structural fact is recorded here rather than computed.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre as npleg

PSI_CAP = 12


class KernelError(ValueError):
    """Invalid kernel parameters."""


class CertificationError(AssertionError):
    """A K1 moment condition failed numerically."""


def legendre_psi(m: int, t):
    """Orthonormal Legendre polynomial ``psi_m`` on [-1, 1] (no indicator).

    Uses the three-term recurrence for ``P_m`` then scales by sqrt((2m+1)/2).
    """
    if m < 0 or m > PSI_CAP:
        raise KernelError(f"psi order {m} outside [0, {PSI_CAP}]")
    t = np.asarray(t, dtype=np.float64)
    p_prev = np.ones_like(t)
    if m == 0:
        p = p_prev
    else:
        p = t.copy()
        for k in range(1, m):
            p_prev, p = p, ((2 * k + 1) * t * p - k * p_prev) / (k + 1)
    out = math.sqrt((2 * m + 1) / 2.0) * p
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class KernelSpec:
    alpha: float
    dim: int = 1
    m_max: int = field(init=False)
    psi0: tuple[float, ...] = field(init=False)
    coefs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.alpha > 1.0:
            raise KernelError(f"alpha must exceed 1, got {self.alpha}")
        if self.dim < 1:
            raise KernelError(f"dim must be positive, got {self.dim}")
        m_max = math.ceil(self.alpha) - 1
        if m_max > PSI_CAP:
            raise KernelError(f"alpha={self.alpha} needs psi order {m_max} > cap {PSI_CAP}")
        psi0 = tuple(legendre_psi(m, 0.0) for m in range(m_max + 1))
        # gamma in the Legendre basis: c_m = psi_m(0) * sqrt((2m+1)/2)
        leg = np.array([psi0[m] * math.sqrt((2 * m + 1) / 2.0) for m in range(m_max + 1)])
        object.__setattr__(self, "m_max", m_max)
        object.__setattr__(self, "psi0", psi0)
        object.__setattr__(self, "coefs", npleg.leg2poly(leg))


def gamma_eval(spec: KernelSpec, t):
    """One-dimensional kernel factor; zero outside [-1, 1]."""
    t = np.asarray(t, dtype=np.float64)
    val = np.zeros_like(t)
    for m in range(spec.m_max + 1):
        val = val + spec.psi0[m] * legendre_psi(m, t)
    out = np.where(np.abs(t) <= 1.0, val, 0.0)
    return float(out) if out.ndim == 0 else out


def kernel_eval(spec: KernelSpec, x):
    """Product kernel at ``x``: shape ``(d,)`` or ``(n, d)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != spec.dim:
        raise KernelError(f"expected dimension {spec.dim}, got {x.shape[1]}")
    out = np.ones(x.shape[0])
    for k in range(spec.dim):
        out *= gamma_eval(spec, x[:, k])
    return float(out[0]) if single else out


@dataclass
class MomentCheck:
    name: str
    value: float
    target: float | None  # None means "finite"
    error: float
    ok: bool


@dataclass
class K1Report:
    alpha: float
    dim: int
    checks: list[MomentCheck]
    sup_norm: float
    l2_norm: float

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def integral_error(self) -> float:
        return self.checks[0].error

    @property
    def max_moment_error(self) -> float:
        return max((c.error for c in self.checks if c.name.startswith("moment")), default=0.0)

    @property
    def abs_moment(self) -> float:
        return next(c.value for c in self.checks if c.name == "abs_alpha_moment")


def _multi_indices(dim: int, max_order: int):
    for s in itertools.product(range(max_order + 1), repeat=dim):
        if 1 <= sum(s) <= max_order:
            yield s


def certify_k1(spec: KernelSpec, quad_points: int = 32, tol: float = 1e-8, raise_on_fail: bool = True) -> K1Report:
    """Numerically certify the K1 moment conditions by tensor Gauss-Legendre quadrature.

    Checks the unit integral, every mixed moment with ``1 <= |s| <= m_max``,
    and finiteness of ``int ||t||^alpha |k(t)| dt``. Also reports the sup and
    L2 norms (the computable part of K2).
    """
    nodes, weights = npleg.leggauss(quad_points)
    grid = np.stack(np.meshgrid(*([nodes] * spec.dim), indexing="ij"), axis=-1).reshape(-1, spec.dim)
    w = np.ones(grid.shape[0])
    for wk in np.meshgrid(*([weights] * spec.dim), indexing="ij"):
        w *= wk.reshape(-1)
    kv = kernel_eval(spec, grid)

    checks = [_check("integral", float(np.sum(w * kv)), 1.0, tol)]
    for s in _multi_indices(spec.dim, spec.m_max):
        mono = np.prod(grid ** np.array(s), axis=1)
        checks.append(_check(f"moment{s}", float(np.sum(w * mono * kv)), 0.0, tol))

    # |k| is not polynomial at its sign changes; composite rule keeps it accurate enough for finiteness
    cn, cw = _composite_rule(64, 8)
    cgrid = np.stack(np.meshgrid(*([cn] * spec.dim), indexing="ij"), axis=-1).reshape(-1, spec.dim)
    cwt = np.ones(cgrid.shape[0])
    for wk in np.meshgrid(*([cw] * spec.dim), indexing="ij"):
        cwt *= wk.reshape(-1)
    ck = kernel_eval(spec, cgrid)
    tail = float(np.sum(cwt * np.linalg.norm(cgrid, axis=1) ** spec.alpha * np.abs(ck)))
    checks.append(MomentCheck("abs_alpha_moment", tail, None, 0.0, bool(np.isfinite(tail))))

    sup = float(np.max(np.abs(ck)))
    l2 = float(np.sqrt(np.sum(cwt * ck * ck)))
    report = K1Report(spec.alpha, spec.dim, checks, sup, l2)
    if raise_on_fail and not report.ok:
        bad = [c.name for c in checks if not c.ok]
        raise CertificationError(f"K1 failed for alpha={spec.alpha}, d={spec.dim}: {', '.join(bad)}")
    return report


def _check(name: str, value: float, target: float, tol: float) -> MomentCheck:
    err = abs(value - target)
    return MomentCheck(name, value, target, err, err <= tol)


def _composite_rule(panels: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = npleg.leggauss(order)
    edges = np.linspace(-1.0, 1.0, panels + 1)
    half = np.diff(edges) / 2.0
    mid = (edges[:-1] + edges[1:]) / 2.0
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights
