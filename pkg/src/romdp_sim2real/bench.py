"""Exact-value oracles and assumption audits for benchmark environments.

Values are computed by backward induction with adaptive composite
Gauss-Legendre quadrature over each state's support. Panel edges include the
density breakpoints and, when the policy exposes them, its action switch
points, so the integrands are smooth on every panel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import legendre as npleg

from .kde import Lattice
from .romdp import Env, rollouts

QUAD_TOL = 1e-6
QUAD_CAP = 2**20
_GL_ORDER = 10
_GL = npleg.leggauss(_GL_ORDER)


class QuadratureError(RuntimeError):
    pass


@dataclass
class ValueReport:
    state_values: dict[int, float]
    total: float
    quad_error: float
    policy: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)


def _panel_rule(edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, w = _GL
    half = np.diff(edges) / 2.0
    mid = (edges[:-1] + edges[1:]) / 2.0
    return (mid[:, None] + half[:, None] * x).ravel(), (half[:, None] * w).ravel()


def _refine(edges: np.ndarray) -> np.ndarray:
    mids = (edges[:-1] + edges[1:]) / 2.0
    out = np.empty(edges.size + mids.size)
    out[0::2] = edges
    out[1::2] = mids
    return out


def _tensor_rule(axis_edges: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    rules = [_panel_rule(e) for e in axis_edges]
    mesh = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
    wmesh = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    w = np.ones(pts.shape[0])
    for wm in wmesh:
        w *= wm.reshape(-1)
    return pts, w


def integrate_over_state(env: Env, s: int, integrand: Callable[[np.ndarray], np.ndarray],
                         extra_breaks=(), tol: float = QUAD_TOL, cap: int = QUAD_CAP) -> tuple[float, float]:
    """``int D_s(x) g(x) dx`` with refinement until successive estimates agree within ``tol``."""
    dens = env.densities[s]
    d = env.spec.obs_dim
    axis_edges = []
    for k in range(d):
        lo, hi = float(dens.support_lo[k]), float(dens.support_hi[k])
        pts = [lo, hi]
        if hasattr(dens, "breakpoints"):
            pts.extend(dens.breakpoints(k))
        if k == 0:
            pts.extend(extra_breaks)
        base = np.unique(np.clip(np.asarray(pts, dtype=float), lo, hi))
        base = np.union1d(base, np.linspace(lo, hi, 9))
        axis_edges.append(base)

    def estimate(edges):
        x, w = _tensor_rule(edges)
        return float(np.dot(w, dens.pdf(x) * integrand(x))), x.shape[0]

    prev, npts = estimate(axis_edges)
    while True:
        axis_edges = [_refine(e) for e in axis_edges]
        cur, npts = estimate(axis_edges)
        err = abs(cur - prev)
        if err < tol:
            return cur, err
        if npts * 2**d > cap:
            raise QuadratureError(f"quadrature for state {s} did not converge: last change {err:.3g}")
        prev = cur


def _state_of_obs(env: Env, h: int, x: np.ndarray) -> np.ndarray:
    """Oracle-side state identification: layer-h state with the largest density at x."""
    states = [s for s in env.spec.layers[h]]
    if len(states) == 1:
        return np.full(x.shape[0], states[0], dtype=np.int64)
    dens = np.stack([env.densities[s].pdf(x) for s in states], axis=1)
    return np.asarray(states, dtype=np.int64)[np.argmax(dens, axis=1)]


def q_values(env: Env, s: int, x: np.ndarray, values: dict[int, float]) -> np.ndarray:
    """Q(s, x, a) = r(s, x, a) + V(T(s, a)) for every action; shape (n, A)."""
    spec = env.spec
    out = np.empty((x.shape[0], spec.n_actions))
    for a in range(spec.n_actions):
        nxt = values[spec.transition[s][a]] if spec.transition[s] else 0.0
        out[:, a] = env.reward_mean(s, x, a) + nxt
    return out


def optimal_value(env: Env, tol: float = QUAD_TOL, cap: int = QUAD_CAP) -> ValueReport:
    """Backward induction for V*: ``V*(s) = int D_s(x) max_a [r + V*(T(s, a))] dx``."""
    spec = env.spec
    values: dict[int, float] = {}
    errors: dict[int, float] = {}
    for h in range(spec.horizon - 1, -1, -1):
        for s in spec.layers[h]:
            v, e = integrate_over_state(env, s, lambda x, s=s: q_values(env, s, x, values).max(axis=1),
                                        tol=tol, cap=cap)
            child_err = max((errors[t] for t in spec.transition[s]), default=0.0)
            values[s], errors[s] = v, e + child_err
    frozen = dict(values)

    def policy(x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        layers = spec.layer_of_obs(x)
        act = np.zeros(x.shape[0], dtype=np.int64)
        for h in np.unique(layers):
            if h < 0:
                continue
            idx = np.flatnonzero(layers == h)
            st = _state_of_obs(env, int(h), x[idx])
            for s in np.unique(st):
                j = idx[st == s]
                act[j] = np.argmax(q_values(env, int(s), x[j], frozen), axis=1)
        return act

    s1 = spec.initial_state
    return ValueReport(frozen, frozen[s1], errors[s1], policy)


def policy_value(env: Env, policy, tol: float = QUAD_TOL, cap: int = QUAD_CAP,
                 with_error: bool = False):
    """Value of a reactive policy by the same backward recursion.

    If ``policy`` has a ``breakpoints(layer)`` method, its switch points are
    used as panel edges (1-d observation spaces).
    """
    spec = env.spec
    values: dict[int, float] = {}
    errors: dict[int, float] = {}
    for h in range(spec.horizon - 1, -1, -1):
        brk = policy.breakpoints(h) if hasattr(policy, "breakpoints") else ()
        for s in spec.layers[h]:
            def g(x, s=s):
                q = q_values(env, s, x, values)
                a = np.asarray(policy(x), dtype=np.int64)
                return q[np.arange(x.shape[0]), a]

            v, e = integrate_over_state(env, s, g, extra_breaks=brk, tol=tol, cap=cap)
            values[s] = v
            errors[s] = e + max((errors[t] for t in spec.transition[s]), default=0.0)
    s1 = spec.initial_state
    return (values[s1], errors[s1]) if with_error else values[s1]


def monte_carlo_value(env: Env, policy, n: int, rng: np.random.Generator, chunk: int = 200_000) -> tuple[float, float]:
    """Mean sampled return over ``n`` rollouts and its standard error."""
    total = 0.0
    sq = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        ret = rollouts(env, policy, m, rng, feedback=True, phase="oracle-mc").returns
        total += ret.sum()
        sq += (ret * ret).sum()
        done += m
    mean = total / n
    var = max(sq / n - mean * mean, 0.0)
    return float(mean), math.sqrt(var / n)


@dataclass
class MetaValue:
    mean: float
    ci: float  # 95% normal-approximation half-width
    values: np.ndarray
    optimal: np.ndarray | None = None

    @property
    def regret(self) -> float:
        if self.optimal is None:
            raise ValueError("optimal values were not computed")
        return float(np.mean(self.optimal - self.values))


def expected_meta_value(family, meta_policy, n_env: int, rng: np.random.Generator,
                        tol: float = QUAD_TOL, with_optimal: bool = False) -> MetaValue:
    """Monte Carlo average over theta ~ prior of the value of ``meta_policy(env, rng)``.

    ``meta_policy`` receives a freshly sampled environment (it may collect
    feedback-free observations from it) and returns a reactive policy.
    """
    from .family import sample_env

    vals = np.empty(n_env)
    opt = np.empty(n_env) if with_optimal else None
    for i in range(n_env):
        env = sample_env(family, rng, name=f"eval-{i}", check=False)
        pol = meta_policy(env, rng)
        vals[i] = policy_value(env, pol, tol=tol)
        if with_optimal:
            opt[i] = optimal_value(env, tol=tol).total
    ci = 1.96 * vals.std(ddof=1) / math.sqrt(n_env) if n_env > 1 else float("inf")
    return MetaValue(float(vals.mean()), float(ci), vals, opt)


# --- assumption audits --------------------------------------------------------

def audit_lattice(env: Env, h: int, spacing: float | None = None) -> Lattice:
    lo, hi = env.spec.layer_box(h)
    return Lattice.for_box(lo, hi, spacing or env.spec.obs_bound / 64.0)


def check_separation(env: Env, spacing: float | None = None) -> float:
    """Smallest lattice sup-gap between densities of distinct reachable states of one layer."""
    reach = env.spec.reachable()
    gap = math.inf
    for h, states in enumerate(env.spec.layers):
        states = [s for s in states if s in reach]
        if len(states) < 2:
            continue
        pts = audit_lattice(env, h, spacing).points()
        vals = {s: env.densities[s].pdf(pts) for s in states}
        for i, s in enumerate(states):
            for t in states[i + 1:]:
                gap = min(gap, float(np.max(np.abs(vals[s] - vals[t]))))
    return gap


def check_holder(env: Env, alpha: float, step: float = 2e-3, max_sep: int = 400) -> float:
    """Largest finite-difference Holder quotient of the order-(ceil(alpha)-1) derivative.

    Probes 1-d slices along each axis through every bump centre.
    """
    order = math.ceil(alpha) - 1
    expo = alpha - order
    worst = 0.0
    for s, dens in enumerate(env.densities):
        lo, hi = dens.support_lo, dens.support_hi
        for k in range(env.spec.obs_dim):
            for c in np.atleast_2d(dens.centers):
                grid = np.arange(lo[k] - 4 * step, hi[k] + 4 * step, step)
                pts = np.tile(c, (grid.size, 1))
                pts[:, k] = grid
                deriv = dens.pdf(pts)
                for _ in range(order):
                    deriv = np.gradient(deriv, step)
                for sep in np.unique(np.geomspace(1, max_sep, 24).astype(int)):
                    diff = np.abs(deriv[sep:] - deriv[:-sep])
                    if diff.size:
                        worst = max(worst, float(diff.max()) / (sep * step) ** expo)
    return worst


def check_reactiveness(env: Env, values: dict[int, float] | None = None, spacing: float | None = None,
                       tol: float = 1e-9) -> tuple[int, int]:
    """Count (checked, violating) lattice points where two states share support but
    disagree on the optimal Q. Returns (0, 0) when supports never overlap."""
    if values is None:
        values = optimal_value(env).state_values
    checked = bad = 0
    reach = env.spec.reachable()
    for h, states in enumerate(env.spec.layers):
        states = [s for s in states if s in reach]
        pts = audit_lattice(env, h, spacing).points()
        for i, s in enumerate(states):
            for t in states[i + 1:]:
                both = (env.densities[s].pdf(pts) > 0) & (env.densities[t].pdf(pts) > 0)
                if not both.any():
                    continue
                x = pts[both]
                diff = np.abs(q_values(env, s, x, values) - q_values(env, t, x, values))
                checked += x.shape[0]
                bad += int(np.sum(diff.max(axis=1) > tol))
    return checked, bad


def prior_mean_optimal_value(family, order: int = 64, tol: float = QUAD_TOL) -> float:
    """``E_{theta ~ prior} V*_theta`` by tensor Gauss-Legendre over the uniform prior box."""
    if family.prior["kind"] == "point":
        return optimal_value(family.env_for(family.prior["value"]), tol=tol).total
    lo = np.asarray(family.prior["low"], dtype=float)
    hi = np.asarray(family.prior["high"], dtype=float)
    t, w = npleg.leggauss(order)
    total = 0.0
    for idx in np.ndindex(*([order] * lo.size)):
        theta = lo + (hi - lo) * (t[list(idx)] + 1.0) / 2.0
        weight = float(np.prod(w[list(idx)])) / 2.0 ** lo.size
        total += weight * optimal_value(family.env_for(theta), tol=tol).total
    return total
