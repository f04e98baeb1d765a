"""Kernel density estimation on lattices, sup-norm comparisons and a rate diagnostic."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Protocol

import numpy as np

from .kernels import kde_eval
from .legendre import KernelSpec


class LatticeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Lattice:
    """Uniform axis-aligned grid over a box, points in C order."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    counts: tuple[int, ...]

    @classmethod
    def for_box(cls, lo, hi, spacing: float) -> "Lattice":
        lo = tuple(float(v) for v in np.atleast_1d(lo))
        hi = tuple(float(v) for v in np.atleast_1d(hi))
        counts = tuple(int(math.ceil((b - a) / spacing - 1e-9)) + 1 for a, b in zip(lo, hi))
        return cls(lo, hi, counts)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((b - a) / (n - 1) for a, b, n in zip(self.lo, self.hi, self.counts))

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, n) for a, b, n in zip(self.lo, self.hi, self.counts)]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    def trapezoid_weights(self) -> np.ndarray:
        w = np.ones(self.counts)
        for k, (n, step) in enumerate(zip(self.counts, self.spacing)):
            wk = np.full(n, step)
            wk[0] = wk[-1] = step / 2.0
            shape = [1] * self.dim
            shape[k] = n
            w = w * wk.reshape(shape)
        return w.reshape(-1)

    def shifted(self, v) -> "Lattice":
        v = np.atleast_1d(v)
        return Lattice(tuple(a + s for a, s in zip(self.lo, v)), tuple(b + s for b, s in zip(self.hi, v)), self.counts)


@dataclass
class DensityGrid:
    lattice: Lattice
    values: np.ndarray
    provenance: str = "true-density"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.lattice.size,):
            raise ValueError(f"values shape {self.values.shape} does not match lattice size {self.lattice.size}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("density grid values must be finite")

    def integral(self) -> float:
        return float(np.dot(self.lattice.trapezoid_weights(), self.values))


# A per-node density map; keys are canonical paths on the learner side.
DensityVector = dict


def bandwidth(n: int, alpha: float, d: int) -> float:
    if n < 1:
        raise ValueError("bandwidth needs n >= 1")
    return float(n) ** (-1.0 / (2.0 * alpha + d))


def fit(samples, h: float, kernel: KernelSpec, lattice: Lattice) -> DensityGrid:
    """KDE values at every lattice point; negative values are kept."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape[0] == 0:
        raise ValueError("cannot fit a KDE to an empty sample")
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    if samples.shape[1] != lattice.dim or kernel.dim != lattice.dim:
        raise ValueError("sample, kernel and lattice dimensions disagree")
    vals = kde_eval(samples, lattice.points(), h, kernel.coefs)
    return DensityGrid(lattice, vals, provenance=f"kde(n={samples.shape[0]}, h={h:.6g})")


def sup_distance(a: DensityGrid, b: DensityGrid) -> float:
    if a.lattice != b.lattice:
        raise LatticeMismatch("sup_distance needs identical lattices")
    return float(np.max(np.abs(a.values - b.values)))


def sup_distance_vec(a: Mapping[Hashable, DensityGrid], b: Mapping[Hashable, DensityGrid]) -> float:
    if set(a) != set(b):
        raise LatticeMismatch("density vectors have different keys")
    return max((sup_distance(a[k], b[k]) for k in a), default=0.0)


class SampleableDensity(Protocol):
    def pdf(self, points: np.ndarray) -> np.ndarray: ...

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray: ...


@dataclass
class RateReport:
    n: np.ndarray
    h: np.ndarray
    mean_sup_err: np.ndarray
    std_sup_err: np.ndarray
    median_sup_err: np.ndarray
    slope: float
    intercept: float
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    target_slope: float = float("nan")


def rate_diagnostic(
    true_density: SampleableDensity,
    kernel: KernelSpec,
    n_schedule,
    trials: int,
    rng: np.random.Generator,
    lattice: Lattice,
) -> RateReport:
    """Mean lattice sup error of the KDE per sample size, and its log-log slope."""
    if trials < 1:
        raise ValueError("rate_diagnostic needs trials >= 1")
    ns = np.asarray(sorted(int(n) for n in n_schedule))
    if ns.size == 0 or ns[0] < 1:
        raise ValueError("n_schedule must hold positive counts")
    truth = true_density.pdf(lattice.points())
    errs = np.empty((ns.size, trials))
    hs = np.array([bandwidth(int(n), kernel.alpha, kernel.dim) for n in ns])
    for i, (n, h) in enumerate(zip(ns, hs)):
        for t in range(trials):
            grid = fit(true_density.sample(int(n), rng), h, kernel, lattice)
            errs[i, t] = np.max(np.abs(grid.values - truth))
    mean = errs.mean(axis=1)
    target = -kernel.alpha / (2 * kernel.alpha + kernel.dim)
    if ns.size < 2:
        warnings.warn("rate slope undefined for a single sample size", RuntimeWarning, stacklevel=2)
        slope = intercept = float("nan")
        resid = np.full(ns.size, np.nan)
    else:
        slope, intercept = np.polyfit(np.log(ns), np.log(mean), 1)
        resid = np.log(mean) - (slope * np.log(ns) + intercept)
    return RateReport(ns, hs, mean, errs.std(axis=1), np.median(errs, axis=1),
                      float(slope), float(intercept), resid, target)


def calibrate_c_dist(report: RateReport, alpha: float, d: int, log_term: float = 0.0) -> float:
    """Smallest constant making ``C n^(-a/(2a+d)) sqrt(log n + log_term)`` dominate every mean error."""
    rate = report.n.astype(float) ** (-alpha / (2 * alpha + d)) * np.sqrt(np.log(report.n) + log_term)
    return float(np.max(report.mean_sup_err / rate))


def layer_lattice(spec, h: int, spacing: float | None = None) -> Lattice:
    """Default evaluation lattice of layer ``h`` (0-based): spacing ``obs_bound / 64`` per axis."""
    lo, hi = spec.layer_boxes[h]
    return Lattice.for_box(lo, hi, spacing or spec.obs_bound / 64.0)


def true_density_vector(env, paths, spacing: float | None = None) -> dict:
    """Exact densities on the default lattices, keyed like a learner's estimate (by path)."""
    from .romdp import terminal_state

    out = {}
    for p in paths:
        s = terminal_state(env.spec, p)
        lat = layer_lattice(env.spec, len(p), spacing)
        out[tuple(p)] = DensityGrid(lat, env.densities[s].pdf(lat.points()), "true-density")
    return out
