"""Finite predictor classes over (density vector, observation, action).

A predictor reads the environment parameter off the estimated density of
the initial state through a fixed linear probe, then looks up tabulated
action values on a uniform grid of observation nodes per layer. Both steps
are piecewise linear, so a sup-norm perturbation ``tau`` of the density
vector moves every output by at most ``lipschitz * tau``.

``build_class`` plants the tabulated optimal predictor among decoys whose
tables are shifted, evaluated at the wrong parameter, or computed from
corrupted rewards.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path as FsPath

import numpy as np

from .kde import DensityGrid, Lattice, LatticeMismatch, layer_lattice
from .kernels import interp_uniform
from .romdp import Env, InputError

ROOT_KEY: tuple = ()
DEFAULT_THETA_NET = 256
DEFAULT_X_CELLS = 256
MIN_DECOY_MAGNITUDE = 0.1


class PredictorError(RuntimeError):
    pass


# --- parameter read-out -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Probe:
    """Linear functional of the root density, inverted through a calibration curve.

    ``reading(D) = sum_i w_i D(x_i)`` over the root lattice; ``calib[j]`` is the
    reading of the true density at ``theta_net[j]`` and is strictly increasing,
    so ``theta_hat`` is a clamped piecewise-linear inverse.
    """

    lattice: Lattice
    weights: np.ndarray
    calib: np.ndarray
    theta_net: np.ndarray
    key: tuple = ROOT_KEY

    @property
    def gain(self) -> float:
        """Sup-norm gain of the reading: ``sum |w_i|``."""
        return float(np.abs(self.weights).sum())

    @property
    def slope_bound(self) -> float:
        """Largest slope of the inverse calibration curve."""
        return float(np.max(np.diff(self.theta_net) / np.diff(self.calib)))

    @property
    def probe_set(self) -> list[tuple[tuple, float]]:
        return [(self.key, float(p)) for p in self.lattice.points()[:, 0]]

    def reading(self, D) -> float:
        try:
            grid: DensityGrid = D[self.key]
        except KeyError:
            raise InputError(f"density vector has no entry for path {self.key!r}") from None
        if grid.lattice != self.lattice:
            raise LatticeMismatch("density grid lattice differs from the probe lattice")
        return float(np.dot(self.weights, grid.values))

    def theta_hat(self, D) -> float:
        return float(np.interp(self.reading(D), self.calib, self.theta_net))


def make_probe(family, theta_net: np.ndarray) -> Probe:
    spec = family.spec
    lat = layer_lattice(spec, 0)
    pts = lat.points()[:, 0]
    w = lat.trapezoid_weights() * (pts - 0.5 * (lat.lo[0] + lat.hi[0]))
    s0 = spec.initial_state
    calib = np.array([np.dot(w, family.density(np.array([t]), s0).pdf(lat.points())) for t in theta_net])
    if calib[-1] < calib[0]:
        w, calib = -w, -calib
    if np.any(np.diff(calib) <= 0):
        raise PredictorError("root-density probe is not monotone in theta; the read-out cannot be inverted")
    return Probe(lat, w, calib, np.asarray(theta_net, dtype=float))


# --- predictors ---------------------------------------------------------------

@dataclass(eq=False)
class TabularPredictor:
    """Values ``tables[j, h, i, a]`` at (theta_net[j], node i of layer h, action a)."""

    id: str
    kind: str
    probe: Probe
    layer_lo: np.ndarray  # (H, 2): box lo/hi on axis 0 per layer
    tables: np.ndarray  # (N_theta, H, nodes, A)
    magnitude: float = 0.0
    label: str = ""
    residual: float = float("nan")
    root_residual: float = float("nan")
    regret: float = float("nan")
    lipschitz: float = field(init=False)

    def __post_init__(self):
        self.tables = np.clip(np.asarray(self.tables, dtype=float), 0.0, 1.0)
        if self.tables.shape[0] > 1:
            dtheta = np.diff(self.probe.theta_net)
            slope = np.abs(np.diff(self.tables, axis=0)) / dtheta[:, None, None, None]
            l_table = float(slope.max())
        else:
            l_table = 0.0
        self.lipschitz = l_table * self.probe.slope_bound * self.probe.gain

    @property
    def n_actions(self) -> int:
        return self.tables.shape[3]

    @property
    def horizon(self) -> int:
        return self.tables.shape[1]

    def node_step(self, h: int) -> float:
        lo, hi = self.layer_lo[h]
        return (hi - lo) / (self.tables.shape[2] - 1)

    def bind(self, D) -> "BoundPredictor":
        theta = self.probe.theta_hat(D)
        net = self.probe.theta_net
        if self.tables.shape[0] == 1:
            return BoundPredictor(self, self.tables[0], theta)
        j = int(np.clip(np.searchsorted(net, theta, side="right") - 1, 0, net.size - 2))
        w = (theta - net[j]) / (net[j + 1] - net[j])
        return BoundPredictor(self, (1.0 - w) * self.tables[j] + w * self.tables[j + 1], theta)

    def values(self, D, x) -> np.ndarray:
        return self.bind(D).values(x)

    def predict(self, D, x, a: int) -> float:
        if not 0 <= int(a) < self.n_actions:
            raise InputError(f"invalid action {a}")
        return float(self.values(D, np.atleast_2d(x))[0, int(a)])

    def induced_action(self, D, x) -> int:
        return int(self.bind(D).actions(np.atleast_2d(x))[0])

    def meta(self) -> dict:
        return {"id": self.id, "kind": self.kind, "magnitude": self.magnitude, "label": self.label,
                "residual": self.residual, "root_residual": self.root_residual, "regret": self.regret,
                "lipschitz": self.lipschitz}


@dataclass(eq=False)
class BoundPredictor:
    """A predictor with its density argument fixed; callable as a reactive policy."""

    predictor: TabularPredictor
    table: np.ndarray  # (H, nodes, A)
    theta_hat: float

    def _layers(self, x: np.ndarray) -> np.ndarray:
        lohi = self.predictor.layer_lo
        out = np.full(x.shape[0], -1, dtype=np.int64)
        for h in range(lohi.shape[0]):
            out[(x[:, 0] >= lohi[h, 0]) & (x[:, 0] <= lohi[h, 1])] = h
        return out

    def values(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != 1:
            raise InputError("tabular predictors take 1-d observations")
        layers = self._layers(x)
        if np.any(layers < 0):
            raise InputError("observation outside every layer box")
        out = np.empty((x.shape[0], self.table.shape[2]))
        for h in np.unique(layers):
            idx = np.flatnonzero(layers == h)
            lo = self.predictor.layer_lo[h, 0]
            out[idx] = interp_uniform(x[idx, 0], lo, self.predictor.node_step(int(h)), self.table[h])
        return out

    def actions(self, x) -> np.ndarray:
        # argmax returns the first maximiser: ties go to the lowest action id
        return np.argmax(self.values(x), axis=1)

    def __call__(self, x) -> np.ndarray:
        return self.actions(x)

    def breakpoints(self, h: int) -> np.ndarray:
        """Observation points in layer ``h`` where the greedy action can switch."""
        t = self.table[h]
        lo = self.predictor.layer_lo[h, 0]
        step = self.predictor.node_step(h)
        xs = lo + step * np.arange(t.shape[0])
        pts = [xs]
        A = t.shape[1]
        for a in range(A):
            for b in range(a + 1, A):
                d = t[:, a] - t[:, b]
                i = np.flatnonzero(d[:-1] * d[1:] < 0)
                pts.append(xs[i] + step * d[i] / (d[i] - d[i + 1]))
        return np.unique(np.concatenate(pts))


@dataclass(eq=False)
class PredictorClass:
    members: list[TabularPredictor]
    star_index: int | None = None

    def __post_init__(self):
        if not self.members:
            raise PredictorError("a predictor class needs at least one member")
        ids = [m.id for m in self.members]
        if len(set(ids)) != len(ids):
            raise PredictorError("predictor ids must be unique")

    @property
    def F(self) -> int:
        return len(self.members)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    @property
    def lipschitz(self) -> float:
        return max(m.lipschitz for m in self.members)

    @property
    def star(self) -> TabularPredictor | None:
        return None if self.star_index is None else self.members[self.star_index]

    def by_id(self, pid: str) -> TabularPredictor:
        for m in self.members:
            if m.id == pid:
                return m
        raise KeyError(pid)

    def subset(self, ids) -> "PredictorClass":
        keep = [m for m in self.members if m.id in set(ids)]
        star = self.star
        idx = next((i for i, m in enumerate(keep) if star is not None and m is star), None)
        return PredictorClass(keep, idx)

    def save(self, path) -> None:
        probe = self.members[0].probe
        meta = {"star_index": self.star_index, "members": [m.meta() for m in self.members]}
        np.savez_compressed(
            path,
            tables=np.stack([m.tables for m in self.members]),
            layer_lo=self.members[0].layer_lo,
            probe_weights=probe.weights, probe_calib=probe.calib, theta_net=probe.theta_net,
            lattice=np.array([probe.lattice.lo[0], probe.lattice.hi[0], probe.lattice.counts[0]]),
            meta=np.array(json.dumps(meta, sort_keys=True)),
        )

    @classmethod
    def load(cls, path) -> "PredictorClass":
        with np.load(path, allow_pickle=False) as z:
            lo, hi, n = z["lattice"]
            probe = Probe(Lattice((float(lo),), (float(hi),), (int(n),)), z["probe_weights"],
                          z["probe_calib"], z["theta_net"])
            meta = json.loads(str(z["meta"]))
            members = []
            for tab, m in zip(z["tables"], meta["members"]):
                p = TabularPredictor(m["id"], m["kind"], probe, z["layer_lo"], tab, m["magnitude"], m["label"],
                                     m["residual"], m["root_residual"], m["regret"])
                members.append(p)
        return cls(members, meta["star_index"])


def constant_predictor(probe: Probe, layer_lo: np.ndarray, n_actions: int, value: float,
                       pid: str = "const", nodes: int = 2) -> TabularPredictor:
    tab = np.full((probe.theta_net.size, layer_lo.shape[0], nodes, n_actions), float(value))
    return TabularPredictor(pid, "constant", probe, layer_lo, tab, label=f"constant {value:g}")


# --- meta-policy --------------------------------------------------------------

@dataclass(eq=False)
class MetaPolicy:
    """A predictor plus one density vector per environment key (simulator index or "real")."""

    predictor: TabularPredictor
    densities: dict = field(default_factory=dict)

    def policy(self, key) -> BoundPredictor:
        return self.predictor.bind(self.densities[key])

    def with_density(self, key, D) -> "MetaPolicy":
        dens = dict(self.densities)
        dens[key] = D
        return MetaPolicy(self.predictor, dens)


# --- construction -------------------------------------------------------------

class _ShiftedRewards:
    """Reward model whose mean in one layer (optionally one action) is offset by ``c``."""

    def __init__(self, base, layer: int, c: float, action: int | None = None):
        self.base, self.layer, self.c, self.action = base, layer, c, action

    def mean(self, layer, x, a):
        m = self.base.mean(layer, x, a)
        if layer != self.layer:
            return m
        hit = np.ones(m.shape[0], bool) if self.action is None else (np.asarray(a) == self.action)
        return m + self.c * hit

    def sample(self, layer, x, a, rng):
        raise PredictorError("corrupted reward models are for tabulation only")


def _layer_nodes(spec, n_cells: int) -> tuple[np.ndarray, np.ndarray]:
    lohi = np.array([[spec.layer_boxes[h][0][0], spec.layer_boxes[h][1][0]] for h in range(spec.horizon)])
    nodes = np.stack([np.linspace(lo, hi, n_cells + 1) for lo, hi in lohi])
    return lohi, nodes


def _node_states(family, nodes: np.ndarray) -> list[np.ndarray]:
    """Hidden state owning each node: the state whose prior-wide support region is nearest."""
    regions = family.state_regions()
    out = []
    for h, states in enumerate(family.spec.layers):
        x = nodes[h]
        dist = np.stack([np.maximum(regions[s][0] - x, 0) + np.maximum(x - regions[s][1], 0) for s in states])
        out.append(np.asarray(states)[np.argmin(dist, axis=0)])
    return out


def _q_table(env: Env, values: dict, nodes: np.ndarray, owners: list[np.ndarray]) -> np.ndarray:
    spec = env.spec
    H, A = spec.horizon, spec.n_actions
    out = np.empty((H, nodes.shape[1], A))
    for h in range(H):
        x = nodes[h][:, None]
        for a in range(A):
            r = env.rewards.mean(h, x, np.full(x.shape[0], a))
            if h < H - 1:
                nxt = np.array([values[spec.transition[s][a]] for s in owners[h]])
            else:
                nxt = 0.0
            out[h, :, a] = r + nxt
    return out


def _tabulate(family, thetas, oracle, nodes, owners, reward_wrap=None) -> np.ndarray:
    tabs = []
    for t in thetas:
        env = family.env_for(np.array([t]))
        if reward_wrap is not None:
            env = Env(env.spec, env.theta, env.densities, reward_wrap(env.rewards), env.name)
        tabs.append(_q_table(env, oracle(env).state_values, nodes, owners))
    return np.stack(tabs)


def _expect(env: Env, s: int, g, n: int = 4001) -> float:
    """Trapezoid-rule ``E_{x ~ D_s} g(x)`` on a fine grid over the support of ``D_s``."""
    dens = env.densities[s]
    x = np.linspace(dens.support_lo[0], dens.support_hi[0], n)[:, None]
    w = np.full(n, (x[-1, 0] - x[0, 0]) / (n - 1))
    w[0] = w[-1] = w[0] / 2
    return float(np.dot(w, dens.pdf(x) * g(x)))


def bellman_residuals(f: TabularPredictor, family, thetas) -> dict[int, float]:
    """Per-state RMS of ``f(D, x, a) - r(x, a) - V^f(T(s, a))`` with true densities,
    actions uniform, averaged over ``thetas``."""
    from .kde import true_density_vector

    spec = family.spec
    reach = sorted(spec.reachable())
    acc = {s: 0.0 for s in reach}
    for t in thetas:
        env = family.env_for(np.array([t]))
        bound = f.bind(true_density_vector(env, [ROOT_KEY]))
        vf = {s: _expect(env, s, lambda x: bound.values(x).max(axis=1)) for s in reach}
        for s in reach:
            def sq(x, s=s):
                q = bound.values(x)
                tot = np.zeros(x.shape[0])
                for a in range(spec.n_actions):
                    nxt = vf[spec.transition[s][a]] if spec.transition[s] else 0.0
                    tot += (q[:, a] - env.reward_mean(s, x, a) - nxt) ** 2
                return tot / spec.n_actions
            acc[s] += _expect(env, s, sq)
    return {s: math.sqrt(v / len(thetas)) for s, v in acc.items()}


def policy_regret(f: TabularPredictor, family, thetas) -> float:
    from .bench import optimal_value, policy_value
    from .kde import true_density_vector

    gaps = []
    for t in thetas:
        env = family.env_for(np.array([t]))
        bound = f.bind(true_density_vector(env, [ROOT_KEY]))
        gaps.append(optimal_value(env).total - policy_value(env, bound))
    return float(np.mean(gaps))


def default_decoy_plan(horizon: int) -> list[dict]:
    """Decoy recipes, cycled when more decoys are requested than listed.

    ``shift`` adds ``magnitude`` to a whole layer (away from the nearer end of
    [0, 1]); ``theta`` tabulates the optimal values at ``theta + offset``;
    ``reward`` recomputes the values with one layer's rewards offset.
    """
    last = horizon - 1
    return [
        {"kind": "shift", "layer": 0, "magnitude": 0.1},
        {"kind": "shift", "layer": last, "magnitude": 0.15},
        {"kind": "theta", "offset": 0.3},
        {"kind": "reward", "layer": last, "magnitude": 0.25},
        {"kind": "shift", "layer": 0, "magnitude": 0.6},
        {"kind": "reward", "layer": 0, "magnitude": 0.45, "action": 0},
        {"kind": "theta", "offset": -0.5},
    ]


def _shift_table(star: np.ndarray, layer: int, c: float) -> np.ndarray:
    tab = star.copy()
    mid = star[:, layer].mean(axis=(0, 2))  # per node, over theta and actions
    sign = np.where(mid <= 0.5, 1.0, -1.0)
    tab[:, layer] += c * sign[None, :, None]
    return tab


def build_class(family, oracle=None, n_decoys: int = 7, rng: np.random.Generator | None = None,
                plan: list[dict] | None = None, n_theta: int = DEFAULT_THETA_NET,
                x_cells: int = DEFAULT_X_CELLS, audit_thetas: int = 9, shuffle: bool = True) -> PredictorClass:
    """Class holding the tabulated optimal predictor and ``n_decoys`` decoys.

    Members are shuffled by ``rng`` (the optimal one is tracked by
    ``star_index``); each decoy records its magnitude, its largest per-state
    Bellman residual, its residual at the initial state and its policy regret,
    all measured with true densities over an evenly spaced parameter grid.
    """
    from .bench import optimal_value

    spec = family.spec
    if spec.obs_dim != 1 or family.theta_dim != 1:
        raise NotImplementedError("tabular predictor classes support 1-d observations and 1-d theta only")
    oracle = oracle or optimal_value
    rng = rng if rng is not None else np.random.default_rng(0)
    if family.prior["kind"] == "point":
        t0 = float(family.prior["value"][0])
        net = np.array([t0])
        lo_t, hi_t = t0, t0
    else:
        lo_t, hi_t = float(family.prior["low"][0]), float(family.prior["high"][0])
        net = np.linspace(lo_t, hi_t, n_theta)
    probe = _point_probe(family, net) if net.size == 1 else make_probe(family, net)
    lohi, nodes = _layer_nodes(spec, x_cells)
    owners = _node_states(family, nodes)
    star_tab = _tabulate(family, net, oracle, nodes, owners)
    members = [TabularPredictor("f0", "optimal", probe, lohi, star_tab, label="tabulated optimal values")]

    audit = np.linspace(lo_t, hi_t, audit_thetas) if hi_t > lo_t else np.array([lo_t])
    recipes = plan or default_decoy_plan(spec.horizon)
    for k in range(n_decoys):
        r = dict(recipes[k % len(recipes)])
        kind = r["kind"]
        if kind == "shift":
            tab = _shift_table(star_tab, min(r["layer"], spec.horizon - 1), r["magnitude"])
            mag, label = r["magnitude"], f"value shift {r['magnitude']:g} in layer {r['layer'] + 1}"
        elif kind == "theta":
            shifted = np.clip(net + r["offset"], lo_t, hi_t)
            tab = _tabulate(family, shifted, oracle, nodes, owners)
            mag, label = abs(r["offset"]), f"theta offset {r['offset']:+g}"
        elif kind == "reward":
            layer = min(r["layer"], spec.horizon - 1)
            c, act = r["magnitude"], r.get("action")
            sign = 1.0 if layer == spec.horizon - 1 or act is not None else -1.0
            tab = _tabulate(family, net, oracle, nodes, owners,
                            reward_wrap=lambda base, layer=layer, c=c * sign, act=act: _ShiftedRewards(base, layer, c, act))
            where = f"action {act} of " if act is not None else ""
            mag, label = c, f"reward offset {sign * c:+g} on {where}layer {layer + 1}"
        else:
            raise PredictorError(f"unknown decoy kind {kind!r}")
        if mag < MIN_DECOY_MAGNITUDE:
            raise PredictorError(f"decoy magnitude {mag} below the minimum {MIN_DECOY_MAGNITUDE}")
        members.append(TabularPredictor(f"f{k + 1}", kind, probe, lohi, tab, mag, label))

    for m in members:
        res = bellman_residuals(m, family, audit)
        m.residual = max(res.values())
        m.root_residual = res[spec.initial_state]
        m.regret = policy_regret(m, family, audit)
    order = rng.permutation(len(members)) if shuffle else np.arange(len(members))
    shuffled = [members[i] for i in order]
    return PredictorClass(shuffled, int(np.flatnonzero(order == 0)[0]))


def _point_probe(family, net: np.ndarray) -> Probe:
    """Degenerate probe for a point-mass prior: the read-out always returns the single parameter."""
    lat = layer_lattice(family.spec, 0)
    return Probe(lat, np.zeros(lat.size), np.array([0.0, 1.0]), np.array([net[0], net[0]]))


@lru_cache(maxsize=8)
def _cached_class(cfg_json: str, n_decoys: int, seed: int, n_theta: int, x_cells: int) -> PredictorClass:
    from .family import family_from_config

    fam = family_from_config(json.loads(cfg_json))
    return build_class(fam, n_decoys=n_decoys, rng=np.random.default_rng(seed), n_theta=n_theta, x_cells=x_cells)


def cached_class(family, n_decoys: int = 7, seed: int = 0, n_theta: int = DEFAULT_THETA_NET,
                 x_cells: int = DEFAULT_X_CELLS) -> PredictorClass:
    """``build_class`` memoised on the family description (classes are read-only after build)."""
    return _cached_class(json.dumps(family.config, sort_keys=True), n_decoys, seed, n_theta, x_cells)
