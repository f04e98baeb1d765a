"""Learning a meta-policy from simulators: state discovery, elimination, acceptance.

The learner only touches simulators through ``collect_at_path``,
``collect_transitions`` and ``rollouts``; hidden states and parameters stay
on the oracle side. Each call that draws samples gets its own random stream
per simulator, keyed by (phase, call index, simulator index), so results do
not depend on how many worker threads collect them.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import AlgoConfig, Plan, resolve
from .kde import DensityGrid, bandwidth, fit, layer_lattice, sup_distance
from .legendre import KernelSpec, certify_k1
from .predictors import BoundPredictor, MetaPolicy, PredictorClass, TabularPredictor
from .rng import Streams
from .romdp import Env, collect_at_path, collect_transitions, rollouts


class Anomaly(RuntimeError):
    """A run-time condition the guarantees rule out (signals misconfigured desk constants)."""

    def __init__(self, kind: str, phase: str, path, detail: str):
        super().__init__(f"{kind} in {phase} at path {list(path)}: {detail}")
        self.kind, self.phase, self.path, self.detail = kind, phase, tuple(path), detail

    def to_dict(self) -> dict:
        return {"kind": self.kind, "phase": self.phase, "path": list(self.path), "detail": self.detail}


# --- state discovery ----------------------------------------------------------

@dataclass
class DiscoveryMap:
    canonical: list[tuple] = field(default_factory=list)
    alias: dict = field(default_factory=dict)  # visited non-canonical path -> canonical path
    densities: list[dict] = field(default_factory=list)  # per simulator: canonical path -> DensityGrid
    h: float = float("nan")
    n_dist: int = 0
    node_visits: int = 0

    def resolve(self, p) -> tuple:
        """Canonical path with the same (estimated) terminal state; descendants of an
        aliased path map to the corresponding descendants of its canonical twin."""
        cur: tuple = ()
        for a in p:
            nxt = cur + (int(a),)
            cur = self.alias.get(nxt, nxt)
        return cur

    def density_vector(self, b: int) -> dict:
        return self.densities[b]

    def to_dict(self) -> dict:
        return {"canonical": [list(p) for p in self.canonical],
                "aliases": [[list(p), list(q)] for p, q in sorted(self.alias.items())],
                "node_visits": self.node_visits, "n_dist": self.n_dist, "bandwidth": self.h}


def _map(pool, fn, n: int) -> list:
    if pool is None:
        return [fn(b) for b in range(n)]
    return list(pool.map(fn, range(n)))


def dfs_distribution(plan: Plan, envs: list[Env], kernel: KernelSpec, streams: Streams,
                     pool: ThreadPoolExecutor | None = None, phase: str = "dfs-distribution") -> DiscoveryMap:
    """Depth-first discovery of distinct terminal states by comparing KDEs across all simulators.

    A node is an alias when, for every simulator, its KDE is within ``eps_dist``
    in lattice sup-norm of an already discovered node of the same depth.
    """
    spec = envs[0].spec
    if any(e.spec != spec for e in envs):
        raise ValueError("all simulators must share one skeleton")
    dm = DiscoveryMap(densities=[{} for _ in envs], n_dist=plan.n_dist)
    dm.h = bandwidth(plan.n_dist, kernel.alpha, kernel.dim)

    def visit(p: tuple) -> None:
        idx = dm.node_visits
        dm.node_visits += 1
        lat = layer_lattice(spec, len(p))

        def one(b):
            x = collect_at_path(envs[b], p, plan.n_dist, streams.get(phase, idx, b), phase)
            return fit(x, dm.h, kernel, lat)

        grids = _map(pool, one, len(envs))
        for q in dm.canonical:
            if len(q) == len(p) and all(sup_distance(g, dm.densities[b][q]) <= plan.eps_dist
                                        for b, g in enumerate(grids)):
                dm.alias[p] = q
                return
        dm.canonical.append(p)
        for b, g in enumerate(grids):
            dm.densities[b][p] = g
        if len(p) < spec.horizon - 1:
            for a in range(spec.n_actions):
                visit(p + (a,))

    visit(())
    return dm


# --- elimination --------------------------------------------------------------

@dataclass
class Learner:
    """Mutable learning state: surviving predictors, value estimates and call logs."""

    plan: Plan
    envs: list[Env]
    survivors: list[TabularPredictor]
    dm: DiscoveryMap
    streams: Streams
    pool: ThreadPoolExecutor | None = None
    cache: dict = field(default_factory=dict)  # (canonical path, predictor id, sim) -> value estimate
    sites: list[dict] = field(default_factory=list)
    consensus_calls: int = 0
    td_calls: int = 0
    learn_log: list[dict] = field(default_factory=list)
    rounds: list[dict] = field(default_factory=list)
    _bound: dict = field(default_factory=dict)
    _calls: int = 0

    @property
    def B(self) -> int:
        return len(self.envs)

    @property
    def H(self) -> int:
        return self.envs[0].spec.horizon

    def bound(self, f: TabularPredictor, b: int) -> BoundPredictor:
        key = (f.id, b)
        if key not in self._bound:
            self._bound[key] = f.bind(self.dm.density_vector(b))
        return self._bound[key]

    def _next_call(self) -> int:
        self._calls += 1
        return self._calls

    def consensus(self, p: tuple, eps_test: float, delta: float, phase: str = "consensus") -> bool:
        """Estimate every survivor's greedy value at ``p`` per simulator; True iff they all agree."""
        self.consensus_calls += 1
        call = self._next_call()
        n = self.plan.n_test(delta)
        canon = self.dm.resolve(p)
        fs = list(self.survivors)

        def one(b):
            x = collect_at_path(self.envs[b], p, n, self.streams.get(phase, call, b), phase)
            return [float(self.bound(f, b).values(x).max(axis=1).mean()) for f in fs]

        vals = np.array(_map(self.pool, one, self.B))  # (B, |F|)
        for b in range(self.B):
            for f, v in zip(fs, vals[b]):
                self.cache[(canon, f.id, b)] = v
        agree = bool(np.all(vals.max(axis=1) - vals.min(axis=1) <= eps_test))
        self.sites.append({"kind": "consensus", "path": list(p), "canonical": list(canon), "n": n,
                           "eps_test": eps_test, "agree": agree, "spread": float((vals.max(1) - vals.min(1)).max())})
        return agree

    def td_eliminate(self, p: tuple, delta: float, phase: str = "td-eliminate") -> list[TabularPredictor]:
        """Keep predictors whose empirical squared Bellman residual at ``p`` is near the smallest, on every simulator."""
        self.td_calls += 1
        call = self._next_call()
        spec = self.envs[0].spec
        n = self.plan.n_train(delta)
        canon = self.dm.resolve(p)
        fs = list(self.survivors)
        leaf = len(p) >= spec.horizon - 1
        child = [self.dm.resolve(p + (a,)) for a in range(spec.n_actions)] if not leaf else []
        for f in fs:
            for b in range(self.B):
                for c in child:
                    if (c, f.id, b) not in self.cache:
                        raise Anomaly("missing-estimate", phase, p, f"no value estimate for child {list(c)}")

        def one(b):
            x, a, r = collect_transitions(self.envs[b], p, n, self.streams.get(phase, call, b), phase)
            risks, vals = [], []
            for f in fs:
                q = self.bound(f, b).values(x)
                nxt = np.array([self.cache[(c, f.id, b)] for c in child]) if child else np.zeros(spec.n_actions)
                resid = q[np.arange(n), a] - r - nxt[a]
                risks.append(float(np.mean(resid * resid)))
                vals.append(float(q.max(axis=1).mean()))
            return risks, vals

        out = _map(self.pool, one, self.B)
        risks = np.array([o[0] for o in out])  # (B, |F|)
        vals = np.array([o[1] for o in out])
        slack = self.plan.slack(n, delta)
        keep = np.all(risks <= risks.min(axis=1, keepdims=True) + slack, axis=0)
        survivors = [f for f, k in zip(fs, keep) if k]
        if not survivors:
            raise Anomaly("empty-class", phase, p, "every predictor was eliminated")
        for j, f in enumerate(fs):
            if keep[j]:
                for b in range(self.B):
                    self.cache[(canon, f.id, b)] = float(vals[b, j])
        self.sites.append({"kind": "td", "path": list(p), "canonical": list(canon), "n": n, "slack": slack,
                           "survivors": [f.id for f in survivors],
                           "eliminated": [f.id for f, k in zip(fs, keep) if not k]})
        self.survivors = survivors
        return survivors

    def dfs_learn(self, p: tuple, delta: float) -> list[TabularPredictor]:
        spec = self.envs[0].spec
        H, S, A = spec.horizon, self.plan.S, spec.n_actions
        eps_test = self.plan.eps_test(len(p))
        if len(p) < H - 1:
            for a in range(A):
                q = p + (a,)
                if not self.consensus(q, eps_test, delta / 2 / (H * S * A)):
                    self.dfs_learn(q, delta)
        return self.td_eliminate(p, delta / 2 / (H * S))

    def learn_from(self, p: tuple, delta: float, phase: str) -> None:
        """Top-level DFS-Learn call with its own call counters in ``learn_log``."""
        c0, t0 = self.consensus_calls, self.td_calls
        self.dfs_learn(p, delta)
        self.learn_log.append({"phase": phase, "path": list(p), "consensus_calls": self.consensus_calls - c0,
                               "td_calls": self.td_calls - t0})


def estimate_vstar(learner: Learner, phase: str = "estimate-vstar") -> tuple[float, str]:
    """Mean greedy value of the first surviving predictor over ``n_1`` fresh root observations per simulator."""
    f = learner.survivors[0]
    n = learner.plan.n_1

    def one(b):
        x = collect_at_path(learner.envs[b], (), n, learner.streams.get(phase, 0, b), phase)
        return float(learner.bound(f, b).values(x).max(axis=1).mean())

    vals = _map(learner.pool, one, learner.B)
    return float(np.mean(vals)), f.id


@dataclass
class Acceptance:
    meta: MetaPolicy | None
    rounds: list[dict]


def learn_on_simulators(learner: Learner, vstar: float, delta: float, phase: str = "learn-on-simulators") -> Acceptance:
    """Accept the first surviving predictor whose rollout value matches ``vstar``; otherwise
    refine the class along executed paths and try again."""
    plan = learner.plan
    H = learner.H
    rounds = learner.rounds
    for it in range(plan.max_rounds):
        f = learner.survivors[0]

        def one(b):
            batch = rollouts(learner.envs[b], learner.bound(f, b), plan.n_1,
                             learner.streams.get(phase, it, b), feedback=True, phase=phase)
            return float(batch.returns.mean()), batch.actions[:, : H - 1]

        out = _map(learner.pool, one, learner.B)
        vhat = float(np.mean([o[0] for o in out]))
        ok = abs(vstar - vhat) <= plan.eps_demand
        rounds.append({"round": it + 1, "predictor": f.id, "value": vhat, "accepted": ok})
        if ok:
            dens = {b: learner.dm.density_vector(b) for b in range(learner.B)}
            return Acceptance(MetaPolicy(f, dens), rounds)
        prefixes = {}
        for b, (_, acts) in enumerate(out):
            paths = _select_paths(acts, plan.n_2, plan.cfg.path_selection, learner.streams.get(phase + "-paths", it, b))
            for path in paths:
                for k in range(H):
                    pre = path[:k]
                    prefixes.setdefault(learner.dm.resolve(pre), pre)
        for canon in sorted(prefixes, key=lambda c: (-len(c), c)):
            learner.learn_from(prefixes[canon], plan.learn_delta(delta), phase)
    raise Anomaly("non-termination", phase, (), f"no predictor accepted within {plan.max_rounds} rounds")


def _select_paths(actions: np.ndarray, n2: int, how: str, rng: np.random.Generator) -> list[tuple]:
    seen: dict[tuple, None] = {}
    for row in actions:
        seen.setdefault(tuple(int(a) for a in row), None)
    paths = list(seen)
    if how == "random" and len(paths) > n2:
        idx = sorted(rng.choice(len(paths), size=n2, replace=False))
        return [paths[i] for i in idx]
    return paths[:n2]


# --- orchestration ------------------------------------------------------------

@dataclass
class RunResult:
    meta: MetaPolicy | None
    report: dict
    plan: Plan
    discovery: DiscoveryMap | None
    learner: Learner | None
    envs: list[Env]
    kernel: KernelSpec

    @property
    def ok(self) -> bool:
        return self.meta is not None


def sample_simulators(family, B: int, streams: Streams) -> list[Env]:
    rng = streams.get("simulators")
    return [family.env_for(family.sample_theta(rng), name=f"sim-{b}") for b in range(B)]


def sim2real(cfg: AlgoConfig, family, F: PredictorClass, seed: int = 0, kernel: KernelSpec | None = None,
             workers: int | None = None) -> RunResult:
    """Discovery, elimination from the root, the value estimate and acceptance, on ``B`` simulators."""
    spec = family.spec
    kernel = kernel or KernelSpec(family.holder_alpha, spec.obs_dim)
    certify_k1(kernel)
    plan = resolve(cfg, spec, family, F.F, F.lipschitz)
    streams = Streams(seed)
    envs = sample_simulators(family, plan.B, streams)
    workers = workers or cfg.workers
    report = {"version": __version__, "seed": seed, "family": family.name, "config": cfg.to_dict(),
              "plan": plan.summary(), "class": [m.meta() for m in F], "anomalies": [], "status": "ok"}
    dm = learner = None
    meta = None
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        dm = dfs_distribution(plan, envs, kernel, streams, pool)
        learner = Learner(plan, envs, list(F.members), dm, streams, pool)
        learner.learn_from((), plan.delta_phase, "dfs-learn")
        vstar, vid = estimate_vstar(learner)
        report["vstar"] = vstar
        report["vstar_predictor"] = vid
        meta = learn_on_simulators(learner, vstar, plan.delta_phase).meta
        report["accepted"] = meta.predictor.id
    except Anomaly as exc:
        report["status"] = "anomaly"
        report["anomalies"].append(exc.to_dict())
    finally:
        if pool is not None:
            pool.shutdown()
    if dm is not None:
        report["discovery"] = dm.to_dict()
    if learner is not None:
        report["survivors"] = [f.id for f in learner.survivors]
        report["sites"] = learner.sites
        report["learn_calls"] = learner.learn_log
        report["consensus_calls"] = learner.consensus_calls
        report["td_calls"] = learner.td_calls
        report["rounds"] = learner.rounds
    report["episodes"] = {e.name: e.counter.snapshot() for e in envs}
    report["simulator_episodes"] = int(sum(e.counter.total for e in envs))
    report["oracle"] = {"thetas": [[float(v) for v in e.theta] for e in envs]}
    return RunResult(meta, report, plan, dm, learner, envs, kernel)
