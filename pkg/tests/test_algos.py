import dataclasses
import json
import math

import numpy as np
import pytest
from conftest import make_plan

from romdp_sim2real.algos import (
    Anomaly,
    DiscoveryMap,
    Learner,
    dfs_distribution,
    estimate_vstar,
    sample_simulators,
    sim2real,
)
from romdp_sim2real.config import ConfigError, desk_config
from romdp_sim2real.legendre import KernelSpec
from romdp_sim2real.predictors import PredictorClass, TabularPredictor, _expect, build_class
from romdp_sim2real.rng import Streams
from romdp_sim2real.romdp import terminal_state

K = KernelSpec(2.5)


def discovery(family, F, seed, **kw):
    plan = make_plan(family, F, **kw)
    envs = sample_simulators(family, plan.B, Streams(seed))
    return plan, envs, dfs_distribution(plan, envs, K, Streams(seed))


def learner_for(family, F, members, seed, **kw):
    plan, envs, dm = discovery(family, F, seed, **kw)
    return Learner(plan, envs, list(members), dm, Streams(seed))


def copies_of_star(F, k):
    s = F.star
    return [TabularPredictor(f"c{i}", "copy", s.probe, s.layer_lo, s.tables) for i in range(k)]


@pytest.fixture(scope="module")
def runs(family, F):
    return {seed: sim2real(desk_config(), family, F, seed=seed) for seed in (0, 1)}


@pytest.fixture(scope="module")
def ones_h1_class(ones_h1):
    return build_class(ones_h1, n_decoys=0, n_theta=32, x_cells=64, audit_thetas=2)


# --- discovery ----------------------------------------------------------------

def test_single_layer_has_one_canonical_path(ones_h1, ones_h1_class):
    plan, envs, dm = discovery(ones_h1, ones_h1_class, 0, counts={"n_dist": 500})
    assert dm.canonical == [()] and dm.alias == {}
    assert dm.node_visits == 1
    assert len(dm.densities) == plan.B and all(list(d) == [()] for d in dm.densities)
    assert all(e.counter.total == 500 for e in envs)


def test_default_family_discovers_three_states(family, F):
    for seed in range(5):
        plan, envs, dm = discovery(family, F, seed)
        assert dm.canonical == [(), (0,), (1,)]
        assert dm.node_visits <= 2 * 2 * 2
        assert dm.h == pytest.approx(plan.n_dist ** (-1 / 6))


def test_aliased_action_detected(alias_family, F):
    hits = 0
    for seed in range(20):
        _, _, dm = discovery(alias_family, F, seed)
        hits += dm.canonical == [(), (0,)] and dm.alias == {(1,): (0,)}
    assert hits >= 19


def test_discovery_map_resolve_walks_prefixes():
    dm = DiscoveryMap(canonical=[(), (0,), (0, 0), (0, 1)], alias={(1,): (0,), (0, 1, 1): (0, 1, 0)})
    assert dm.resolve(()) == ()
    assert dm.resolve((1,)) == (0,)
    assert dm.resolve((1, 1)) == (0, 1)
    assert dm.resolve((1, 1, 1)) == (0, 1, 0)
    assert dm.resolve((0, 1, 0)) == (0, 1, 0)


def test_discovery_is_seeded(family, F):
    a = discovery(family, F, 3)[2]
    b = discovery(family, F, 3)[2]
    for da, db in zip(a.densities, b.densities):
        for k in da:
            np.testing.assert_array_equal(da[k].values, db[k].values)


def test_separation_precondition_is_enforced(family, F):
    with pytest.raises(ConfigError):
        sim2real(desk_config(phi=2.0), family, F, seed=0)  # 2 phi / C_L > separation


# --- consensus / elimination ----------------------------------------------------

def test_consensus_singleton_is_true(family, F):
    lr = learner_for(family, F, [F.star], 0)
    assert lr.consensus((0,), lr.plan.eps_test(1), 0.01)
    assert all((c, "f0", b) in lr.cache for c in [(0,)] for b in range(lr.B))


def test_consensus_detects_value_gap(family, F):
    decoy = next(m for m in F if m.kind == "shift" and m.magnitude == 0.15)  # last-layer shift
    false = 0
    for seed in range(20):
        lr = learner_for(family, F, [F.star, decoy], seed)
        false += not lr.consensus((0,), lr.plan.eps_test(1), 0.01)
    assert false >= 19


def test_consensus_accepts_near_identical_values(family, F):
    s = F.star
    near = TabularPredictor("near", "test", s.probe, s.layer_lo, s.tables + 0.001 * (s.tables < 0.999))
    plan = make_plan(family, F)
    assert 0.001 < plan.eps_test(1) - 2 * plan.phi
    true = 0
    for seed in range(20):
        lr = learner_for(family, F, [s, near], seed)
        true += lr.consensus((1,), plan.eps_test(1), 0.01)
    assert true >= 19


def test_td_eliminate_keeps_singleton_star(family, F):
    lr = learner_for(family, F, [F.star], 0)
    lr.dfs_learn((), lr.plan.delta_phase)
    assert [f.id for f in lr.survivors] == ["f0"]


def test_td_eliminate_removes_strong_decoy(family, F):
    strong = next(m for m in F if m.residual >= 0.5)
    gone = 0
    for seed in range(10):
        lr = learner_for(family, F, [strong, F.star], seed)
        gone += [f.id for f in lr.dfs_learn((), lr.plan.delta_phase)] == ["f0"]
    assert gone == 10


def test_td_eliminate_needs_child_estimates(family, F):
    lr = learner_for(family, F, [F.star], 0)
    with pytest.raises(Anomaly) as exc:
        lr.td_eliminate((), 0.01)
    assert exc.value.kind == "missing-estimate" and exc.value.path == ()


def test_identical_predictors_prune_everything(family, F):
    lr = learner_for(family, F, copies_of_star(F, 3), 0)
    lr.learn_from((), lr.plan.delta_phase, "dfs-learn")
    assert lr.td_calls == 1 and lr.consensus_calls == 2
    assert len(lr.survivors) == 3


def test_single_layer_learn_is_one_td_call(ones_h1, ones_h1_class):
    lr = learner_for(ones_h1, ones_h1_class, ones_h1_class.members, 0, counts={"n_dist": 500})
    lr.learn_from((), lr.plan.delta_phase, "dfs-learn")
    assert lr.td_calls == 1 and lr.consensus_calls == 0


def test_vstar_estimate_constant_rewards(ones_h1, ones_h1_class):
    # predictors range over [0, 1]; with a single layer the optimal return H = 1 is representable
    lr = learner_for(ones_h1, ones_h1_class, ones_h1_class.members, 0, counts={"n_dist": 500})
    lr.learn_from((), lr.plan.delta_phase, "dfs-learn")
    v, fid = estimate_vstar(lr)
    assert abs(v - 1.0) <= 0.05 and fid == "f0"


# --- full runs ----------------------------------------------------------------

def test_run_succeeds_and_keeps_star(runs):
    for res in runs.values():
        assert res.ok and res.report["status"] == "ok"
        assert "f0" in res.report["survivors"]
        assert res.report["accepted"] == "f0"
        assert len(res.report["rounds"]) <= res.plan.H * res.plan.S


def test_call_count_bounds(runs):
    for res in runs.values():
        H, S, A = res.plan.H, res.plan.S, res.plan.A
        assert res.discovery.node_visits <= H * S * A
        assert len(res.discovery.canonical) <= H * S
        for call in res.report["learn_calls"]:
            assert call["td_calls"] <= H * S
            assert call["consensus_calls"] <= H * S * A


def test_monotone_elimination(runs, F):
    for res in runs.values():
        alive = {m.id for m in F}
        for site in res.report["sites"]:
            if site["kind"] != "td":
                continue
            now = set(site["survivors"])
            assert now <= alive
            assert now | set(site["eliminated"]) == alive
            alive = now


def test_survivor_values_close_at_td_sites(runs, family, F):
    """At each elimination site, survivors' greedy values under the estimated densities agree
    (oracle expectation over the true state density) within (H - h + 1) 25 sqrt(A) phi."""
    for res in runs.values():
        lr, plan = res.learner, res.plan
        for site in res.report["sites"]:
            if site["kind"] != "td" or len(site["survivors"]) < 2:
                continue
            path = tuple(site["path"])
            h = len(path) + 1
            tau = (plan.H - h + 1) * 25 * math.sqrt(plan.A) * plan.phi
            for b, env in enumerate(res.envs):
                s = terminal_state(env.spec, path)
                vals = [_expect(env, s, lambda x, f=F.by_id(i): lr.bound(f, b).values(x).max(axis=1))
                        for i in site["survivors"]]
                assert max(vals) - min(vals) <= tau


def test_episode_report_matches_counters(runs):
    for res in runs.values():
        rep = res.report
        assert rep["simulator_episodes"] == sum(e.counter.total for e in res.envs)
        for e in res.envs:
            snap = rep["episodes"][e.name]
            assert snap["total"] == sum(snap["by_phase"].values())


def test_determinism_across_worker_counts(family, F, runs):
    a = json.dumps(runs[0].report, sort_keys=True)
    b = json.dumps(sim2real(dataclasses.replace(desk_config(), workers=4), family, F, seed=0).report,
                   sort_keys=True)
    c = json.dumps(sim2real(desk_config(), family, F, seed=0, workers=3).report, sort_keys=True)
    assert a == b == c


def test_non_termination_is_reported(family, F):
    shifted = PredictorClass([next(m for m in F if m.residual >= 0.5)])
    res = sim2real(desk_config(), family, shifted, seed=0)
    assert not res.ok and res.report["status"] == "anomaly"
    (anom,) = res.report["anomalies"]
    assert anom["kind"] == "non-termination" and anom["phase"] == "learn-on-simulators"
    assert len(res.report["rounds"]) == res.plan.max_rounds


def test_random_path_selection_runs(family, F):
    res = sim2real(desk_config(path_selection="random"), family, F, seed=0)
    assert res.ok
