"""Real-world deployment: observation-only density estimates plug into the learned predictor.

Nothing here may read feedback from the real environment. It is sealed
first, so any such read raises and is also counted by its sentinel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .algos import DiscoveryMap
from .config import Plan
from .kde import fit, layer_lattice
from .legendre import KernelSpec
from .predictors import BoundPredictor, MetaPolicy
from .romdp import Env, FirewallViolation, collect_at_path

REAL_KEY = "real"


@dataclass
class Deployment:
    policy: BoundPredictor
    meta: MetaPolicy
    report: dict


def deploy(meta: MetaPolicy, real_env: Env, discovery: DiscoveryMap, plan: Plan, kernel: KernelSpec,
           rng: np.random.Generator, phase: str = "deploy") -> Deployment:
    """Collect ``n_dist`` observations at every canonical path, fit KDEs with the
    simulator-side bandwidth, and bind the accepted predictor to them."""
    if plan.n_dist != discovery.n_dist:
        raise ValueError("deployment must reuse the discovery sample size")
    sealed = real_env.sealed(name=f"{real_env.name}-sealed")
    spec = sealed.spec
    dens = {}
    for p in discovery.canonical:
        x = collect_at_path(sealed, p, discovery.n_dist, rng, phase)
        dens[p] = fit(x, discovery.h, kernel, layer_lattice(spec, len(p)))
    meta_r = meta.with_density(REAL_KEY, dens)
    policy = meta_r.policy(REAL_KEY)
    reads = sealed.sentinel_reads
    if reads:
        raise FirewallViolation(f"{reads} feedback reads during deployment")
    episodes = sealed.counter.snapshot()
    report = {
        "episodes": episodes,
        "expected_episodes": discovery.n_dist * len(discovery.canonical),
        "canonical_paths": len(discovery.canonical),
        "sentinel_reads": reads,
        "firewall_ok": reads == 0,
        "predictor": meta.predictor.id,
        "theta_hat": policy.theta_hat,
    }
    return Deployment(policy, meta_r, report)
