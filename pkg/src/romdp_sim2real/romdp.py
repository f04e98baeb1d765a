"""Deterministic layered rich-observation MDPs: types and the execution engine.

Hidden states are integers. Learner-facing calls (``collect_at_path``,
``collect_transitions``, rollouts with ``feedback=False``) only hand back
observations, actions and, when allowed, rewards; states stay on the
oracle side.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

Path = tuple  # tuple[int, ...]; the empty path denotes the initial state

DEFAULT_PROPOSAL_CAP = 10**6


class InputError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


class FirewallViolation(RuntimeError):
    """A reward was read from an environment sealed as feedback-free."""


class Density(Protocol):
    """An observation density with a bounded support box."""

    support_lo: np.ndarray
    support_hi: np.ndarray
    bound: float  # upper bound on the density value

    def pdf(self, points: np.ndarray) -> np.ndarray: ...


class RewardModel(Protocol):
    def mean(self, layer: int, x: np.ndarray, a: np.ndarray) -> np.ndarray: ...

    def sample(self, layer: int, x: np.ndarray, a: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


@dataclass(frozen=True)
class EnvSpec:
    """Shared layered skeleton. ``layers[h]`` lists the state ids of layer h (0-based)."""

    horizon: int
    n_actions: int
    layers: tuple[tuple[int, ...], ...]
    transition: tuple[tuple[int, ...], ...]  # transition[s][a] -> next state; () for last layer
    initial_state: int
    obs_dim: int
    obs_bound: float
    layer_boxes: tuple[tuple[tuple[float, ...], tuple[float, ...]], ...]
    state_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.horizon < 1 or self.n_actions < 1 or self.obs_dim < 1:
            raise InputError("horizon, n_actions and obs_dim must be positive")
        if len(self.layers) != self.horizon or len(self.layer_boxes) != self.horizon:
            raise InputError("need one state list and one observation box per layer")
        if self.layers[0] != (self.initial_state,):
            raise InputError("layer 1 must hold exactly the initial state")
        layer_of = {}
        for h, states in enumerate(self.layers):
            for s in states:
                if s in layer_of:
                    raise InputError(f"state {s} appears in two layers")
                layer_of[s] = h
        if sorted(layer_of) != list(range(len(layer_of))):
            raise InputError("state ids must be 0..N-1")
        if len(self.transition) != len(layer_of):
            raise InputError("transition table must have one row per state")
        for s, h in layer_of.items():
            row = self.transition[s]
            if h == self.horizon - 1:
                if row:
                    raise InputError(f"last-layer state {s} must have no transitions")
                continue
            if len(row) != self.n_actions:
                raise InputError(f"state {s} needs {self.n_actions} transitions")
            for nxt in row:
                if layer_of.get(nxt) != h + 1:
                    raise InputError(f"T({s}, .) = {nxt} is not in layer {h + 2}")
        for (lo, hi) in self.layer_boxes:
            if len(lo) != self.obs_dim or len(hi) != self.obs_dim or any(b <= a for a, b in zip(lo, hi)):
                raise InputError("malformed observation box")
            if max(abs(v) for v in lo + hi) > self.obs_bound + 1e-12:
                raise InputError("observation box leaves the ball of radius obs_bound")
        boxes = sorted(self.layer_boxes, key=lambda b: b[0][0])
        for (lo1, hi1), (lo2, hi2) in zip(boxes, boxes[1:]):
            if all(a2 < b1 and a1 < b2 for a1, b1, a2, b2 in zip(lo1, hi1, lo2, hi2)):
                raise InputError("layer observation boxes must be disjoint")
        object.__setattr__(self, "_layer_of", layer_of)

    @property
    def n_states(self) -> int:
        return len(self.transition)

    def layer_of(self, s: int) -> int:
        return self._layer_of[s]

    def reachable(self) -> frozenset[int]:
        seen = {self.initial_state}
        frontier = [self.initial_state]
        while frontier:
            s = frontier.pop()
            for nxt in self.transition[s]:
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        return frozenset(seen)

    @property
    def xi(self) -> int:
        """Number of reachable states (unreachable ones are excluded)."""
        return len(self.reachable())

    @property
    def max_layer_size(self) -> int:
        reach = self.reachable()
        return max(sum(1 for s in states if s in reach) for states in self.layers)

    def layer_box(self, h: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.layer_boxes[h]
        return np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)

    def layer_of_obs(self, x: np.ndarray) -> np.ndarray:
        """Layer index of each observation row; -1 when outside every box."""
        x = np.atleast_2d(x)
        out = np.full(x.shape[0], -1, dtype=np.int64)
        for h in range(self.horizon):
            lo, hi = self.layer_box(h)
            inside = np.all((x >= lo) & (x <= hi), axis=1)
            out[inside] = h
        return out


class EpisodeCounter:
    """Thread-safe per-environment episode accumulator, split by phase."""

    def __init__(self):
        self._lock = threading.Lock()
        self.total = 0
        self.by_phase: dict[str, int] = {}

    def add(self, n: int, phase: str = "unlabelled") -> None:
        with self._lock:
            self.total += int(n)
            self.by_phase[phase] = self.by_phase.get(phase, 0) + int(n)

    def snapshot(self) -> dict:
        with self._lock:
            return {"total": self.total, "by_phase": dict(sorted(self.by_phase.items()))}


class SentinelRewards:
    """Stands in for the reward model of a feedback-free environment."""

    def __init__(self):
        self.reads = 0

    def _touch(self, *_args, **_kwargs):
        self.reads += 1
        raise FirewallViolation("reward accessed on a feedback-free environment")

    mean = _touch
    sample = _touch


@dataclass(frozen=True)
class Env:
    spec: EnvSpec
    theta: np.ndarray
    densities: tuple  # one Density per state id
    rewards: object  # RewardModel or SentinelRewards
    name: str = "env"
    feedback: bool = True
    counter: EpisodeCounter = field(default_factory=EpisodeCounter, compare=False, repr=False)

    def sealed(self, name: str | None = None) -> "Env":
        """Feedback-free copy (fresh counter) whose reward model is a poisoned sentinel."""
        return Env(self.spec, self.theta, self.densities, SentinelRewards(), name or self.name, False, EpisodeCounter())

    def fresh(self, name: str | None = None) -> "Env":
        """Same environment with a fresh episode counter."""
        return Env(self.spec, self.theta, self.densities, self.rewards, name or self.name, self.feedback, EpisodeCounter())

    @property
    def sentinel_reads(self) -> int:
        """Attempted reads of a sealed environment's feedback (0 when not sealed)."""
        return int(getattr(self.rewards, "reads", 0))

    def reward_mean(self, s: int, x: np.ndarray, a) -> np.ndarray:
        x = np.atleast_2d(x)
        a = np.broadcast_to(np.asarray(a, dtype=np.int64), (x.shape[0],))
        return self.rewards.mean(self.spec.layer_of(s), x, a)

    def sample_reward(self, s: int, x: np.ndarray, a, rng: np.random.Generator) -> np.ndarray:
        x = np.atleast_2d(x)
        a = np.broadcast_to(np.asarray(a, dtype=np.int64), (x.shape[0],))
        return self.rewards.sample(self.spec.layer_of(s), x, a, rng)


def terminal_state(spec: EnvSpec, p: Sequence[int]) -> int:
    if len(p) > spec.horizon - 1:
        raise InputError(f"path of length {len(p)} exceeds horizon {spec.horizon}")
    s = spec.initial_state
    for a in p:
        if not 0 <= int(a) < spec.n_actions:
            raise InputError(f"invalid action {a}")
        s = spec.transition[s][int(a)]
    return s


def sample_observations(env: Env, s: int, n: int, rng: np.random.Generator,
                        cap: int = DEFAULT_PROPOSAL_CAP) -> np.ndarray:
    """``n`` i.i.d. draws from the density of state ``s`` by rejection from a uniform envelope.

    Raises SamplingError once ``cap`` consecutive proposals are all rejected.
    """
    dens = env.densities[s]
    d = env.spec.obs_dim
    out = np.empty((n, d))
    if n == 0:
        return out
    lo, hi = np.asarray(dens.support_lo, float), np.asarray(dens.support_hi, float)
    vol = float(np.prod(hi - lo))
    bound = float(dens.bound)
    accept_rate = min(1.0, 1.0 / max(bound * vol, 1e-300))
    filled = 0
    dry = 0
    while filled < n:
        batch = int(min(max((n - filled) / accept_rate * 1.25 + 16, 64), 4 * cap))
        prop = lo + (hi - lo) * rng.random((batch, d))
        u = rng.random(batch) * bound
        keep = prop[u < dens.pdf(prop)]
        if keep.shape[0] == 0:
            dry += batch
            if dry >= cap:
                raise SamplingError(f"no acceptance after {dry} proposals for state {s}")
            continue
        dry = 0
        take = min(keep.shape[0], n - filled)
        out[filled:filled + take] = keep[:take]
        filled += take
    return out


def sample_observation(env: Env, s: int, rng: np.random.Generator) -> np.ndarray:
    return sample_observations(env, s, 1, rng)[0]


def collect_at_path(env: Env, p: Sequence[int], n: int, rng: np.random.Generator,
                    phase: str = "collect") -> np.ndarray:
    """Execute ``p`` then record one observation, ``n`` times; costs ``n`` episodes."""
    s = terminal_state(env.spec, p)
    env.counter.add(n, phase)
    return sample_observations(env, s, n, rng)


def collect_transitions(env: Env, p: Sequence[int], n: int, rng: np.random.Generator,
                        phase: str = "train") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``n`` (x, a, r) triples at the terminal state of ``p`` with uniformly random actions."""
    if not env.feedback:
        raise FirewallViolation("transition collection needs rewards; environment is feedback-free")
    s = terminal_state(env.spec, p)
    env.counter.add(n, phase)
    x = sample_observations(env, s, n, rng)
    a = rng.integers(0, env.spec.n_actions, size=n)
    r = env.sample_reward(s, x, a, rng)
    return x, a, r


Policy = Callable[[np.ndarray], np.ndarray]


@dataclass
class Step:
    h: int
    x: np.ndarray
    a: int
    r: float | None
    state: int | None = None  # oracle-only


@dataclass
class Trajectory:
    steps: list[Step]
    feedback_visible: bool

    @property
    def total_reward(self) -> float:
        if not self.feedback_visible:
            raise FirewallViolation("rewards are hidden on this trajectory")
        return float(sum(st.r for st in self.steps))

    def records(self) -> list[dict]:
        return [{"h": st.h, "x": [float(v) for v in st.x], "a": int(st.a),
                 "r": (float(st.r) if self.feedback_visible else None)} for st in self.steps]


@dataclass
class RolloutBatch:
    states: np.ndarray  # (n, H), oracle-only
    obs: np.ndarray  # (n, H, d)
    actions: np.ndarray  # (n, H)
    rewards: np.ndarray | None  # (n, H) when feedback is visible

    @property
    def returns(self) -> np.ndarray:
        if self.rewards is None:
            raise FirewallViolation("rewards are hidden on this batch")
        return self.rewards.sum(axis=1)


def rollouts(env: Env, policy: Policy, n: int, rng: np.random.Generator, feedback: bool = True,
             phase: str = "rollout") -> RolloutBatch:
    """``n`` full episodes under ``policy``, vectorised across episodes."""
    spec = env.spec
    feedback = feedback and env.feedback
    H, d = spec.horizon, spec.obs_dim
    trans = np.array([row if row else (-1,) * spec.n_actions for row in spec.transition], dtype=np.int64)
    states = np.empty((n, H), dtype=np.int64)
    obs = np.empty((n, H, d))
    actions = np.empty((n, H), dtype=np.int64)
    rewards = np.empty((n, H)) if feedback else None
    env.counter.add(n, phase)
    cur = np.full(n, spec.initial_state, dtype=np.int64)
    for h in range(H):
        states[:, h] = cur
        x = np.empty((n, d))
        for s in np.unique(cur):
            idx = np.flatnonzero(cur == s)
            x[idx] = sample_observations(env, int(s), idx.size, rng)
        a = np.asarray(policy(x), dtype=np.int64).reshape(n)
        if np.any((a < 0) | (a >= spec.n_actions)):
            raise InputError("policy returned an invalid action")
        obs[:, h] = x
        actions[:, h] = a
        if feedback:
            for s in np.unique(cur):
                idx = np.flatnonzero(cur == s)
                rewards[idx, h] = env.sample_reward(int(s), x[idx], a[idx], rng)
        if h < H - 1:
            cur = trans[cur, a]
    return RolloutBatch(states, obs, actions, rewards)


def run_episode(env: Env, policy: Policy, rng: np.random.Generator, feedback: bool = True,
                phase: str = "rollout") -> Trajectory:
    batch = rollouts(env, policy, 1, rng, feedback=feedback, phase=phase)
    visible = batch.rewards is not None
    steps = [Step(h + 1, batch.obs[0, h].copy(), int(batch.actions[0, h]),
                  float(batch.rewards[0, h]) if visible else None,
                  int(batch.states[0, h]))
             for h in range(env.spec.horizon)]
    return Trajectory(steps, visible)
