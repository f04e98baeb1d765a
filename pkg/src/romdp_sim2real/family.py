"""Declarative benchmark families ("ShiftBump") and their JSON format.

A family fixes the layered skeleton and describes, as functions of a
parameter vector ``theta``, the observation density of every state (a
mixture of smooth compact bumps) and the per-layer reward of every action.
Only two building blocks are allowed in the expressions:

* affine in theta:  ``number`` or ``{"const": c, "theta": [c_1, ..., c_k]}``
* reward terms:     ``{"coef": AFFINE, "fn": "one|id|sin|cos|tanh",
                      "freq": w, "shift": x0, "axis": j}``
  whose value is ``coef(theta) * fn(w * (x[j] - x0))``.

The mean reward of action ``a`` in layer ``h`` is
``low + (high - low) * (1 + tanh(z)) / 2`` with ``z`` the sum of the action's
terms, so it always lies in ``[low, high]``.
"""
from __future__ import annotations

import copy
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from .kernels import _bump_norm, bump_mixture_eval
from .romdp import Env, EnvSpec, InputError

_FNS = {
    "one": lambda u: np.ones_like(u),
    "id": lambda u: u,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
}


class FamilyError(ValueError):
    """Malformed family description."""


class ConstructionError(RuntimeError):
    """A sampled environment violates one of the family's declared assumptions."""

    def __init__(self, assumption: str, detail: str):
        super().__init__(f"{assumption}: {detail}")
        self.assumption = assumption


def affine(expr, theta: np.ndarray) -> float:
    if isinstance(expr, (int, float)):
        return float(expr)
    if not isinstance(expr, dict) or set(expr) - {"const", "theta"}:
        raise FamilyError(f"bad affine expression {expr!r}")
    coefs = np.asarray(expr.get("theta", []), dtype=float)
    if coefs.size > theta.size:
        raise FamilyError("affine expression references more theta components than exist")
    return float(expr.get("const", 0.0)) + float(np.dot(coefs, theta[: coefs.size]))


@dataclass
class BumpMixture:
    """Normalised mixture of product bumps ``(1 - u^2)^power``."""

    centers: np.ndarray  # (K, d)
    half_widths: np.ndarray  # (K, d)
    weights: np.ndarray  # (K,), sums to one
    power: int = 3
    support_lo: np.ndarray = field(init=False)
    support_hi: np.ndarray = field(init=False)
    bound: float = field(init=False)

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.half_widths = np.atleast_2d(np.asarray(self.half_widths, dtype=float))
        w = np.asarray(self.weights, dtype=float)
        if np.any(w <= 0) or np.any(self.half_widths <= 0):
            raise FamilyError("bump weights and half-widths must be positive")
        self.weights = w / w.sum()
        self.support_lo = (self.centers - self.half_widths).min(axis=0)
        self.support_hi = (self.centers + self.half_widths).max(axis=0)
        norm = _bump_norm(self.power)
        self.bound = float(np.sum(self.weights / np.prod(self.half_widths * norm, axis=1)))

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def pdf(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None] if self.dim == 1 else pts[None, :]
        return bump_mixture_eval(pts, self.centers, self.half_widths, self.weights, self.power)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Exact draws: component by weight, then ``(u + 1)/2 ~ Beta(p+1, p+1)`` per axis."""
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        u = 2.0 * rng.beta(self.power + 1, self.power + 1, size=(n, self.dim)) - 1.0
        return self.centers[comp] + self.half_widths[comp] * u

    def breakpoints(self, axis: int = 0) -> np.ndarray:
        c, w = self.centers[:, axis], self.half_widths[:, axis]
        return np.unique(np.concatenate([c - w, c + w]))

    def mean(self) -> np.ndarray:
        return self.weights @ self.centers


class LayerRewards:
    """Mean/sampled rewards defined per (layer, action) from term lists."""

    def __init__(self, layer_cfgs: list[dict], theta: np.ndarray):
        self.layers = []
        for cfg in layer_cfgs:
            low, high = float(cfg["low"]), float(cfg["high"])
            if not 0.0 <= low <= high <= 1.0:
                raise FamilyError("reward bounds must satisfy 0 <= low <= high <= 1")
            noise = cfg.get("noise", "bernoulli")
            if noise not in ("bernoulli", "none"):
                raise FamilyError(f"unknown reward noise {noise!r}")
            acts = []
            for terms in cfg["actions"]:
                acts.append([(affine(t.get("coef", 1.0), theta), _FNS[t.get("fn", "one")],
                              float(t.get("freq", 1.0)), float(t.get("shift", 0.0)), int(t.get("axis", 0)))
                             for t in terms])
            self.layers.append((low, high, noise, acts))

    def _mean_one(self, layer: int, x: np.ndarray, a: int) -> np.ndarray:
        low, high, _, acts = self.layers[layer]
        if high == low:
            return np.full(x.shape[0], low)
        z = np.zeros(x.shape[0])
        for coef, fn, freq, shift, axis in acts[a]:
            z += coef * fn(freq * (x[:, axis] - shift))
        return low + (high - low) * 0.5 * (1.0 + np.tanh(z))

    def mean(self, layer: int, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        a = np.broadcast_to(np.asarray(a, dtype=np.int64), (x.shape[0],))
        out = np.empty(x.shape[0])
        for act in np.unique(a):
            idx = a == act
            out[idx] = self._mean_one(layer, x[idx], int(act))
        return out

    def sample(self, layer: int, x: np.ndarray, a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        m = self.mean(layer, x, a)
        low, high, noise, _ = self.layers[layer]
        if noise == "none" or high == low:
            return m
        p = (m - low) / (high - low)
        return np.where(rng.random(m.shape[0]) < p, high, low)


@dataclass
class EnvFamily:
    config: dict
    spec: EnvSpec
    theta_dim: int
    prior: dict
    holder_alpha: float
    holder_const: float
    separation: float
    name: str = "family"

    # --- prior -------------------------------------------------------------
    def sample_theta(self, rng: np.random.Generator) -> np.ndarray:
        if self.prior["kind"] == "point":
            return np.asarray(self.prior["value"], dtype=float).copy()
        lo = np.asarray(self.prior["low"], dtype=float)
        hi = np.asarray(self.prior["high"], dtype=float)
        return lo + (hi - lo) * rng.random(self.theta_dim)

    def prior_corners(self) -> list[np.ndarray]:
        if self.prior["kind"] == "point":
            return [np.asarray(self.prior["value"], dtype=float)]
        lo, hi = self.prior["low"], self.prior["high"]
        return [np.asarray(c, dtype=float) for c in itertools.product(*zip(lo, hi))]

    # --- builders ----------------------------------------------------------
    def density(self, theta: np.ndarray, s: int) -> BumpMixture:
        name = self.spec.state_names[s]
        bumps = self.config["densities"][name]
        centers = [[affine(c, theta) for c in b["center"]] for b in bumps]
        widths = [[float(w) for w in b["half_width"]] for b in bumps]
        weights = [affine(b.get("weight", 1.0), theta) for b in bumps]
        return BumpMixture(np.array(centers), np.array(widths), np.array(weights),
                           int(self.config.get("bump_power", 3)))

    def rewards(self, theta: np.ndarray) -> LayerRewards:
        return LayerRewards(self.config["rewards"], theta)

    def env_for(self, theta, name: str = "env") -> Env:
        theta = np.asarray(theta, dtype=float).reshape(self.theta_dim)
        dens = tuple(self.density(theta, s) for s in range(self.spec.n_states))
        return Env(self.spec, theta, dens, self.rewards(theta), name=name)

    def state_regions(self) -> dict[int, tuple[float, float]]:
        """Axis-0 extent of each state's support over the whole prior box."""
        out = {}
        for s in range(self.spec.n_states):
            los, his = [], []
            for th in self.prior_corners():
                dens = self.density(th, s)
                los.append(dens.support_lo[0])
                his.append(dens.support_hi[0])
            out[s] = (min(los), max(his))
        return out

    def to_json(self) -> str:
        return json.dumps(self.config, indent=2, sort_keys=True)


def family_from_config(cfg: dict) -> EnvFamily:
    cfg = copy.deepcopy(cfg)
    required = {"horizon", "n_actions", "obs_dim", "obs_bound", "theta_dim", "prior", "layers",
                "transitions", "initial_state", "densities", "rewards", "holder_alpha",
                "holder_const", "separation"}
    missing = required - set(cfg)
    if missing:
        raise FamilyError(f"family config missing keys: {sorted(missing)}")
    unknown = set(cfg) - required - {"name", "bump_power", "notes"}
    if unknown:
        raise FamilyError(f"family config has unknown keys: {sorted(unknown)}")
    names: list[str] = []
    layers = []
    for layer in cfg["layers"]:
        ids = []
        for nm in layer["states"]:
            if nm in names:
                raise FamilyError(f"duplicate state name {nm!r}")
            ids.append(len(names))
            names.append(nm)
        layers.append(tuple(ids))
    idx = {nm: i for i, nm in enumerate(names)}
    H = int(cfg["horizon"])
    transition = []
    for nm in names:
        row = cfg["transitions"].get(nm, [])
        transition.append(tuple(idx[t] for t in row))
    boxes = tuple((tuple(float(v) for v in layer["box"]["lo"]), tuple(float(v) for v in layer["box"]["hi"]))
                  for layer in cfg["layers"])
    try:
        spec = EnvSpec(H, int(cfg["n_actions"]), tuple(layers), tuple(transition), idx[cfg["initial_state"]],
                       int(cfg["obs_dim"]), float(cfg["obs_bound"]), boxes, tuple(names))
    except (InputError, KeyError) as exc:
        raise FamilyError(f"invalid skeleton: {exc}") from exc
    if len(cfg["rewards"]) != H:
        raise FamilyError("need one reward block per layer")
    for block in cfg["rewards"]:
        if len(block["actions"]) != spec.n_actions:
            raise FamilyError("each reward block needs one term list per action")
    for nm in names:
        if nm not in cfg["densities"]:
            raise FamilyError(f"no density for state {nm!r}")
    prior = cfg["prior"]
    if prior.get("kind") not in ("uniform", "point"):
        raise FamilyError("prior kind must be 'uniform' or 'point'")
    fam = EnvFamily(cfg, spec, int(cfg["theta_dim"]), prior, float(cfg["holder_alpha"]),
                    float(cfg["holder_const"]), float(cfg["separation"]), cfg.get("name", "family"))
    _validate_geometry(fam)
    return fam


def _validate_geometry(fam: EnvFamily) -> None:
    spec = fam.spec
    for th in fam.prior_corners():
        for s in range(spec.n_states):
            dens = fam.density(th, s)
            if np.any(dens.weights <= 0):
                raise FamilyError("bump weights must stay positive over the prior box")
            lo, hi = spec.layer_box(spec.layer_of(s))
            if np.any(dens.support_lo < lo) or np.any(dens.support_hi > hi):
                raise FamilyError(f"support of {spec.state_names[s]!r} leaves its layer box at theta={th}")
    regions = fam.state_regions()
    for states in spec.layers:
        spans = sorted(regions[s] for s in states)
        for (a0, b0), (a1, b1) in zip(spans, spans[1:]):
            if a1 < b0:
                raise FamilyError("states of one layer must have disjoint supports")


def load_family(path) -> EnvFamily:
    p = FsPath(path)
    if not p.exists():
        raise FileNotFoundError(f"family file not found: {p}")
    with p.open() as fh:
        return family_from_config(json.load(fh))


def sample_env(family: EnvFamily, rng: np.random.Generator, name: str = "env", check: bool = True) -> Env:
    """Environment with theta drawn from the prior; optionally audits separation and smoothness."""
    env = family.env_for(family.sample_theta(rng), name=name)
    if check:
        from .bench import check_holder, check_separation

        gap = check_separation(env)
        if gap <= family.separation:
            raise ConstructionError("separation", f"min sup gap {gap:.4g} <= zeta {family.separation}")
        ratio = check_holder(env, family.holder_alpha)
        if ratio > family.holder_const:
            raise ConstructionError("holder", f"Holder quotient {ratio:.4g} > C_alpha {family.holder_const}")
    return env


# --- built-in families -------------------------------------------------------

def _t(coef, fn="one", freq=1.0, shift=0.0):
    return {"coef": coef, "fn": fn, "freq": freq, "shift": shift, "axis": 0}


def default_family_config() -> dict:
    """H=2, A=2, d=1: s1 -> {s2a, s2b}; theta in [0, 1] moves every bump and tilts rewards."""
    return {
        "name": "shiftbump-h2",
        "horizon": 2,
        "n_actions": 2,
        "obs_dim": 1,
        "obs_bound": 5.5,
        "theta_dim": 1,
        "prior": {"kind": "uniform", "low": [0.0], "high": [1.0]},
        "layers": [
            {"box": {"lo": [-5.5], "hi": [-0.5]}, "states": ["s1"]},
            {"box": {"lo": [0.5], "hi": [5.5]}, "states": ["s2a", "s2b"]},
        ],
        "transitions": {"s1": ["s2a", "s2b"]},
        "initial_state": "s1",
        "bump_power": 3,
        "densities": {
            "s1": [{"center": [{"const": -3.7, "theta": [1.4]}], "half_width": [1.2], "weight": 1.0}],
            "s2a": [{"center": [{"const": 1.6, "theta": [0.3]}], "half_width": [0.9], "weight": 1.0}],
            "s2b": [
                {"center": [{"const": 4.0, "theta": [-0.2]}], "half_width": [0.7], "weight": 1.0},
                {"center": [4.7], "half_width": [0.6], "weight": {"const": 0.5, "theta": [1.0]}},
            ],
        },
        "rewards": [
            {"low": 0.0, "high": 0.5, "noise": "bernoulli", "actions": [
                [_t({"const": 1.5, "theta": [-3.0]}), _t(0.6, "sin", 1.3)],
                [_t({"const": -1.5, "theta": [3.0]}), _t(0.6, "cos", 1.1)],
            ]},
            {"low": 0.0, "high": 0.5, "noise": "bernoulli", "actions": [
                [_t({"const": 2.0, "theta": [-4.0]}, "tanh", 2.0, 3.0)],
                [_t(1.2, "sin", 1.7), _t({"const": -0.6, "theta": [1.2]})],
            ]},
        ],
        "holder_alpha": 2.5,
        "holder_const": 75.0,
        "separation": 0.4,
    }


def aliasing_family_config() -> dict:
    """Both root actions lead to the same layer-2 state."""
    cfg = default_family_config()
    cfg["name"] = "shiftbump-h2-alias"
    cfg["layers"][1]["states"] = ["s2a"]
    cfg["transitions"] = {"s1": ["s2a", "s2a"]}
    del cfg["densities"]["s2b"]
    return cfg


def constant_reward_family_config(value: float = 1.0, horizon: int = 2) -> dict:
    """Chain of single-state layers with deterministic constant reward."""
    cfg = default_family_config()
    cfg["name"] = f"constant-reward-{value:g}-h{horizon}"
    cfg["horizon"] = horizon
    width = 4.0
    cfg["obs_bound"] = 0.5 + 5.0 * horizon
    cfg["layers"] = []
    cfg["densities"] = {}
    cfg["transitions"] = {}
    cfg["rewards"] = []
    for h in range(horizon):
        lo = -cfg["obs_bound"] + 5.0 * h
        name = f"s{h + 1}"
        cfg["layers"].append({"box": {"lo": [lo], "hi": [lo + width]}, "states": [name]})
        cfg["densities"][name] = [{"center": [{"const": lo + 1.5, "theta": [1.0]}], "half_width": [1.2],
                                   "weight": 1.0}]
        if h < horizon - 1:
            cfg["transitions"][name] = [f"s{h + 2}"] * cfg["n_actions"]
        cfg["rewards"].append({"low": value, "high": value, "noise": "none", "actions": [[], []]})
    cfg["initial_state"] = "s1"
    return cfg


def three_layer_family_config() -> dict:
    """H=3 skeleton with a merge in the last layer, for path-walk and DFS tests."""
    cfg = default_family_config()
    cfg["name"] = "shiftbump-h3"
    cfg["horizon"] = 3
    cfg["obs_bound"] = 9.5
    cfg["holder_const"] = 100.0
    cfg["layers"].append({"box": {"lo": [6.5], "hi": [9.5]}, "states": ["s3a", "s3b"]})
    cfg["transitions"].update({"s2a": ["s3a", "s3b"], "s2b": ["s3b", "s3a"]})
    cfg["densities"]["s3a"] = [{"center": [{"const": 7.2, "theta": [0.2]}], "half_width": [0.6], "weight": 1.0}]
    cfg["densities"]["s3b"] = [{"center": [{"const": 8.8, "theta": [-0.2]}], "half_width": [0.6], "weight": 1.0}]
    for block in cfg["rewards"]:
        block["high"] = 1.0 / 3.0
    cfg["rewards"].append({"low": 0.0, "high": 1.0 / 3.0, "noise": "bernoulli", "actions": [
        [_t({"const": 1.0, "theta": [-2.0]}, "sin", 1.5)],
        [_t({"const": -1.0, "theta": [2.0]}, "cos", 1.5)],
    ]})
    return cfg


def point_prior(cfg: dict, theta) -> dict:
    cfg = copy.deepcopy(cfg)
    cfg["prior"] = {"kind": "point", "value": [float(v) for v in np.atleast_1d(theta)]}
    return cfg


BUILTIN_FAMILIES = {
    "default": default_family_config,
    "alias": aliasing_family_config,
    "constant": constant_reward_family_config,
    "h3": three_layer_family_config,
}


def bump_density_1d(center: float, half_width: float, power: int = 3) -> BumpMixture:
    return BumpMixture(np.array([[center]]), np.array([[half_width]]), np.array([1.0]), power)


def uniform_like_density(lo: float, hi: float) -> "UniformDensity":
    return UniformDensity(np.array([lo]), np.array([hi]))


@dataclass
class UniformDensity:
    support_lo: np.ndarray
    support_hi: np.ndarray

    @property
    def bound(self) -> float:
        return 1.0 / float(np.prod(self.support_hi - self.support_lo))

    def pdf(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.support_lo.size:
            pts = pts.T
        inside = np.all((pts >= self.support_lo) & (pts <= self.support_hi), axis=1)
        return np.where(inside, self.bound, 0.0)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.support_lo + (self.support_hi - self.support_lo) * rng.random((n, self.support_lo.size))

