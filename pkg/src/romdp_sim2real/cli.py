"""Command-line harness.

Subcommands: run, kde-diagnose, oracle, certify-kernel, gen-family.
Exit codes: 0 success, 1 run-time anomaly, 2 usage or configuration error.

Every CSV starts with ``#`` lines holding the version string and the full
configuration echo; the header row follows them.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import version_string
from .config import AlgoConfig, ConfigError, desk_config
from .family import BUILTIN_FAMILIES, FamilyError, family_from_config, load_family
from .rng import Streams

log = logging.getLogger("romdp_sim2real")

EXIT_OK, EXIT_ANOMALY, EXIT_CONFIG = 0, 1, 2

RUN_COLUMNS = ["seed", "status", "vstar_oracle", "vstar_hat", "value", "regret", "eps_optimal",
               "sim_episodes", "real_episodes", "expected_real_episodes", "canonical_states",
               "rounds", "accepted", "star_survived", "survivors"]
KDE_COLUMNS = ["n", "h", "mean_sup_err", "std_sup_err"]
ORACLE_COLUMNS = ["theta", "vstar", "quad_error", "mc_value", "mc_stderr", "policy", "policy_value"]
CERTIFY_COLUMNS = ["alpha", "dim", "integral_error", "max_moment_error", "abs_moment", "l2_norm", "sup_norm", "ok"]

DEFAULTS = {
    "family": "default",
    "seed": 0,
    "reps": 1,
    "out": "out",
    "workers": 1,
    "desk_scale": 1.0,
    "algo": None,  # AlgoConfig fields; None means the desk preset
    "n_decoys": 7,
    "class_seed": 0,
    "eval_envs": 200,
    "kde": {"alpha": 2.5, "n_schedule": [2 ** k for k in range(7, 15)], "trials": 20, "state": None},
    "oracle": {"thetas": None, "n_sampled": 5, "mc_rollouts": 200000},
    "certify": {"alphas": [1.5, 2.5, 3.5], "dims": [1, 2]},
    "gen_family": {"name": "default"},
}


class UsageError(Exception):
    pass


# --- config -------------------------------------------------------------------

def load_config(path: str | None, overrides: dict) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise UsageError("config must be a JSON object")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        for k, v in user.items():
            if isinstance(DEFAULTS[k], dict) and isinstance(v, dict):
                bad = set(v) - set(DEFAULTS[k])
                if bad:
                    raise UsageError(f"unknown keys in {k!r}: {sorted(bad)}")
                cfg[k].update(v)
            else:
                cfg[k] = v
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = v
    return cfg


def resolve_family(spec, base_dir: Path | None = None):
    if isinstance(spec, dict):
        return family_from_config(spec)
    if spec in BUILTIN_FAMILIES:
        return family_from_config(BUILTIN_FAMILIES[spec]())
    p = Path(spec)
    if base_dir is not None and not p.is_absolute() and not p.exists():
        p = base_dir / p
    return load_family(p)


def algo_config(cfg: dict) -> AlgoConfig:
    algo = cfg["algo"]
    base = desk_config() if algo is None else AlgoConfig.from_dict(algo)
    if cfg.get("workers"):
        import dataclasses

        base = dataclasses.replace(base, workers=int(cfg["workers"]))
    scale = float(cfg.get("desk_scale") or 1.0)
    return base if scale == 1.0 else base.scaled(scale)


def echo(cfg: dict) -> dict:
    """Config as echoed into artifacts; ``workers`` is dropped since outputs do not depend on it."""
    return {k: v for k, v in cfg.items() if k != "workers"}


def _csv_text(columns: list[str], rows: list[dict], cfg: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# version: {version_string()}\n")
    buf.write(f"# config: {json.dumps(echo(cfg), sort_keys=True)}\n")
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return "" if v is None else v


def read_csv(path) -> list[dict]:
    """Rows of a CSV written by this harness (comment lines skipped)."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    p = out / name
    p.write_text(text)
    return p


# --- subcommands --------------------------------------------------------------

def run_one(cfg: dict, family, F, seed: int, eval_envs: int) -> tuple[dict, dict]:
    """One repetition: learn on simulators, deploy on ``eval_envs`` real worlds, score with the oracle."""
    from .algos import sim2real
    from .bench import expected_meta_value, prior_mean_optimal_value
    from .deploy import deploy

    acfg = algo_config(cfg)
    res = sim2real(acfg, family, F, seed=seed, workers=acfg.workers)
    report = res.report
    report["version"] = version_string()
    report["experiment"] = echo(cfg)
    row = {"seed": seed, "status": report["status"], "vstar_hat": report.get("vstar"),
           "sim_episodes": report["simulator_episodes"], "rounds": len(report.get("rounds") or []),
           "accepted": report.get("accepted"), "survivors": report.get("survivors", []),
           "canonical_states": len(res.discovery.canonical) if res.discovery else None}
    star = F.star
    row["star_survived"] = bool(star is not None and star.id in report.get("survivors", []))
    row["vstar_oracle"] = prior_mean_optimal_value(family)
    if not res.ok:
        return row, report
    deploys = []

    def meta_policy(env, rng):
        dep = deploy(res.meta, env, res.discovery, res.plan, res.kernel, rng)
        deploys.append(dep.report)
        return dep.policy

    mv = expected_meta_value(family, meta_policy, eval_envs, Streams(seed).get("evaluation"), with_optimal=True)
    real = [d["episodes"]["total"] for d in deploys]
    expected = [d["expected_episodes"] for d in deploys]
    report["deployment"] = {
        "envs": eval_envs, "value": mv.mean, "ci": mv.ci, "optimal": float(np.mean(mv.optimal)),
        "regret": mv.regret, "real_episodes": real, "expected_real_episodes": expected,
        "sentinel_reads": int(sum(d["sentinel_reads"] for d in deploys)),
        "firewall_ok": all(d["firewall_ok"] for d in deploys),
    }
    row.update(value=mv.mean, regret=mv.regret, eps_optimal=bool(mv.regret <= acfg.epsilon),
               real_episodes=int(sum(real)), expected_real_episodes=int(sum(expected)))
    return row, report


def cmd_run(cfg: dict) -> int:
    from .predictors import cached_class

    family = resolve_family(cfg["family"])
    F = cached_class(family, n_decoys=int(cfg["n_decoys"]), seed=int(cfg["class_seed"]))
    algo_config(cfg)  # validate before any work
    out = Path(cfg["out"])
    rows = []
    status = EXIT_OK
    for i in range(int(cfg["reps"])):
        seed = int(cfg["seed"]) + i
        row, report = run_one(cfg, family, F, seed, int(cfg["eval_envs"]))
        rows.append(row)
        _write(out, f"report_seed{seed}.json", json.dumps(report, indent=1, sort_keys=True))
        if row["status"] != "ok":
            status = EXIT_ANOMALY
            log.error("seed %d: %s", seed, report["anomalies"])
    rows.sort(key=lambda r: r["seed"])
    _write(out, "summary.csv", _csv_text(RUN_COLUMNS, rows, cfg))
    for r in rows:
        print(f"seed={r['seed']} status={r['status']} regret={r.get('regret')} rounds={r['rounds']}")
    return status


def cmd_kde_diagnose(cfg: dict) -> int:
    import warnings

    from .kde import Lattice, rate_diagnostic
    from .legendre import KernelSpec

    family = resolve_family(cfg["family"])
    k = cfg["kde"]
    theta = family.sample_theta(Streams(int(cfg["seed"])).get("kde-theta"))
    state = family.spec.initial_state if k["state"] is None else family.spec.state_names.index(k["state"])
    dens = family.density(theta, state)
    lo, hi = family.spec.layer_box(family.spec.layer_of(state))
    lat = Lattice.for_box(lo, hi, family.spec.obs_bound / 64.0)
    kern = KernelSpec(float(k["alpha"]), family.spec.obs_dim)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = rate_diagnostic(dens, kern, k["n_schedule"], int(k["trials"]), Streams(int(cfg["seed"])).get("kde"), lat)
    for wmsg in caught:
        print(f"warning: {wmsg.message}", file=sys.stderr)
    rows = [{"n": int(n), "h": float(h), "mean_sup_err": float(m), "std_sup_err": float(s)}
            for n, h, m, s in zip(rep.n, rep.h, rep.mean_sup_err, rep.std_sup_err)]
    out = Path(cfg["out"])
    _write(out, "kde_rate.csv", _csv_text(KDE_COLUMNS, rows, cfg))
    summary = {"version": version_string(), "slope": None if math.isnan(rep.slope) else rep.slope,
               "target_slope": rep.target_slope, "intercept": None if math.isnan(rep.intercept) else rep.intercept,
               "config": echo(cfg)}
    _write(out, "kde_rate.json", json.dumps(summary, indent=1, sort_keys=True))
    print(f"slope={rep.slope:.4f} target={rep.target_slope:.4f}")
    return EXIT_OK


def cmd_oracle(cfg: dict) -> int:
    from .bench import monte_carlo_value, optimal_value, policy_value

    family = resolve_family(cfg["family"])
    o = cfg["oracle"]
    streams = Streams(int(cfg["seed"]))
    if o["thetas"] is not None:
        thetas = [np.atleast_1d(np.asarray(t, dtype=float)) for t in o["thetas"]]
    else:
        rng = streams.get("oracle-thetas")
        thetas = [family.sample_theta(rng) for _ in range(int(o["n_sampled"]))]
    rows = []
    for i, th in enumerate(thetas):
        env = family.env_for(th, name=f"oracle-{i}")
        rep = optimal_value(env)
        mc, se = monte_carlo_value(env, rep.policy, int(o["mc_rollouts"]), streams.get("oracle-mc", i))
        const = lambda x: np.zeros(np.atleast_2d(x).shape[0], dtype=np.int64)  # noqa: E731
        rows.append({"theta": " ".join(repr(float(v)) for v in th), "vstar": rep.total, "quad_error": rep.quad_error,
                     "mc_value": mc, "mc_stderr": se, "policy": "optimal", "policy_value": rep.total})
        rows.append({"theta": " ".join(repr(float(v)) for v in th), "vstar": rep.total, "quad_error": rep.quad_error,
                     "mc_value": None, "mc_stderr": None, "policy": "always-0", "policy_value": policy_value(env, const)})
    _write(Path(cfg["out"]), "oracle.csv", _csv_text(ORACLE_COLUMNS, rows, cfg))
    for r in rows:
        if r["policy"] == "optimal":
            print(f"theta={r['theta']} V*={r['vstar']:.6f} MC={r['mc_value']:.6f}+-{r['mc_stderr']:.1e}")
    return EXIT_OK


def cmd_certify_kernel(cfg: dict) -> int:
    from .legendre import KernelSpec, certify_k1

    rows = []
    ok = True
    for alpha in cfg["certify"]["alphas"]:
        for dim in cfg["certify"]["dims"]:
            rep = certify_k1(KernelSpec(float(alpha), int(dim)), raise_on_fail=False)
            ok &= rep.ok
            rows.append({"alpha": float(alpha), "dim": int(dim), "integral_error": rep.integral_error,
                         "max_moment_error": rep.max_moment_error, "abs_moment": rep.abs_moment,
                         "l2_norm": rep.l2_norm, "sup_norm": rep.sup_norm, "ok": rep.ok})
            print(f"alpha={alpha} d={dim} integral_err={rep.integral_error:.2e} "
                  f"moment_err={rep.max_moment_error:.2e} ok={rep.ok}")
    _write(Path(cfg["out"]), "certify.csv", _csv_text(CERTIFY_COLUMNS, rows, cfg))
    return EXIT_OK if ok else EXIT_ANOMALY


def cmd_gen_family(cfg: dict) -> int:
    name = cfg["gen_family"]["name"]
    if name not in BUILTIN_FAMILIES:
        raise UsageError(f"unknown built-in family {name!r}; choose from {sorted(BUILTIN_FAMILIES)}")
    fam = family_from_config(BUILTIN_FAMILIES[name]())
    _write(Path(cfg["out"]), f"family_{name}.json", fam.to_json() + "\n")
    print(fam.to_json())
    return EXIT_OK


COMMANDS = {"run": cmd_run, "kde-diagnose": cmd_kde_diagnose, "oracle": cmd_oracle,
            "certify-kernel": cmd_certify_kernel, "gen-family": cmd_gen_family}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="romdp-sim2real", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON experiment config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--reps", type=int)
    ap.add_argument("--out")
    ap.add_argument("--desk-scale", type=float, dest="desk_scale")
    ap.add_argument("--workers", type=int)
    ap.add_argument("--family", help="built-in family name or family JSON path")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "reps": args.reps, "out": args.out,
                                        "desk_scale": args.desk_scale, "workers": args.workers,
                                        "family": args.family})
        if int(cfg["reps"]) < 1 or int(cfg["workers"]) < 1:
            raise UsageError("reps and workers must be >= 1")
        return COMMANDS[args.command](cfg)
    except (UsageError, ConfigError, FamilyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
