import numpy as np
import pytest

from romdp_sim2real.bench import (
    QuadratureError,
    check_holder,
    check_reactiveness,
    check_separation,
    expected_meta_value,
    integrate_over_state,
    monte_carlo_value,
    optimal_value,
    policy_value,
    prior_mean_optimal_value,
)
from romdp_sim2real.family import (
    ConstructionError,
    FamilyError,
    constant_reward_family_config,
    default_family_config,
    family_from_config,
    load_family,
    point_prior,
    sample_env,
)
from romdp_sim2real.romdp import Env

# frozen oracle values for the default family (see test_independent_oracle_default_family)
VSTAR_THETA_HALF = 0.6537551941
PRIOR_MEAN_VSTAR = 0.7212811


def _bump(x, c, w):
    u = (x - c) / w
    return np.where(np.abs(u) < 1, (1 - u * u) ** 3, 0.0) / (w * 32 / 35)


def _sig(z):
    return 0.25 * (1 + np.tanh(z))  # low 0, high 0.5


def independent_vstar(theta, n=400_001):
    """Backward induction written out from the default family's formulas, trapezoid on a fine grid."""
    def integ(x, f):
        return float(np.sum((f[1:] + f[:-1]) * np.diff(x)) / 2)

    xa = np.linspace(1.6 + 0.3 * theta - 0.9, 1.6 + 0.3 * theta + 0.9, n)
    d2a = _bump(xa, 1.6 + 0.3 * theta, 0.9)
    r2 = lambda x: np.maximum(_sig((2 - 4 * theta) * np.tanh(2 * (x - 3))),  # noqa: E731
                              _sig(1.2 * np.sin(1.7 * x) - 0.6 + 1.2 * theta))
    v2a = integ(xa, d2a * r2(xa))
    xb = np.linspace(4.0 - 0.2 * theta - 0.7, 4.7 + 0.6, n)
    wb = np.array([1.0, 0.5 + theta]) / (1.5 + theta)
    d2b = wb[0] * _bump(xb, 4.0 - 0.2 * theta, 0.7) + wb[1] * _bump(xb, 4.7, 0.6)
    v2b = integ(xb, d2b * r2(xb))
    c1 = -3.7 + 1.4 * theta
    x1 = np.linspace(c1 - 1.2, c1 + 1.2, n)
    q0 = _sig(1.5 - 3 * theta + 0.6 * np.sin(1.3 * x1)) + v2a
    q1 = _sig(-1.5 + 3 * theta + 0.6 * np.cos(1.1 * x1)) + v2b
    return integ(x1, _bump(x1, c1, 1.2) * np.maximum(q0, q1))


def test_independent_oracle_default_family(family):
    for theta in (0.0, 0.5, 0.93):
        assert optimal_value(family.env_for([theta])).total == pytest.approx(independent_vstar(theta), abs=2e-6)
    assert optimal_value(family.env_for([0.5])).total == pytest.approx(VSTAR_THETA_HALF, abs=1e-6)


def test_prior_mean_optimal_value(family):
    assert prior_mean_optimal_value(family) == pytest.approx(PRIOR_MEAN_VSTAR, abs=1e-5)
    # Monte Carlo over the prior agrees within its standard error
    rng = np.random.default_rng(4)
    vals = [optimal_value(family.env_for(family.sample_theta(rng))).total for _ in range(300)]
    assert abs(np.mean(vals) - PRIOR_MEAN_VSTAR) <= 3 * np.std(vals) / np.sqrt(300)


@pytest.mark.parametrize("H", [1, 2, 3])
def test_constant_rewards(H):
    ones = family_from_config(constant_reward_family_config(1.0, horizon=H))
    assert optimal_value(ones.env_for([0.3])).total == pytest.approx(H, abs=1e-12)
    zeros = family_from_config(constant_reward_family_config(0.0, horizon=H))
    assert optimal_value(zeros.env_for([0.3])).total == 0.0


def test_quadrature_vs_monte_carlo(env_mid):
    rep = optimal_value(env_mid)
    mc, se = monte_carlo_value(env_mid, rep.policy, 10**6, np.random.default_rng(0))
    assert abs(rep.total - mc) <= 2e-3
    assert abs(rep.total - mc) <= 3 * (se + rep.quad_error)


def test_policy_value_of_optimal_policy(env_mid):
    rep = optimal_value(env_mid)
    assert policy_value(env_mid, rep.policy) == pytest.approx(rep.total, abs=2e-6)


def test_policies_never_beat_optimum(family):
    rng = np.random.default_rng(5)
    for i in range(5):
        env = family.env_for(family.sample_theta(rng))
        vstar = optimal_value(env).total
        for a in (0, 1):
            pol = lambda x, a=a: np.full(np.atleast_2d(x).shape[0], a)  # noqa: E731
            assert policy_value(env, pol) <= vstar + 2e-6
        cut = rng.uniform(-5, 5)
        pol = lambda x, cut=cut: (np.atleast_2d(x)[:, 0] > cut).astype(int)  # noqa: E731
        assert policy_value(env, pol) <= vstar + 2e-6


def test_random_action_policy_is_mean_of_action_values(family):
    cfg = default_family_config()
    # one layer only: the value of a uniformly random policy is the mean of the two constant policies
    cfg.update(horizon=1, layers=cfg["layers"][:1], transitions={}, rewards=cfg["rewards"][:1])
    cfg["densities"] = {"s1": cfg["densities"]["s1"]}
    fam = family_from_config(cfg)
    env = fam.env_for([0.2])
    v0 = policy_value(env, lambda x: np.zeros(np.atleast_2d(x).shape[0], dtype=int))
    v1 = policy_value(env, lambda x: np.ones(np.atleast_2d(x).shape[0], dtype=int))
    rng = np.random.default_rng(6)
    mc, se = monte_carlo_value(env, lambda x: rng.integers(0, 2, size=np.atleast_2d(x).shape[0]), 400_000,
                               np.random.default_rng(7))
    assert abs(mc - (v0 + v1) / 2) <= 4 * se


def test_more_reward_never_lowers_vstar(env_mid):
    class Boosted:
        def __init__(self, base):
            self.base = base

        def mean(self, layer, x, a):
            m = self.base.mean(layer, x, a)
            return m + 0.05 * (1 + np.sin(3 * np.atleast_2d(x)[:, 0])) * (1 - m)

    boosted = Env(env_mid.spec, env_mid.theta, env_mid.densities, Boosted(env_mid.rewards))
    base, up = optimal_value(env_mid), optimal_value(boosted)
    for s in base.state_values:
        assert up.state_values[s] >= base.state_values[s] - 1e-9
    assert up.total > base.total


def test_quadrature_nonconvergence_raises(env_mid):
    with pytest.raises(QuadratureError):
        integrate_over_state(env_mid, 0, lambda x: np.sign(np.sin(1e4 * x[:, 0])), tol=1e-12, cap=2**12)


def test_expected_meta_value_point_prior_and_determinism(family):
    point = family_from_config(point_prior(default_family_config(), 0.35))
    env = point.env_for([0.35])
    opt = optimal_value(env)
    mv = expected_meta_value(point, lambda e, rng: optimal_value(e).policy, 3, np.random.default_rng(0),
                             with_optimal=True)
    np.testing.assert_allclose(mv.values, policy_value(env, opt.policy), atol=1e-12)
    assert mv.regret == pytest.approx(0.0, abs=1e-9)
    meta = lambda e, rng: (lambda x: np.zeros(np.atleast_2d(x).shape[0], dtype=int))  # noqa: E731
    a = expected_meta_value(family, meta, 20, np.random.default_rng(9))
    b = expected_meta_value(family, meta, 20, np.random.default_rng(9))
    assert round(a.mean, 4) == round(b.mean, 4) and a.mean == b.mean


def test_optimal_meta_policy_matches_prior_mean(family):
    mv = expected_meta_value(family, lambda e, rng: optimal_value(e).policy, 200, np.random.default_rng(1))
    assert abs(mv.mean - PRIOR_MEAN_VSTAR) <= mv.ci


def test_sample_env_point_prior_and_independence(family):
    point = family_from_config(point_prior(default_family_config(), 0.6))
    a = sample_env(point, np.random.default_rng(1))
    b = sample_env(point, np.random.default_rng(2))
    np.testing.assert_array_equal(a.theta, b.theta)
    c = sample_env(family, np.random.default_rng(1))
    d = sample_env(family, np.random.default_rng(2))
    assert not np.array_equal(c.theta, d.theta)


def test_assumption_audits_over_fifty_thetas(family, h3_family):
    for fam in (family, h3_family):
        rng = np.random.default_rng(12)
        for i in range(50):
            env = sample_env(fam, rng, check=False)
            assert check_separation(env) > fam.separation
            assert check_holder(env, fam.holder_alpha) <= fam.holder_const
            # supports of one layer's states are disjoint, so the optimal action
            # depends on the observation alone: no shared-support point exists to check
            assert check_reactiveness(env) == (0, 0)


def test_construction_error_names_the_assumption():
    cfg = default_family_config()
    cfg["separation"] = 50.0
    with pytest.raises(ConstructionError) as exc:
        sample_env(family_from_config(cfg), np.random.default_rng(0))
    assert exc.value.assumption == "separation"
    cfg = default_family_config()
    cfg["holder_const"] = 1.0
    with pytest.raises(ConstructionError) as exc:
        sample_env(family_from_config(cfg), np.random.default_rng(0))
    assert exc.value.assumption == "holder"


def test_densities_integrate_to_one(family):
    env = family.env_for([0.77])
    for s in range(env.spec.n_states):
        mass, err = integrate_over_state(env, s, lambda x: np.ones(x.shape[0]))
        assert mass == pytest.approx(1.0, abs=1e-6)


def test_family_config_errors(tmp_path):
    cfg = default_family_config()
    del cfg["separation"]
    with pytest.raises(FamilyError, match="missing"):
        family_from_config(cfg)
    cfg = default_family_config()
    cfg["colour"] = "blue"
    with pytest.raises(FamilyError, match="unknown"):
        family_from_config(cfg)
    cfg = default_family_config()
    cfg["densities"]["s2b"][0]["center"] = [2.0]  # overlaps s2a
    with pytest.raises(FamilyError, match="disjoint"):
        family_from_config(cfg)
    with pytest.raises(FileNotFoundError):
        load_family(tmp_path / "nope.json")


def test_family_json_round_trip(tmp_path, family):
    p = tmp_path / "fam.json"
    p.write_text(family.to_json())
    again = load_family(p)
    assert again.spec == family.spec
    assert optimal_value(again.env_for([0.5])).total == optimal_value(family.env_for([0.5])).total
