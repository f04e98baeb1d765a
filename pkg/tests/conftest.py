from __future__ import annotations

import numpy as np
import pytest

from romdp_sim2real.config import desk_config, resolve
from romdp_sim2real.family import (
    aliasing_family_config,
    constant_reward_family_config,
    default_family_config,
    family_from_config,
    three_layer_family_config,
)
from romdp_sim2real.predictors import cached_class


@pytest.fixture(scope="session")
def family():
    return family_from_config(default_family_config())


@pytest.fixture(scope="session")
def alias_family():
    return family_from_config(aliasing_family_config())


@pytest.fixture(scope="session")
def h3_family():
    return family_from_config(three_layer_family_config())


@pytest.fixture(scope="session")
def ones_h1():
    return family_from_config(constant_reward_family_config(1.0, horizon=1))


@pytest.fixture(scope="session")
def ones_h2():
    return family_from_config(constant_reward_family_config(1.0, horizon=2))


@pytest.fixture(scope="session")
def F(family):
    """Default class: the tabulated optimum plus 7 decoys, shuffled with seed 0."""
    return cached_class(family)


@pytest.fixture(scope="session")
def env_mid(family):
    return family.env_for(np.array([0.5]), name="mid")


def make_plan(family, F, **overrides):
    cfg = desk_config(**overrides)
    return resolve(cfg, family.spec, family, F.F, F.lipschitz)
