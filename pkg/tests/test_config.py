import pytest

from foa.config import FederationConfig
from foa.errors import InvalidArgument


def test_defaults():
    c = FederationConfig()
    assert (c.decomp_threshold, c.decomp_max_agents, c.subtasks_min, c.subtasks_max) == (0.3, 4, 2, 4)
    assert (c.merge_sim, c.cluster_sim_threshold, c.cluster_max_size, c.rounds) == (0.5, 0.2, 4, 3)


def test_env_overrides():
    env = {"FOE_DECOMP_THRESHOLD": "0.4", "FOE_DECOMP_MAX_AGENTS": "2", "FOE_DECOMP_SUBTASKS_MIN": "1",
           "FOE_DECOMP_SUBTASKS_MAX": "3", "FOE_DECOMP_MERGE_SIM": "0.7", "FOE_CLUSTER_SIM_THRESHOLD": "0.1"}
    c = FederationConfig().with_env(env)
    assert (c.decomp_threshold, c.decomp_max_agents, c.subtasks_min, c.subtasks_max,
            c.merge_sim, c.cluster_sim_threshold) == (0.4, 2, 1, 3, 0.7, 0.1)
    assert FederationConfig().with_env({}) == FederationConfig()


def test_bad_env():
    with pytest.raises(InvalidArgument):
        FederationConfig().with_env({"FOE_DECOMP_MAX_AGENTS": "many"})


def test_roundtrip_and_unknown():
    c = FederationConfig(rounds=5, synth_mode="merge")
    assert FederationConfig.from_dict(c.to_dict()) == c
    with pytest.raises(InvalidArgument):
        FederationConfig.from_dict({"nope": 1})


@pytest.mark.parametrize("kw", [{"decomp_threshold": 1.0}, {"subtasks_min": 5}, {"rounds": 0},
                                {"synth_mode": "zip"}, {"timeout_ms": 0}])
def test_validation(kw):
    with pytest.raises(InvalidArgument):
        FederationConfig(**kw)
