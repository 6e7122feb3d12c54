import pytest

from collabmap.config import KEYS, RunConfig, parse_overrides, parse_text
from collabmap.errors import InvalidConfig, ParseError


def test_defaults_and_typed_views():
    cfg = RunConfig()
    assert cfg.pipeline == "offline" and cfg.seed == 0
    assert cfg.feature_model().theta_max == 60.0
    assert cfg.server_config().n_merge == 3
    assert cfg.agent_config().T_lost == 20
    wc, plans = cfg.world_and_plans()
    assert len(plans) == 2


def test_overrides_flow_into_options():
    cfg = RunConfig({"features.pixel_sigma": "1.5", "mapper.tau_px": "3", "ba.huber_delta": "2",
                     "collab.retrieval_k": "all", "agent.T_lost": "25", "eval.reference": "true"})
    assert cfg.feature_model().pixel_sigma == 1.5
    assert cfg.mapper_options().tau_px == 3.0 and cfg.mapper_options().ba.huber_delta == 2.0
    assert cfg.server_config().retrieval_k is None
    assert cfg.agent_config().T_lost == 25
    assert cfg.eval_options().reference == "true"


@pytest.mark.parametrize("raw,key", [
    ({"nope.key": "1"}, "nope.key"),
    ({"run.seed": "x"}, "run.seed"),
    ({"run.pipeline": "batch"}, "run.pipeline"),
    ({"run.deterministic": "true"}, "run.seed"),
    ({"scenario.preset": "moon"}, "scenario.preset"),
    ({"plan.1.colour": "red"}, "plan.1.colour"),
    ({"run.deterministic": "maybe"}, "run.deterministic"),
])
def test_invalid_keys_are_named(raw, key):
    with pytest.raises(InvalidConfig) as e:
        RunConfig(raw)
    assert e.value.key == key


def test_invalid_values_detected_in_views():
    with pytest.raises(InvalidConfig):
        RunConfig({"features.theta_max": "0"}).feature_model()
    with pytest.raises(InvalidConfig):
        RunConfig({"agent.T_lost": "1"}).agent_config()
    with pytest.raises(InvalidConfig) as e:
        RunConfig({"plan.1.altitude": "-3"}).world_and_plans()
    assert e.value.key == "plan.1"
    with pytest.raises(InvalidConfig) as e:
        RunConfig({"plan.7.speed": "3"}).world_and_plans()
    assert e.value.key == "plan.7.waypoints"


def test_plan_overrides():
    cfg = RunConfig({"plan.1.waypoints": "0 0; 50 0", "plan.3.waypoints": "0 10; 50 10",
                     "plan.3.yaw": "2 30 1", "plan.3.heading": "fixed"})
    _, plans = cfg.world_and_plans()
    assert [p.agent_id for p in plans] == [1, 2, 3]
    assert plans[0].path_length == 50
    assert plans[2].heading_mode == "fixed" and plans[2].yaw_maneuvers[0].rate == 30


def test_file_format(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nrun.seed = 4  # trailing\n\nfeatures.theta_max=150\n")
    cfg = RunConfig.load(p, {"run.seed": "5"})
    assert cfg.seed == 5 and cfg.feature_model().theta_max == 150
    with pytest.raises(ParseError) as e:
        parse_text("run.seed = 1\nbroken line\n", "x")
    assert e.value.line == 2
    with pytest.raises(InvalidConfig):
        parse_overrides(["noequals"])


def test_dict_values_and_resolved_lines():
    cfg = RunConfig({"run.disconnect": "2:40, 1:300", "collab.retrieval_k": "inf", "run.seed": "3"})
    assert cfg.get("run.disconnect") == {1: 300, 2: 40}
    lines = cfg.resolved_lines()
    assert "run.disconnect = 1:300, 2:40" in lines and "collab.retrieval_k = inf" in lines
    again = RunConfig(dict(line.split(" = ", 1) for line in lines))
    assert again.resolved_lines() == lines


def test_every_key_has_a_converter_and_default():
    for key, (conv, default) in KEYS.items():
        assert callable(conv), key
        assert "." in key
