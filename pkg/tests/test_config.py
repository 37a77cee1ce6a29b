import pytest
from hypothesis import given
from hypothesis import strategies as st

from unsegment.config import (
    AttackConfig,
    LossWeights,
    ModelSpec,
    RunConfig,
    dump_config,
    load_config,
    parse_model_list,
    parse_number,
)
from unsegment.errors import ConfigurationError


def test_defaults_follow_published_settings():
    cfg = AttackConfig()
    assert cfg.epsilon == 8 / 255
    assert cfg.alpha == 2 / 255
    assert (cfg.steps, cfg.proxy_steps, cfg.deform_steps) == (40, 4, 40)
    assert cfg.sam_k == 400


@pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(alpha=0.1, epsilon=0.05), dict(epsilon=1.5, alpha=0.1),
                                dict(steps=-1), dict(num_flow_fields=0), dict(input_diversity_prob=1.5),
                                dict(momentum_mu=-0.1)])
def test_invalid_attack_config(kw):
    with pytest.raises(ConfigurationError):
        AttackConfig(**kw)


def test_negative_weight():
    with pytest.raises(ConfigurationError):
        LossWeights(lambda_f=-1.0)


def test_replace_routes_weight_keys():
    cfg = AttackConfig().replace(lambda_f=2.5, steps=3)
    assert cfg.weights.lambda_f == 2.5
    assert cfg.steps == 3


@pytest.mark.parametrize("text,value", [("8/255", 8 / 255), ("0.5", 0.5), (" 12/255 ", 12 / 255), ("1e-3", 1e-3)])
def test_parse_number(text, value):
    assert parse_number(text) == value


@pytest.mark.parametrize("text", ["abc", "1/0", "1/x", ""])
def test_parse_number_rejects(text):
    with pytest.raises(ConfigurationError):
        parse_number(text)


def test_model_spec_parse():
    assert ModelSpec.parse("3") == ModelSpec(3, 3, 16)
    assert ModelSpec.parse("1:4:32") == ModelSpec(1, 4, 32)
    assert parse_model_list("0,1:2") == (ModelSpec(0), ModelSpec(1, 2))
    with pytest.raises(ConfigurationError):
        ModelSpec.parse("a:b")


def test_round_trip(tmp_path):
    cfg = RunConfig(attack_name="pata++", attack=AttackConfig(epsilon=12 / 255, steps=7).replace(beta_pushaway=0.0),
                    source_models=(ModelSpec(0), ModelSpec(2, 4, 8)), workers=3)
    path = tmp_path / "c.ini"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


@given(st.floats(1e-4, 1.0), st.integers(0, 100), st.floats(0.0, 50.0))
def test_round_trip_property(tmp_path_factory, eps, steps, lam):
    cfg = RunConfig(attack=AttackConfig(epsilon=eps, alpha=eps / 2, steps=steps).replace(lambda_f=lam))
    path = tmp_path_factory.mktemp("cfg") / "c.ini"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_fraction_in_file(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[attack]\nepsilon = 12/255\nalpha = 1/255\n")
    cfg = load_config(path)
    assert cfg.attack.epsilon == 12 / 255


@pytest.mark.parametrize("text", ["[attack]\nnope = 1\n", "[mystery]\na = 1\n", "[run]\nworkers = two\n",
                                  "[attack]\nsteps = 1.5\n", "[attack]\nweights = 1\n"])
def test_bad_files(tmp_path, text):
    path = tmp_path / "c.ini"
    path.write_text(text)
    with pytest.raises(ConfigurationError):
        load_config(path)
