import json

import pytest

from pmqa.config import ConfigError, RunConfig


def test_defaults_match_standard_operating_point():
    config = RunConfig()
    assert config.m == 5
    assert config.m_max == 20
    assert config.token_budget is None
    assert config.refine_budget == 3
    assert config.rate_limit_rps == 3.0
    assert config.llm_backend == "mock"


def test_precedence_flags_over_env_over_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"m": 2, "m_max": 10, "model": "file-model"}))
    env = {"PMQA_BATCH_SIZE": "3", "PMQA_MODEL": "env-model"}
    config = RunConfig.resolve(flags={"m": 4}, env=env, config_file=str(cfg))
    assert config.m == 4            # flag wins
    assert config.model == "env-model"  # env beats file
    assert config.m_max == 10       # file beats default


def test_env_coercion_and_booleans():
    env = {
        "PMQA_TOKEN_BUDGET": "5000",
        "PMQA_RATE_LIMIT": "2.5",
        "PMQA_ALLOW_SAME_JUDGE": "true",
    }
    config = RunConfig.resolve(flags={}, env=env)
    assert config.token_budget == 5000
    assert config.rate_limit_rps == 2.5
    assert config.allow_same_judge_model is True


def test_env_bad_int_is_config_error():
    with pytest.raises(ConfigError):
        RunConfig.resolve(flags={}, env={"PMQA_BATCH_SIZE": "five"})


def test_unknown_config_file_keys_rejected(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"batch": 5}))
    with pytest.raises(ConfigError):
        RunConfig.resolve(flags={}, env={}, config_file=str(cfg))


def test_missing_config_file_is_config_error():
    with pytest.raises(ConfigError):
        RunConfig.resolve(flags={}, env={}, config_file="/no/such/file.json")


@pytest.mark.parametrize(
    "kw",
    [
        {"m": 0},
        {"m_max": 0},
        {"refine_budget": 0},
        {"parallelism": 0},
        {"llm_backend": "telepathy"},
        {"search_backend": "gopher"},
        {"token_budget": 0},
    ],
)
def test_validation_rejects_bad_values(kw):
    with pytest.raises(ConfigError):
        RunConfig(**kw)


def test_echo_redacts_secrets():
    config = RunConfig(api_key="sk-secret", ncbi_api_key="")
    echoed = config.echo()
    assert echoed["api_key"] == "<set>"
    assert echoed["ncbi_api_key"] == ""
    assert "sk-secret" not in json.dumps(echoed)


def test_temperature_lookup_defaults_to_zero():
    config = RunConfig(temperatures={"critique": 0.8})
    assert config.temperature("critique") == 0.8
    assert config.temperature("answer") == 0.0
