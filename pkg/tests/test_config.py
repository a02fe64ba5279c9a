import json

import pytest

from m3dv.config import DESK_OVERRIDES, ConfigError, ScenarioConfig, load_config, resolve


def test_defaults_follow_the_hyperparameter_table():
    c = ScenarioConfig()
    assert (c.lambda1, c.lambda2, c.lambda3, c.beta) == (1.0, 1.0, 0.5, 4.0)
    assert (c.lambda_C, c.lambda_D, c.epsilon, c.T) == (0.4, 0.2, 1.0, 85)
    assert (c.N, c.G, c.C) == (50, 11, 5)
    assert c.decay_list == (85, 125, 165, 205) and c.decay_rate == 0.5
    assert (c.hidden_dim, c.ffn_dim, c.nheads, c.decoder_layers, c.dropout) == (256, 256, 8, 3, 0.1)
    assert (c.lr, c.batch_size, c.weight_decay) == (2e-4, 8, 1e-4)


def test_module_configs_carry_values():
    c = resolve(desk=True)
    d, t = c.decoder(), c.train()
    assert d.dim == 32 and d.G == 2 and d.N == 8
    assert t.trigger_epoch == 34 and t.decay_epochs == (34, 50, 66, 82) and t.epochs == 100
    assert c.matching().scheduler.trigger_epoch == 34
    assert c.noise().C == 2


def test_precedence_cli_over_file_over_defaults():
    env = {"M3DV_SEED": "7"}
    assert resolve(env=env).seed == 7
    assert resolve({"seed": 3}, env=env).seed == 3
    assert resolve({"seed": 3}, {"seed": 5}, env=env).seed == 5
    c = resolve({"T": 10, "epochs": 20}, {"epochs": 30}, desk=True, env={})
    assert (c.T, c.epochs, c.G) == (10, 30, DESK_OVERRIDES["G"])
    assert resolve({}, {"epochs": None}, env={}).epochs == 250


def test_unknown_and_mistyped_keys_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        resolve({"lamda1": 1.0}, env={})
    with pytest.raises(ConfigError):
        resolve({"N": 2.5}, env={})
    with pytest.raises(ConfigError):
        resolve({"dropout": True}, env={})
    with pytest.raises(ConfigError):
        resolve({"decay_list": 5}, env={})
    with pytest.raises(ConfigError):
        resolve(env={"M3DV_SEED": "abc"})


def test_module_invariants_checked_on_load():
    for bad in ({"hidden_dim": 30}, {"lambda_D": 1.5}, {"lr": 0.0}, {"C": 0}, {"scheduler": "cosine"},
                {"epsilon": -1.0}, {"encoder_layers": 0}):
        with pytest.raises(ConfigError):
            resolve(bad, env={})


def test_load_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"G": 3, "categories": ["Car"]}))
    c = load_config(p)
    assert c.G == 3 and c.categories == ("Car",)
    p.write_text(json.dumps({"train": {"lr": 1.0}}))
    with pytest.raises(ConfigError, match="flat"):
        load_config(p)
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def test_round_trip_through_json():
    c = resolve({"G": 4}, desk=True, env={})
    again = resolve(json.loads(json.dumps(c.to_dict())), env={})
    assert again == c
