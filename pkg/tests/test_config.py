import json

import pytest

from bhivae.config import ConfigError, config_from_dict, parse_config

LAYOUT = {"s_dims": [2, 2, 2], "h_dims": [8, 8], "c_dim": 8}


def test_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"mode": "supervised", "layout": LAYOUT}))
    cfg = parse_config(path)
    assert cfg.weights.beta == 10.0 and cfg.weights.gamma == 3.0 and cfg.rho == 0.5
    assert cfg.optimizer.step_size == 1e-3 and cfg.batch_size == 128 and cfg.total_steps == 5000
    assert cfg.supervised_factors == ("scale", "pos_x", "shape")


def test_missing_layout_named():
    with pytest.raises(ConfigError, match="layout"):
        config_from_dict({"mode": "supervised"})


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="betta"):
        config_from_dict({"mode": "supervised", "layout": LAYOUT, "betta": 4})


def test_unknown_nested_key_named():
    with pytest.raises(ConfigError, match="step_sise"):
        config_from_dict({"mode": "supervised", "layout": LAYOUT, "optimizer": {"step_sise": 0.1}})


@pytest.mark.parametrize(
    "patch, key",
    [
        ({"beta": -1}, "beta"),
        ({"gamma": "3"}, "gamma"),
        ({"rho": 1.0}, "rho"),
        ({"rho": float("nan")}, "rho"),
        ({"batch_size": 2.5}, "batch_size"),
        ({"mode": "semi"}, "mode"),
        ({"metrics": {"bins": "20"}}, "bins"),
    ],
)
def test_invalid_values(patch, key):
    obj = {"mode": "supervised", "layout": LAYOUT, **patch}
    with pytest.raises(ConfigError, match=key):
        config_from_dict(obj)


def test_not_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{mode: supervised")
    with pytest.raises(ConfigError):
        parse_config(path)


def test_json_round_trip():
    cfg = config_from_dict({"mode": "unsupervised", "layout": LAYOUT, "beta": 2, "gamma": 0, "rho": 0.3, "seed": 4})
    again = config_from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert again.to_json() == cfg.to_json()


def test_factor_count_must_match_layers():
    with pytest.raises(ConfigError, match="supervised_factors"):
        config_from_dict({"mode": "supervised", "layout": LAYOUT, "supervised_factors": ["scale"]})
