import json

import pytest

from remap.config import WORKERS_ENV, RunConfig, build_config, load_config
from remap.errors import ConfigError


def test_defaults():
    cfg = build_config({})
    assert cfg.seed == 0
    assert cfg.layers == [1]
    assert cfg.grid_scales == 4
    assert cfg.method == "REMAP"
    assert cfg.alpha_init == "ones"
    assert cfg.entropy.bins == 64
    assert cfg.entropy.epsilon == 1e-6
    assert cfg.whitening.out_dim == 128
    assert cfg.whitening.eigen_floor is None
    assert cfg.train.margin == 0.1
    assert cfg.train.accumulate == 64
    assert cfg.train.remine_every == 3000
    assert cfg.pq.m == 16
    assert cfg.pq.k == 256
    assert cfg.eval.search == "exhaustive"
    assert cfg.synth.classes == 5


def test_nested_assignment():
    cfg = build_config({"seed": 7, "layers": [2, 3],
                        "train": {"epochs": 4, "learning_rate": 0.01},
                        "eval": {"search": "truncate", "truncate_dim": 32}})
    assert cfg.seed == 7
    assert cfg.layers == [2, 3]
    assert cfg.train.epochs == 4
    assert cfg.train.learning_rate == 0.01
    assert cfg.eval.truncate_dim == 32


def test_all_problems_reported_at_once():
    bad = {"sneed": 1,                      # unknown top key
           "train": {"epochs": "three",     # wrong type
                     "warmup": 5},          # unknown section key
           "layers": []}                    # empty
    with pytest.raises(ConfigError) as err:
        build_config(bad)
    msg = str(err.value)
    assert "sneed" in msg
    assert "train.epochs" in msg
    assert "train.warmup" in msg
    assert "layers" in msg


def test_semantic_problems_reported_together():
    with pytest.raises(ConfigError) as err:
        build_config({"method": "GLOB", "grid_scales": 0,
                      "train": {"momentum": 1.5}})
    msg = str(err.value)
    assert "GLOB" in msg
    assert "grid_scales" in msg
    assert "momentum" in msg


def test_bool_is_not_an_integer():
    with pytest.raises(ConfigError) as err:
        build_config({"seed": True})
    assert "boolean" in str(err.value)


def test_int_promotes_to_float():
    cfg = build_config({"train": {"margin": 1}})
    assert cfg.train.margin == 1.0
    assert isinstance(cfg.train.margin, float)


def test_optional_fields_accept_null():
    cfg = build_config({"whitening": {"eigen_floor": None},
                        "eval": {"truncate_dim": None}})
    assert cfg.whitening.eigen_floor is None
    cfg2 = build_config({"whitening": {"eigen_floor": 0.5}})
    assert cfg2.whitening.eigen_floor == 0.5


def test_duplicate_layers_rejected():
    with pytest.raises(ConfigError) as err:
        build_config({"layers": [1, 1]})
    assert "duplicate" in str(err.value)


def test_truncate_mode_needs_dim():
    with pytest.raises(ConfigError) as err:
        build_config({"eval": {"search": "truncate"}})
    assert "truncate_dim" in str(err.value)


def test_load_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 3, "train": {"epochs": 2}}))
    cfg = load_config(path)
    assert cfg.seed == 3
    assert cfg.train.epochs == 2

    cfg2 = load_config(path, ["train.epochs=9", "seed=11",
                              "eval.recall4=true", "method=RMAC"])
    assert cfg2.train.epochs == 9
    assert cfg2.seed == 11
    assert cfg2.eval.recall4 is True
    assert cfg2.method == "RMAC"  # bare string override parses as string


def test_load_config_no_file():
    cfg = load_config(None, ["grid_scales=2"])
    assert cfg.grid_scales == 2


def test_load_config_bad_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError) as err:
        load_config(path)
    assert "line 1" in str(err.value)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


def test_override_without_equals():
    with pytest.raises(ConfigError) as err:
        load_config(None, ["train.epochs"])
    assert "key.path=value" in str(err.value)


def test_override_list_value():
    cfg = load_config(None, ["layers=[4, 5]"])
    assert cfg.layers == [4, 5]


def test_workers_env(monkeypatch):
    monkeypatch.setenv(WORKERS_ENV, "6")
    assert RunConfig().workers == 6
    monkeypatch.setenv(WORKERS_ENV, "not_a_number")
    assert RunConfig().workers == 1
    monkeypatch.setenv(WORKERS_ENV, "-3")
    assert RunConfig().workers == 1
    monkeypatch.delenv(WORKERS_ENV)
    assert RunConfig().workers == 1
    # explicit config beats the environment
    monkeypatch.setenv(WORKERS_ENV, "6")
    assert build_config({"workers": 2}).workers == 2


def test_config_hash_tracks_content():
    a = build_config({"seed": 1})
    b = build_config({"seed": 1})
    c = build_config({"seed": 2})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 16
