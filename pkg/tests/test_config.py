import json

import pytest

from heatmil.config import RunConfig, apply_assignments, load_config, merge, parse_assignment
from heatmil.errors import ConfigError
from heatmil.pipeline import ABLATION_ROWS, ablation_config


def test_defaults_are_benchmark_preset():
    cfg = RunConfig()
    assert (cfg.model.embed_dim, cfg.model.proj_dim, cfg.model.hidden_dim) == (16, 16, 16)
    assert (cfg.train.learning_rate, cfg.train.max_epochs, cfg.train.patience) == (3e-4, 15, 5)


def test_json_roundtrip(tmp_path):
    cfg = merge(RunConfig(), {"model": {"alpha": 2.5}, "synth": {"lesion_area_fractions": [0.01, 0.02, 0.05, 0.1]}})
    path = cfg.write(tmp_path)
    assert load_config(path) == cfg
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg


def test_merge_preset_then_sections():
    cfg = merge(RunConfig(), {"preset": "multi_label", "synth": {"seed": 9}})
    assert cfg.synth.num_labels == 3 and cfg.synth.seed == 9


@pytest.mark.parametrize("bad", [{"modle": {}}, {"model": {"nope": 1}}, {"model": 3}, [], {"preset": "x"},
                                 {"train": {"learning_rate": -1.0}}])
def test_merge_rejects(bad):
    with pytest.raises(ConfigError):
        merge(RunConfig(), bad)


def test_assignments():
    assert parse_assignment("loss.lambda_sd=0.05") == ("loss", "lambda_sd", 0.05)
    assert parse_assignment("model.pooling_mode=lp") == ("model", "pooling_mode", "lp")
    assert parse_assignment("model.context_enabled=false") == ("model", "context_enabled", False)
    with pytest.raises(ConfigError):
        parse_assignment("alpha=3")
    cfg = apply_assignments(RunConfig(), ["model.alpha=3", "train.seed=4"])
    assert cfg.model.alpha == 3 and cfg.train.seed == 4


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("[1,")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


@pytest.mark.parametrize("labels", [1, 3])
def test_ablation_switches(labels):
    base = merge(RunConfig(), {"model": {"num_labels": labels}})
    rows = {r.name: ablation_config(base, r) for r in ABLATION_ROWS}
    assert rows["none"].model.pooling_mode == "max" and not rows["none"].model.context_enabled
    assert rows["CS"].model.context_enabled and rows["CS"].model.pooling_mode == "max"
    assert rows["CS+SM"].model.pooling_mode == "smoothmax" and rows["CS+SM"].loss.lambda_sd == 0
    rg = rows["CS+SM+Rg"]
    assert rg.loss.lambda_sd > 0 and (rg.loss.label_smoothing > 0) == (labels > 1)
