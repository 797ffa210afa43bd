import pytest

from dipro.config import (
    ABLATIONS,
    FULL_SEARCH_SPACE,
    ExperimentConfig,
    dump_config,
    from_dict,
    load_config,
    micro_config,
)
from dipro.errors import ContractError, ParseError


def test_task_presets_match_published_weights():
    m = ExperimentConfig(task="mortality")
    assert (m.lambda_pred, m.lambda_orth, m.lambda_temp, m.lambda_pae) == (6, 0.1, 1, 0.1)
    p = ExperimentConfig(task="progression")
    assert (p.lambda_pred, p.lambda_orth, p.lambda_pae) == (2, 1, 2)
    assert p.lambda_temp == 0.0  # no temporal term for progression
    los = ExperimentConfig(task="los")
    assert (los.lambda_pred, los.lambda_orth, los.lambda_temp, los.lambda_pae) == (10, 0.001, 0.1, 0.1)


def test_selection_metric_per_task():
    assert ExperimentConfig(task="progression").selection_metric == "macro_f1"
    assert ExperimentConfig(task="los").selection_metric == "accuracy"
    assert ExperimentConfig(task="mortality").selection_metric == "auprc"


def test_training_defaults():
    c = ExperimentConfig()
    assert (c.accumulation_steps, c.max_epochs, c.patience, c.weight_decay, c.lr_min) == (4, 100, 10, 1e-2, 0.0)


def test_search_space_learning_rates():
    assert FULL_SEARCH_SPACE["learning_rate"] == (8e-6, 5e-6, 1e-5, 5e-5)
    assert FULL_SEARCH_SPACE["dropout_rate"] == (0.1, 0.2, 0.3)
    assert FULL_SEARCH_SPACE["d"] == (64, 128, 256)


@pytest.mark.parametrize("variant,zeroed", [
    ("B1", {"orth"}), ("B2", {"pae"}), ("B3", {"temp"}), ("A2", {"pae"}), ("A4", {"orth", "temp", "pae"}),
])
def test_ablation_zeroes_terms(variant, zeroed):
    w = ExperimentConfig(task="mortality", ablation=variant).loss_weights()
    assert {k for k, v in w.items() if v == 0.0} == zeroed


@pytest.mark.parametrize("bad", [
    {"task": "x"}, {"ablation": "A9"}, {"lambda_orth": -1.0}, {"patience": 200},
    {"selection_metric": "kappa"}, {"d": 10, "heads": 4}, {"dropout_rate": 1.0},
])
def test_invalid_configs(bad):
    with pytest.raises(ContractError):
        ExperimentConfig(**bad)


def test_toml_round_trip(tmp_path):
    cfg = micro_config("los").replace(ablation="B1", learning_rate=1e-3, cohort={"n_patients": 9})
    path = tmp_path / "c.toml"
    dump_config(cfg, path)
    back = load_config(path)
    assert back == cfg and back.hash() == cfg.hash()


def test_unknown_keys_are_errors(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[train]\nlearning_rte = 0.1\n")
    with pytest.raises(ContractError, match="learning_rte"):
        load_config(path)
    with pytest.raises(ContractError):
        from_dict({"optimizer": {}})
    with pytest.raises(ContractError):
        from_dict({"cohort": {"patients": 3}})


def test_bad_toml_is_a_parse_error(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[train\n")
    with pytest.raises(ParseError):
        load_config(path)


def test_task_override_resolves_presets(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('[experiment]\ntask = "progression"\n')
    assert load_config(path, task="mortality").lambda_pred == 6.0
    assert load_config("smoke", task="los").task == "los"


def test_hash_changes_with_content():
    a = ExperimentConfig()
    assert a.hash() == ExperimentConfig().hash()
    assert a.hash() != a.replace(learning_rate=1e-4).hash()
    assert len(ABLATIONS) == 8


def test_json_round_trip_keeps_hash():
    import json
    for preset in ("micro", "desk", "smoke"):
        for task in ("progression", "mortality", "los"):
            cfg = load_config(preset, task)
            back = from_dict(json.loads(json.dumps(cfg.to_dict())))
            assert back == cfg and back.hash() == cfg.hash()
