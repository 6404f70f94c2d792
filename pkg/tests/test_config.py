from pathlib import Path

import pytest

from fsrefine.config import (
    ConfigError,
    ExperimentConfig,
    from_dict,
    load_config,
    save_config,
    to_dict,
)
from fsrefine.seeding import derive_seed

EXAMPLE = Path(__file__).resolve().parents[1] / "configs" / "example.yaml"


def test_example_config_loads_and_validates():
    cfg = load_config(EXAMPLE)
    cfg.validate()
    assert cfg.n_splits == 4
    assert cfg.synth.n_classes % cfg.n_splits == 0
    assert cfg.cascade.T == 2
    assert cfg.train.crop_size is not None


def test_save_load_round_trip(tmp_path):
    cfg = load_config(EXAMPLE)
    save_config(cfg, tmp_path / "copy.yaml")
    again = load_config(tmp_path / "copy.yaml")
    assert to_dict(again) == to_dict(cfg)


def test_empty_mapping_gives_defaults():
    cfg = from_dict({})
    cfg.validate()
    assert cfg.seed == 0
    assert cfg.split_index == 0
    assert cfg.cascade.T == 2
    assert cfg.train.epochs >= 1


def test_unknown_key_names_the_field():
    with pytest.raises(ConfigError, match="cascade: unknown field"):
        from_dict({"cascade": {"steps": 2, "bogus": 1}})
    with pytest.raises(ConfigError, match="unknown field"):
        from_dict({"not_a_section": {}})


def test_type_error_names_section_and_key():
    with pytest.raises(ConfigError, match="train.epochs"):
        from_dict({"train": {"epochs": "four"}})
    with pytest.raises(ConfigError, match="seed"):
        from_dict({"seed": "abc"})


def test_validation_errors_name_constraint():
    with pytest.raises(ConfigError, match="split.index"):
        from_dict({"split": {"n_splits": 4, "index": 9}})
    with pytest.raises(ConfigError, match="does not divide"):
        from_dict({"synth": {"n_classes": 10}, "split": {"n_splits": 4}})


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "nope.yaml")


def test_malformed_yaml_is_config_error(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("seed: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_seed_fanout_distinct_and_derived():
    cfg = from_dict({"seed": 17, "split": {"n_splits": 4, "index": 2}})
    seeds = {
        "synth": cfg.resolved_synth().seed,
        "pretrain": cfg.resolved_pretrain().seed,
        "train": cfg.resolved_train().seed,
        "eval1": cfg.eval_seed(1),
        "eval5": cfg.eval_seed(5),
        "viz": cfg.viz_seed(),
    }
    assert len(set(seeds.values())) == len(seeds)
    assert seeds["synth"] == derive_seed(17, "synth")
    assert seeds["pretrain"] == derive_seed(17, "pretrain", 2)
    assert seeds["train"] == derive_seed(17, "train", 2)
    assert seeds["eval1"] == derive_seed(17, "eval", 2, 1)


def test_split_index_changes_stage_seeds_but_not_dataset():
    a = from_dict({"seed": 3, "split": {"n_splits": 4, "index": 0}})
    b = from_dict({"seed": 3, "split": {"n_splits": 4, "index": 1}})
    assert a.resolved_synth().seed == b.resolved_synth().seed
    assert a.resolved_pretrain().seed != b.resolved_pretrain().seed
    assert a.resolved_train().seed != b.resolved_train().seed


def test_resolved_train_carries_cascade():
    cfg = from_dict({"cascade": {"steps": 3, "weight_mode": "identical", "prior_mode": "plain"}})
    tc = cfg.resolved_train()
    assert tc.cascade.T == 3
    assert tc.cascade.weight_mode == "identical"


def test_relative_paths_resolve_against_config_dir(tmp_path):
    sub = tmp_path / "cfgs"
    sub.mkdir()
    p = sub / "exp.yaml"
    p.write_text("dataset:\n  root: data/run1\n")
    cfg = load_config(p)
    assert cfg.resolve_path(cfg.dataset_root) == sub / "data" / "run1"
    assert cfg.resolve_path("/abs/x") == Path("/abs/x")


def test_split_plans_match_splitter():
    from fsrefine.episodes import make_splits

    cfg = from_dict({"split": {"n_splits": 4, "index": 0}})
    classes = list(range(cfg.synth.n_classes))
    assert cfg.split_plans(classes) == make_splits(classes, 4)
