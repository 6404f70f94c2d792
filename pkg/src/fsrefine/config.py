"""Experiment configuration.

One YAML document with nested sections mirroring the module configs. A single
root seed is fanned out deterministically to the data, pretraining, training,
and evaluation streams; no section carries its own seed. Parsing is strict:
unknown keys and type mismatches raise ConfigError naming the field and the
constraint, and a loaded config round-trips through save_config losslessly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .episodes import SynthConfig, make_splits
from .pretrain import PretrainConfig
from .refine import CascadeConfig
from .seeding import derive_seed
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration file content."""


def _require_dict(value, name):
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(value).__name__}")
    return dict(value)


def _no_extras(section: dict, name: str, allowed) -> None:
    extras = sorted(set(section) - set(allowed))
    if extras:
        raise ConfigError(f"{name}: unknown field(s) {extras}")


def _get(section, name, key, check, describe, default):
    if key not in section:
        return default
    value = section[key]
    if not check(value):
        raise ConfigError(f"{name}.{key}: expected {describe}, got {value!r}")
    return value


def _int(s, n, k, d):
    return _get(s, n, k, lambda v: isinstance(v, int) and not isinstance(v, bool), "an integer", d)


def _num(s, n, k, d):
    v = _get(s, n, k, lambda v: isinstance(v, (int, float)) and not isinstance(v, bool), "a number", d)
    return float(v) if v is not None else None


def _bool(s, n, k, d):
    return _get(s, n, k, lambda v: isinstance(v, bool), "a boolean", d)


def _str(s, n, k, d):
    return _get(s, n, k, lambda v: isinstance(v, str), "a string", d)


def _opt_int(s, n, k, d):
    return _get(
        s, n, k,
        lambda v: v is None or (isinstance(v, int) and not isinstance(v, bool)),
        "an integer or null", d,
    )


def _int_list(s, n, k, d):
    v = _get(
        s, n, k,
        lambda v: isinstance(v, list) and v
        and all(isinstance(x, int) and not isinstance(x, bool) for x in v),
        "a non-empty list of integers", d,
    )
    return tuple(v) if isinstance(v, list) else v


def _opt_int_list(s, n, k, d):
    v = _get(
        s, n, k,
        lambda v: v is None or (
            isinstance(v, list) and v
            and all(isinstance(x, int) and not isinstance(x, bool) for x in v)
        ),
        "a list of integers or null", d,
    )
    return tuple(v) if isinstance(v, list) else v


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_root: str | None = None
    dataset_root: str = "data/synthetic"
    n_splits: int = 4
    split_index: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_episodes: int = 200
    eval_kshot: tuple[int, ...] = (1,)
    viz_panels: int = 4
    viz_columns: str = "abcdef"
    config_dir: str | None = field(default=None, compare=False)

    def validate(self) -> None:
        if self.n_splits < 1:
            raise ConfigError(f"split.n_splits: must be >= 1, got {self.n_splits}")
        if not (0 <= self.split_index < self.n_splits):
            raise ConfigError(
                f"split.index: must lie in [0, {self.n_splits}), got {self.split_index}"
            )
        if self.synth.n_classes % self.n_splits != 0:
            raise ConfigError(
                f"split.n_splits: {self.n_splits} does not divide "
                f"synth.n_classes={self.synth.n_classes}"
            )
        if self.eval_episodes < 1:
            raise ConfigError(f"eval.episodes: must be >= 1, got {self.eval_episodes}")
        if not self.eval_kshot or any(k < 1 for k in self.eval_kshot):
            raise ConfigError(f"eval.kshot: entries must be >= 1, got {list(self.eval_kshot)}")
        if self.viz_panels < 1:
            raise ConfigError(f"viz.panels: must be >= 1, got {self.viz_panels}")
        for name, sub in (
            ("synth", self.synth), ("backbone", self.backbone),
            ("pretrain", self.pretrain), ("cascade", self.cascade),
            ("train", self.train),
        ):
            try:
                sub.validate()
            except ValueError as e:
                raise ConfigError(f"{name}: {e}") from e

    # seed fan-out: one root seed, derived streams per purpose

    def resolved_synth(self) -> SynthConfig:
        return replace(self.synth, seed=derive_seed(self.seed, "synth"))

    def resolved_pretrain(self) -> PretrainConfig:
        return replace(self.pretrain, seed=derive_seed(self.seed, "pretrain", self.split_index))

    def resolved_train(self) -> TrainConfig:
        return replace(
            self.train,
            seed=derive_seed(self.seed, "train", self.split_index),
            cascade=self.cascade,
        )

    def eval_seed(self, kshot: int) -> int:
        return derive_seed(self.seed, "eval", self.split_index, kshot)

    def viz_seed(self) -> int:
        return derive_seed(self.seed, "viz", self.split_index)

    def split_plans(self, class_ids):
        return make_splits(class_ids, self.n_splits)

    def resolve_path(self, p) -> Path:
        """Relative paths are taken against the config file's directory."""
        p = Path(p)
        if p.is_absolute() or self.config_dir is None:
            return p
        return Path(self.config_dir) / p


def from_dict(raw: dict, config_dir: str | None = None) -> ExperimentConfig:
    raw = _require_dict(raw, "config")
    _no_extras(
        raw, "config",
        ["seed", "out_root", "dataset", "split", "synth", "backbone",
         "pretrain", "cascade", "train", "eval", "viz"],
    )
    d = ExperimentConfig()

    seed = _int(raw, "config", "seed", d.seed)
    out_root = _get(
        raw, "config", "out_root",
        lambda v: v is None or isinstance(v, str), "a string or null", d.out_root,
    )

    sec = _require_dict(raw.get("dataset"), "dataset")
    _no_extras(sec, "dataset", ["root"])
    dataset_root = _str(sec, "dataset", "root", d.dataset_root)

    sec = _require_dict(raw.get("split"), "split")
    _no_extras(sec, "split", ["n_splits", "index"])
    n_splits = _int(sec, "split", "n_splits", d.n_splits)
    split_index = _int(sec, "split", "index", d.split_index)

    sec = _require_dict(raw.get("synth"), "synth")
    _no_extras(sec, "synth", ["n_classes", "image_size", "samples_per_class", "noise_level"])
    synth = SynthConfig(
        n_classes=_int(sec, "synth", "n_classes", d.synth.n_classes),
        image_size=_int(sec, "synth", "image_size", d.synth.image_size),
        samples_per_class=_int(sec, "synth", "samples_per_class", d.synth.samples_per_class),
        noise_level=_num(sec, "synth", "noise_level", d.synth.noise_level),
        seed=0,
    )

    sec = _require_dict(raw.get("backbone"), "backbone")
    _no_extras(sec, "backbone", ["widths", "mid_stages", "high_stage"])
    bb = BackboneConfig(
        widths=_int_list(sec, "backbone", "widths", d.backbone.widths),
        mid_stages=_int_list(sec, "backbone", "mid_stages", d.backbone.mid_stages),
        high_stage=_int(sec, "backbone", "high_stage", d.backbone.high_stage),
        frozen=True,
    )

    sec = _require_dict(raw.get("pretrain"), "pretrain")
    _no_extras(
        sec, "pretrain",
        ["epochs", "batch_size", "lr", "weight_decay", "holdout_fraction",
         "augment", "max_rotation_deg"],
    )
    pre = PretrainConfig(
        epochs=_int(sec, "pretrain", "epochs", d.pretrain.epochs),
        batch_size=_int(sec, "pretrain", "batch_size", d.pretrain.batch_size),
        lr=_num(sec, "pretrain", "lr", d.pretrain.lr),
        weight_decay=_num(sec, "pretrain", "weight_decay", d.pretrain.weight_decay),
        holdout_fraction=_num(sec, "pretrain", "holdout_fraction", d.pretrain.holdout_fraction),
        augment=_bool(sec, "pretrain", "augment", d.pretrain.augment),
        max_rotation_deg=_num(sec, "pretrain", "max_rotation_deg", d.pretrain.max_rotation_deg),
        seed=0,
    )

    sec = _require_dict(raw.get("cascade"), "cascade")
    _no_extras(sec, "cascade", ["steps", "weight_mode", "prior_mode", "threshold"])
    cascade = CascadeConfig(
        T=_int(sec, "cascade", "steps", d.cascade.T),
        weight_mode=_str(sec, "cascade", "weight_mode", d.cascade.weight_mode),
        prior_mode=_str(sec, "cascade", "prior_mode", d.cascade.prior_mode),
        threshold=_num(sec, "cascade", "threshold", d.cascade.threshold),
    )

    sec = _require_dict(raw.get("train"), "train")
    _no_extras(
        sec, "train",
        ["epochs", "batch_size", "base_lr", "momentum", "weight_decay", "poly_power",
         "kshot", "fusion_width", "fusion_scales", "augment", "crop_size",
         "max_rotation_deg", "val_episodes", "detach_between_steps", "single_thread"],
    )
    train = TrainConfig(
        epochs=_int(sec, "train", "epochs", d.train.epochs),
        batch_size=_int(sec, "train", "batch_size", d.train.batch_size),
        base_lr=_num(sec, "train", "base_lr", d.train.base_lr),
        momentum=_num(sec, "train", "momentum", d.train.momentum),
        weight_decay=_num(sec, "train", "weight_decay", d.train.weight_decay),
        poly_power=_num(sec, "train", "poly_power", d.train.poly_power),
        kshot=_int(sec, "train", "kshot", d.train.kshot),
        fusion_width=_int(sec, "train", "fusion_width", d.train.fusion_width),
        fusion_scales=_opt_int_list(sec, "train", "fusion_scales", d.train.fusion_scales),
        augment=_bool(sec, "train", "augment", d.train.augment),
        crop_size=_opt_int(sec, "train", "crop_size", d.train.crop_size),
        max_rotation_deg=_num(sec, "train", "max_rotation_deg", d.train.max_rotation_deg),
        val_episodes=_int(sec, "train", "val_episodes", d.train.val_episodes),
        detach_between_steps=_bool(sec, "train", "detach_between_steps", d.train.detach_between_steps),
        single_thread=_bool(sec, "train", "single_thread", d.train.single_thread),
        seed=0,
        cascade=cascade,
    )

    sec = _require_dict(raw.get("eval"), "eval")
    _no_extras(sec, "eval", ["episodes", "kshot"])
    eval_episodes = _int(sec, "eval", "episodes", d.eval_episodes)
    eval_kshot = _int_list(sec, "eval", "kshot", d.eval_kshot)

    sec = _require_dict(raw.get("viz"), "viz")
    _no_extras(sec, "viz", ["panels", "columns"])
    viz_panels = _int(sec, "viz", "panels", d.viz_panels)
    viz_columns = _str(sec, "viz", "columns", d.viz_columns)

    cfg = ExperimentConfig(
        seed=seed, out_root=out_root, dataset_root=dataset_root,
        n_splits=n_splits, split_index=split_index,
        synth=synth, backbone=bb, pretrain=pre, cascade=cascade, train=train,
        eval_episodes=eval_episodes, eval_kshot=eval_kshot,
        viz_panels=viz_panels, viz_columns=viz_columns,
        config_dir=config_dir,
    )
    cfg.validate()
    return cfg


def to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "seed": cfg.seed,
        "out_root": cfg.out_root,
        "dataset": {"root": cfg.dataset_root},
        "split": {"n_splits": cfg.n_splits, "index": cfg.split_index},
        "synth": {
            "n_classes": cfg.synth.n_classes,
            "image_size": cfg.synth.image_size,
            "samples_per_class": cfg.synth.samples_per_class,
            "noise_level": cfg.synth.noise_level,
        },
        "backbone": {
            "widths": list(cfg.backbone.widths),
            "mid_stages": list(cfg.backbone.mid_stages),
            "high_stage": cfg.backbone.high_stage,
        },
        "pretrain": {
            "epochs": cfg.pretrain.epochs,
            "batch_size": cfg.pretrain.batch_size,
            "lr": cfg.pretrain.lr,
            "weight_decay": cfg.pretrain.weight_decay,
            "holdout_fraction": cfg.pretrain.holdout_fraction,
            "augment": cfg.pretrain.augment,
            "max_rotation_deg": cfg.pretrain.max_rotation_deg,
        },
        "cascade": {
            "steps": cfg.cascade.T,
            "weight_mode": cfg.cascade.weight_mode,
            "prior_mode": cfg.cascade.prior_mode,
            "threshold": cfg.cascade.threshold,
        },
        "train": {
            "epochs": cfg.train.epochs,
            "batch_size": cfg.train.batch_size,
            "base_lr": cfg.train.base_lr,
            "momentum": cfg.train.momentum,
            "weight_decay": cfg.train.weight_decay,
            "poly_power": cfg.train.poly_power,
            "kshot": cfg.train.kshot,
            "fusion_width": cfg.train.fusion_width,
            "fusion_scales": list(cfg.train.fusion_scales) if cfg.train.fusion_scales else None,
            "augment": cfg.train.augment,
            "crop_size": cfg.train.crop_size,
            "max_rotation_deg": cfg.train.max_rotation_deg,
            "val_episodes": cfg.train.val_episodes,
            "detach_between_steps": cfg.train.detach_between_steps,
            "single_thread": cfg.train.single_thread,
        },
        "eval": {"episodes": cfg.eval_episodes, "kshot": list(cfg.eval_kshot)},
        "viz": {"panels": cfg.viz_panels, "columns": cfg.viz_columns},
    }


def load_config(path) -> ExperimentConfig:
    """Parse and validate a YAML config file.

    Raises:
        ConfigError: unreadable file, unknown keys, or constraint violations.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    return from_dict(raw, config_dir=str(path.resolve().parent))


def save_config(cfg: ExperimentConfig, path) -> None:
    """Write the resolved config; load_config(save_config(c)) == c."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
