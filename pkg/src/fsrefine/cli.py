"""Command-line entry points.

Six commands bind the library into reproducible experiments: gen-data,
pretrain-backbone, train, eval, ablate, viz. Every command takes --config,
--seed (root-seed override), --out, and --force, writes a resolved config
snapshot sufficient to rerun it, and guards its output directory with a
sibling lock file so concurrent runs must target distinct directories.

Exit codes: 0 success, 1 config/validation error, 2 runtime failure. The
default output root comes from --out, then the config's out_root, then the
FSREFINE_OUT_ROOT environment variable, then ./runs.
"""

from __future__ import annotations

import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
import torch

from .benchmark import BenchmarkConfig, run_trend_benchmark
from .checkpoints import load_backbone_checkpoint, load_fusion_checkpoint, state_checksum
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .episodes import (
    generate_synthetic_dataset,
    load_dataset,
    sample_episode,
    save_dataset,
    save_splits,
)
from .evaluation import LeakageError, evaluate_split, report_fingerprint
from .pretrain import pretrain_backbone, save_pretrained
from .refine import run_episode
from .seeding import configure_determinism
from .training import cascade_to_dict, train_sequential, train_shared
from .viz import plot_ablation, plot_class_iou, plot_loss_curve, render_panel

ENV_OUT_ROOT = "FSREFINE_OUT_ROOT"


def _fail(code: int, message: str):
    click.echo(message, err=True)
    sys.exit(code)


def _invoke(body) -> None:
    try:
        body()
    except ConfigError as e:
        _fail(1, f"config error: {e}")
    except Exception as e:
        _fail(2, f"error: {e}")


def _common(f):
    f = click.option("--force", is_flag=True, help="Replace existing outputs.")(f)
    f = click.option("--out", "out_flag", type=click.Path(), default=None,
                     help="Output directory.")(f)
    f = click.option("--seed", type=int, default=None,
                     help="Override the config's root seed.")(f)
    f = click.option("--config", "-c", "config_path", required=True,
                     type=click.Path(), help="Experiment config file.")(f)
    return f


def _load(config_path, seed) -> ExperimentConfig:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _resolve_out(cfg: ExperimentConfig, out_flag, default_name: str) -> Path:
    if out_flag is not None:
        return Path(out_flag)
    if cfg.out_root is not None:
        return cfg.resolve_path(cfg.out_root) / default_name
    env = os.environ.get(ENV_OUT_ROOT)
    if env:
        return Path(env) / default_name
    return Path("runs") / default_name


@contextmanager
def _lock(out_dir: Path):
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    lock = out_dir.parent / (out_dir.name + ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"{out_dir} is locked by another run; remove {lock} if that run is dead"
        ) from None
    os.write(fd, f"{os.getpid()}\n".encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_snapshot(cfg: ExperimentConfig, out_dir: Path, *, data_root=None) -> None:
    # pin absolute paths so the snapshot reruns from anywhere
    root = data_root if data_root is not None else cfg.resolve_path(cfg.dataset_root)
    snap = replace(
        cfg,
        dataset_root=str(Path(root).resolve()),
        out_root=str(Path(out_dir).resolve()),
    )
    save_config(snap, Path(out_dir) / "config_snapshot.yaml")


def _load_data(cfg: ExperimentConfig):
    root = cfg.resolve_path(cfg.dataset_root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist; run gen-data first")
    dataset = load_dataset(root)
    plans = cfg.split_plans(dataset.classes)
    return dataset, plans, plans[cfg.split_index]


def _fresh_dir(out: Path, force: bool) -> None:
    if force and out.is_dir():
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _check_leakage(record: dict, split) -> None:
    seen = record.get("seen_classes")
    if seen is None:
        return
    bad = sorted(set(int(c) for c in seen) & split.test_classes)
    if bad:
        raise LeakageError(
            f"backbone saw classes {bad} that belong to test split {split.split_index}"
        )


def _load_trained(train_dir: Path, cascade):
    """Backbone + cascade networks from a train output directory, with the
    checkpoint-vs-config compatibility checks."""
    bpath = train_dir / "backbone.pt"
    if not bpath.exists():
        raise FileNotFoundError(f"{bpath} not found; expected a train output directory")
    backbone, brec = load_backbone_checkpoint(bpath)
    n = 1 if cascade.weight_mode == "identical" else cascade.T
    paths = [train_dir / f"cascade_step{t}.pt" for t in range(1, n + 1)]
    nets = []
    fp = state_checksum(backbone)
    want = cascade_to_dict(cascade)
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"checkpoint {p} not found")
        net, rec = load_fusion_checkpoint(p)
        if rec["backbone_fingerprint"] != fp:
            raise RuntimeError(
                f"{p.name} was trained against a different backbone (fingerprint mismatch)"
            )
        if rec["cascade"] != want:
            raise RuntimeError(
                f"{p.name} was trained with cascade {rec['cascade']}, config asks for "
                f"{want} (fingerprint mismatch)"
            )
        nets.append(net)
    return backbone, brec, nets, paths


@click.group()
def main():
    """Few-shot segmentation with iterative prior refinement."""


@main.command("gen-data")
@_common
def cmd_gen_data(config_path, seed, out_flag, force):
    """Generate the synthetic dataset, split list, and manifest."""

    def body():
        cfg = _load(config_path, seed)
        root = Path(out_flag) if out_flag else cfg.resolve_path(cfg.dataset_root)
        if root.is_dir() and any(root.iterdir()) and not force:
            raise ConfigError(
                f"dataset directory {root} is not empty (pass --force to replace it)"
            )
        with _lock(root):
            dataset = generate_synthetic_dataset(cfg.resolved_synth())
            save_dataset(dataset, root, force=force)
            save_splits(cfg.split_plans(dataset.classes), root / "splits.txt")
            lines = [f"# seed: {cfg.seed}", "class_id\tsample_id\timg\tmask"]
            lines += [
                f"{s.class_id}\t{s.sample_id}\t{s.class_id}/{s.sample_id}.img"
                f"\t{s.class_id}/{s.sample_id}.mask"
                for s in dataset
            ]
            (root / "manifest.tsv").write_text("\n".join(lines) + "\n")
            _write_snapshot(cfg, root, data_root=root)
        click.echo(
            f"wrote {len(dataset)} samples across {len(dataset.classes)} classes to {root}"
        )

    _invoke(body)


@main.command("pretrain-backbone")
@_common
def cmd_pretrain_backbone(config_path, seed, out_flag, force):
    """Pre-train the backbone as a classifier on the split's train classes."""

    def body():
        cfg = _load(config_path, seed)
        dataset, plans, split = _load_data(cfg)
        out = _resolve_out(cfg, out_flag, f"backbone_split{cfg.split_index}")
        if (out / "backbone.pt").exists() and not force:
            raise ConfigError(
                f"{out / 'backbone.pt'} already exists (pass --force to replace it)"
            )
        with _lock(out):
            _fresh_dir(out, force)
            _write_snapshot(cfg, out)
            backbone, meta = pretrain_backbone(
                dataset, split, cfg.resolved_pretrain(), cfg.backbone
            )
            save_pretrained(out / "backbone.pt", backbone, meta)
            save_splits(plans, out / "splits.txt")
        click.echo(
            f"backbone frozen; holdout accuracy {meta['holdout_accuracy']:.3f}; "
            f"saved to {out / 'backbone.pt'}"
        )

    _invoke(body)


@main.command("train")
@_common
@click.option("--backbone", "backbone_path", type=click.Path(), default=None,
              help="Pretrained backbone checkpoint (default: pretrain into the output dir).")
def cmd_train(config_path, seed, out_flag, force, backbone_path):
    """Train the refinement cascade; reruns resume from the last epoch."""

    def body():
        cfg = _load(config_path, seed)
        dataset, plans, split = _load_data(cfg)
        out = _resolve_out(cfg, out_flag, f"train_split{cfg.split_index}")
        with _lock(out):
            _fresh_dir(out, force)
            _write_snapshot(cfg, out)
            bpath = out / "backbone.pt"
            if backbone_path is not None and Path(backbone_path).resolve() != bpath.resolve():
                shutil.copy2(backbone_path, bpath)
            if bpath.exists():
                backbone, brec = load_backbone_checkpoint(bpath)
            else:
                backbone, brec = pretrain_backbone(
                    dataset, split, cfg.resolved_pretrain(), cfg.backbone
                )
                save_pretrained(bpath, backbone, brec)
            _check_leakage(brec, split)
            tc = cfg.resolved_train()
            if tc.cascade.weight_mode == "identical":
                _, log = train_shared(tc, dataset, split, backbone, out_dir=out, resume=True)
                n_ckpt = 1
            else:
                nets, log = train_sequential(
                    tc, dataset, split, backbone, out_dir=out, resume=True
                )
                n_ckpt = len(nets)
            plot_loss_curve(log, out / "loss_curve.png")
        final = log.losses()[-1] if log.steps else float("nan")
        click.echo(
            f"trained {n_ckpt} cascade stage(s); final loss {final:.4f}; outputs in {out}"
        )

    _invoke(body)


@main.command("eval")
@click.argument("train_dir", type=click.Path())
@_common
@click.option("--episodes", type=int, default=None, help="Episodes per report.")
@click.option("--kshot", "kshots", type=int, multiple=True,
              help="Support-set size; repeat for several reports.")
def cmd_eval(train_dir, config_path, seed, out_flag, force, episodes, kshots):
    """Evaluate a trained cascade on the split's held-out classes."""

    def body():
        cfg = _load(config_path, seed)
        dataset, plans, split = _load_data(cfg)
        tdir = Path(train_dir)
        out = Path(out_flag) if out_flag else tdir / "eval"
        n_episodes = episodes if episodes is not None else cfg.eval_episodes
        if n_episodes < 1:
            raise ConfigError(f"eval.episodes: must be >= 1, got {n_episodes}")
        ks = tuple(kshots) if kshots else cfg.eval_kshot
        if any(k < 1 for k in ks):
            raise ConfigError(f"eval.kshot: entries must be >= 1, got {list(ks)}")
        configure_determinism(cfg.train.single_thread)
        with _lock(out):
            _fresh_dir(out, force)
            _write_snapshot(cfg, out)
            backbone, brec, nets, paths = _load_trained(tdir, cfg.cascade)
            for k in ks:
                eval_seed = cfg.eval_seed(k)
                report = evaluate_split(
                    nets, backbone, dataset, split, n_episodes, k, eval_seed,
                    cfg.cascade,
                    fingerprint=report_fingerprint(paths, eval_seed, cfg.cascade),
                    seen_classes=brec.get("seen_classes"),
                )
                report.save(out / f"report_k{k}.txt")
                plot_class_iou(report, out / f"iou_bars_k{k}.png")
                click.echo(
                    f"K={k}: mIoU {report.miou:.4f} over {report.n_episodes} episodes "
                    f"(split {split.split_index})"
                )

    _invoke(body)


@main.command("ablate")
@_common
@click.option("--seeds", "seeds_csv", default="0,1,2,3,4", show_default=True,
              help="Comma-separated root seeds, one benchmark cell per seed and split.")
@click.option("--episodes", type=int, default=None, help="Eval episodes per cell.")
def cmd_ablate(config_path, seed, out_flag, force, seeds_csv, episodes):
    """Train and compare cascade variants over all splits and several seeds."""

    def body():
        cfg = _load(config_path, seed)
        try:
            seeds = [int(x) for x in seeds_csv.replace(" ", "").split(",") if x]
        except ValueError:
            raise ConfigError(f"--seeds: expected comma-separated integers, got {seeds_csv!r}")
        if not seeds:
            raise ConfigError("--seeds: need at least one seed")
        dataset, plans, _ = _load_data(cfg)
        out = _resolve_out(cfg, out_flag, "ablation")
        configure_determinism(cfg.train.single_thread)
        with _lock(out):
            _fresh_dir(out, force)
            _write_snapshot(cfg, out)
            bench = BenchmarkConfig(
                epochs_per_stage=max(1, cfg.train.epochs // 2),
                eval_episodes=episodes if episodes is not None else cfg.eval_episodes,
                kshot=cfg.train.kshot,
                pretrain=cfg.pretrain,
                train=cfg.train,
                backbone=cfg.backbone,
            )
            text, rows = run_trend_benchmark(dataset, plans, seeds, out, bench)
            (out / "table.txt").write_text(text + "\n")
            tsv = ["variant\tmean_miou_pct\tstd\tseeds\tabsent\tper_seed"]
            tsv += [
                f"{r.label}\t{r.mean:.4f}\t{r.std:.4f}\t{len(r.values)}\t{r.absent}"
                f"\t{','.join(f'{v:.4f}' for v in r.values)}"
                for r in rows
            ]
            (out / "table.tsv").write_text("\n".join(tsv) + "\n")
            plot_ablation(rows, out / "ablation.png")
        click.echo(text)

    _invoke(body)


@main.command("viz")
@click.argument("train_dir", type=click.Path())
@_common
@click.option("--panels", type=int, default=None, help="Number of episode panels.")
@click.option("--columns", default=None,
              help="Panel columns, a subset of 'abcdef' (commas optional).")
def cmd_viz(train_dir, config_path, seed, out_flag, force, panels, columns):
    """Render qualitative panels for test episodes of a trained cascade."""

    def body():
        cfg = _load(config_path, seed)
        dataset, plans, split = _load_data(cfg)
        tdir = Path(train_dir)
        out = Path(out_flag) if out_flag else tdir / "viz"
        n_panels = panels if panels is not None else cfg.viz_panels
        if n_panels < 1:
            raise ConfigError(f"viz.panels: must be >= 1, got {n_panels}")
        cols = "".join(ch for ch in (columns or cfg.viz_columns) if ch not in ", ")
        configure_determinism(cfg.train.single_thread)
        with _lock(out):
            _fresh_dir(out, force)
            _write_snapshot(cfg, out)
            backbone, brec, nets, _ = _load_trained(tdir, cfg.cascade)
            _check_leakage(brec, split)
            rng = np.random.default_rng(cfg.viz_seed())
            classes = sorted(split.test_classes)
            index = []
            for i in range(n_panels):
                class_id = int(classes[rng.integers(0, len(classes))])
                episode = sample_episode(dataset, class_id, cfg.train.kshot, rng)
                with torch.no_grad():
                    trace = run_episode(backbone, nets, episode, cfg.cascade)
                name = f"panel_{i:03d}.png"
                render_panel(episode, trace, out / name, columns=cols)
                index.append(
                    f"{name}\tclass={class_id}\tquery={episode.query.sample_id}"
                    f"\tsupport={','.join(s.sample_id for s in episode.support)}"
                )
            (out / "index.txt").write_text("\n".join(index) + "\n")
        click.echo(f"wrote {n_panels} panel(s) to {out}")

    _invoke(body)


if __name__ == "__main__":
    main()
