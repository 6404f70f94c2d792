"""End-to-end command-line checks: each test drives the installed entry
point in a subprocess against a miniature dataset."""

import hashlib
import os
import signal
import subprocess
import sys
import time
from pathlib import Path

import pytest

CONFIG = """\
seed: 0
dataset:
  root: data
split:
  n_splits: 2
  index: 0
synth:
  n_classes: 4
  image_size: 32
  samples_per_class: 6
pretrain:
  epochs: 2
  batch_size: 8
  augment: false
cascade:
  steps: 2
  weight_mode: different
  prior_mode: augmented
train:
  epochs: 2
  batch_size: 2
  base_lr: 0.02
  fusion_width: 8
  augment: false
  val_episodes: 0
eval:
  episodes: 6
  kshot: [1]
viz:
  panels: 2
  columns: abcdef
"""


def run_cli(args, cwd, env_extra=None, check=None):
    env = dict(os.environ)
    env.pop("FSREFINE_OUT_ROOT", None)
    if env_extra:
        env.update(env_extra)
    proc = subprocess.run(
        [sys.executable, "-m", "fsrefine.cli", *args],
        cwd=cwd, env=env, capture_output=True, text=True, timeout=600,
    )
    if check is not None:
        assert proc.returncode == check, (proc.stdout, proc.stderr)
    return proc


def tree_digest(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset plus one finished training run, shared
    read-only by the tests below."""
    ws = tmp_path_factory.mktemp("cli")
    (ws / "exp.yaml").write_text(CONFIG)
    run_cli(["gen-data", "-c", "exp.yaml"], ws, check=0)
    run_cli(["train", "-c", "exp.yaml", "--out", "train0"], ws, check=0)
    return ws


def test_gen_data_layout(workspace):
    data = workspace / "data"
    manifest = (data / "manifest.tsv").read_text().splitlines()
    assert manifest[0] == "# seed: 0"
    assert manifest[1].startswith("class_id\t")
    assert len(manifest) == 2 + 4 * 6
    assert (data / "splits.txt").exists()
    assert (data / "config_snapshot.yaml").exists()
    assert (data / "0" / "s000.img").exists()
    assert not (workspace / "data.lock").exists()


def test_gen_data_refuses_then_force_reproduces(workspace):
    proc = run_cli(["gen-data", "-c", "exp.yaml"], workspace, check=1)
    assert "not empty" in proc.stderr

    before = tree_digest(workspace / "data")
    run_cli(["gen-data", "-c", "exp.yaml", "--force"], workspace, check=0)
    assert tree_digest(workspace / "data") == before


def test_bad_config_exits_one(tmp_path):
    (tmp_path / "bad.yaml").write_text("cascade:\n  steps: 2\n  bogus: 1\n")
    proc = run_cli(["gen-data", "-c", "bad.yaml"], tmp_path, check=1)
    assert "config error" in proc.stderr
    assert "bogus" in proc.stderr


def test_missing_dataset_exits_two(tmp_path):
    (tmp_path / "exp.yaml").write_text(CONFIG)
    proc = run_cli(["train", "-c", "exp.yaml", "--out", "t"], tmp_path, check=2)
    assert "run gen-data first" in proc.stderr


def test_train_outputs(workspace):
    out = workspace / "train0"
    assert (out / "backbone.pt").exists()
    assert (out / "cascade_step1.pt").exists()
    assert (out / "cascade_step2.pt").exists()
    assert not (out / "cascade_step3.pt").exists()
    assert (out / "train_log.tsv").exists()
    assert (out / "loss_curve.png").stat().st_size > 0
    assert (out / "config_snapshot.yaml").exists()


def test_snapshot_refed_reproduces_training(workspace):
    from fsrefine.checkpoints import load_fusion_checkpoint, state_checksum

    snap = workspace / "train0" / "config_snapshot.yaml"
    run_cli(["train", "-c", str(snap), "--out", "train_again"], workspace, check=0)
    a, _ = load_fusion_checkpoint(workspace / "train0" / "cascade_step2.pt")
    b, _ = load_fusion_checkpoint(workspace / "train_again" / "cascade_step2.pt")
    assert state_checksum(a) == state_checksum(b)

    # wall_ms is timing noise; step, lr and loss must match exactly
    def stable_cols(d):
        rows = (d / "train_log.tsv").read_text().splitlines()
        return [r.split("\t")[:3] for r in rows]

    assert stable_cols(workspace / "train0") == stable_cols(workspace / "train_again")


def test_eval_reports_and_determinism(workspace):
    out = workspace / "eval_out"
    proc = run_cli(
        ["eval", "train0", "-c", "exp.yaml", "--out", str(out),
         "--episodes", "5", "--kshot", "1", "--kshot", "2"],
        workspace, check=0,
    )
    assert "K=1: mIoU" in proc.stdout and "K=2: mIoU" in proc.stdout
    for k in (1, 2):
        text = (out / f"report_k{k}.txt").read_text()
        assert "episodes: 5" in text
        assert f"kshot: {k}" in text
        assert "fingerprint: " in text
        assert (out / f"iou_bars_k{k}.png").stat().st_size > 0

    before = (out / "report_k1.txt").read_bytes()
    run_cli(
        ["eval", "train0", "-c", "exp.yaml", "--out", str(out),
         "--episodes", "5", "--kshot", "1", "--kshot", "2", "--force"],
        workspace, check=0,
    )
    assert (out / "report_k1.txt").read_bytes() == before


def test_eval_rejects_mismatched_cascade_config(workspace, tmp_path):
    mismatched = CONFIG.replace("steps: 2", "steps: 1")
    (tmp_path / "exp1.yaml").write_text(mismatched)
    (tmp_path / "data").symlink_to(workspace / "data")
    proc = run_cli(
        ["eval", str(workspace / "train0"), "-c", "exp1.yaml",
         "--out", str(tmp_path / "e")],
        tmp_path, check=2,
    )
    assert "fingerprint mismatch" in proc.stderr


def test_viz_panels_and_columns(workspace):
    out = workspace / "viz_out"
    run_cli(
        ["viz", "train0", "-c", "exp.yaml", "--out", str(out), "--panels", "2"],
        workspace, check=0,
    )
    idx = (out / "index.txt").read_text().splitlines()
    assert len(idx) == 2
    assert idx[0].startswith("panel_000.png\tclass=")
    from PIL import Image

    w_full = Image.open(out / "panel_000.png").size[0]
    assert w_full == 6 * 32

    before = hashlib.sha256((out / "panel_000.png").read_bytes()).hexdigest()
    run_cli(
        ["viz", "train0", "-c", "exp.yaml", "--out", str(out), "--panels", "2", "--force"],
        workspace, check=0,
    )
    assert hashlib.sha256((out / "panel_000.png").read_bytes()).hexdigest() == before

    narrow = workspace / "viz_def"
    run_cli(
        ["viz", "train0", "-c", "exp.yaml", "--out", str(narrow),
         "--panels", "1", "--columns", "d,e,f"],
        workspace, check=0,
    )
    assert Image.open(narrow / "panel_000.png").size[0] == 3 * 32


def test_lock_file_blocks_concurrent_use(workspace):
    out = workspace / "locked_out"
    lock = workspace / "locked_out.lock"
    lock.write_text("12345\n")
    try:
        proc = run_cli(
            ["viz", "train0", "-c", "exp.yaml", "--out", str(out)],
            workspace, check=2,
        )
        assert "locked by another run" in proc.stderr
    finally:
        lock.unlink()


def test_env_var_out_root(workspace, tmp_path):
    env_root = tmp_path / "env_runs"
    run_cli(
        ["pretrain-backbone", "-c", "exp.yaml"],
        workspace, env_extra={"FSREFINE_OUT_ROOT": str(env_root)}, check=0,
    )
    assert (env_root / "backbone_split0" / "backbone.pt").exists()


def test_kill_and_resume_matches_final_loss(workspace, tmp_path):
    cfg4 = CONFIG.replace("epochs: 2\n  batch_size: 2", "epochs: 4\n  batch_size: 2")
    (tmp_path / "exp4.yaml").write_text(cfg4)
    (tmp_path / "data").symlink_to(workspace / "data")

    ref = tmp_path / "ref"
    run_cli(["train", "-c", "exp4.yaml", "--out", str(ref)], tmp_path, check=0)

    out = tmp_path / "victim"
    env = dict(os.environ)
    env.pop("FSREFINE_OUT_ROOT", None)
    proc = subprocess.Popen(
        [sys.executable, "-m", "fsrefine.cli", "train", "-c", "exp4.yaml",
         "--out", str(out)],
        cwd=tmp_path, env=env,
        stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
    )
    first_epoch = out / "state" / "stage1" / "epoch_0000.pt"
    deadline = time.time() + 120
    while time.time() < deadline and not first_epoch.exists():
        time.sleep(0.05)
        if proc.poll() is not None:
            pytest.fail("training finished before it could be interrupted")
    assert first_epoch.exists()
    proc.send_signal(signal.SIGKILL)
    proc.wait()
    (out.parent / (out.name + ".lock")).unlink(missing_ok=True)

    run_cli(["train", "-c", "exp4.yaml", "--out", str(out)], tmp_path, check=0)

    def final_loss(d):
        return float((d / "train_log.tsv").read_text().splitlines()[-1].split("\t")[2])

    assert abs(final_loss(out) - final_loss(ref)) <= 1e-6

    from fsrefine.checkpoints import load_fusion_checkpoint, state_checksum

    a, _ = load_fusion_checkpoint(ref / "cascade_step2.pt")
    b, _ = load_fusion_checkpoint(out / "cascade_step2.pt")
    assert state_checksum(a) == state_checksum(b)
