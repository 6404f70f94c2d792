import math

import numpy as np
import pytest
import torch

from fsrefine.checkpoints import state_checksum
from fsrefine.prior import ProbMap
from fsrefine.refine import CascadeConfig
from fsrefine.seeding import rng_for
from fsrefine.training import (
    CE_EPS,
    TrainConfig,
    TrainingDiverged,
    TrainLog,
    cross_entropy,
    downsample_mask,
    loss_shared,
    poly_lr,
    stage_epochs,
    steps_per_epoch,
    train_sequential,
    train_shared,
)


def _pmap(plane, kind="estimate"):
    return ProbMap(data=plane[None] if plane.ndim == 2 else plane, kind=kind)


def _ce_oracle(p: np.ndarray, y: np.ndarray) -> float:
    total = 0.0
    h, w = p.shape
    for i in range(h):
        for j in range(w):
            pc = min(max(p[i, j], CE_EPS), 1.0 - CE_EPS)
            total += -(y[i, j] * math.log(pc) + (1.0 - y[i, j]) * math.log(1.0 - pc))
    return total / (h * w)


def test_cross_entropy_matches_pixel_loop():
    rng = rng_for(0, "ce-oracle")
    for _ in range(20):
        h = int(rng.integers(2, 7))
        w = int(rng.integers(2, 7))
        p = rng.uniform(0, 1, (h, w))
        y = (rng.uniform(0, 1, (h, w)) > 0.5).astype(np.float64)
        got = cross_entropy(
            _pmap(torch.from_numpy(p)), torch.from_numpy(y)
        ).item()
        assert abs(got - _ce_oracle(p, y)) < 1e-7


def test_cross_entropy_perfect_prediction_near_zero():
    y = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    loss = cross_entropy(_pmap(y.double()), y).item()
    # clamped at 1e-7, so the floor is -log(1 - 1e-7)
    assert loss < 1.01e-7


def test_cross_entropy_half_is_log_two():
    y = torch.tensor([[1.0, 0.0], [0.0, 1.0]]).double()
    p = torch.full((2, 2), 0.5).double()
    assert abs(cross_entropy(_pmap(p), y).item() - math.log(2.0)) < 1e-7


def test_cross_entropy_downsamples_ground_truth_nearest():
    rng = rng_for(1, "ce-down")
    p = torch.from_numpy(rng.uniform(0, 1, (4, 4)))
    y = torch.from_numpy((rng.uniform(0, 1, (8, 8)) > 0.5).astype(np.float64))
    via_full = cross_entropy(_pmap(p), y).item()
    via_down = cross_entropy(_pmap(p), downsample_mask(y, (4, 4))).item()
    assert abs(via_full - via_down) < 1e-12


def test_cross_entropy_rejects_smaller_ground_truth():
    with pytest.raises(ValueError, match="smaller than estimate grid"):
        cross_entropy(_pmap(torch.rand(8, 8)), torch.zeros(4, 4))


def test_downsample_mask_nearest_values():
    y = torch.tensor([
        [1.0, 1.0, 0.0, 0.0],
        [1.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 1.0],
        [0.0, 0.0, 1.0, 1.0],
    ])
    out = downsample_mask(y, (2, 2))
    assert out.tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_loss_shared_mean_of_steps():
    rng = rng_for(2, "shared")
    y = torch.from_numpy((rng.uniform(0, 1, (4, 4)) > 0.5).astype(np.float64))
    ests = [_pmap(torch.from_numpy(rng.uniform(0, 1, (4, 4)))) for _ in range(3)]
    total = sum(cross_entropy(p, y).item() for p in ests)
    assert abs(loss_shared(ests, y).item() - total / 3.0) < 1e-7

    single = loss_shared([ests[0]], y).item()
    assert abs(single - cross_entropy(ests[0], y).item()) < 1e-12

    same = loss_shared([ests[1], ests[1]], y).item()
    assert abs(same - cross_entropy(ests[1], y).item()) < 1e-9


def test_loss_shared_rejects_empty():
    with pytest.raises(ValueError, match="at least one"):
        loss_shared([], torch.zeros(2, 2))


def test_loss_shared_gradient_matches_finite_differences():
    rng = rng_for(3, "shared-fd")
    y = torch.from_numpy((rng.uniform(0, 1, (3, 3)) > 0.5).astype(np.float64))
    raw = torch.from_numpy(rng.uniform(0.1, 0.9, (2, 3, 3))).requires_grad_(True)

    def compute():
        ests = [_pmap(raw[i]) for i in range(2)]
        return loss_shared(ests, y)

    loss = compute()
    loss.backward()
    eps = 1e-6
    for idx in [(0, 0, 0), (0, 2, 1), (1, 1, 1), (1, 2, 2)]:
        with torch.no_grad():
            orig = raw[idx].item()
            raw[idx] = orig + eps
            up = compute().item()
            raw[idx] = orig - eps
            down = compute().item()
            raw[idx] = orig
        fd = (up - down) / (2 * eps)
        an = raw.grad[idx].item()
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-3


def test_poly_lr_endpoints_and_midpoint():
    assert poly_lr(0, 100, 0.0025, 0.9) == 0.0025
    assert poly_lr(100, 100, 0.0025, 0.9) == 0.0
    mid = poly_lr(50, 100, 0.0025, 0.9)
    expected = 0.0025 * 0.5**0.9
    assert abs(mid - expected) / expected < 1e-12
    with pytest.raises(ValueError, match="outside"):
        poly_lr(101, 100, 0.0025, 0.9)
    with pytest.raises(ValueError, match="outside"):
        poly_lr(-1, 100, 0.0025, 0.9)


def test_sgd_step_matches_hand_rolled_update():
    # plain gradient descent on a 2-parameter quadratic, momentum 0, decay 0
    w = torch.tensor([1.5, -2.0], requires_grad=True)
    opt = torch.optim.SGD([w], lr=0.1, momentum=0.0, weight_decay=0.0)
    hand = np.array([1.5, -2.0])
    for _ in range(5):
        opt.zero_grad()
        loss = (w * w).sum()
        loss.backward()
        opt.step()
        hand = hand - 0.1 * (2.0 * hand)
    assert np.allclose(w.detach().numpy(), hand, atol=1e-7)


def test_weight_decay_scales_by_one_minus_lr_decay():
    # zero gradient: one step multiplies weights by exactly (1 - lr*decay)
    # with power-of-two values the float arithmetic is exact
    lr, decay = 0.25, 0.5
    w = torch.tensor([2.0, -4.0, 8.0], requires_grad=True)
    opt = torch.optim.SGD([w], lr=lr, momentum=0.0, weight_decay=decay)
    opt.zero_grad()
    w.grad = torch.zeros_like(w)
    opt.step()
    expected = torch.tensor([2.0, -4.0, 8.0]) * (1.0 - lr * decay)
    assert torch.equal(w.detach(), expected)


def test_stage_epochs_split():
    assert stage_epochs(5, 2) == [3, 2]
    assert stage_epochs(4, 2) == [2, 2]
    assert stage_epochs(7, 3) == [3, 2, 2]
    with pytest.raises(ValueError, match="cannot cover"):
        stage_epochs(1, 2)


def test_steps_per_epoch_floor(tiny_dataset, tiny_split):
    n = sum(tiny_dataset.count(c) for c in tiny_split.train_classes)
    assert steps_per_epoch(tiny_dataset, tiny_split, 4) == n // 4
    assert steps_per_epoch(tiny_dataset, tiny_split, 10**6) == 1


def test_train_config_validation():
    with pytest.raises(ValueError, match="positive"):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ValueError, match="base_lr"):
        TrainConfig(base_lr=-0.1).validate()
    TrainConfig(base_lr=0.0).validate()
    with pytest.raises(ValueError, match="momentum"):
        TrainConfig(momentum=1.0).validate()


def _quick_cfg(**kw):
    base = dict(
        epochs=2, batch_size=2, base_lr=0.02, kshot=1, fusion_width=8,
        augment=False, val_episodes=0,
        cascade=CascadeConfig(T=1, weight_mode="identical", prior_mode="plain"),
    )
    base.update(kw)
    return TrainConfig(**base)


def test_zero_lr_leaves_weights_unchanged(tiny_dataset, tiny_split, small_backbone):
    cfg = _quick_cfg(base_lr=0.0, momentum=0.0, weight_decay=0.0, epochs=1, seed=11)
    net, log = train_shared(cfg, tiny_dataset, tiny_split, small_backbone)
    from fsrefine.fusion import FusionNet
    from fsrefine.seeding import torch_generator

    fresh = FusionNet(
        mid_channels=small_backbone.config.mid_channels,
        scales=net.scales,
        width=cfg.fusion_width,
        generator=torch_generator(cfg.seed, "fusion", 1),
    )
    assert state_checksum(net) == state_checksum(fresh)
    assert len(log.steps) == steps_per_epoch(tiny_dataset, tiny_split, cfg.batch_size)


def test_training_repeatable_same_seed(tiny_dataset, tiny_split, small_backbone):
    cfg = _quick_cfg(seed=21)
    _, log_a = train_shared(cfg, tiny_dataset, tiny_split, small_backbone)
    net_b, log_b = train_shared(cfg, tiny_dataset, tiny_split, small_backbone)
    assert len(log_a.steps) == len(log_b.steps)
    for a, b in zip(log_a.losses(), log_b.losses()):
        assert abs(a - b) <= 1e-6
    net_c, _ = train_shared(cfg, tiny_dataset, tiny_split, small_backbone)
    assert state_checksum(net_b) == state_checksum(net_c)


def test_divergence_restores_last_good(tiny_dataset, tiny_split, small_backbone, monkeypatch):
    cfg = _quick_cfg(seed=31, epochs=2)
    import fsrefine.training as tr

    real = tr._episode_loss
    calls = {"n": 0}
    spe = steps_per_epoch(tiny_dataset, tiny_split, cfg.batch_size)
    poison_at = (spe + 1) * cfg.batch_size  # first batch of epoch 1

    def wrapped(backbone, nets, episode, cfg_, step_cfg):
        calls["n"] += 1
        if calls["n"] > poison_at:
            return torch.tensor(float("nan"), requires_grad=True)
        return real(backbone, nets, episode, cfg_, step_cfg)

    monkeypatch.setattr(tr, "_episode_loss", wrapped)
    with pytest.raises(TrainingDiverged) as err:
        train_shared(cfg, tiny_dataset, tiny_split, small_backbone)
    # log holds exactly the steps that completed before the bad batch
    assert len(err.value.log.steps) >= spe
    assert all(np.isfinite(l) for l in err.value.log.losses())


def test_sequential_frozen_stage_matches_t1_run(tiny_dataset, tiny_split, small_backbone):
    # stage 1 of a T=2 sequential run is the same computation as a T=1 run:
    # same init stream, same episode stream, same step count
    seq_cfg = TrainConfig(
        epochs=2, batch_size=2, base_lr=0.02, fusion_width=8, augment=False,
        cascade=CascadeConfig(T=2, weight_mode="different", prior_mode="augmented"),
        seed=41,
    )
    t1_cfg = TrainConfig(
        epochs=1, batch_size=2, base_lr=0.02, fusion_width=8, augment=False,
        cascade=CascadeConfig(T=1, weight_mode="different", prior_mode="augmented"),
        seed=41,
    )
    nets, _ = train_sequential(seq_cfg, tiny_dataset, tiny_split, small_backbone)
    net1, _ = train_sequential(t1_cfg, tiny_dataset, tiny_split, small_backbone)
    assert len(nets) == 2
    assert state_checksum(nets[0]) == state_checksum(net1[0])


def test_sequential_freezes_earlier_stage(tiny_dataset, tiny_split, small_backbone, tmp_path):
    cfg = TrainConfig(
        epochs=2, batch_size=2, base_lr=0.02, fusion_width=8, augment=False,
        cascade=CascadeConfig(T=2, weight_mode="different", prior_mode="augmented"),
        seed=51,
    )
    out = tmp_path / "run"
    nets, log = train_sequential(cfg, tiny_dataset, tiny_split, small_backbone, out_dir=out)
    from fsrefine.checkpoints import load_fusion_checkpoint

    stage1_after_stage1, _ = load_fusion_checkpoint(out / "cascade_step1.pt")
    # the live stage-1 net after the whole run equals its checkpoint: stage 2
    # training never moved it
    assert state_checksum(nets[0]) == state_checksum(stage1_after_stage1)
    assert not any(p.requires_grad for p in nets[0].parameters())
    assert (out / "cascade_step2.pt").exists()
    assert (out / "train_log.tsv").exists()


def test_resume_after_interruption_matches_uninterrupted(
    tiny_dataset, tiny_split, small_backbone, tmp_path, monkeypatch
):
    cfg = _quick_cfg(seed=61, epochs=3)
    ref_net, ref_log = train_shared(
        cfg, tiny_dataset, tiny_split, small_backbone, out_dir=tmp_path / "ref"
    )

    import fsrefine.training as tr

    real_save = tr._EpochRunner._save_epoch

    def crashing(self, opt, epoch):
        real_save(self, opt, epoch)
        if epoch == 0:
            raise KeyboardInterrupt

    out = tmp_path / "resumed"
    monkeypatch.setattr(tr._EpochRunner, "_save_epoch", crashing)
    with pytest.raises(KeyboardInterrupt):
        train_shared(cfg, tiny_dataset, tiny_split, small_backbone, out_dir=out)
    monkeypatch.setattr(tr._EpochRunner, "_save_epoch", real_save)

    net, log = train_shared(
        cfg, tiny_dataset, tiny_split, small_backbone, out_dir=out, resume=True
    )
    assert state_checksum(net) == state_checksum(ref_net)
    assert len(log.steps) == len(ref_log.steps)
    for a, b in zip(log.losses(), ref_log.losses()):
        assert abs(a - b) <= 1e-6


def test_train_log_append_invariants():
    log = TrainLog()
    log.append(0, 0.1, 1.0, 5.0)
    with pytest.raises(ValueError, match="not after"):
        log.append(0, 0.1, 0.9, 5.0)
    with pytest.raises(ValueError, match="non-finite"):
        log.append(1, 0.1, float("inf"), 5.0)


def test_train_log_round_trip(tmp_path):
    log = TrainLog()
    for i in range(5):
        log.append(i, 0.1 * (5 - i), 1.0 / (i + 1), 3.25)
    log.val_miou.append((0, 0.5))
    log.save(tmp_path / "train_log.tsv")
    loaded = TrainLog.load(tmp_path / "train_log.tsv")
    assert [r.step for r in loaded.steps] == [0, 1, 2, 3, 4]
    # records carry 10 significant digits
    for a, b in zip(log.steps, loaded.steps):
        assert abs(a.lr - b.lr) <= 1e-9 * max(1.0, abs(a.lr))
        assert abs(a.loss - b.loss) <= 1e-9 * max(1.0, abs(a.loss))
    assert loaded.val_miou == [(0, 0.5)]


def test_wrong_weight_mode_rejected(tiny_dataset, tiny_split, small_backbone):
    with pytest.raises(ValueError, match="identical"):
        train_shared(
            _quick_cfg(cascade=CascadeConfig(T=1, weight_mode="different", prior_mode="plain")),
            tiny_dataset, tiny_split, small_backbone,
        )
    with pytest.raises(ValueError, match="different"):
        train_sequential(
            _quick_cfg(cascade=CascadeConfig(T=1, weight_mode="identical", prior_mode="plain")),
            tiny_dataset, tiny_split, small_backbone,
        )
