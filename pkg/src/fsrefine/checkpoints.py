"""Versioned checkpoint containers and weight checksums.

Every artifact (backbone, fusion stages, resumable training state) is a
torch-serialized dict with a self-describing header: format tag, container
version, and a kind string. Payloads hold only tensors and plain Python
values so files load under torch's weights_only regime.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

import torch

FORMAT_TAG = "fsrefine-checkpoint"
VERSION = 1


def state_checksum(module: torch.nn.Module) -> str:
    """sha256 over parameter/buffer names and bytes, order-independent of
    construction details. Used to prove frozen stages never move."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path, kind: str, payload: dict) -> None:
    """Write a container. payload must be plain values and tensors."""
    record = {"format": FORMAT_TAG, "version": VERSION, "kind": kind}
    overlap = set(record) & set(payload)
    if overlap:
        raise ValueError(f"payload shadows header fields {sorted(overlap)}")
    record.update(payload)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # write-then-rename: a crash mid-write must never leave a partial
    # container under the final name, or resume would load garbage
    tmp = path.with_name(path.name + ".tmp")
    torch.save(record, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, expect_kind: str | None = None) -> dict:
    """Read and validate a container header; returns the full record.

    Raises:
        ValueError: wrong format tag, unsupported version, or kind mismatch.
    """
    record = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(record, dict) or record.get("format") != FORMAT_TAG:
        raise ValueError(f"{path} is not a {FORMAT_TAG} container")
    if record.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported container version {record.get('version')}")
    if expect_kind is not None and record.get("kind") != expect_kind:
        raise ValueError(f"{path}: expected kind {expect_kind!r}, found {record.get('kind')!r}")
    return record


def save_fusion_checkpoint(
    path, net, *, stage: int, epoch: int, seed: int, cascade: dict,
    backbone_fingerprint: str,
) -> None:
    """Fusion-stage container: weights plus everything needed to rebuild the
    module and to fingerprint what it was trained against."""
    save_checkpoint(
        path,
        "fusion",
        {
            "model": net.state_dict(),
            "mid_channels": net.mid_channels,
            "scales": list(net.scales),
            "width": net.width,
            "stage": stage,
            "epoch": epoch,
            "seed": seed,
            "cascade": dict(cascade),
            "backbone_fingerprint": backbone_fingerprint,
        },
    )


def load_fusion_checkpoint(path):
    from .fusion import FusionNet

    record = load_checkpoint(path, expect_kind="fusion")
    net = FusionNet(
        mid_channels=record["mid_channels"],
        scales=tuple(record["scales"]),
        width=record["width"],
    )
    net.load_state_dict(record["model"])
    net.eval()
    return net, record


def save_backbone_checkpoint(path, backbone, meta: dict) -> None:
    """Backbone container with the seen-class manifest."""
    cfg = backbone.config
    payload = {
        "model": backbone.state_dict(),
        "widths": list(cfg.widths),
        "mid_stages": list(cfg.mid_stages),
        "high_stage": cfg.high_stage,
    }
    payload.update(meta)
    save_checkpoint(path, "backbone", payload)


def load_backbone_checkpoint(path):
    from .backbone import BackboneConfig, ToyBackbone, freeze_backbone

    record = load_checkpoint(path, expect_kind="backbone")
    cfg = BackboneConfig(
        widths=tuple(record["widths"]),
        mid_stages=tuple(record["mid_stages"]),
        high_stage=record["high_stage"],
        frozen=True,
    )
    backbone = ToyBackbone(cfg)
    backbone.load_state_dict(record["model"])
    freeze_backbone(backbone)
    return backbone, record
