"""Checkpoints: a JSON manifest next to a raw little-endian float64 blob."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .policy import AttentionPolicy, PolicyConfig

FORMAT = "qvrp-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.f64"


class CheckpointError(RuntimeError):
    """Checkpoint missing, corrupt, or incompatible with the request."""


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, policy: AttentionPolicy, *, clip: float, n_nodes: int, n_trucks: int,
                    extra: dict | None = None) -> Path:
    """Write ``path/manifest.json`` and ``path/tensors.f64``; returns ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in policy.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f8", copy=False).ravel()
        entries.append(dict(name=name, shape=list(t.shape), dtype=str(t.dtype).replace("torch.", ""),
                            offset=offset, count=int(arr.size)))
        chunks.append(arr)
        offset += arr.size
    blob = np.concatenate(chunks).astype("<f8").tobytes() if chunks else b""
    cfg = dataclasses.asdict(policy.cfg)
    manifest = dict(
        format=FORMAT,
        version=VERSION,
        policy_config=cfg,
        config_hash=config_hash(cfg),
        clip=float(clip),
        n_nodes=int(n_nodes),
        n_trucks=int(n_trucks),
        blob=BLOB,
        blob_sha256=hashlib.sha256(blob).hexdigest(),
        tensors=entries,
        extra=extra or {},
    )
    (out / BLOB).write_bytes(blob)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_checkpoint(path: str | Path) -> tuple[AttentionPolicy, dict]:
    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
        blob = (root / manifest.get("blob", BLOB)).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint at {root}: {exc}") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r} "
                              f"version {manifest.get('version')!r}")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError("tensor blob does not match its manifest checksum")
    if config_hash(manifest["policy_config"]) != manifest["config_hash"]:
        raise CheckpointError("policy config does not match its hash")
    try:
        policy = AttentionPolicy(PolicyConfig(**manifest["policy_config"]))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid policy config in checkpoint: {exc}") from exc
    flat = np.frombuffer(blob, dtype="<f8")
    expected = policy.state_dict()
    if {e["name"] for e in manifest["tensors"]} != set(expected):
        raise CheckpointError("checkpoint tensors do not match the model layout")
    state = {}
    for e in manifest["tensors"]:
        ref = expected[e["name"]]
        if list(ref.shape) != e["shape"]:
            raise CheckpointError(f"tensor {e['name']} has shape {e['shape']}, model expects {list(ref.shape)}")
        arr = flat[e["offset"]: e["offset"] + e["count"]].reshape(e["shape"])
        state[e["name"]] = torch.as_tensor(arr.copy()).to(ref.dtype)
    policy.load_state_dict(state)
    policy.eval()
    return policy, manifest
