"""Flat binary checkpoints: one little-endian float32 file per tensor plus a JSON manifest."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch


def config_hash(config: dict) -> str:
    """Hash of a JSON-serialisable mapping, stable under key reordering."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_module(module: torch.nn.Module, out_dir: str | Path, **manifest) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        fname = f"{name}.bin"
        arr.tofile(out_dir / fname)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "file": fname})
    manifest = dict(manifest, tensors=entries)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def read_manifest(ckpt_dir: str | Path) -> dict:
    path = Path(ckpt_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {ckpt_dir}")
    return json.loads(path.read_text())


def load_module(module: torch.nn.Module, ckpt_dir: str | Path) -> dict:
    """Fill ``module`` from ``ckpt_dir``; shapes are validated against the manifest."""
    ckpt_dir = Path(ckpt_dir)
    manifest = read_manifest(ckpt_dir)
    own = module.state_dict()
    listed = {e["name"]: e for e in manifest["tensors"]}
    if set(listed) != set(own):
        missing, extra = set(own) - set(listed), set(listed) - set(own)
        raise ValueError(f"checkpoint tensors differ: missing={sorted(missing)} extra={sorted(extra)}")
    state = {}
    for name, e in listed.items():
        if list(own[name].shape) != e["shape"]:
            raise ValueError(f"{name}: manifest shape {e['shape']} != model shape {list(own[name].shape)}")
        arr = np.fromfile(ckpt_dir / e["file"], dtype="<f4")
        if arr.size != int(np.prod(e["shape"], dtype=np.int64)):
            raise ValueError(f"{name}: file size does not match manifest shape")
        state[name] = torch.from_numpy(arr.reshape(e["shape"])).to(own[name].dtype)
    module.load_state_dict(state)
    return manifest
