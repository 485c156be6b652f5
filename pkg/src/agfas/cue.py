"""Anomalous cues: residuals between an input and its regenerated "real" version."""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .checkpoint import config_hash
from .diffusion import DFG, forward_sample, generate, images_to_tensor

log = logging.getLogger(__name__)


@dataclass
class AnomalousCue:
    residual: np.ndarray  # H x W x C, signed
    source_id: str
    t_hat_used: int
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.residual).all():
            raise ValueError("cue residual contains non-finite values")

    @property
    def energy(self) -> float:
        return float(np.mean(self.residual ** 2))


@dataclass(frozen=True)
class CueConfig:
    t_hat: int = 80
    n_steps: int = 10
    seed: int = 0
    mask_background: bool = False
    batch_size: int = 128

    def key(self, dfg_hash: str = "") -> dict:
        return {"t_hat": self.t_hat, "n_steps": self.n_steps, "seed": self.seed,
                "mask_background": self.mask_background, "dfg": dfg_hash}


class UntrainedGeneratorError(RuntimeError):
    pass


class CacheMismatchError(RuntimeError):
    pass


def cue_seed(source_id: str, seed: int) -> int:
    return (zlib.crc32(source_id.encode()) ^ (seed * 0x9E3779B1)) & 0x7FFFFFFF


def _noise(shape, seed: int) -> torch.Tensor:
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed))


@torch.no_grad()
def compute_cues(samples: Sequence, dfg: DFG, t_hat: int, n_steps: int, seeds: Sequence[int]) -> np.ndarray:
    """Residuals ``image - regenerated`` for a batch; returns N x H x W x C."""
    if not getattr(dfg, "trained", True):
        raise UntrainedGeneratorError("the generator has not been trained")
    if not 1 <= t_hat <= dfg.schedule.T:
        raise ValueError(f"t_hat must lie in [1, {dfg.schedule.T}]")
    x = images_to_tensor(samples)
    eps = torch.stack([_noise(x.shape[1:], s) for s in seeds])
    z_t = forward_sample(x, t_hat, eps, dfg.schedule)
    x0 = generate(z_t, t_hat, dfg.identity_tokens(x), dfg.predict, dfg.schedule, min(n_steps, t_hat))
    return (x - x0).permute(0, 2, 3, 1).double().numpy()


def compute_cue(sample, dfg: DFG, t_hat: int, n_steps: int, rng_seed: int) -> AnomalousCue:
    res = compute_cues([sample], dfg, t_hat, n_steps, [rng_seed])[0]
    return AnomalousCue(res, getattr(sample, "source_id", ""), t_hat, rng_seed)


def mask_background(cue: AnomalousCue, bg_mask: np.ndarray) -> AnomalousCue:
    bg_mask = np.asarray(bg_mask, dtype=bool)
    if bg_mask.shape != cue.residual.shape[:2]:
        raise ValueError(f"mask shape {bg_mask.shape} != cue shape {cue.residual.shape[:2]}")
    res = cue.residual.copy()
    res[bg_mask] = 0.0
    return replace(cue, residual=res)


class CueStore:
    """Cue cache keyed by ``source_id``.

    With a directory, each cue is one float32 ``.bin`` file and ``index.json``
    records ``{source_id, seed, t_hat, n_steps, config_hash}`` per entry.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.config_hash: str | None = None
        self.entries: dict[str, dict] = {}
        self._mem: dict[str, np.ndarray] = {}
        self.shape: tuple | None = None
        if self.path is not None and (self.path / "index.json").exists():
            idx = json.loads((self.path / "index.json").read_text())
            self.config_hash = idx["config_hash"]
            self.shape = tuple(idx["shape"]) if idx.get("shape") else None
            self.entries = {e["source_id"]: e for e in idx["entries"]}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, source_id: str):
        return source_id in self.entries

    def get(self, source_id: str) -> np.ndarray:
        if source_id not in self.entries:
            raise KeyError(f"no cached cue for {source_id!r}")
        if source_id not in self._mem:
            arr = np.fromfile(self.path / self.entries[source_id]["file"], dtype="<f4")
            self._mem[source_id] = arr.reshape(self.shape)
        return self._mem[source_id]

    def cue(self, source_id: str) -> AnomalousCue:
        e = self.entries[source_id]
        return AnomalousCue(self.get(source_id).astype(np.float64), source_id, e["t_hat"], e["seed"])

    def clear(self):
        if self.path is not None:
            for e in self.entries.values():
                (self.path / e["file"]).unlink(missing_ok=True)
            (self.path / "index.json").unlink(missing_ok=True)
        self.entries, self._mem, self.config_hash = {}, {}, None

    def put(self, source_id: str, residual: np.ndarray, meta: dict):
        arr = np.asarray(residual, dtype="<f4")
        self.shape = arr.shape
        entry = dict(meta, source_id=source_id, file=f"{source_id}.bin")
        if self.path is not None:
            self.path.mkdir(parents=True, exist_ok=True)
            arr.tofile(self.path / entry["file"])
        self.entries[source_id] = entry
        self._mem[source_id] = arr

    def flush(self):
        if self.path is None:
            return
        self.path.mkdir(parents=True, exist_ok=True)
        idx = {"config_hash": self.config_hash, "shape": list(self.shape) if self.shape else None,
               "entries": sorted(self.entries.values(), key=lambda e: e["source_id"])}
        tmp = self.path / "index.json.tmp"
        tmp.write_text(json.dumps(idx, indent=1))
        tmp.replace(self.path / "index.json")

    def batch(self, source_ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.get(s) for s in source_ids])


def cache_cues(corpus: Sequence, dfg: DFG, config: CueConfig = CueConfig(),
               store: CueStore | None = None, dfg_hash: str = "", rebuild: bool = False) -> CueStore:
    """Compute (or reuse) one cue per sample.

    A complete store built under another configuration is rebuilt from scratch;
    an incomplete one under another configuration is refused unless
    ``rebuild`` is set, because its provenance cannot be trusted.
    """
    store = store if store is not None else CueStore()
    chash = config_hash(config.key(dfg_hash))
    ids = [s.source_id for s in corpus]
    if len(set(ids)) != len(ids) or not all(ids):
        raise ValueError("corpus samples need unique, non-empty source_id values")
    if store.config_hash is not None and store.config_hash != chash:
        complete = all(i in store for i in ids)
        if not complete and not rebuild:
            raise CacheMismatchError(
                "partial cue cache was built with a different configuration; rebuild explicitly")
        log.info("cue config changed (%s -> %s); rebuilding", store.config_hash, chash)
        store.clear()
    store.config_hash = chash
    todo = [s for s in corpus if s.source_id not in store]
    for i in range(0, len(todo), config.batch_size):
        chunk = todo[i:i + config.batch_size]
        seeds = [cue_seed(s.source_id, config.seed) for s in chunk]
        res = compute_cues(chunk, dfg, config.t_hat, config.n_steps, seeds)
        for s, r, sd in zip(chunk, res, seeds):
            if config.mask_background:
                r = r.copy()
                r[s.bg_mask] = 0.0
            store.put(s.source_id, r, {"seed": sd, "t_hat": config.t_hat, "n_steps": config.n_steps,
                                       "config_hash": chash})
    if todo or store.path is not None and not (store.path / "index.json").exists():
        store.flush()
    return store


def dump_cue_grid(residuals: Sequence[np.ndarray], path: str | Path, ncols: int = 8, scale: int = 4):
    """Save residuals min-max normalised per image as one PNG grid."""
    tiles = []
    for r in residuals:
        lo, hi = float(r.min()), float(r.max())
        tiles.append((r - lo) / (hi - lo) if hi > lo else np.zeros_like(r))
    h, w, c = tiles[0].shape
    nrows = -(-len(tiles) // ncols)
    grid = np.zeros((nrows * h, ncols * w, c))
    for k, t in enumerate(tiles):
        i, j = divmod(k, ncols)
        grid[i * h:(i + 1) * h, j * w:(j + 1) * w] = t
    img = Image.fromarray(np.round(grid * 255).astype(np.uint8))
    img.resize((img.width * scale, img.height * scale), Image.NEAREST).save(path)
    return Path(path)
