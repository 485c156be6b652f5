"""Domain-generalised training of the off-real attention network.

Total objective: cross-entropy + w_adv * single-side adversarial loss
+ w_trip * asymmetric triplet loss.  Batches keep real:fake at 1:1 and,
when an extra real pool is given, corpus-real:extra-real at 1:1.
"""
from __future__ import annotations

import copy
import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .metrics import ScoredSet, auc, hter
from .oanet import OANet, OANetConfig, classify

log = logging.getLogger(__name__)

FAS_CORPUS, EXTRA_REAL = 0, 1


class IncompleteCueCacheError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# batches

@dataclass
class TrainBatch:
    images: torch.Tensor
    cues: torch.Tensor | None
    labels: torch.Tensor
    domain_ids: torch.Tensor
    source_flags: torch.Tensor
    source_ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


class StratifiedSampler:
    """Draws balanced batches, without replacement inside each stratum until it is exhausted."""

    def __init__(self, train_set: Sequence, extra_pool: Sequence | None, batch_size: int,
                 rng: np.random.Generator):
        use_pool = bool(extra_pool)
        div = 4 if use_pool else 2
        if batch_size % div:
            raise ValueError(f"batch size must be divisible by {div}")
        self.rng = rng
        fakes = [s for s in train_set if s.is_fake]
        reals = [s for s in train_set if not s.is_fake]
        self.strata = {"fake": (fakes, batch_size // 2)}
        if use_pool:
            self.strata["real"] = (reals, batch_size // 4)
            self.strata["extra"] = (list(extra_pool), batch_size // 4)
        else:
            self.strata["real"] = (reals, batch_size // 2)
        for name, (items, k) in self.strata.items():
            if len(items) == 0:
                raise ValueError(f"no samples available for stratum {name!r}")
        self._queues = {name: [] for name in self.strata}

    def _take(self, name: str, k: int) -> list:
        items, _ = self.strata[name]
        out = []
        q = self._queues[name]
        while len(out) < k:
            if not q:
                q.extend(self.rng.permutation(len(items)).tolist())
            out.append(items[q.pop()])
        return out

    def draw(self) -> list[tuple]:
        batch = []
        for name, (_, k) in self.strata.items():
            flag = EXTRA_REAL if name == "extra" else FAS_CORPUS
            batch += [(s, flag) for s in self._take(name, k)]
        return batch


def collate(items: Sequence[tuple], cue_lookup=None) -> TrainBatch:
    samples = [s for s, _ in items]
    images = torch.as_tensor(np.stack([s.image for s in samples]), dtype=torch.float32).permute(0, 3, 1, 2)
    cues = None
    if cue_lookup is not None:
        cues = torch.as_tensor(np.stack([cue_lookup(s.source_id) for s in samples]),
                               dtype=torch.float32).permute(0, 3, 1, 2)
    return TrainBatch(
        images=images.contiguous(),
        cues=cues.contiguous() if cues is not None else None,
        labels=torch.tensor([int(s.is_fake) for s in samples]),
        domain_ids=torch.tensor([s.domain_id for s in samples]),
        source_flags=torch.tensor([f for _, f in items]),
        source_ids=[s.source_id for s in samples],
    )


def sample_batch(train_set, extra_pool, batch_size: int, rng: np.random.Generator) -> TrainBatch:
    return collate(StratifiedSampler(train_set, extra_pool, batch_size, rng).draw())


def check_batch(batch: TrainBatch, with_pool: bool):
    n_fake = int(batch.labels.sum())
    n_real = len(batch) - n_fake
    assert n_fake == n_real, "real:fake must be 1:1"
    if with_pool:
        real = batch.labels == 0
        n_extra = int((batch.source_flags[real] == EXTRA_REAL).sum())
        assert 2 * n_extra == n_real, "corpus-real:extra-real must be 1:1"


# --------------------------------------------------------------------------
# losses

def cls_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if not bool(((labels == 0) | (labels == 1)).all()):
        raise ValueError("labels must be 0 (real) or 1 (fake)")
    return F.cross_entropy(logits, labels.long())


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lam * grad, None


def grad_reverse(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    return _GradReverse.apply(x, lam)


class DomainDiscriminator(nn.Module):
    """Predicts the source domain of real-sample features behind a gradient-reversal layer."""

    def __init__(self, d_feat: int, domain_ids: Sequence[int], hidden: int = 64, grl_lambda: float = 1.0):
        super().__init__()
        self.domain_ids = sorted(set(int(d) for d in domain_ids))
        self.index = {d: i for i, d in enumerate(self.domain_ids)}
        self.grl_lambda = grl_lambda
        self.net = nn.Sequential(nn.Linear(d_feat, hidden), nn.ReLU(), nn.Linear(hidden, len(self.domain_ids)))

    def forward(self, features: torch.Tensor, reverse: bool = True) -> torch.Tensor:
        if reverse:
            features = grad_reverse(features, self.grl_lambda)
        return self.net(features)

    def targets(self, domain_ids: torch.Tensor) -> torch.Tensor:
        return torch.tensor([self.index[int(d)] for d in domain_ids], dtype=torch.long)


def adv_loss(features, domain_ids, labels, discriminator: DomainDiscriminator,
             reverse: bool = True) -> torch.Tensor:
    """Domain cross-entropy on real features only; fakes never reach the discriminator."""
    real = labels == 0
    if not bool(real.any()):
        return features.sum() * 0.0
    if len(torch.unique(domain_ids[real])) < 2:
        warnings.warn("adversarial loss needs at least two domains among real samples; returning 0")
        return features.sum() * 0.0
    logits = discriminator(features[real], reverse=reverse)
    return F.cross_entropy(logits, discriminator.targets(domain_ids[real]))


def triplet_loss(features, labels, domain_ids, margin: float = 0.1) -> torch.Tensor:
    """Asymmetric triplet hinge on L2-normalised features; see ``triplet_from_distances``."""
    f = F.normalize(features, dim=1)
    diff = f[:, None, :] - f[None, :, :]
    dist = torch.sqrt((diff ** 2).sum(-1) + 1e-12)
    return triplet_from_distances(dist, labels, domain_ids, margin)


def triplet_from_distances(dist, labels, domain_ids, margin: float = 0.1) -> torch.Tensor:
    """Hinge averaged over all valid (anchor, positive, negative) triplets of a distance matrix.

    Real anchors pull every other real and push every fake.  Fake anchors
    pull fakes of their own domain and push fakes of other domains and all
    reals, so spoofs stay clustered per domain while reals merge.
    """
    real = labels == 0
    fake = ~real
    same_dom = domain_ids[:, None] == domain_ids[None, :]
    not_self = ~torch.eye(len(labels), dtype=torch.bool)

    pos = (real[:, None] & real[None, :]) | (fake[:, None] & fake[None, :] & same_dom)
    pos = pos & not_self
    neg = (real[:, None] & fake[None, :]) | (fake[:, None] & (real[None, :] | (fake[None, :] & ~same_dom)))
    valid = pos[:, :, None] & neg[:, None, :]
    if not bool(valid.any()):
        warnings.warn("no valid triplet in batch; returning 0")
        return dist.sum() * 0.0
    hinge = F.relu(dist[:, :, None] - dist[:, None, :] + margin)
    return hinge[valid].mean()


# --------------------------------------------------------------------------
# training

@dataclass
class FASConfig:
    steps: int = 500
    batch_size: int = 32
    optimizer: str = "adamw"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_every: int = 200
    lr_decay: float = 0.5
    w_adv: float = 0.1
    w_trip: float = 1.0
    margin: float = 0.1
    grl_lambda: float = 1.0
    val_fraction: float = 0.1
    eval_every: int = 50
    seed: int = 0
    use_cue: bool = True
    model: dict = field(default_factory=dict)

    def model_config(self) -> OANetConfig:
        return OANetConfig(**dict(self.model, use_cue=self.use_cue))


def stratified_split(samples: Sequence, fraction: float, rng: np.random.Generator):
    """Hold out ``fraction`` of every (domain, label) group, at least one sample where possible."""
    if fraction <= 0:
        return list(samples), []
    groups: dict = {}
    for i, s in enumerate(samples):
        groups.setdefault((s.domain_id, s.label), []).append(i)
    val_idx = set()
    for key in sorted(groups):
        idx = groups[key]
        k = int(round(fraction * len(idx)))
        if len(idx) > 1:
            k = max(k, 1)
        val_idx.update(rng.permutation(idx)[:k].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


def _cue_lookup(cue_store):
    return None if cue_store is None else cue_store.get


@torch.no_grad()
def score_samples(model: OANet, samples: Sequence, cue_store=None, batch_size: int = 256) -> np.ndarray:
    """Fake-class probabilities in eval mode."""
    model.eval()
    lookup = _cue_lookup(cue_store) if model.cfg.use_cue else None
    out = []
    for i in range(0, len(samples), batch_size):
        b = collate([(s, FAS_CORPUS) for s in samples[i:i + batch_size]], lookup)
        out.append(classify(model(b.images, b.cues)).numpy())
    return np.concatenate(out).astype(np.float64)


def _check_cache(samples, cue_store):
    missing = [s.source_id for s in samples if s.source_id not in cue_store]
    if missing:
        raise IncompleteCueCacheError(f"{len(missing)} samples lack cached cues, e.g. {missing[:3]}")


def total_loss(model, disc, batch: TrainBatch, cfg: FASConfig) -> tuple[torch.Tensor, dict]:
    out = model(batch.images, batch.cues)
    lc = cls_loss(out.logits, batch.labels)
    la = adv_loss(out.feature, batch.domain_ids, batch.labels, disc) if cfg.w_adv else out.feature.sum() * 0
    lt = triplet_loss(out.feature, batch.labels, batch.domain_ids, cfg.margin) if cfg.w_trip else lc * 0
    total = lc + cfg.w_adv * la + cfg.w_trip * lt
    return total, {"cls": lc.item(), "adv": la.item(), "trip": lt.item(), "total": total.item()}


def train_fas(train_set: Sequence, extra_pool: Sequence | None, cue_store, config: FASConfig = FASConfig()):
    """Train an OA-Net (or the cue-free baseline when ``config.use_cue`` is off).

    Returns ``(model, log_rows)``; the returned weights are the best by
    validation loss among the periodic evaluations.
    """
    extra_pool = list(extra_pool or [])
    if config.use_cue:
        if cue_store is None:
            raise IncompleteCueCacheError("cue-guided training needs a cue store")
        _check_cache(list(train_set) + extra_pool, cue_store)
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    fit_set, val_set = stratified_split(train_set, config.val_fraction, rng)
    model = OANet(config.model_config())
    domains = {s.domain_id for s in fit_set if not s.is_fake}
    if extra_pool:
        domains |= {s.domain_id for s in extra_pool}
    disc = DomainDiscriminator(model.cfg.d_model, sorted(domains), grl_lambda=config.grl_lambda)
    params = list(model.parameters()) + list(disc.parameters())
    if config.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    elif config.optimizer == "adamw":
        opt = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    else:
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    sched = torch.optim.lr_scheduler.StepLR(opt, max(config.lr_decay_every, 1), gamma=config.lr_decay)
    sampler = StratifiedSampler(fit_set, extra_pool, config.batch_size, rng)
    lookup = _cue_lookup(cue_store) if config.use_cue else None

    rows = []
    best = (np.inf, None)
    for step in range(1, config.steps + 1):
        model.train()
        batch = collate(sampler.draw(), lookup)
        check_batch(batch, bool(extra_pool))
        loss, parts = total_loss(model, disc, batch, config)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        row = {"step": step, **parts}
        if val_set and (step % config.eval_every == 0 or step == config.steps):
            scores = score_samples(model, val_set, cue_store)
            labels = np.array([int(s.is_fake) for s in val_set])
            p = np.clip(scores, 1e-7, 1 - 1e-7)
            val_loss = float(-np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p)))
            row["val_loss"] = val_loss
            if labels.min() != labels.max():
                ss = ScoredSet(scores, labels)
                row["val_hter"], row["val_auc"] = hter(ss)[0], auc(ss)
            if val_loss < best[0]:
                best = (val_loss, copy.deepcopy(model.state_dict()))
        rows.append(row)
    if best[1] is not None:
        model.load_state_dict(best[1])
    model.eval()
    model.val_source_ids = [s.source_id for s in val_set]
    return model, rows


def write_log(rows: Sequence[dict], path: str | Path):
    cols = ["step", "cls", "adv", "trip", "total", "val_loss", "val_hter", "val_auc"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r.get(k), float) else r.get(k, "")) for k in cols})
