"""Protocol runners and ablation drivers.

Every runner trains fresh OA-Nets from precomputed cues and returns a
``MetricsReport`` (one row per protocol leg plus the mean row).  The HTER
threshold policy is part of every report: ``"eer"`` places the threshold at
the equal-error point of the evaluated set itself, ``"dev"`` at the
equal-error point of the source-domain validation split.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import config_hash
from .cue import CueConfig, CueStore, cache_cues
from .dgtrain import FASConfig, score_samples, train_fas
from .diffusion import DFG, DFGConfig, train_dfg
from .metrics import ScoredSet, auc, eer_threshold, hter
from .synthdata import build_loo_split

log = logging.getLogger(__name__)

THRESHOLD_POLICIES = ("eer", "dev")


class LeakageError(RuntimeError):
    pass


@dataclass
class EvalConfig:
    fas: FASConfig = field(default_factory=FASConfig)
    threshold_policy: str = "eer"
    use_extra_pool: bool = True

    def __post_init__(self):
        if self.threshold_policy not in THRESHOLD_POLICIES:
            raise ValueError(f"threshold_policy must be one of {THRESHOLD_POLICIES}")

    def to_dict(self) -> dict:
        return {"fas": asdict(self.fas), "threshold_policy": self.threshold_policy,
                "use_extra_pool": self.use_extra_pool}


@dataclass
class LegResult:
    held_out: str
    hter_percent: float
    auc_percent: float
    threshold: float = float("nan")
    n_real: int = 0
    n_fake: int = 0


@dataclass
class MetricsReport:
    protocol: str
    legs: list[LegResult]
    config_hash: str = ""
    threshold_policy: str = "eer"
    extra: dict = field(default_factory=dict)

    @property
    def mean(self) -> LegResult:
        if not self.legs:
            raise ValueError("report has no legs")
        return LegResult("mean",
                         float(np.mean([r.hter_percent for r in self.legs])),
                         float(np.mean([r.auc_percent for r in self.legs])))

    @property
    def mean_hter(self) -> float:
        return self.mean.hter_percent

    @property
    def mean_auc(self) -> float:
        return self.mean.auc_percent

    def rows(self) -> list[LegResult]:
        return list(self.legs) + [self.mean]

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "config_hash": self.config_hash,
                "threshold_policy": self.threshold_policy,
                "legs": [asdict(r) for r in self.rows()], "extra": self.extra}

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["held_out", "hter_percent", "auc_percent", "threshold", "n_real", "n_fake"])
        for r in self.rows():
            w.writerow([r.held_out, f"{r.hter_percent:.4f}", f"{r.auc_percent:.4f}",
                        "" if math.isnan(r.threshold) else f"{r.threshold:.6f}", r.n_real, r.n_fake])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_text(self) -> str:
        lines = [f"{self.protocol}  (HTER threshold: {self.threshold_policy}, config {self.config_hash})",
                 f"{'held out':>12} {'HTER %':>8} {'AUC %':>8}"]
        for r in self.rows():
            lines.append(f"{r.held_out:>12} {r.hter_percent:8.2f} {r.auc_percent:8.2f}")
        for k, v in self.extra.items():
            lines.append(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")
        return "\n".join(lines)


def score_leg(name: str, scores, labels, threshold: float | None = None) -> LegResult:
    ss = ScoredSet(scores, labels)
    h, thr = hter(ss, threshold)
    return LegResult(str(name), 100.0 * h, 100.0 * auc(ss), thr,
                     int((ss.labels == 0).sum()), int((ss.labels == 1).sum()))


def _labels(samples) -> np.ndarray:
    return np.array([int(s.is_fake) for s in samples])


def _threshold(model, train_set, cue_store, policy: str) -> float | None:
    if policy == "eer":
        return None
    ids = set(getattr(model, "val_source_ids", ()))
    dev = [s for s in train_set if s.source_id in ids]
    if not dev or len({s.is_fake for s in dev}) < 2:
        raise ValueError("dev threshold policy needs a validation split with both classes")
    return eer_threshold(ScoredSet(score_samples(model, dev, cue_store), _labels(dev)))


def _pool(extra_pool, config: EvalConfig):
    return list(extra_pool) if (extra_pool and config.use_extra_pool) else None


def run_loo(corpus: Sequence, extra_pool: Sequence | None, cue_store: CueStore | None,
            config: EvalConfig = EvalConfig(), held_out: Sequence[int] | None = None,
            protocol: str = "leave-one-out") -> MetricsReport:
    """Train on all domains but one and test on the held-out one, for every domain."""
    domains = sorted({s.domain_id for s in corpus})
    if len(domains) < 2:
        raise ValueError("leave-one-out needs at least two domains")
    legs = []
    for d in (held_out if held_out is not None else domains):
        train, test = build_loo_split(corpus, d)
        model, _ = train_fas(train, _pool(extra_pool, config), cue_store, config.fas)
        thr = _threshold(model, train, cue_store, config.threshold_policy)
        legs.append(score_leg(f"D{d}", score_samples(model, test, cue_store), _labels(test), thr))
        log.info("%s leg D%s: HTER %.2f%% AUC %.2f%%", protocol, d, legs[-1].hter_percent, legs[-1].auc_percent)
    return MetricsReport(protocol, legs, config_hash(config.to_dict()), config.threshold_policy)


def run_unknown_attack(train_set: Sequence, test_set: Sequence, extra_pool: Sequence | None,
                       cue_store: CueStore | None, config: EvalConfig = EvalConfig(),
                       unseen: Sequence[str] = ("mask3d",)) -> MetricsReport:
    """Train on seen attacks only, score reals plus fakes of the unseen attack types.

    The seen-attack AUC on the same test reals is reported alongside.
    """
    unseen = tuple(unseen)
    leaked = sorted({s.attack_type for s in train_set if s.attack_type in unseen})
    if leaked:
        raise LeakageError(f"unseen attack types present in the training set: {leaked}")
    reals = [s for s in test_set if not s.is_fake]
    target = [s for s in test_set if s.attack_type in unseen]
    seen = [s for s in test_set if s.is_fake and s.attack_type not in unseen]
    if not reals or not target:
        raise ValueError("test set needs real samples and fakes of the unseen attack types")
    model, _ = train_fas(train_set, _pool(extra_pool, config), cue_store, config.fas)
    thr = _threshold(model, train_set, cue_store, config.threshold_policy)
    scores = {s.source_id: v for s, v in zip(test_set, score_samples(model, test_set, cue_store))}
    legs = [score_leg("+".join(unseen), [scores[s.source_id] for s in reals + target],
                      _labels(reals + target), thr)]
    extra = {}
    if seen:
        extra["seen_attack_auc_percent"] = score_leg(
            "seen", [scores[s.source_id] for s in reals + seen], _labels(reals + seen)).auc_percent
    return MetricsReport("unknown-attack", legs, config_hash(config.to_dict()),
                         config.threshold_policy, extra)


@dataclass
class AblationTable:
    name: str
    key: str
    rows: list[dict]

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        legs = [k for k in self.rows[0] if k.startswith("hter_D")] if self.rows else []
        w.writerow([self.key, "mean_hter_percent", "mean_auc_percent", *legs])
        for r in self.rows:
            w.writerow([r[self.key], f"{r['mean_hter_percent']:.4f}", f"{r['mean_auc_percent']:.4f}",
                        *(f"{r[k]:.4f}" for k in legs)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_text(self) -> str:
        lines = [self.name, f"{self.key:>10} {'HTER %':>8} {'AUC %':>8}"]
        for r in self.rows:
            lines.append(f"{r[self.key]!s:>10} {r['mean_hter_percent']:8.2f} {r['mean_auc_percent']:8.2f}")
        return "\n".join(lines)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]


def _row(key: str, value, report: MetricsReport) -> dict:
    row = {key: value, "mean_hter_percent": report.mean_hter, "mean_auc_percent": report.mean_auc}
    row.update({f"hter_{r.held_out}": r.hter_percent for r in report.legs})
    return row


def cue_corpus(corpus: Sequence, extra_pool: Sequence | None, config: EvalConfig) -> list:
    """Samples whose cues a protocol run will read."""
    return list(corpus) + (list(extra_pool) if (extra_pool and config.use_extra_pool) else [])


def ablate_timesteps(t_hat_list: Sequence[int], corpus: Sequence, extra_pool: Sequence | None, dfg: DFG,
                     cue_config: CueConfig = CueConfig(), config: EvalConfig = EvalConfig(),
                     held_out: Sequence[int] | None = None) -> AblationTable:
    """One full leave-one-out run per t_hat, same corpus, split and seed."""
    rows = []
    for t_hat in t_hat_list:
        cc = CueConfig(**{**asdict(cue_config), "t_hat": int(t_hat)})
        store = cache_cues(cue_corpus(corpus, extra_pool, config), dfg, cc) if config.fas.use_cue else None
        rep = run_loo(corpus, extra_pool, store, config, held_out, protocol=f"t_hat={t_hat}")
        rows.append(_row("t_hat", int(t_hat), rep))
    return AblationTable("time-step ablation", "t_hat", rows)


def pool_fraction(pool: Sequence, fraction: float) -> list:
    """Leading ``fraction`` of the pool, so smaller fractions are nested in larger ones."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    n = max(1, int(math.ceil(fraction * len(pool))))
    return list(pool[:n])


def ablate_data_fraction(fractions: Sequence[float], corpus: Sequence, real_pool: Sequence,
                         dfg_config: DFGConfig = DFGConfig(), cue_config: CueConfig = CueConfig(),
                         config: EvalConfig = EvalConfig(), held_out: Sequence[int] | None = None,
                         dfgs: dict | None = None) -> AblationTable:
    """Retrain the generator on each fraction of the real pool, then rerun leave-one-out.

    ``dfgs`` may map a fraction to an already trained generator to skip its retraining.
    """
    for f in fractions:
        pool_fraction(real_pool, f)  # validate all fractions before any training
    rows = []
    for f in fractions:
        dfg = (dfgs or {}).get(f)
        if dfg is None:
            dfg, _ = train_dfg(pool_fraction(real_pool, f), dfg_config)
        store = cache_cues(cue_corpus(corpus, real_pool, config), dfg, cue_config)
        rep = run_loo(corpus, real_pool, store, config, held_out, protocol=f"fraction={f}")
        rows.append(_row("fraction", float(f), rep))
    return AblationTable("data-fraction ablation", "fraction", rows)
