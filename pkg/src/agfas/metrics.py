"""Presentation-attack metrics.

"fake" is the positive class: a higher score means more likely a spoof.
FAR is the fraction of fakes accepted as real (score below threshold) and
FRR the fraction of reals rejected (score at or above threshold).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray  # 1 = fake, 0 = real

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels)
        if labels.dtype.kind in "US":
            labels = (labels == "fake").astype(int)
        self.labels = labels.astype(int)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be 1-D and of equal length")
        if self.scores.size == 0:
            raise ValueError("empty scored set")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 (real) or 1 (fake)")

    def require_both_classes(self):
        if self.labels.min() == self.labels.max():
            raise ValueError("both real and fake samples are required")


def auc(scored: ScoredSet) -> float:
    """Probability that a random fake outscores a random real; ties count one half."""
    scored.require_both_classes()
    pos = scored.labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    ranks = rankdata(scored.scores)  # average ranks resolve ties as 1/2
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    u = np.unique(scores)
    return np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]])


def error_rates(scored: ScoredSet, threshold: float) -> tuple[float, float]:
    fake = scored.labels == 1
    far = float(np.count_nonzero(scored.scores[fake] < threshold)) / fake.sum()
    frr = float(np.count_nonzero(scored.scores[~fake] >= threshold)) / (~fake).sum()
    return far, frr


def hter(scored: ScoredSet, threshold: float | None = None) -> tuple[float, float]:
    """Half total error rate and the threshold it was measured at.

    Without an explicit ``threshold`` the equal-error point of ``scored``
    itself is used: the candidate minimising |FAR - FRR|, lowest one on ties.
    """
    scored.require_both_classes()
    if threshold is not None:
        far, frr = error_rates(scored, threshold)
        return (far + frr) / 2.0, float(threshold)
    thr = candidate_thresholds(scored.scores)
    fake = scored.labels == 1
    fs = np.sort(scored.scores[fake])
    rs = np.sort(scored.scores[~fake])
    n_f, n_r = fs.size, rs.size
    far = np.searchsorted(fs, thr, side="left").astype(np.float64) / n_f
    frr = (n_r - np.searchsorted(rs, thr, side="left")).astype(np.float64) / n_r
    i = int(np.argmin(np.abs(far - frr)))
    return float((far[i] + frr[i]) / 2.0), float(thr[i])


def eer_threshold(scored: ScoredSet) -> float:
    return hter(scored)[1]


def frame_sample(frames: Sequence, n: int = 10) -> list:
    """Evenly spaced frames over the whole sequence, duplicates dropped."""
    if len(frames) == 0:
        raise ValueError("empty frame sequence")
    idx = np.round(np.linspace(0, len(frames) - 1, n)).astype(int)
    keep = list(dict.fromkeys(idx.tolist()))
    return [frames[i] for i in keep]
