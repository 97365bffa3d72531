"""Biometric metrics: AUC, EER, and ACER/ACC at a dev-set threshold.

Scores follow the convention higher = more live. A sample is accepted as
live when ``score >= threshold``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError

LIVE, FAKE = 0, 1


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray  # 0 = live, 1 = fake

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise MetricError(f"scores {self.scores.shape} and labels {self.labels.shape} differ")

    @property
    def live(self) -> np.ndarray:
        return self.scores[self.labels == LIVE]

    @property
    def fake(self) -> np.ndarray:
        return self.scores[self.labels == FAKE]

    def require_both(self) -> None:
        if not (np.any(self.labels == LIVE) and np.any(self.labels == FAKE)):
            raise MetricError("metric needs at least one live and one fake sample")


@dataclass
class EvalReport:
    acer: float
    acc: float
    auc: float
    eer: float
    threshold: float
    apcer: float
    bpcer: float
    threshold_source: str = "dev"

    def to_dict(self) -> dict:
        return {k: round(float(getattr(self, k)), 4)
                for k in ("acer", "acc", "auc", "eer", "threshold")}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def auc(s: ScoredSet) -> float:
    """P(live score > fake score) + 0.5 P(tie), via the Mann-Whitney rank sum."""
    s.require_both()
    ranks = rankdata(s.scores)
    n_live, n_fake = s.live.size, s.fake.size
    u = ranks[s.labels == LIVE].sum() - n_live * (n_live + 1) / 2
    return float(u / (n_live * n_fake))


def _roc_counts(s: ScoredSet):
    """Thresholds (unique scores) with accepted-fake and rejected-live counts."""
    s.require_both()
    live, fake = np.sort(s.live), np.sort(s.fake)
    thr = np.unique(s.scores)
    fa = fake.size - np.searchsorted(fake, thr, side="left")
    fr = np.searchsorted(live, thr, side="left")
    thr = np.concatenate([[-np.inf], thr, [np.inf]])
    fa = np.concatenate([[fake.size], fa, [0]])
    fr = np.concatenate([[0], fr, [live.size]])
    return thr, fa, fr, live.size, fake.size


def roc_points(s: ScoredSet):
    """Operating points ordered by rising threshold.

    Returns (thresholds, far, frr) where point 0 accepts everything and the
    last point rejects everything (thresholds -inf and +inf).
    """
    thr, fa, fr, n_live, n_fake = _roc_counts(s)
    return thr, fa / n_fake, fr / n_live


def eer(s: ScoredSet) -> tuple[float, float]:
    """Equal error rate and its threshold, interpolating linearly along the ROC polyline."""
    thr, fa, fr, n_live, n_fake = _roc_counts(s)
    far, frr = fa / n_fake, fr / n_live
    # exact sign of FAR - FRR from integer counts
    diff = fa * n_live - fr * n_fake
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0:
        rate, lo, hi, frac = far[k], k, k, 0.0
    else:
        frac = diff[k - 1] / (diff[k - 1] - diff[k])
        rate = far[k - 1] + frac * (far[k] - far[k - 1])
        lo, hi = k - 1, k
    if np.isfinite(thr[lo]) and np.isfinite(thr[hi]):
        threshold = thr[lo] + frac * (thr[hi] - thr[lo])
    elif np.isfinite(thr[hi]):
        threshold = thr[hi]
    else:
        threshold = np.nextafter(thr[lo], np.inf)
    return float(rate), float(threshold)


def error_rates(s: ScoredSet, threshold: float) -> tuple[float, float, float]:
    """(APCER, BPCER, ACC) as fractions at ``threshold``."""
    s.require_both()
    accept = s.scores >= threshold
    apcer = float(np.mean(accept[s.labels == FAKE]))
    bpcer = float(np.mean(~accept[s.labels == LIVE]))
    acc = float(np.mean(accept == (s.labels == LIVE)))
    return apcer, bpcer, acc


def acer_at(dev: ScoredSet, test: ScoredSet, source: str = "dev") -> EvalReport:
    """Pick the threshold at the dev-set EER, then score the test set with it."""
    _, threshold = eer(dev)
    apcer, bpcer, acc = error_rates(test, threshold)
    apcer, bpcer = 100.0 * apcer, 100.0 * bpcer
    test_eer, _ = eer(test)
    return EvalReport(
        acer=(apcer + bpcer) / 2,
        acc=100.0 * acc,
        auc=100.0 * auc(test),
        eer=100.0 * test_eer,
        threshold=threshold,
        apcer=apcer,
        bpcer=bpcer,
        threshold_source=source,
    )
