"""Ranking and thresholded metrics for multi-label predictions.

Scores are (images, classes). Any strictly monotone transform of the
probability works for the ranking metrics; ties break by ascending index.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den else 0.0


def f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if (p + r) else 0.0


def _descending(scores: np.ndarray) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def average_precision(scores, labels) -> float:
    """Uninterpolated AP: mean precision at the rank of each positive."""
    labels = np.asarray(labels) > 0
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    hits = labels[_descending(scores)]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


@dataclass
class MapResult:
    value: float
    per_class: dict[int, float]
    excluded: list[int]


def mean_ap_detail(scores, labels, class_subset=None) -> MapResult:
    scores, labels = np.asarray(scores), np.asarray(labels)
    classes = range(labels.shape[1]) if class_subset is None else class_subset
    per_class, excluded = {}, []
    for c in classes:
        if not np.any(labels[:, c] > 0):
            excluded.append(int(c))
            continue
        per_class[int(c)] = average_precision(scores[:, c], labels[:, c])
    if excluded:
        log.warning("classes without positives excluded from mAP: %s", excluded)
    if not per_class:
        raise ValueError("no class in the subset has a positive example")
    value = float(np.mean([per_class[c] for c in sorted(per_class)]))
    return MapResult(value, per_class, excluded)


def mean_ap(scores, labels, class_subset=None) -> float:
    return mean_ap_detail(scores, labels, class_subset).value


@dataclass
class ThresholdedPRF:
    C_P: float
    C_R: float
    C_F: float
    O_P: float
    O_R: float
    O_F: float

    def as_tuple(self):
        return (self.C_P, self.C_R, self.C_F, self.O_P, self.O_R, self.O_F)


def thresholded_prf(scores, labels, threshold: float = 0.5) -> ThresholdedPRF:
    scores, labels = np.asarray(scores), np.asarray(labels)
    if scores.size == 0:
        raise ValueError("empty evaluation set")
    pred = scores > threshold
    truth = labels > 0
    tp = (pred & truth).sum(axis=0)
    fp = (pred & ~truth).sum(axis=0)
    fn = (~pred & truth).sum(axis=0)
    cp = float(np.mean([_ratio(a, a + b) for a, b in zip(tp, fp)]))
    cr = float(np.mean([_ratio(a, a + b) for a, b in zip(tp, fn)]))
    op = _ratio(tp.sum(), tp.sum() + fp.sum())
    orr = _ratio(tp.sum(), tp.sum() + fn.sum())
    return ThresholdedPRF(cp, cr, f1(cp, cr), op, orr, f1(op, orr))


def topk_prf(scores, labels, k: int) -> tuple[float, float, float]:
    """Pooled precision/recall/F1 when each image predicts its top-k classes."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    n, m = scores.shape
    if not 1 <= k <= m:
        raise ValueError(f"k={k} must lie in [1, {m}]")
    if n == 0:
        raise ValueError("empty evaluation set")
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    tp = int((labels[np.arange(n)[:, None], top] > 0).sum())
    p = tp / (k * n)
    r = _ratio(tp, int((labels > 0).sum()))
    return p, r, f1(p, r)


@dataclass
class MetricsReport:
    mAP: float
    C_P: float
    C_R: float
    C_F: float
    O_P: float
    O_R: float
    O_F: float
    topk: dict[str, dict[str, float]]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        rows = [("mAP", self.mAP)]
        rows += [(name, getattr(self, name)) for name in ("C_P", "C_R", "C_F", "O_P", "O_R", "O_F")]
        for k in sorted(self.topk, key=int):
            t = self.topk[k]
            rows += [(f"top{k}_P", t["P"]), (f"top{k}_R", t["R"]), (f"top{k}_F1", t["F1"])]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {100 * v:7.2f}" for name, v in rows)


def build_report(scores, labels, classes=None, ks=(3, 5), threshold: float = 0.5,
                 metadata: dict | None = None) -> MetricsReport:
    """Full report over ``classes`` (all columns when None)."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    cols = list(range(labels.shape[1])) if classes is None else [int(c) for c in classes]
    s, y = scores[:, cols], labels[:, cols]
    detail = mean_ap_detail(s, y)
    prf = thresholded_prf(s, y, threshold)
    topk = {}
    for k in ks:
        if k <= len(cols):
            p, r, f = topk_prf(s, y, k)
            topk[str(k)] = {"P": p, "R": r, "F1": f}
    meta = dict(metadata or {})
    meta["classes"] = cols
    meta["excluded_classes"] = [cols[i] for i in detail.excluded]
    return MetricsReport(detail.value, *prf.as_tuple(), topk=topk, metadata=meta)
