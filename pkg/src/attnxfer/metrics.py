"""Video-level evaluation: per-class average precision, mAP and top-k accuracy."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


def average_precision(relevance) -> float:
    """Mean of precision@rank over the ranks holding a relevant item.

    ``relevance`` is the ranked list of 0/1 flags, best-scored first.
    """
    flags = np.asarray(relevance, dtype=bool)
    n_pos = int(flags.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positives")
    ranks = np.flatnonzero(flags) + 1
    hits = np.arange(1, n_pos + 1)
    return float(np.mean(hits / ranks))


def rank_desc(scores) -> np.ndarray:
    """Indices by decreasing score; equal scores keep the lower index first."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


@dataclass
class EvalReport:
    classes: list
    per_class_ap: list  # None for classes without test videos
    mAP: float
    top1: float
    top3: float
    confusion: list  # rows: true class, columns: predicted class
    n_videos: int
    metadata: dict = field(default_factory=dict)

    def to_json(self, timestamp: str | None = None) -> str:
        d = asdict(self)
        if timestamp is not None:
            d["metadata"] = dict(d["metadata"], timestamp=timestamp)
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def top_k_accuracy(labels, scores, k: int) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    hits = [label in rank_desc(row)[:k] for label, row in zip(labels, scores)]
    return float(np.mean(hits))


def evaluate(labels, scores, classes, metadata: dict | None = None) -> EvalReport:
    """Score a set of videos.

    ``labels`` holds the true class index of each video and ``scores`` the
    per-concept video scores ``(n_videos, n_classes)``. For class ``c`` the
    videos are ranked by ``scores[:, c]``. Classes with no test video get AP
    ``None`` and are left out of the mean.
    """
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    n = len(classes)
    if scores.ndim != 2 or scores.shape != (len(labels), n):
        raise ValueError(f"need one score per class for every video, got shape {scores.shape}")
    if len(labels) == 0:
        raise ValueError("nothing to evaluate")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    aps = []
    for c in range(n):
        rel = labels[rank_desc(scores[:, c])] == c
        aps.append(average_precision(rel) if rel.any() else None)
    defined = [a for a in aps if a is not None]
    pred = np.array([rank_desc(row)[0] for row in scores])
    confusion = np.zeros((n, n), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    return EvalReport(
        classes=list(classes),
        per_class_ap=aps,
        mAP=float(np.mean(defined)),
        top1=top_k_accuracy(labels, scores, 1),
        top3=top_k_accuracy(labels, scores, min(3, n)),
        confusion=confusion.tolist(),
        n_videos=int(len(labels)),
        metadata=dict(metadata or {}),
    )
