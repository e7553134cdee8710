"""Multi-label classification and bidirectional retrieval metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

METRIC_FIELDS = ("mAP", "AUC", "hamming", "image_retrieval_acc", "fmri_retrieval_acc")


def _check_pair(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    return s, y


def average_precision(scores, labels) -> float:
    """AP of one category: mean precision at the rank of every positive.

    Samples are ranked by descending score; equal scores keep input order.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    if hits.sum() == 0:
        raise ValueError("category has no positive sample")
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits == 1].mean())


def mean_average_precision(scores, labels, skipped: list | None = None) -> float:
    s, y = _check_pair(scores, labels)
    aps = []
    for c in range(s.shape[1]):
        if y[:, c].sum() == 0:
            if skipped is not None:
                skipped.append(c)
            continue
        aps.append(average_precision(s[:, c], y[:, c]))
    if not aps:
        raise ValueError("no category has a positive label")
    return float(np.mean(aps))


def roc_auc(scores, labels, skipped: list | None = None) -> float:
    """Macro AUC: per category P(score+ > score-) + P(tie)/2, via average ranks."""
    s, y = _check_pair(scores, labels)
    aucs = []
    for c in range(s.shape[1]):
        pos = y[:, c] == 1
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            if skipped is not None:
                skipped.append(c)
            continue
        ranks = rankdata(s[:, c])
        aucs.append((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
    if not aucs:
        raise ValueError("no category has both positives and negatives")
    return float(np.mean(aucs))


def hamming_distance(scores, labels) -> float:
    """Fraction of positions where sigmoid(score) > 0.5 disagrees with the label."""
    s, y = _check_pair(scores, labels)
    pred = (s > 0.0).astype(np.float64)  # sigmoid(s) > 0.5  <=>  s > 0
    return float((pred != y).mean())


def _unit_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def sample_pools(n: int, pool_size: int, repeats: int, seed: int, query: int) -> np.ndarray:
    """(repeats, pool_size - 1) distractor indices for ``query``, drawn without
    replacement from the other ``n - 1`` items; seeded per query."""
    rng = np.random.default_rng([seed, query])
    others = np.delete(np.arange(n), query)
    keys = rng.random((repeats, n - 1))
    picks = np.argsort(keys, axis=1, kind="stable")[:, :pool_size - 1]
    return others[picks]


def retrieval_accuracy(queries, gallery, pool_size: int | None = None, repeats: int = 30,
                       direction: str = "image", seed: int = 0) -> float:
    """Top-1 retrieval: query ``i`` succeeds when gallery item ``i`` has strictly
    the highest cosine similarity within its pool (ties fail).

    ``direction`` only labels the stream ("image": fMRI queries an image gallery;
    "fmri": the reverse) so the two directions draw different pools.
    """
    q, g = _unit_rows(queries), _unit_rows(gallery)
    n = len(q)
    if g.shape != q.shape:
        raise ValueError(f"queries {q.shape} and gallery {g.shape} must pair row by row")
    pool_size = min(300, n) if pool_size is None else pool_size
    if pool_size < 2:
        raise ValueError("pool size must be at least 2")
    if pool_size > n:
        raise ValueError(f"pool size {pool_size} exceeds gallery size {n}")
    if repeats < 1:
        raise ValueError("need at least one repeat")
    sims = q @ g.T
    stream_seed = seed * 2 + (1 if direction == "fmri" else 0)
    hits = 0
    for i in range(n):
        distract = sample_pools(n, pool_size, repeats, stream_seed, i)
        hits += int((sims[i, i] > sims[i, distract].max(axis=1)).sum())
    return hits / (n * repeats)


# ---------------------------------------------------------------- report


@dataclass
class MetricsReport:
    per_subject: dict = field(default_factory=dict)   # subject -> {metric: value or None}
    average: dict = field(default_factory=dict)
    label: str = ""
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    dataset_hash: str = ""
    seed: int = 0
    wall_clock_s: float = 0.0

    @classmethod
    def from_subjects(cls, per_subject: dict, **kw) -> "MetricsReport":
        avg = {}
        for m in METRIC_FIELDS:
            vals = [v[m] for v in per_subject.values() if v.get(m) is not None]
            avg[m] = float(np.mean(vals)) if vals else None
        return cls(per_subject={str(k): v for k, v in per_subject.items()}, average=avg, **kw)

    def retrieval_mean(self, subject=None) -> float:
        d = self.average if subject is None else self.per_subject[str(subject)]
        return 0.5 * (d["image_retrieval_acc"] + d["fmri_retrieval_acc"])

    def to_dict(self, include_clock: bool = True) -> dict:
        d = asdict(self)
        if not include_clock:
            d.pop("wall_clock_s")
        return d

    def to_json(self, include_clock: bool = True) -> str:
        return json.dumps(self.to_dict(include_clock), indent=2, sort_keys=True)

    def csv_rows(self) -> list[dict]:
        rows = []
        for subj, vals in list(self.per_subject.items()) + [("mean", self.average)]:
            row = {"label": self.label, "seed": self.seed, "subject": subj,
                   "config_hash": self.config_hash, "dataset_hash": self.dataset_hash}
            row.update({m: vals.get(m) for m in METRIC_FIELDS})
            rows.append(row)
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.csv_rows()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))
