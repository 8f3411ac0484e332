"""Correlation and 2AFC evaluation of image distance metrics."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import baselines
from .data import DatasetManifest, ImageCache
from .tensor import Tensor

logger = logging.getLogger(__name__)


class EvaluationError(ValueError):
    """The statistic is undefined for this data (too few samples, zero variance)."""


def _vec(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64).reshape(-1)


def pearson(u, v) -> float:
    u, v = _vec(u), _vec(v)
    if u.size != v.size:
        raise ValueError(f"length mismatch: {u.size} vs {v.size}")
    if u.size < 3:
        raise EvaluationError("correlation needs at least 3 samples")
    uc, vc = u - u.mean(), v - v.mean()
    su, sv = np.sqrt(uc @ uc), np.sqrt(vc @ vc)
    if su == 0 or sv == 0:
        raise EvaluationError("zero variance: correlation undefined")
    return float(np.clip((uc @ vc) / (su * sv), -1.0, 1.0))


def rankdata(x) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    x = _vec(x)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size)
    start = 0
    while start < x.size:
        stop = start + 1
        while stop < x.size and sx[stop] == sx[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def spearman(u, v) -> float:
    u, v = _vec(u), _vec(v)
    if u.size < 3:
        raise EvaluationError("correlation needs at least 3 samples")
    if np.all(u == u[0]) or np.all(v == v[0]):
        raise EvaluationError("all-equal vector: rank correlation undefined")
    return pearson(rankdata(u), rankdata(v))


def twoafc_scores(d0, d1, p1) -> np.ndarray:
    """Per-triplet agreement with the human majority: 1, 0, or 0.5 on any tie."""
    d0, d1, p1 = _vec(d0), _vec(d1), _vec(p1)
    pred = np.where(d1 < d0, 1.0, np.where(d0 < d1, 0.0, 0.5))
    human = np.where(p1 > 0.5, 1.0, np.where(p1 < 0.5, 0.0, 0.5))
    tie = (pred == 0.5) | (human == 0.5)
    return np.where(tie, 0.5, (pred == human).astype(np.float64))


def twoafc_accuracy(d0, d1, p1) -> float:
    s = twoafc_scores(d0, d1, p1)
    if s.size == 0:
        raise EvaluationError("no triplets to score")
    return float(s.mean())


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricHandle:
    """A named distance: larger always means more distorted."""

    name: str
    scorer: Callable

    def __call__(self, ref, dist) -> float:
        return float(self.scorer(ref, dist))


def model_metric(model, name: str | None = None) -> MetricHandle:
    def score(ref, dist):
        r = _image_batch(ref)
        d = _image_batch(dist)
        return float(model.pair_distance(Tensor(r), Tensor(d)).data[0])
    return MetricHandle(name or model.kind, score)


def _image_batch(x) -> np.ndarray:
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    return a[None] if a.ndim == 3 else a


CLASSICAL = {
    "mse": baselines.mse,
    "l2": baselines.l2,
    "ssim": lambda a, b: 1.0 - baselines.ssim(a, b),
    "msssim": lambda a, b: 1.0 - baselines.msssim(a, b),
    "nlapd": lambda a, b: baselines.nlapd_distance(baselines.NlapdGdnModel.identity(), a, b),
}
LEARNED = ("perceptnet", "nlapd-gdn")
METRIC_NAMES = tuple(CLASSICAL) + LEARNED


def get_metric(name: str, model=None) -> MetricHandle:
    """Look up a metric by name; learned metrics need a loaded ``model``."""
    if name in CLASSICAL:
        return MetricHandle(name, CLASSICAL[name])
    if name in LEARNED:
        if model is None:
            raise ValueError(f"metric {name!r} needs a checkpoint")
        if model.kind != name:
            raise ValueError(f"checkpoint holds a {model.kind} model, not {name}")
        return model_metric(model, "nlapd-gdn(ours)" if name == "nlapd-gdn" else name)
    raise ValueError(f"unknown metric {name!r}; choose from {', '.join(METRIC_NAMES)}")


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    metric: str
    dataset: str
    pearson: float
    spearman: float
    n_samples: int
    distances: list | None = None
    mos: list | None = None
    pairs: list | None = None

    def to_dict(self, with_samples: bool = False) -> dict:
        d = {"metric": self.metric, "dataset": self.dataset, "pearson": self.pearson,
             "spearman": self.spearman, "n_samples": self.n_samples}
        if with_samples and self.distances is not None:
            d["distances"] = self.distances
        return d

    def to_json(self, with_samples: bool = False) -> str:
        return json.dumps(self.to_dict(with_samples), sort_keys=True)

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["ref", "dist", "distance", "mos"])
            for (ref, dist), d, m in zip(self.pairs, self.distances, self.mos):
                w.writerow([ref, dist, repr(d), repr(m)])


def format_table(reports) -> str:
    rows = [("metric", "dataset", "n", "pearson", "spearman")]
    rows += [(r.metric, r.dataset, str(r.n_samples), f"{r.pearson:.4f}", f"{r.spearman:.4f}")
             for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) if i < 2 else c.rjust(w)
                       for i, (c, w) in enumerate(zip(row, widths))) for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def mos_distances(metric: MetricHandle, manifest: DatasetManifest,
                  cache: ImageCache | None = None) -> np.ndarray:
    cache = cache or ImageCache()
    return np.array([metric(cache(r.ref_path), cache(r.dist_path)) for r in manifest.records])


def correlation_report(distances, mos, metric: str, dataset: str) -> EvalReport:
    distances = _vec(distances)
    if distances.size < 3:
        raise EvaluationError("need at least 3 samples")
    if np.all(distances == distances[0]):
        raise EvaluationError(f"metric {metric} gives identical distances for every sample")
    return EvalReport(metric, dataset, abs(pearson(distances, mos)),
                      abs(spearman(distances, mos)), int(distances.size),
                      distances.tolist(), _vec(mos).tolist())


def evaluate_mos(metric: MetricHandle, manifest: DatasetManifest,
                 cache: ImageCache | None = None) -> EvalReport:
    """|Pearson| and |Spearman| between metric distances and raw MOS."""
    if manifest.kind != "mos":
        raise ValueError("evaluate_mos needs a MOS manifest")
    if len(manifest) < 3:
        raise EvaluationError("need at least 3 samples")
    d = mos_distances(metric, manifest, cache)
    report = correlation_report(d, manifest.mos, metric.name, manifest.name)
    report.pairs = [(str(r.ref_path), str(r.dist_path)) for r in manifest.records]
    return report


def evaluate_2afc(metric: MetricHandle, manifest: DatasetManifest,
                  cache: ImageCache | None = None) -> float:
    """Fraction of triplets where the closer image matches the human majority."""
    if manifest.kind != "2afc":
        raise ValueError("evaluate_2afc needs a 2AFC manifest")
    if len(manifest) == 0:
        raise EvaluationError("empty manifest")
    cache = cache or ImageCache()
    d0, d1, p1 = [], [], []
    for r in manifest.records:
        ref = cache(r.ref_path)
        d0.append(metric(ref, cache(r.img0_path)))
        d1.append(metric(ref, cache(r.img1_path)))
        p1.append(r.human_fraction_p1)
    return twoafc_accuracy(d0, d1, p1)
