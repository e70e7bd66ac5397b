"""Detector evaluation under IoU, JIoU and JIoU-Ratio.

Matching is greedy in score order: within a frame each detection claims the
unmatched ground truth with the highest metric value at or above the
threshold.  Every metric and threshold is matched separately.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .geometry import BoxBev, box_corners, rotated_iou
from .jiou import IOU, JIOU, JIOU_RATIO, _clamp_ratio, label_distribution, prob_jaccard
from .labelvb import LabelPosterior
from .losses import feature_cov_from_regression
from .spatialdist import GridSpec, default_grid, resample, spatial_pg, uniform_box_grid, union_grid

DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
RECALL_POINTS = np.linspace(0.0, 1.0, 11)
DIFFICULTIES = ("easy", "moderate", "hard", "unknown")


@dataclass
class DetectionRecord:
    frame: str
    box: BoxBev
    score: float
    variances: Optional[tuple] = None  # (dx, dy, log l, log w, sin r, cos r)
    row: object = field(default=None, repr=False, compare=False)  # source row for exact re-serialization

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")
        if self.variances is not None:
            self.variances = tuple(float(v) for v in self.variances)
            if len(self.variances) != 6 or any(v < 0 for v in self.variances):
                raise ValueError("detection variances need six non-negative values")


@dataclass
class GroundTruthRecord:
    frame: str
    box: BoxBev
    posterior: LabelPosterior
    difficulty: str = "unknown"
    distance: Optional[float] = None

    def __post_init__(self):
        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"unknown difficulty {self.difficulty!r}")
        if self.distance is None:
            self.distance = math.hypot(self.box.c1, self.box.c2)
        if self.distance < 0:
            raise ValueError("distance must be >= 0")


def box_hash(box: BoxBev) -> str:
    return hashlib.sha1(np.asarray(box.as_array(), dtype="<f8").tobytes()).hexdigest()


def _sort_key(det: DetectionRecord):
    return (-det.score, det.frame, box_hash(det.box))


# -- pair scorers ----------------------------------------------------------------

def _circles_apart(a: BoxBev, b: BoxBev, margin: float = 0.0) -> bool:
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    return math.hypot(a.c1 - b.c1, a.c2 - b.c2) > ra + rb + margin


def iou_scorer(det: DetectionRecord, gt: GroundTruthRecord) -> float:
    return rotated_iou(det.box, gt.box)


class JiouScorer:
    """JIoU (or JIoU-Ratio) of deterministic detections against probabilistic labels.

    Each label's spatial distribution is computed once on its own grid and
    zero-padded onto the union with a detection's grid (grids share the same
    lattice, so padding is exact).
    """

    def __init__(self, resolution: float = 0.1, ratio: bool = False):
        self.resolution = resolution
        self.ratio = ratio
        self._cache = {}

    def label_grid(self, gt: GroundTruthRecord):
        key = id(gt)
        if key not in self._cache:
            spec = default_grid(gt.box, gt.posterior, self.resolution)
            pg = label_distribution(gt.posterior, spec)
            ref = prob_jaccard(uniform_box_grid(gt.box, spec).values, pg.values)
            self._cache[key] = (gt, pg, ref)
        return self._cache[key][1:]

    def __call__(self, det: DetectionRecord, gt: GroundTruthRecord) -> float:
        pg, ref = self.label_grid(gt)
        corners, _ = box_corners(det.box)
        lo, hi = corners.min(axis=0), corners.max(axis=0)
        x0, y0, x1, y1 = pg.spec.bounds
        if hi[0] < x0 or lo[0] > x1 or hi[1] < y0 or lo[1] > y1:
            value = 0.0
        else:
            spec = union_grid(pg.spec, GridSpec.covering(lo[0], lo[1], hi[0], hi[1], self.resolution))
            dg = uniform_box_grid(det.box, spec)
            p = resample(pg, spec).values
            value = prob_jaccard(dg.values, p) if np.any((dg.values > 0) & (p > 1e-12)) else 0.0
        return _clamp_ratio(value, ref) if self.ratio else value


def make_scorer(kind: str, resolution: float = 0.1) -> Callable:
    if kind == IOU:
        return iou_scorer
    if kind == JIOU:
        return JiouScorer(resolution)
    if kind == JIOU_RATIO:
        return JiouScorer(resolution, ratio=True)
    raise ValueError(f"unknown metric {kind!r}")


# -- matching --------------------------------------------------------------------

@dataclass
class Assignment:
    matches: list  # (det index, gt index, metric value)
    false_positives: list
    false_negatives: list
    order: list  # detection indices in matching order

    @property
    def tp_flags(self) -> np.ndarray:
        matched = {d for d, _, _ in self.matches}
        return np.array([i in matched for i in self.order], dtype=bool)


def score_table(dets, gts, metric: Callable) -> dict:
    """Metric values for every same-frame (det, gt) pair; skips boxes far apart."""
    by_frame = {}
    for j, g in enumerate(gts):
        by_frame.setdefault(g.frame, []).append(j)
    table = {}
    for i, d in enumerate(dets):
        for j in by_frame.get(d.frame, []):
            far = _circles_apart(d.box, gts[j].box, _support_margin(gts[j]))
            table[i, j] = 0.0 if far else float(metric(d, gts[j]))
    return table


def _support_margin(gt: GroundTruthRecord) -> float:
    # label distributions extend past the box by a few corner stds
    return 3.0 * math.sqrt(max(float(np.trace(gt.posterior.phi_cov)), 0.0)) + 1.0


def match_detections(dets, gts, metric, threshold: float) -> Assignment:
    """Greedy one-to-one matching; ``metric`` is a pair scorer or a :func:`score_table`."""
    table = metric if isinstance(metric, dict) else score_table(dets, gts, metric)
    order = sorted(range(len(dets)), key=lambda i: _sort_key(dets[i]))
    cand = {}
    for (i, j), v in table.items():
        cand.setdefault(i, []).append((j, v))
    taken = set()
    matches, fps = [], []
    for i in order:
        best, best_v = None, -1.0
        for j, v in cand.get(i, ()):
            if j not in taken and v >= threshold and v > best_v:
                best, best_v = j, v
        if best is None:
            fps.append(i)
        else:
            taken.add(best)
            matches.append((i, best, best_v))
    fns = [j for j in range(len(gts)) if j not in taken]
    return Assignment(matches, fps, fns, order)


def pr_curve(assign: Assignment, num_gt: int) -> tuple:
    """(recall, precision) arrays after each detection in score order."""
    tp = assign.tp_flags.astype(float)
    if len(tp) == 0:
        return np.zeros(0), np.zeros(0)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / num_gt if num_gt > 0 else np.zeros_like(ctp)
    return recall, precision


def average_precision_11pt(recall, precision) -> float:
    """Mean over 11 recall levels of the best precision at or above each level."""
    recall = np.asarray(recall, dtype=float)
    precision = np.asarray(precision, dtype=float)
    total = 0.0
    for r in RECALL_POINTS:
        ok = recall >= r - 1e-12
        total += float(precision[ok].max()) if ok.any() else 0.0
    return total / len(RECALL_POINTS)


@dataclass
class MapResult:
    kind: str
    thresholds: list
    aps: list
    curves: list  # (recall, precision) per threshold

    @property
    def mean(self) -> float:
        return float(np.mean(self.aps)) if self.aps else 0.0


def map_over_thresholds(dets, gts, kind: str = IOU, thresholds=DEFAULT_THRESHOLDS, resolution: float = 0.1, table=None) -> MapResult:
    table = table if table is not None else score_table(dets, gts, make_scorer(kind, resolution))
    aps, curves = [], []
    for t in thresholds:
        a = match_detections(dets, gts, table, t)
        rec, prec = pr_curve(a, len(gts))
        aps.append(average_precision_11pt(rec, prec))
        curves.append((rec, prec))
    return MapResult(kind, list(thresholds), aps, curves)


# -- recall gain -----------------------------------------------------------------

def predictive_posterior(det: DetectionRecord) -> LabelPosterior:
    if det.variances is None:
        raise ValueError(f"detection in frame {det.frame} has no predictive variances")
    return LabelPosterior.from_feature_cov(det.box, feature_cov_from_regression(det.box, det.variances))


class PredictiveJiouScorer(JiouScorer):
    """JIoU between a detection's predictive distribution and the label distribution."""

    def __call__(self, det: DetectionRecord, gt: GroundTruthRecord) -> float:
        post = predictive_posterior(det)
        pg, _ = self.label_grid(gt)
        if not np.any(post.phi_cov):
            return JiouScorer.__call__(self, det, gt)
        spec = union_grid(pg.spec, default_grid(det.box, post, self.resolution))
        q = spatial_pg(post, spec).values
        p = resample(pg, spec).values
        return prob_jaccard(q, p) if np.any((q > 1e-12) & (p > 1e-12)) else 0.0


def recall_gain(dets, gts, thresholds=DEFAULT_THRESHOLDS, resolution: float = 0.1) -> dict:
    """Recall with predictive distributions minus recall with deterministic boxes, per JIoU threshold."""
    for d in dets:
        if d.variances is None:
            raise ValueError(f"detection in frame {d.frame} has no predictive variances")
    det_table = score_table(dets, gts, JiouScorer(resolution))
    prob_table = score_table(dets, gts, PredictiveJiouScorer(resolution))
    n = max(len(gts), 1)
    out = {}
    for t in thresholds:
        r_det = len(match_detections(dets, gts, det_table, t).matches) / n
        r_prob = len(match_detections(dets, gts, prob_table, t).matches) / n
        out[t] = r_prob - r_det
    return out


# -- binned statistics -----------------------------------------------------------

@dataclass
class PairStats:
    det: int
    gt: int
    iou: float
    jiou: float
    jiou_ratio: float


def matched_pairs(dets, gts, threshold: float = 0.5, resolution: float = 0.1) -> list:
    """IoU-matched pairs with all three localization scores."""
    a = match_detections(dets, gts, iou_scorer, threshold)
    js, jr = JiouScorer(resolution), JiouScorer(resolution, ratio=True)
    return [PairStats(i, j, v, js(dets[i], gts[j]), jr(dets[i], gts[j])) for i, j, v in a.matches]


def _bin_label(gt: GroundTruthRecord, key: str, band: float) -> str:
    if key == "difficulty":
        return gt.difficulty
    if key == "distance":
        lo = band * math.floor(gt.distance / band)
        return f"[{lo:g},{lo + band:g})"
    raise ValueError(f"unknown bin key {key!r}")


def binned_statistics(pairs, gts, key: str = "distance", band: float = 10.0) -> dict:
    """Mean IoU / JIoU / JIoU-Ratio per bin; empty bins are absent."""
    groups = {}
    for p in pairs:
        groups.setdefault(_bin_label(gts[p.gt], key, band), []).append(p)
    out = {}
    for name, ps in groups.items():
        out[name] = {
            "count": len(ps),
            "iou": float(np.mean([p.iou for p in ps])),
            "jiou": float(np.mean([p.jiou for p in ps])),
            "jiou_ratio": float(np.mean([p.jiou_ratio for p in ps])),
        }
    if key == "distance":
        return dict(sorted(out.items(), key=lambda kv: float(kv[0][1:].split(",")[0])))
    return out


# -- report ------------------------------------------------------------------------

@dataclass
class EvalReport:
    maps: dict  # metric kind -> MapResult
    bins: dict = field(default_factory=dict)
    recall_gain: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "map": {
                k: {
                    "thresholds": m.thresholds,
                    "ap": m.aps,
                    "mean": m.mean,
                }
                for k, m in self.maps.items()
            },
            "bins": self.bins,
            "recall_gain": None if self.recall_gain is None else {f"{t:g}": g for t, g in self.recall_gain.items()},
        }

    def pr_csv(self) -> str:
        lines = ["metric,threshold,rank,recall,precision"]
        for k, m in self.maps.items():
            for t, (rec, prec) in zip(m.thresholds, m.curves):
                for n, (r, p) in enumerate(zip(rec, prec)):
                    lines.append(f"{k},{t:g},{n},{r!r},{p!r}")
        return "\n".join(lines) + "\n"


def evaluate(dets, gts, thresholds=DEFAULT_THRESHOLDS, resolution: float = 0.1, pair_threshold: float = 0.5) -> EvalReport:
    maps = {k: map_over_thresholds(dets, gts, k, thresholds, resolution) for k in (IOU, JIOU, JIOU_RATIO)}
    pairs = matched_pairs(dets, gts, pair_threshold, resolution)
    bins = {
        "distance": binned_statistics(pairs, gts, "distance"),
        "difficulty": binned_statistics(pairs, gts, "difficulty"),
    }
    gain = None
    if dets and all(d.variances is not None for d in dets):
        gain = recall_gain(dets, gts, thresholds, resolution)
    return EvalReport(maps, bins, gain)
