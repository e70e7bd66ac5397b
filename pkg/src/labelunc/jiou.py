"""Probabilistic Jaccard index and the JIoU family of localization metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BoxBev, box_corners
from .labelvb import LabelPosterior
from .spatialdist import (
    DENSITY,
    GridMismatchError,
    GridSpec,
    SpatialGrid,
    default_grid,
    resample,
    spatial_pg,
    uniform_box_grid,
    union_grid,
)

SUPPORT_EPS = 1e-12
DELTA_COV = 1e-14

IOU, JIOU, JIOU_GT, JIOU_RATIO = "IoU", "JIoU", "JIoU-GT", "JIoU-Ratio"


class UndefinedRatioError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class MetricValue:
    value: float
    kind: str

    def __float__(self):
        return self.value


def _prepare(p, q):
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    if p.shape != q.shape:
        raise GridMismatchError(f"mass vectors differ in size: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("masses must be non-negative")
    p = np.where(p < SUPPORT_EPS, 0.0, p)
    q = np.where(q < SUPPORT_EPS, 0.0, q)
    sp, sq = p.sum(), q.sum()
    if sp <= 0 or sq <= 0:
        raise ValueError("masses must have positive total")
    return p / sp, q / sq


def prob_jaccard(p, q) -> float:
    """Probabilistic Jaccard index of two mass vectors in O(N log N).

    For a shared-support cell i the denominator sum_j max(p_j/p_i, q_j/q_i)
    splits by the ratio q_j/p_j: cells with a larger ratio contribute
    q_j/q_i, the rest p_j/p_i.  Sorting by ratio turns both parts into
    prefix sums.
    """
    p, q = _prepare(p, q)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(p > 0, q / p, np.inf)
    order = np.argsort(ratio, kind="stable")
    ps, qs, rs = p[order], q[order], ratio[order]
    # equal ratios give equal terms on either side; count them with p
    last = np.searchsorted(rs, rs, side="right")
    cp = np.concatenate([[0.0], np.cumsum(ps)])
    cq = np.concatenate([[0.0], np.cumsum(qs)])
    p_upto = cp[last]  # sum of p_j with ratio_j <= ratio_i
    q_above = cq[-1] - cq[last]  # sum of q_j with ratio_j > ratio_i
    both = (ps > 0) & (qs > 0)
    denom = p_upto[both] / ps[both] + q_above[both] / qs[both]
    return float(np.sum(1.0 / denom))


def prob_jaccard_bruteforce(p, q) -> float:
    """O(N^2) evaluation straight from the definition."""
    p, q = _prepare(p, q)
    total = 0.0
    for i in range(len(p)):
        if p[i] > 0 and q[i] > 0:
            total += 1.0 / np.sum(np.maximum(p / p[i], q / q[i]))
    return float(total)


def jiou(a: SpatialGrid, b: SpatialGrid) -> MetricValue:
    if a.spec != b.spec:
        raise GridMismatchError("JIoU needs both distributions on the same grid; resample first")
    if a.kind != DENSITY or b.kind != DENSITY:
        raise ValueError("JIoU compares density grids")
    return MetricValue(prob_jaccard(a.values, b.values), JIOU)


def jiou_any(a: SpatialGrid, b: SpatialGrid) -> MetricValue:
    """JIoU after moving both grids onto their union grid."""
    spec = union_grid(a.spec, b.spec)
    return jiou(resample(a, spec), resample(b, spec))


def is_deterministic(posterior: LabelPosterior) -> bool:
    return bool(np.max(np.abs(posterior.phi_cov), initial=0.0) <= DELTA_COV)


def label_distribution(posterior: LabelPosterior, grid: GridSpec) -> SpatialGrid:
    """Spatial distribution of a label; a zero-covariance label is its uniform box."""
    if is_deterministic(posterior):
        return uniform_box_grid(posterior.label, grid)
    return spatial_pg(posterior, grid)


def jiou_gt(label: BoxBev, posterior: LabelPosterior, grid: GridSpec = None, resolution: float = 0.1) -> MetricValue:
    """JIoU between a label box and its own spatial distribution."""
    if posterior.label != label:
        raise ValueError("posterior belongs to a different label")
    grid = grid or default_grid(label, posterior, resolution)
    v = prob_jaccard(uniform_box_grid(label, grid).values, label_distribution(posterior, grid).values)
    return MetricValue(v, JIOU_GT)


def _clamp_ratio(num: float, den: float) -> float:
    if den <= 0:
        raise UndefinedRatioError("JIoU-GT is zero; JIoU-Ratio is undefined")
    r = num / den
    return float(min(max(r, 0.0), 1.0))


def pair_grid(det: BoxBev, gt_posterior: LabelPosterior, resolution: float = 0.1) -> GridSpec:
    """Grid covering both the detection box and the ground-truth support."""
    corners, _ = box_corners(det)
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    det_spec = GridSpec.covering(lo[0], lo[1], hi[0], hi[1], resolution)
    return union_grid(default_grid(gt_posterior.label, gt_posterior, resolution), det_spec)


def jiou_det(det: BoxBev, gt_posterior: LabelPosterior, grid: GridSpec = None) -> MetricValue:
    """JIoU between a deterministic detection and a probabilistic ground truth."""
    grid = grid or pair_grid(det, gt_posterior)
    pg = label_distribution(gt_posterior, grid)
    dg = uniform_box_grid(det, grid)
    return MetricValue(prob_jaccard(dg.values, pg.values) if _overlaps(dg, pg) else 0.0, JIOU)


def jiou_ratio(det: BoxBev, gt_posterior: LabelPosterior, grid: GridSpec = None) -> MetricValue:
    """JIoU of a deterministic detection divided by the ground truth's JIoU-GT."""
    label = gt_posterior.label
    grid = grid or pair_grid(det, gt_posterior)
    pg = label_distribution(gt_posterior, grid)
    den = prob_jaccard(uniform_box_grid(label, grid).values, pg.values)
    dg = uniform_box_grid(det, grid)
    num = prob_jaccard(dg.values, pg.values) if _overlaps(dg, pg) else 0.0
    return MetricValue(_clamp_ratio(num, den), JIOU_RATIO)


def _overlaps(a: SpatialGrid, b: SpatialGrid) -> bool:
    return bool(np.any((a.values > SUPPORT_EPS) & (b.values > SUPPORT_EPS)))
