"""Label uncertainty from LiDAR points via variational Bayes point registration.

Each point is explained by a Gaussian mixture centred on its ``M`` nearest
locations on the annotated box surface.  The annotated box stays the posterior
mean; only the covariance over the feature vector is inferred:

    Sigma = (Sigma0^-1 + 1/sigma^2 * sum_km phi_km J(v_km)^T J(v_km))^-1
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .geometry import (
    BoxBev,
    DegenerateError,
    box_polygon,
    convex_hull,
    feature_vector,
    jacobian_matrix,
    nearest_surface_points,
    polygon_iou,
)

SIGMA2_FLOOR = 1e-6
# Std devs of (c1, c2, l, w, r) for annotated cars.
DEFAULT_PRIOR_STD = (0.44, 0.11, 0.25, 0.25, 0.17)
# A nearest-surface residual only varies across the surface, so each point
# contributes one squared distance with a single degree of freedom.
RESIDUAL_DOF = 1


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, null_dim: int):
        super().__init__(
            f"posterior precision is singular: {null_dim} feature direction(s) are "
            "unconstrained by the points and the prior is non-informative (w = 0)"
        )
        self.null_dim = null_dim


@dataclass
class PriorSpec:
    sigma0_diag: tuple = tuple(s * s for s in DEFAULT_PRIOR_STD)
    weight: float = 1.0

    def __post_init__(self):
        self.sigma0_diag = tuple(float(v) for v in self.sigma0_diag)
        if len(self.sigma0_diag) != 5 or min(self.sigma0_diag) <= 0:
            raise ValueError("sigma0_diag needs 5 positive variances for (c1, c2, l, w, r)")
        if self.weight < 0:
            raise ValueError("prior weight must be >= 0")


@dataclass
class VbConfig:
    M: int = 3
    sigma_mode: str = "em"  # "fixed" or "em"
    sigma: float = 0.2  # fixed value, or the EM starting point
    max_iters: int = 100
    tol: float = 1e-6
    surface_samples: int = 1024

    def __post_init__(self):
        if not 1 <= self.M <= 4:
            raise ValueError("M must be in [1, 4]")
        if self.sigma_mode not in ("fixed", "em"):
            raise ValueError(f"unknown sigma_mode {self.sigma_mode!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class LabelPosterior:
    label: BoxBev
    phi_mean: np.ndarray
    phi_cov: np.ndarray
    sigma2: float = SIGMA2_FLOOR
    registration: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    iters_used: int = 0
    converged: bool = True

    @property
    def num_points(self) -> int:
        return int(self.registration.shape[0])

    @classmethod
    def delta(cls, label: BoxBev) -> "LabelPosterior":
        """Deterministic box: zero covariance."""
        return cls(label, feature_vector(label), np.zeros((6, 6)))

    @classmethod
    def from_feature_cov(cls, label: BoxBev, cov) -> "LabelPosterior":
        return cls(label, feature_vector(label), np.asarray(cov, dtype=float))

    def to_dict(self) -> dict:
        y = self.label
        return {
            "label": {"c1": y.c1, "c2": y.c2, "l": y.l, "w": y.w, "r": y.r},
            "phi_mean": [float(v) for v in self.phi_mean],
            "phi_cov": [float(v) for v in np.asarray(self.phi_cov).ravel()],
            "sigma2": float(self.sigma2),
            "iters_used": int(self.iters_used),
            "converged": bool(self.converged),
            "num_points": self.num_points,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelPosterior":
        lab = d["label"]
        mean = np.array(d["phi_mean"], dtype=float)
        n = len(mean)
        return cls(
            label=BoxBev(lab["c1"], lab["c2"], lab["l"], lab["w"], lab["r"]),
            phi_mean=mean,
            phi_cov=np.array(d["phi_cov"], dtype=float).reshape(n, n),
            sigma2=float(d["sigma2"]),
            registration=np.zeros((int(d.get("num_points", 0)), 0)),
            iters_used=int(d["iters_used"]),
            converged=bool(d["converged"]),
        )


def prior_phi_covariance(prior: PriorSpec, label: BoxBev) -> Optional[np.ndarray]:
    """First-order image of the (c1, c2, l, w, r) prior in feature space.

    Returns ``None`` for ``weight == 0``, i.e. a prior with zero precision.
    The result has rank 5 in the 6-dim feature space.
    """
    if prior.weight == 0:
        return None
    c, s = math.cos(label.r), math.sin(label.r)
    G = np.zeros((6, 5))
    G[0, 0] = 1.0
    G[1, 1] = 1.0
    G[2, 2], G[2, 4] = c, -label.l * s
    G[3, 2], G[3, 4] = s, label.l * c
    G[4, 3], G[4, 4] = c, -label.w * s
    G[5, 3], G[5, 4] = s, label.w * c
    D = np.diag(prior.sigma0_diag) / prior.weight
    return G @ D @ G.T


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def registration_probs(points, label: BoxBev, M: int, sigma2: float) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.size == 0:
        raise ValueError("registration needs at least one point")
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    d = nearest_surface_points(points, label, M).distance
    return _softmax_rows(-(d * d) / (2.0 * sigma2))


def em_sigma(points, label: BoxBev, registration) -> float:
    """Observation noise variance from registration-weighted squared residuals."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    registration = np.asarray(registration, dtype=float)
    d = nearest_surface_points(points, label, registration.shape[1]).distance
    return _em_sigma_from_distances(d, registration)


def _em_sigma_from_distances(d, reg) -> float:
    K = d.shape[0]
    s2 = float(np.sum(reg * d * d)) / (K * RESIDUAL_DOF)
    return max(s2, SIGMA2_FLOOR)


def measurement_precision(vstar, registration, sigma2: float) -> np.ndarray:
    """sum_km phi_km J^T J / sigma^2 for anchors ``vstar`` (K, M, 2)."""
    J = jacobian_matrix(np.asarray(vstar).reshape(-1, 2))
    wts = np.asarray(registration).reshape(-1)
    return np.einsum("n,nij,nik->jk", wts, J, J) / sigma2


def combine_prior_precision(prior_cov: Optional[np.ndarray], precision: np.ndarray) -> np.ndarray:
    """Posterior covariance ``(prior_cov^-1 + precision)^-1``.

    A singular prior covariance is handled through its square root, which is
    the limit of zero variance along its null directions.
    """
    n = precision.shape[0]
    if prior_cov is None:
        evals = np.linalg.eigvalsh(precision)
        thresh = 1e-10 * max(float(np.max(np.diag(precision))), 1e-300)
        null_dim = int(np.sum(evals <= thresh))
        if null_dim:
            raise RankDeficientError(null_dim)
        cf = linalg.cho_factor(precision)
        cov = linalg.cho_solve(cf, np.eye(n))
    else:
        evals, evecs = np.linalg.eigh(prior_cov)
        keep = evals > 1e-14 * max(float(evals.max()), 1e-300)
        S = evecs[:, keep] * np.sqrt(evals[keep])
        inner = np.eye(S.shape[1]) + S.T @ precision @ S
        cf = linalg.cho_factor(inner)
        cov = S @ linalg.cho_solve(cf, S.T)
    return 0.5 * (cov + cov.T)


def infer_posterior(points, label: BoxBev, prior: PriorSpec = None, cfg: VbConfig = None) -> LabelPosterior:
    """Posterior over the feature vector of ``label`` given its LiDAR points.

    Registration anchors come from the annotated box and stay fixed; the
    registration weights and (in EM mode) the noise variance are iterated to
    convergence, then the covariance is assembled.  An object without points
    gets the prior back.
    """
    prior = prior or PriorSpec()
    cfg = cfg or VbConfig()
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    prior_cov = prior_phi_covariance(prior, label)
    K = len(points)
    sigma2 = cfg.sigma**2

    if K == 0:
        cov = combine_prior_precision(prior_cov, np.zeros((6, 6)))
        return LabelPosterior(label, feature_vector(label), cov, sigma2, np.zeros((0, cfg.M)), 0, True)

    sp = nearest_surface_points(points, label, cfg.M)
    d2 = sp.distance**2
    reg = None
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        new_reg = _softmax_rows(-d2 / (2.0 * sigma2))
        new_sigma2 = _em_sigma_from_distances(sp.distance, new_reg) if cfg.sigma_mode == "em" else sigma2
        if reg is not None:
            d_reg = float(np.max(np.abs(new_reg - reg)))
            d_sig = abs(new_sigma2 - sigma2) / sigma2
            if d_reg < cfg.tol and d_sig < cfg.tol:
                reg, sigma2 = new_reg, new_sigma2
                converged = True
                break
        reg, sigma2 = new_reg, new_sigma2

    P = measurement_precision(sp.vstar, reg, sigma2)
    cov = combine_prior_precision(prior_cov, P)
    return LabelPosterior(label, feature_vector(label), cov, sigma2, reg, it, converged)


# -- closed-form axis-aligned case ---------------------------------------------

@dataclass
class AxisAlignedPosterior:
    """Gaussian over (c1, c2, l, w) with the annotated values as mean."""

    mean: np.ndarray
    cov: np.ndarray

    def half_extent_cov(self) -> np.ndarray:
        """Covariance of (c1, c2, l/2, w/2)."""
        T = np.diag([1.0, 1.0, 0.5, 0.5])
        return T @ self.cov @ T

    def edge_std(self, axis: int, sign: int) -> float:
        """Std of the edge coordinate c_axis + sign * extent_axis / 2."""
        a = np.zeros(4)
        a[axis] = 1.0
        a[2 + axis] = 0.5 * sign
        return float(math.sqrt(a @ self.cov @ a))


def closed_form_axis_aligned(points, label: BoxBev, assignments, sigma: float, prior_var=100.0**2) -> AxisAlignedPosterior:
    """Conjugate Gaussian update for an axis-aligned box with fixed assignments.

    ``assignments`` holds one unit-box coordinate per point: the surface
    location generating it is ``[c1 + v1 l, c2 + v2 w]``.  ``prior_var`` is a
    scalar or 4 variances; ``inf`` means a flat prior on that parameter.
    """
    if abs(math.sin(label.r)) > 1e-12:
        raise ValueError("closed form needs an axis-aligned label")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    V = np.asarray(assignments, dtype=float).reshape(-1, 2)
    if len(V) != len(pts):
        raise ValueError("one assignment per point is required")
    sign = math.cos(label.r)  # r = pi flips both axes
    prec = np.diag(1.0 / np.broadcast_to(np.asarray(prior_var, dtype=float), (4,)))
    for v1, v2 in V * sign:
        A = np.array([[1.0, 0.0, v1, 0.0], [0.0, 1.0, 0.0, v2]])
        prec += A.T @ A / sigma**2
    cov = np.linalg.inv(prec)
    mean = np.array([label.c1, label.c2, label.l, label.w])
    return AxisAlignedPosterior(mean, 0.5 * (cov + cov.T))


# -- baseline heuristics -------------------------------------------------------

def heuristic_num_points(points, label: BoxBev = None) -> float:
    K = len(np.asarray(points).reshape(-1, 2))
    return 1.0 / (1.0 + math.log10(1.0 + K))


def heuristic_convex_hull(points, label: BoxBev) -> float:
    """IoU between the label and the convex hull of its points (0 if degenerate)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 3:
        return 0.0
    try:
        hull = convex_hull(pts)
    except DegenerateError:
        return 0.0
    return polygon_iou(hull, box_polygon(label))
