"""Uncertainty-aware regression losses and label-variance extraction.

``nll_loss`` is the attenuated Gaussian regression loss and ``kld_loss`` its
KL-divergence form against a Gaussian label with variance ``sigma2_p``.  The
rest of the module turns a label posterior over the feature vector into
per-parameter variances usable as ``sigma2_p``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import BoxBev, jacobian_matrix
from .labelvb import LabelPosterior, PriorSpec, heuristic_convex_hull, heuristic_num_points

REGRESSION_TARGETS = ("dx", "dy", "log_l", "log_w", "sin_r", "cos_r")
FIXED_LABEL_VARIANCES = (1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1)
MIN_EXTENT = 1e-3


class DiracLabelError(ValueError):
    """KLD against a zero-variance label; use the NLL loss instead."""


class PropagationError(ValueError):
    pass


@dataclass(frozen=True)
class LossInput:
    y_hat: float
    sigma2_hat: float
    y_bar: float
    sigma2_p: float = 0.0

    def __post_init__(self):
        if np.any(np.asarray(self.sigma2_hat) <= 0):
            raise ValueError("predicted variance must be positive")
        if np.any(np.asarray(self.sigma2_p) < 0):
            raise ValueError("label variance must be >= 0")


def nll_loss(inp: LossInput):
    r2 = (np.asarray(inp.y_bar) - inp.y_hat) ** 2
    return 0.5 * np.log(inp.sigma2_hat) + r2 / (2.0 * np.asarray(inp.sigma2_hat))


def nll_grad(inp: LossInput):
    """(dL/dy_hat, dL/dsigma2_hat)."""
    s2 = np.asarray(inp.sigma2_hat, dtype=float)
    res = np.asarray(inp.y_hat) - inp.y_bar
    return res / s2, 0.5 / s2 - res**2 / (2.0 * s2**2)


def kld_loss(inp: LossInput):
    """KL(label || prediction) for 1D Gaussians, dropping the constant -1/2."""
    sp2 = np.asarray(inp.sigma2_p, dtype=float)
    if np.any(sp2 <= 0):
        raise DiracLabelError("label variance is zero; the KLD loss degenerates to nll_loss")
    s2 = np.asarray(inp.sigma2_hat, dtype=float)
    r2 = (np.asarray(inp.y_bar) - inp.y_hat) ** 2
    return 0.5 * np.log(s2 / sp2) + (sp2 + r2) / (2.0 * s2)


def kld_grad(inp: LossInput):
    if np.any(np.asarray(inp.sigma2_p) <= 0):
        raise DiracLabelError("label variance is zero; the KLD loss degenerates to nll_loss")
    s2 = np.asarray(inp.sigma2_hat, dtype=float)
    res = np.asarray(inp.y_hat) - inp.y_bar
    return res / s2, 0.5 / s2 - (inp.sigma2_p + res**2) / (2.0 * s2**2)


def kld_optimal_variance(inp: LossInput):
    """Predicted variance minimizing the KLD loss at fixed prediction."""
    return inp.sigma2_p + (np.asarray(inp.y_bar) - inp.y_hat) ** 2


# -- moments of surface vectors ------------------------------------------------

def selector_matrix(xi) -> np.ndarray:
    """Matrix A with ``V = A @ phi`` for a homogeneous unit coordinate ``xi``.

    BEV: xi = (v1, v2, t), 3D: xi = (v1, v2, v3, t) where t weights the center.
    xi = (1, 0, 0) picks the length vector (l cos r, l sin r); (0, 1, 0) the
    width vector; (0, 0, 1) the center.
    """
    xi = np.asarray(xi, dtype=float)
    A = jacobian_matrix(xi[:-1]).copy()
    d = len(xi) - 1
    A[:, :d] *= xi[-1]
    return A


def first_moment(posterior: LabelPosterior, xi) -> np.ndarray:
    return selector_matrix(xi) @ posterior.phi_mean


def second_moment(posterior: LabelPosterior, xi) -> np.ndarray:
    """E[V V^T] of the random surface vector V = A(xi) phi."""
    A = selector_matrix(xi)
    m = A @ posterior.phi_mean
    return A @ posterior.phi_cov @ A.T + np.outer(m, m)


def _norm_moments(posterior: LabelPosterior, xi):
    """E[|V|^2], second-order E[|V|] and the covariance of V."""
    A = selector_matrix(xi)
    mu = A @ posterior.phi_mean
    S = A @ posterior.phi_cov @ A.T
    n = float(np.linalg.norm(mu))
    e2 = float(np.trace(S) + mu @ mu)
    e1 = n + float(np.trace(S)) / (2 * n) - float(mu @ S @ mu) / (2 * n**3)
    return e2, e1, mu, S


@dataclass
class ParameterMoments:
    mean_l2: float
    mean_w2: float
    mean_l: float
    mean_w: float
    var_c1: float
    var_c2: float
    cov_center: np.ndarray
    mean_h2: float = float("nan")
    var_c3: float = float("nan")


def recover_parameter_moments(posterior: LabelPosterior) -> ParameterMoments:
    """Second moments of extents and centers from the Gaussian over the feature vector.

    Mean extents use a second-order expansion of |V| so that the spread of the
    length vector's direction is not mistaken for spread in length.
    """
    dim = len(posterior.phi_mean)
    if dim == 6:
        xi_l, xi_w, xi_c = (1, 0, 0), (0, 1, 0), (0, 0, 1)
    elif dim == 8:
        # unit coordinates ordered (length, height, width)
        xi_l, xi_w, xi_c = (1, 0, 0, 0), (0, 0, 1, 0), (0, 0, 0, 1)
    else:
        raise ValueError(f"feature vector must have length 6 or 8, got {dim}")
    if min(_extents(posterior)) < MIN_EXTENT:
        raise PropagationError("mean extent below 1 mm; moment expansion is singular")
    l2, l1, _, _ = _norm_moments(posterior, xi_l)
    w2, w1, _, _ = _norm_moments(posterior, xi_w)
    A = selector_matrix(xi_c)
    cc = A @ posterior.phi_cov @ A.T
    out = ParameterMoments(l2, w2, l1, w1, float(cc[0, 0]), float(cc[1, 1]), cc)
    if dim == 8:
        h2 = second_moment(posterior, (0, 1, 0, 0))
        out.mean_h2 = float(np.trace(h2))
        out.var_c3 = float(cc[2, 2])
    return out


def _extents(posterior: LabelPosterior):
    m = posterior.phi_mean
    if len(m) == 6:
        return math.hypot(m[2], m[3]), math.hypot(m[4], m[5])
    return math.hypot(m[3], m[4]), math.hypot(m[5], m[6]), m[7]


@dataclass
class ParamVariances:
    c1: float
    c2: float
    l: float
    w: float
    r: float
    dx: float
    dy: float
    log_l: float
    log_w: float
    sin_r: float
    cos_r: float

    def regression(self) -> dict:
        return {k: getattr(self, k) for k in REGRESSION_TARGETS}

    def to_dict(self) -> dict:
        return asdict(self)


def propagate_variances(posterior: LabelPosterior) -> ParamVariances:
    """First-order variances of box parameters and regression targets (no correlations)."""
    if len(posterior.phi_mean) != 6:
        raise ValueError("variance propagation is defined for BEV posteriors")
    mom = recover_parameter_moments(posterior)
    var_l = max(mom.mean_l2 - mom.mean_l**2, 0.0)
    var_w = max(mom.mean_w2 - mom.mean_w**2, 0.0)
    m = posterior.phi_mean
    l_bar, w_bar = _extents(posterior)
    r_bar = math.atan2(m[3], m[2])
    # r = atan2(l sin r, l cos r): gradient (-l sin r, l cos r) / l^2
    g = np.array([-m[3], m[2]]) / l_bar**2
    var_r = max(float(g @ posterior.phi_cov[2:4, 2:4] @ g), 0.0)
    return ParamVariances(
        c1=max(mom.var_c1, 0.0),
        c2=max(mom.var_c2, 0.0),
        l=var_l,
        w=var_w,
        r=var_r,
        dx=max(mom.var_c1, 0.0),
        dy=max(mom.var_c2, 0.0),
        log_l=var_l / l_bar**2,
        log_w=var_w / w_bar**2,
        sin_r=math.cos(r_bar) ** 2 * var_r,
        cos_r=math.sin(r_bar) ** 2 * var_r,
    )


def feature_jacobian(box: BoxBev) -> np.ndarray:
    """d phi / d (c1, c2, l, w, r), shape (6, 5)."""
    c, s = math.cos(box.r), math.sin(box.r)
    G = np.zeros((6, 5))
    G[0, 0] = G[1, 1] = 1.0
    G[2, 2], G[3, 2] = c, s
    G[4, 3], G[5, 3] = c, s
    G[2, 4], G[3, 4] = -box.l * s, box.l * c
    G[4, 4], G[5, 4] = -box.w * s, box.w * c
    return G


def feature_cov_from_params(box: BoxBev, variances) -> np.ndarray:
    """Feature covariance for independent (c1, c2, l, w, r) variances."""
    G = feature_jacobian(box)
    return G @ np.diag(np.asarray(variances, dtype=float)) @ G.T


def feature_cov_from_regression(box: BoxBev, variances) -> np.ndarray:
    """Feature covariance from predictive variances of (dx, dy, log l, log w, sin r, cos r).

    Center offsets are taken in metres; the yaw variance combines both
    trigonometric targets, var(r) = cos^2 r var(sin r) + sin^2 r var(cos r).
    """
    v = np.asarray(variances, dtype=float)
    if v.shape != (6,) or np.any(v < 0):
        raise ValueError("need six non-negative predictive variances")
    c, s = math.cos(box.r), math.sin(box.r)
    var_r = c * c * v[4] + s * s * v[5]
    return feature_cov_from_params(box, [v[0], v[1], box.l**2 * v[2], box.w**2 * v[3], var_r])


# -- loss table ------------------------------------------------------------------

def base_regression_variances(label: BoxBev, prior: PriorSpec = None) -> dict:
    """Prior variances expressed on the regression targets; heuristics scale these."""
    prior = prior or PriorSpec()
    post = LabelPosterior.from_feature_cov(label, feature_cov_from_params(label, prior.sigma0_diag))
    return propagate_variances(post).regression()


def heuristic_scales(points, label: BoxBev) -> dict:
    """Multiplicative variance scales: fewer points or a looser hull mean more variance."""
    return {
        "num_points": heuristic_num_points(points, label),
        "covx_hull": 1.0 - heuristic_convex_hull(points, label),
    }


def loss_table_rows(objects, fixed=FIXED_LABEL_VARIANCES, prior: PriorSpec = None) -> list:
    """Rows of (object id, target, sigma2_p per method).

    ``objects`` yields (object_id, posterior, points).
    """
    rows = []
    for oid, post, points in objects:
        ours = propagate_variances(post).regression()
        base = base_regression_variances(post.label, prior)
        scales = heuristic_scales(points, post.label)
        for t in REGRESSION_TARGETS:
            row = {
                "object": oid,
                "target": t,
                "ours": ours[t],
                "num_points": scales["num_points"] * base[t],
                "covx_hull": scales["covx_hull"] * base[t],
            }
            for f in fixed:
                row[f"fixed_{f:g}"] = float(f)
            rows.append(row)
    return rows


def loss_table_csv(rows) -> str:
    if not rows:
        return "object,target,ours,num_points,covx_hull\n"
    keys = list(rows[0])
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join(str(r[k]) if isinstance(r[k], str) else repr(float(r[k])) for k in keys))
    return "\n".join(lines) + "\n"
