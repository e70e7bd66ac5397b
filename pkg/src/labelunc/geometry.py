"""Rotated boxes on the BEV plane, the unit-box affine model and polygon IoU.

A box maps the unit square [-0.5, 0.5]^2 onto the world by scaling with
(length, width), rotating by the yaw and translating to the center.  That map
is linear in the feature vector

    phi = [c1, c2, l cos r, l sin r, w cos r, w sin r]

so every surface point is ``J(v) @ phi`` with a constant 2x6 matrix ``J``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

# Edge order used for tie-breaking: front (+length), left (+width), rear, right.
EDGE_NAMES = ("front", "left", "rear", "right")


class GeometryError(ValueError):
    pass


class DegenerateError(GeometryError):
    """Zero-area box/polygon or a point set without a proper convex hull."""


def normalize_angle(r: float) -> float:
    """Map an angle into (-pi, pi]."""
    out = math.pi - math.fmod(math.pi - r, 2.0 * math.pi)
    if out <= -math.pi:
        out += 2.0 * math.pi
    elif out > math.pi:
        out -= 2.0 * math.pi
    return out


@dataclass(frozen=True)
class BoxBev:
    c1: float
    c2: float
    l: float
    w: float
    r: float = 0.0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0):
            raise DegenerateError(f"box extents must be positive, got l={self.l}, w={self.w}")
        object.__setattr__(self, "r", normalize_angle(float(self.r)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.c1, self.c2])

    @property
    def area(self) -> float:
        return self.l * self.w

    def as_array(self) -> np.ndarray:
        return np.array([self.c1, self.c2, self.l, self.w, self.r])

    @classmethod
    def from_array(cls, a) -> "BoxBev":
        c1, c2, l, w, r = (float(x) for x in a)
        return cls(c1, c2, l, w, r)


@dataclass(frozen=True)
class Box3d:
    c1: float
    c2: float
    c3: float
    l: float
    w: float
    h: float
    r: float = 0.0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise DegenerateError("box extents must be positive")
        object.__setattr__(self, "r", normalize_angle(float(self.r)))

    def bev(self) -> BoxBev:
        return BoxBev(self.c1, self.c2, self.l, self.w, self.r)


Box = Union[BoxBev, Box3d]


def rotation(r: float) -> np.ndarray:
    c, s = math.cos(r), math.sin(r)
    return np.array([[c, -s], [s, c]])


def unit_to_world(v, y: Box) -> np.ndarray:
    """Map unit-box coordinates ``v`` (shape (d,) or (K, d)) into the world.

    For 3D boxes the unit coordinates are ordered (length, height, width):
    the first and third components span the ground plane and the second one
    the vertical extent, matching the row layout of :func:`jacobian_matrix`.
    """
    v = np.asarray(v, dtype=float)
    d = v.shape[-1]
    if isinstance(y, BoxBev):
        if d != 2:
            raise GeometryError(f"BEV box needs 2D unit points, got dimension {d}")
        local = v * np.array([y.l, y.w])
        return local @ rotation(y.r).T + y.center
    if isinstance(y, Box3d):
        if d != 3:
            raise GeometryError(f"3D box needs 3D unit points, got dimension {d}")
        c, s = math.cos(y.r), math.sin(y.r)
        a = v[..., 0] * y.l
        b = v[..., 2] * y.w
        out = np.stack(
            [y.c1 + a * c - b * s, y.c2 + a * s + b * c, y.c3 + v[..., 1] * y.h], axis=-1
        )
        return out
    raise TypeError(f"unsupported box type {type(y).__name__}")


def feature_vector(y: Box) -> np.ndarray:
    c, s = math.cos(y.r), math.sin(y.r)
    if isinstance(y, BoxBev):
        return np.array([y.c1, y.c2, y.l * c, y.l * s, y.w * c, y.w * s])
    return np.array([y.c1, y.c2, y.c3, y.l * c, y.l * s, y.w * c, y.w * s, y.h])


def box_from_feature(phi) -> Box:
    """Inverse of :func:`feature_vector` (length-6 BEV or length-8 3D)."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape == (6,):
        c1, c2, lc, ls, wc, ws = phi
        return BoxBev(c1, c2, math.hypot(lc, ls), math.hypot(wc, ws), math.atan2(ls, lc))
    if phi.shape == (8,):
        c1, c2, c3, lc, ls, wc, ws, h = phi
        return Box3d(c1, c2, c3, math.hypot(lc, ls), math.hypot(wc, ws), h, math.atan2(ls, lc))
    raise GeometryError(f"feature vector must have length 6 or 8, got {phi.shape}")


def jacobian_matrix(v) -> np.ndarray:
    """Constant matrix J with ``unit_to_world(v, y) == J @ feature_vector(y)``.

    Accepts one unit point (d,) -> (d, dim phi) or a batch (K, d) -> (K, d, dim phi).
    """
    v = np.asarray(v, dtype=float)
    batch = v.reshape(-1, v.shape[-1])
    n, d = batch.shape
    if d == 2:
        J = np.zeros((n, 2, 6))
        J[:, 0, 0] = 1.0
        J[:, 1, 1] = 1.0
        J[:, 0, 2] = batch[:, 0]
        J[:, 1, 3] = batch[:, 0]
        J[:, 1, 4] = batch[:, 1]
        J[:, 0, 5] = -batch[:, 1]
    elif d == 3:
        J = np.zeros((n, 3, 8))
        J[:, 0, 0] = 1.0
        J[:, 1, 1] = 1.0
        J[:, 2, 2] = 1.0
        J[:, 0, 3] = batch[:, 0]
        J[:, 1, 4] = batch[:, 0]
        J[:, 1, 5] = batch[:, 2]
        J[:, 0, 6] = -batch[:, 2]
        J[:, 2, 7] = batch[:, 1]
    else:
        raise GeometryError(f"unit points must be 2D or 3D, got dimension {d}")
    return J[0] if v.ndim == 1 else J.reshape(v.shape[:-1] + J.shape[1:])


def box_corners(y: BoxBev):
    """Corners in CCW order starting at the front-left corner.

    Returns ``(corners, vstars)``, both (4, 2).
    """
    vstars = np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]])
    return unit_to_world(vstars, y), vstars


def box_polygon(y: BoxBev) -> np.ndarray:
    return box_corners(y)[0]


@dataclass
class SurfacePoints:
    """M nearest surface locations per query point, sorted by distance."""

    points: np.ndarray  # (K, M, 2) world coordinates
    vstar: np.ndarray  # (K, M, 2) unit-box coordinates
    edge: np.ndarray  # (K, M) edge ids into EDGE_NAMES
    distance: np.ndarray  # (K, M)


def nearest_surface_points(x, y: BoxBev, M: int = 1) -> SurfacePoints:
    """Closest point on each of the four edges, keeping the ``M`` nearest.

    Every returned location sits on a distinct edge.  Ties keep the fixed
    front/left/rear/right order.
    """
    if not 1 <= M <= 4:
        raise GeometryError(f"M must be within [1, 4] for a BEV box, got {M}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    local = (x - y.center) @ rotation(y.r)
    u = np.clip(local[:, 0] / y.l, -0.5, 0.5)
    t = np.clip(local[:, 1] / y.w, -0.5, 0.5)
    K = len(x)
    half = np.full(K, 0.5)
    # (K, 4, 2) unit coordinates for front, left, rear, right
    vs = np.stack(
        [
            np.stack([half, t], axis=-1),
            np.stack([u, half], axis=-1),
            np.stack([-half, t], axis=-1),
            np.stack([u, -half], axis=-1),
        ],
        axis=1,
    )
    local_s = vs * np.array([y.l, y.w])
    dist = np.linalg.norm(local[:, None, :] - local_s, axis=-1)
    order = np.argsort(dist, axis=1, kind="stable")[:, :M]
    rows = np.arange(K)[:, None]
    vsel = vs[rows, order]
    return SurfacePoints(
        points=unit_to_world(vsel, y),
        vstar=vsel,
        edge=order,
        distance=dist[rows, order],
    )


def points_in_box(points, y: BoxBev, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside the box dilated by ``margin``."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    local = (p - y.center) @ rotation(y.r)
    return (np.abs(local[:, 0]) <= 0.5 * y.l + margin) & (np.abs(local[:, 1]) <= 0.5 * y.w + margin)


# -- polygons ---------------------------------------------------------------

def polygon_area(poly) -> float:
    """Signed shoelace area (positive for CCW)."""
    p = np.asarray(poly, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def clip_convex(subject, clipper) -> np.ndarray:
    """Intersect two CCW convex polygons by successive half-plane clipping."""
    out = [tuple(p) for p in np.asarray(subject, dtype=float)]
    clip = np.asarray(clipper, dtype=float)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        inp, out = out, []
        for j in range(len(inp)):
            p, q = inp[j], inp[(j + 1) % len(inp)]
            sp, sq = _cross(a, b, p), _cross(a, b, q)
            if sp >= 0:
                out.append(p)
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return np.array(out, dtype=float).reshape(-1, 2)


def polygon_iou(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    area_a, area_b = abs(polygon_area(a)), abs(polygon_area(b))
    if area_a <= 0 or area_b <= 0:
        raise DegenerateError("polygon IoU needs non-degenerate polygons")
    if polygon_area(a) < 0:
        a = a[::-1]
    if polygon_area(b) < 0:
        b = b[::-1]
    inter = max(polygon_area(clip_convex(a, b)), 0.0)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0))


def rotated_iou(y1: BoxBev, y2: BoxBev) -> float:
    # cheap reject on circumscribed circles
    r1 = 0.5 * math.hypot(y1.l, y1.w)
    r2 = 0.5 * math.hypot(y2.l, y2.w)
    if math.hypot(y1.c1 - y2.c1, y1.c2 - y2.c2) > r1 + r2:
        return 0.0
    return polygon_iou(box_polygon(y1), box_polygon(y2))


def convex_hull(points) -> np.ndarray:
    """Andrew's monotone chain; CCW hull without collinear vertices."""
    pts = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        raise DegenerateError(f"convex hull needs >= 3 distinct points, got {len(pts)}")
    pts = [tuple(p) for p in pts]  # np.unique sorts lexicographically

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3 or polygon_area(hull) <= 0:
        raise DegenerateError("all points are collinear")
    return hull
