"""Spatial uncertainty distributions of probabilistic boxes on a BEV grid.

Two representations are provided:

* ``spatial_pg`` -- a normalized density: the unit box is sampled, every unit
  point ``v`` maps to a Gaussian ``N(J(v) phi, J(v) Sigma J(v)^T)`` and the
  Gaussians are averaged.  Equivalently, the average over random boxes of the
  uniform density on each box.
* ``spatial_pdq`` -- membership probability: chance that a location lies
  inside the random box.  Not normalized.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .atomicio import atomic_write_bytes, atomic_write_text
from .geometry import BoxBev, box_corners, feature_vector, jacobian_matrix, rotation
from .labelvb import LabelPosterior

DENSITY = "density"
MEMBERSHIP = "membership"
COV_JITTER = 1e-8
WINDOW_SIGMAS = 4.5


class CoverageError(ValueError):
    def __init__(self, deficit: float):
        super().__init__(f"grid does not cover the 3-sigma support; deficit {deficit:.3f} m")
        self.deficit = deficit


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    origin: tuple  # lower-left corner of cell (0, 0), metres
    resolution: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one cell per axis")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def xs(self) -> np.ndarray:
        return self.origin[0] + (np.arange(self.nx) + 0.5) * self.resolution

    @property
    def ys(self) -> np.ndarray:
        return self.origin[1] + (np.arange(self.ny) + 0.5) * self.resolution

    @property
    def bounds(self):
        x0, y0 = self.origin
        return x0, y0, x0 + self.nx * self.resolution, y0 + self.ny * self.resolution

    @property
    def cell_area(self) -> float:
        return self.resolution**2

    @classmethod
    def covering(cls, xmin, ymin, xmax, ymax, resolution: float) -> "GridSpec":
        """Smallest grid aligned to multiples of ``resolution`` covering the rectangle."""
        i0 = math.floor(xmin / resolution + 1e-9)
        j0 = math.floor(ymin / resolution + 1e-9)
        i1 = math.ceil(xmax / resolution - 1e-9)
        j1 = math.ceil(ymax / resolution - 1e-9)
        return cls((i0 * resolution, j0 * resolution), resolution, max(i1 - i0, 1), max(j1 - j0, 1))


@dataclass
class SpatialGrid:
    spec: GridSpec
    values: np.ndarray  # (nx, ny)
    kind: str = DENSITY

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.spec.nx, self.spec.ny):
            raise ValueError(f"values shape {self.values.shape} does not match grid ({self.spec.nx}, {self.spec.ny})")

    def total(self) -> float:
        return float(self.values.sum())

    def entropy(self) -> float:
        p = self.values[self.values > 0]
        p = p / p.sum()
        return float(-(p * np.log(p)).sum())


# -- samplers ------------------------------------------------------------------

class GaussianSampler:
    """Gaussian over the feature vector, e.g. from a :class:`LabelPosterior`."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
        self._sqrt = evecs * np.sqrt(np.clip(evals, 0.0, None))

    @classmethod
    def from_posterior(cls, posterior: LabelPosterior) -> "GaussianSampler":
        return cls(posterior.phi_mean, posterior.phi_cov)

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, len(self.mean)))
        return self.mean + z @ self._sqrt.T


class DiscreteSampler:
    def __init__(self, boxes: Sequence[BoxBev], probs: Sequence[float]):
        probs = np.asarray(probs, dtype=float)
        if len(boxes) != len(probs) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("discrete sampler needs one non-negative probability per box summing to 1")
        self.boxes = list(boxes)
        self.probs = probs
        self._phis = np.array([feature_vector(b) for b in boxes])

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.boxes), size=n, p=self.probs)
        return self._phis[idx]


class DeltaSampler:
    def __init__(self, box: BoxBev):
        self.box = box
        self._phi = feature_vector(box)

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.tile(self._phi, (n, 1))


# -- rasterization -------------------------------------------------------------

def _rasterize(phis: np.ndarray, weights: np.ndarray, spec: GridSpec, sub: int = 1) -> np.ndarray:
    """Add ``weights[n]`` to every (sub)cell whose center lies in parallelogram ``n``.

    Parallelogram n is ``{J(v) phi_n : |v|_inf <= 0.5}``.  Works row by row:
    each row of cell centers meets the convex shape in one x-interval, which
    is written into a difference array.  Returns (nx * sub, ny * sub).
    """
    phis = np.atleast_2d(phis)
    weights = np.broadcast_to(np.asarray(weights, dtype=float), (len(phis),))
    res = spec.resolution / sub
    nx, ny = spec.nx * sub, spec.ny * sub
    x0, y0 = spec.origin
    ys = y0 + (np.arange(ny) + 0.5) * res

    c1, c2, lc, ls, wc, ws = phis.T
    det = lc * wc + ls * ws
    ok = np.abs(det) > 1e-15
    phis, weights = phis[ok], weights[ok]
    c1, c2, lc, ls, wc, ws, det = c1[ok], c2[ok], lc[ok], ls[ok], wc[ok], ws[ok], det[ok]
    # inverse of [[lc, -ws], [ls, wc]]
    inv = np.stack([np.stack([wc, ws], -1), np.stack([-ls, lc], -1)], 1) / det[:, None, None]

    out = np.zeros((ny, nx + 1))
    chunk = max(1, 2_000_000 // max(ny, 1))
    for s in range(0, len(phis), chunk):
        sl = slice(s, s + chunk)
        I = inv[sl]
        dy = ys[None, :] - c2[sl, None]  # (n, ny)
        lo = np.full(dy.shape, -np.inf)
        hi = np.full(dy.shape, np.inf)
        for i in range(2):
            g = I[:, i, 0][:, None]
            h = -I[:, i, 0][:, None] * c1[sl, None] + I[:, i, 1][:, None] * dy
            flat = np.abs(g) < 1e-15
            with np.errstate(divide="ignore", invalid="ignore"):
                a = (-0.5 - h) / g
                b = (0.5 - h) / g
            lo_i = np.where(flat, np.where(np.abs(h) <= 0.5, -np.inf, np.inf), np.minimum(a, b))
            hi_i = np.where(flat, np.where(np.abs(h) <= 0.5, np.inf, -np.inf), np.maximum(a, b))
            lo = np.maximum(lo, lo_i)
            hi = np.minimum(hi, hi_i)
        with np.errstate(invalid="ignore"):
            k0 = np.ceil((lo - x0) / res - 0.5 - 1e-9)
            k1 = np.floor((hi - x0) / res - 0.5 + 1e-9)
        k0 = np.clip(k0, 0, nx)
        k1 = np.clip(k1, -1, nx - 1)
        valid = np.isfinite(lo) & np.isfinite(hi) & (k0 <= k1)
        n_idx, j_idx = np.nonzero(valid)
        w = weights[sl][n_idx]
        np.add.at(out, (j_idx, k0[valid].astype(int)), w)
        np.add.at(out, (j_idx, k1[valid].astype(int) + 1), -w)
    return np.cumsum(out, axis=1)[:, :nx].T


def _block_sum(a: np.ndarray, sub: int) -> np.ndarray:
    if sub == 1:
        return a
    nx, ny = a.shape[0] // sub, a.shape[1] // sub
    return a.reshape(nx, sub, ny, sub).sum(axis=(1, 3))


def default_grid(label: BoxBev, posterior: LabelPosterior = None, resolution: float = 0.1) -> GridSpec:
    """Box bounding rectangle dilated by max(1 m, 3 * largest corner std)."""
    corners, _ = box_corners(label)
    margin = 1.0
    if posterior is not None:
        stds = [math.sqrt(max(corner_total_variance(posterior, k), 0.0)) for k in range(4)]
        margin = max(margin, 3.0 * max(stds))
    lo = corners.min(axis=0) - margin
    hi = corners.max(axis=0) + margin
    return GridSpec.covering(lo[0], lo[1], hi[0], hi[1], resolution)


def union_grid(a: GridSpec, b: GridSpec) -> GridSpec:
    res = min(a.resolution, b.resolution)
    ax0, ay0, ax1, ay1 = a.bounds
    bx0, by0, bx1, by1 = b.bounds
    return GridSpec.covering(min(ax0, bx0), min(ay0, by0), max(ax1, bx1), max(ay1, by1), res)


def _overlap_matrix(src0, src_res, n_src, dst0, dst_res, n_dst) -> np.ndarray:
    s_lo = src0 + np.arange(n_src) * src_res
    d_lo = dst0 + np.arange(n_dst) * dst_res
    ov = np.minimum(d_lo[:, None] + dst_res, s_lo[None, :] + src_res) - np.maximum(d_lo[:, None], s_lo[None, :])
    return np.clip(ov, 0.0, None) / src_res


def resample(grid: SpatialGrid, spec: GridSpec) -> SpatialGrid:
    """Move cell masses onto ``spec`` by area weighting (mass conserving on covered cells)."""
    if grid.spec == spec:
        return grid
    s = grid.spec
    Wx = _overlap_matrix(s.origin[0], s.resolution, s.nx, spec.origin[0], spec.resolution, spec.nx)
    Wy = _overlap_matrix(s.origin[1], s.resolution, s.ny, spec.origin[1], spec.resolution, spec.ny)
    vals = Wx @ grid.values @ Wy.T
    if grid.kind == MEMBERSHIP:
        # membership is a field value, not a mass: average instead of sum
        frac = (spec.resolution / s.resolution) ** 2
        vals = vals / frac
        vals = np.clip(vals, 0.0, 1.0)
    return SpatialGrid(spec, vals, grid.kind)


# -- distributions -------------------------------------------------------------

def unit_lattice(n1: int, n2: int) -> np.ndarray:
    """Stratified midpoints of an n1 x n2 partition of the unit square."""
    a = (np.arange(n1) + 0.5) / n1 - 0.5
    b = (np.arange(n2) + 0.5) / n2 - 0.5
    A, B = np.meshgrid(a, b, indexing="ij")
    return np.stack([A.ravel(), B.ravel()], axis=-1)


def _lattice_for(posterior: LabelPosterior, resolution: float, surface_samples: int):
    """Unit-box lattice whose world spacing resolves the narrowest Gaussian.

    Spacing is a third of a cell where the posterior is sharp, growing to a
    full cell once every Gaussian is at least that wide.
    """
    probe = jacobian_matrix(unit_lattice(9, 9))
    C = probe @ posterior.phi_cov @ probe.transpose(0, 2, 1)
    sig_min = float(np.sqrt(max(np.linalg.eigvalsh(C).min(), 0.0)))
    h = min(max(sig_min, resolution / 3.0), resolution)
    base = max(1, int(math.ceil(math.sqrt(surface_samples))))
    label = posterior.label
    n1 = max(base, int(math.ceil(label.l / h)))
    n2 = max(base, int(math.ceil(label.w / h)))
    return unit_lattice(n1, n2), n1, n2


def _truncated_mean(mu, s, a, b):
    """Mean of N(mu, s^2) restricted to [a, b]; nearest bound when the mass underflows."""
    al = (a - mu) / s
    be = (b - mu) / s
    z = ndtr(be) - ndtr(al)
    num = np.exp(-0.5 * al * al) - np.exp(-0.5 * be * be)
    with np.errstate(divide="ignore", invalid="ignore"):
        m = mu + s * num / (z * math.sqrt(2.0 * math.pi))
    fallback = np.clip(mu, a, b)
    return np.where(z > 1e-12, np.clip(m, a, b), fallback)


def spatial_pg(
    posterior: LabelPosterior,
    grid: GridSpec = None,
    surface_samples: int = 1024,
    resolution: float = 0.1,
    check_coverage: bool = True,
) -> SpatialGrid:
    """Density of a location under the random box (unit-box integration).

    Every lattice sample stands for a small patch of the unit box; its
    Gaussian gets the patch covariance added and is integrated over each
    cell: exactly along x, and along y through the conditional given the
    truncated x mean of the cell column.
    """
    grid = grid or default_grid(posterior.label, posterior, resolution)
    res = grid.resolution
    V, n1, n2 = _lattice_for(posterior, res, surface_samples)
    J = jacobian_matrix(V)  # (S, 2, 6)
    mu = J @ posterior.phi_mean
    C = J @ posterior.phi_cov @ J.transpose(0, 2, 1)
    lab = posterior.label
    R = rotation(lab.r)
    patch = R @ np.diag([(lab.l / n1) ** 2 / 12.0, (lab.w / n2) ** 2 / 12.0]) @ R.T
    C = C + patch + COV_JITTER * np.eye(2)

    sx = np.sqrt(C[:, 0, 0])
    sy = np.sqrt(C[:, 1, 1])
    x0, y0, x1, y1 = grid.bounds
    if check_coverage:
        deficit = max(
            float(np.max(x0 - (mu[:, 0] - 3 * sx))),
            float(np.max((mu[:, 0] + 3 * sx) - x1)),
            float(np.max(y0 - (mu[:, 1] - 3 * sy))),
            float(np.max((mu[:, 1] + 3 * sy) - y1)),
        )
        if deficit > 1e-9:
            raise CoverageError(deficit)

    beta = C[:, 0, 1] / C[:, 0, 0]
    sc = np.sqrt(np.clip(C[:, 1, 1] - C[:, 0, 1] * beta, COV_JITTER, None))
    kx = np.ceil(WINDOW_SIGMAS * sx / res).astype(int) + 1
    ky = np.ceil(WINDOW_SIGMAS * sy / res).astype(int) + 1
    order = np.lexsort((ky, kx))
    out = np.zeros(grid.nx * grid.ny)
    pos = 0
    while pos < len(order):
        # chunk of samples with similar window sizes, about 3M cells each
        size = len(order) - pos
        while True:
            idx = order[pos : pos + size]
            cells = (2 * kx[idx].max() + 1) * (2 * ky[idx].max() + 2) * len(idx)
            if cells <= 3_000_000 or size == 1:
                break
            size = max(1, size // 2)
        pos += len(idx)
        kxc, kyc = kx[idx].max(), ky[idx].max()
        m_x, m_y = mu[idx, 0], mu[idx, 1]
        cols = np.floor((m_x - x0) / res).astype(int)[:, None] - kxc + np.arange(2 * kxc + 1)
        rows = np.floor((m_y - y0) / res).astype(int)[:, None] - kyc + np.arange(2 * kyc + 1)
        a = x0 + cols * res
        b = a + res
        s_x = sx[idx, None]
        px = ndtr((b - m_x[:, None]) / s_x) - ndtr((a - m_x[:, None]) / s_x)
        xbar = _truncated_mean(m_x[:, None], s_x, a, b)
        my = m_y[:, None] + beta[idx, None] * (xbar - m_x[:, None])  # (s, wx)
        edges = y0 + np.concatenate([rows, rows[:, -1:] + 1], axis=1) * res  # (s, wy + 1)
        cdf = ndtr((edges[:, None, :] - my[:, :, None]) / sc[idx, None, None])
        mass = px[:, :, None] * np.diff(cdf, axis=2)
        inside = (
            (cols >= 0)[:, :, None] & (cols < grid.nx)[:, :, None] & (rows >= 0)[:, None, :] & (rows < grid.ny)[:, None, :]
        )
        flat = cols[:, :, None] * grid.ny + rows[:, None, :]
        out += np.bincount(flat[inside], weights=mass[inside], minlength=out.size)
    total = out.sum()
    if total <= 0:
        raise CoverageError(float("inf"))
    return SpatialGrid(grid, out.reshape(grid.nx, grid.ny) / total, DENSITY)


def spatial_pdq(sampler, grid: GridSpec, draws: int = 2000, seed: int = 0) -> SpatialGrid:
    """Fraction of sampled boxes containing each cell center."""
    if draws < 1:
        raise ValueError("draws must be >= 1")
    rng = np.random.default_rng(seed)
    phis = sampler.draw(draws, rng)
    vals = _rasterize(phis, 1.0 / draws, grid)
    return SpatialGrid(grid, np.clip(vals, 0.0, 1.0), MEMBERSHIP)


def uniform_box_grid(y: BoxBev, grid: GridSpec) -> SpatialGrid:
    """Equal mass on the cells whose centers fall inside the box."""
    mask = _rasterize(feature_vector(y)[None, :], 1.0, grid) > 0.5
    count = int(mask.sum())
    if count == 0:
        x0, y0, x1, y1 = grid.bounds
        i = int(math.floor((y.c1 - x0) / grid.resolution))
        j = int(math.floor((y.c2 - y0) / grid.resolution))
        corners, _ = box_corners(y)
        outside = (
            corners[:, 0].max() < x0 or corners[:, 0].min() > x1 or corners[:, 1].max() < y0 or corners[:, 1].min() > y1
        )
        if outside or not (0 <= i < grid.nx and 0 <= j < grid.ny):
            raise ValueError("box lies entirely outside the grid")
        # box smaller than a cell: all mass on the cell holding its center
        vals = np.zeros((grid.nx, grid.ny))
        vals[i, j] = 1.0
        return SpatialGrid(grid, vals, DENSITY)
    return SpatialGrid(grid, mask / count, DENSITY)


def spatial_pg_discrete(boxes, probs, grid: GridSpec) -> SpatialGrid:
    """Mixture of uniform box densities; each box keeps its probability as mass."""
    probs = np.asarray(probs, dtype=float)
    if len(boxes) != len(probs) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must sum to 1")
    vals = np.zeros((grid.nx, grid.ny))
    for b, p in zip(boxes, probs):
        vals += p * uniform_box_grid(b, grid).values
    return SpatialGrid(grid, vals / vals.sum(), DENSITY)


def spatial_pg_sampled(sampler, grid: GridSpec, draws: int = 100_000, seed: int = 0, supersample: int = 2) -> SpatialGrid:
    """Monte Carlo over random boxes: average of uniform densities 1 / A(y)."""
    rng = np.random.default_rng(seed)
    phis = sampler.draw(draws, rng)
    area = np.abs(phis[:, 2] * phis[:, 4] + phis[:, 3] * phis[:, 5])
    sub_area = (grid.resolution / supersample) ** 2
    with np.errstate(divide="ignore"):
        wts = np.where(area > 0, sub_area / area, 0.0) / draws
    vals = _block_sum(_rasterize(phis, wts, grid, supersample), supersample)
    return SpatialGrid(grid, vals / vals.sum(), DENSITY)


def total_variation(p: SpatialGrid, q: SpatialGrid) -> float:
    if p.spec != q.spec:
        raise GridMismatchError("grids differ")
    a = p.values / p.values.sum()
    b = q.values / q.values.sum()
    return 0.5 * float(np.abs(a - b).sum())


def sampled_density_tv(posterior: LabelPosterior, grid: GridSpec = None, mc_draws: int = 100_000, seed: int = 0) -> float:
    """Total-variation distance between unit-box integration and box sampling."""
    grid = grid or default_grid(posterior.label, posterior)
    pg = spatial_pg(posterior, grid)
    mc = spatial_pg_sampled(GaussianSampler.from_posterior(posterior), grid, mc_draws, seed)
    return total_variation(pg, mc)


def corner_total_variance(posterior: LabelPosterior, corner: int) -> float:
    """Trace of the position covariance of one box corner (0..3, CCW from front-left)."""
    _, vs = box_corners(posterior.label)
    J = jacobian_matrix(vs[corner])
    return float(np.trace(J @ posterior.phi_cov @ J.T))


def corner_tv_by_distance(posterior: LabelPosterior, sensor=(0.0, 0.0)) -> np.ndarray:
    """Corner total variances ordered from the corner nearest the sensor outward."""
    corners, _ = box_corners(posterior.label)
    order = np.argsort(np.linalg.norm(corners - np.asarray(sensor), axis=1), kind="stable")
    return np.array([corner_total_variance(posterior, int(k)) for k in order])


# -- export --------------------------------------------------------------------

def write_grid(grid: SpatialGrid, path) -> None:
    """JSON header line, then one comma-separated row per x index."""
    path = Path(path)
    header = {
        "origin": list(grid.spec.origin),
        "resolution": grid.spec.resolution,
        "nx": grid.spec.nx,
        "ny": grid.spec.ny,
        "kind": grid.kind,
    }
    lines = ["# " + json.dumps(header)]
    lines += [",".join(repr(float(v)) for v in row) for row in grid.values]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_grid(path) -> SpatialGrid:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# "):
        raise ValueError(f"{path}: missing grid header")
    h = json.loads(text[0][2:])
    spec = GridSpec(tuple(h["origin"]), h["resolution"], h["nx"], h["ny"])
    vals = np.array([[float(v) for v in line.split(",")] for line in text[1:] if line.strip()])
    return SpatialGrid(spec, vals.reshape(spec.nx, spec.ny), h["kind"])


def write_pgm(grid: SpatialGrid, path) -> None:
    """8-bit binary graymap scaled to the grid maximum; image rows run north to south."""
    v = grid.values
    peak = v.max()
    img = np.zeros_like(v) if peak <= 0 else v / peak
    img = np.round(img.T[::-1] * 255).astype(np.uint8)
    h, w = img.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Inverse of :func:`write_pgm`: (nx, ny) array in [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    img = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
    return img[::-1].T.astype(float) / maxval
