"""KITTI-format labels, detections and point clouds, and per-frame posterior documents.

BEV frame: x is lateral (camera x, to the right), y is longitudinal
(camera z, forward).  Camera-frame label positions are used directly; the
camera to LiDAR offset is taken as zero.  LiDAR points (x forward, y left)
map to BEV as (-y, x).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .atomicio import atomic_write_bytes, atomic_write_text, write_json
from .evalkit import DetectionRecord
from .geometry import BoxBev, box_corners, points_in_box
from .labelvb import LabelPosterior

VEHICLE_CLASSES = ("Car", "Van")
VARIANCE_NAMES = ("dx", "dy", "log_l", "log_w", "sin_r", "cos_r")

# (min 2D box height px, max occlusion level, max truncation) per KITTI difficulty
DIFFICULTY_CUTOFFS = (
    ("easy", 40.0, 0, 0.15),
    ("moderate", 25.0, 1, 0.30),
    ("hard", 25.0, 2, 0.50),
)


class ParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = str(path)
        self.line = line


@dataclass
class KittiLabelRow:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple  # left, top, right, bottom (px)
    dims: tuple  # h, w, l (m)
    loc: tuple  # x, y, z in the camera frame (m)
    ry: float
    score: Optional[float] = None

    def to_bev(self) -> BoxBev:
        h, w, l = self.dims
        return BoxBev(self.loc[0], self.loc[2], l, w, -self.ry)

    @property
    def distance(self) -> float:
        return math.hypot(self.loc[0], self.loc[2])


class LabelEntry(NamedTuple):
    box: BoxBev
    difficulty: str
    distance: float


def _fmt(x: float) -> str:
    return repr(float(x))


def parse_label_line(line: str, path="<string>", lineno: int = 0) -> KittiLabelRow:
    f = line.split()
    if len(f) not in (15, 16):
        raise ParseError(path, lineno, f"expected 15 or 16 fields, got {len(f)}")
    try:
        v = [float(t) for t in f[1:]]
        occluded = int(float(f[2]))
    except ValueError as e:
        raise ParseError(path, lineno, f"non-numeric field ({e})") from None
    row = KittiLabelRow(
        type=f[0],
        truncated=v[0],
        occluded=occluded,
        alpha=v[2],
        bbox=tuple(v[3:7]),
        dims=tuple(v[7:10]),
        loc=tuple(v[10:13]),
        ry=v[13],
        score=v[14] if len(f) == 16 else None,
    )
    if not all(math.isfinite(x) for x in v):
        raise ParseError(path, lineno, "non-finite value")
    if row.type in VEHICLE_CLASSES and min(row.dims) <= 0:
        raise ParseError(path, lineno, f"vehicle extents must be positive, got {row.dims}")
    return row


def serialize_label_row(row: KittiLabelRow) -> str:
    parts = [row.type, _fmt(row.truncated), str(int(row.occluded)), _fmt(row.alpha)]
    parts += [_fmt(x) for x in (*row.bbox, *row.dims, *row.loc, row.ry)]
    if row.score is not None:
        parts.append(_fmt(row.score))
    return " ".join(parts)


def read_label_rows(path) -> list:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ParseError(path, 0, f"cannot read label file: {e}") from None
    rows = []
    for i, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            rows.append(parse_label_line(line, path, i))
    return rows


def write_label_rows(rows, path) -> None:
    atomic_write_text(path, "".join(serialize_label_row(r) + "\n" for r in rows))


def difficulty(row: KittiLabelRow) -> str:
    height = row.bbox[3] - row.bbox[1]
    for name, min_h, max_occ, max_trunc in DIFFICULTY_CUTOFFS:
        if height >= min_h and row.occluded <= max_occ and row.truncated <= max_trunc:
            return name
    return "unknown"


def parse_labels(path, classes=VEHICLE_CLASSES) -> list:
    """Vehicle labels of one frame as (BoxBev, difficulty, distance) entries."""
    return [
        LabelEntry(r.to_bev(), difficulty(r), r.distance) for r in read_label_rows(path) if r.type in classes
    ]


def bev_to_label_row(box: BoxBev, height: float = 1.5, bottom: float = 1.6, **kw) -> KittiLabelRow:
    """KITTI row for a BEV box; image fields default to a crude pinhole projection."""
    ry = -box.r
    alpha = ry - math.atan2(box.c1, box.c2)
    fields = dict(
        type="Car",
        truncated=0.0,
        occluded=0,
        alpha=math.atan2(math.sin(alpha), math.cos(alpha)),
        bbox=pinhole_bbox(box, height, bottom),
        dims=(height, box.w, box.l),
        loc=(box.c1, bottom, box.c2),
        ry=ry,
    )
    fields.update(kw)
    return KittiLabelRow(**fields)


def pinhole_bbox(box: BoxBev, height: float, bottom: float, focal=721.5, cu=609.6, cv=172.9, size=(1242, 375)):
    """Approximate 2D box from the KITTI left-camera intrinsics (no calibration file)."""
    corners, _ = box_corners(box)
    z = np.maximum(corners[:, 1], 0.1)
    u = cu + focal * corners[:, 0] / z
    v_top = cv + focal * (bottom - height) / z
    v_bot = cv + focal * bottom / z
    left, right = np.clip([u.min(), u.max()], 0, size[0] - 1)
    top, bot = np.clip([v_top.min(), v_bot.max()], 0, size[1] - 1)
    return (round(float(left), 2), round(float(top), 2), round(float(right), 2), round(float(bot), 2))


# -- point clouds ----------------------------------------------------------------

def read_points_bin(path) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise ParseError(path, 0, "size is not a multiple of 4 float32 values")
    pts = raw.reshape(-1, 4).astype(np.float64)
    if not np.all(np.isfinite(pts)):
        raise ParseError(path, 0, "non-finite point coordinates")
    return pts


def read_points_csv(path) -> np.ndarray:
    """Comma-separated x, y, z[, intensity]; lines starting with '#' are skipped."""
    try:
        pts = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    except ValueError as e:
        raise ParseError(path, 0, f"malformed point row: {e}") from None
    if pts.size == 0:
        return np.zeros((0, 4))
    if pts.shape[1] == 3:
        pts = np.column_stack([pts, np.zeros(len(pts))])
    if pts.shape[1] != 4:
        raise ParseError(path, 0, f"expected 3 or 4 columns, got {pts.shape[1]}")
    if not np.all(np.isfinite(pts)):
        raise ParseError(path, 0, "non-finite point coordinates")
    return pts


def read_points(path) -> np.ndarray:
    path = Path(path)
    return read_points_csv(path) if path.suffix.lower() in (".csv", ".txt") else read_points_bin(path)


def write_points_bin(points, path) -> None:
    atomic_write_bytes(path, np.asarray(points, dtype="<f4").reshape(-1, 4).tobytes())


def write_points_csv(points, path) -> None:
    lines = ["# x,y,z,intensity"]
    lines += [",".join(repr(float(v)) for v in p) for p in np.asarray(points, dtype=np.float32).astype(float)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def lidar_to_bev(points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    return np.column_stack([-p[:, 1], p[:, 0]])


def bev_to_lidar(points, z: float = 0.0, intensity: float = 0.0) -> np.ndarray:
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(p)
    return np.column_stack([p[:, 1], -p[:, 0], np.full(n, z), np.full(n, intensity)])


def crop_object_points(frame, label: BoxBev, margin: float = 0.1) -> np.ndarray:
    """BEV points inside the label dilated by ``margin`` (annotator segmentation stand-in)."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    frame = np.asarray(frame, dtype=float)
    if len(frame) == 0:
        return np.zeros((0, 2))
    bev = lidar_to_bev(frame)
    return bev[points_in_box(bev, label, margin)]


# -- detections ------------------------------------------------------------------

def parse_detections(path, frame_id: str = None) -> list:
    """KITTI result rows (16 fields) or rows with 6 trailing variances (22 fields)."""
    path = Path(path)
    frame_id = frame_id if frame_id is not None else path.stem
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ParseError(path, 0, f"cannot read detection file: {e}") from None
    out, width = [], None
    for i, line in enumerate(lines, start=1):
        f = line.split()
        if not f:
            continue
        if len(f) not in (16, 22):
            raise ParseError(path, i, f"expected 16 or 22 fields, got {len(f)}")
        if width is not None and len(f) != width:
            raise ParseError(path, i, f"field count {len(f)} differs from earlier rows ({width})")
        width = len(f)
        row = parse_label_line(" ".join(f[:16]), path, i)
        variances = None
        if len(f) == 22:
            try:
                variances = tuple(float(t) for t in f[16:])
            except ValueError:
                raise ParseError(path, i, "non-numeric variance") from None
            if any(not math.isfinite(v) or v < 0 for v in variances):
                raise ParseError(path, i, f"variances must be finite and >= 0, got {variances}")
        out.append(DetectionRecord(frame_id, row.to_bev(), row.score, variances, row))
    return out


def serialize_detection(det: DetectionRecord) -> str:
    row = det.row if det.row is not None else bev_to_label_row(det.box, score=det.score)
    text = serialize_label_row(row)
    if det.variances is not None:
        text += " " + " ".join(_fmt(v) for v in det.variances)
    return text


def write_detections(dets, path) -> None:
    atomic_write_text(path, "".join(serialize_detection(d) + "\n" for d in dets))


# -- documents -------------------------------------------------------------------

def write_posteriors(frame_id: str, objects: list, path) -> None:
    """One document per frame: a list of {index, num_points, no_points, posterior}."""
    doc = {
        "frame": frame_id,
        "objects": [
            {
                "index": i,
                "num_points": post.num_points,
                "no_points": post.num_points == 0,
                "posterior": post.to_dict(),
            }
            for i, post in enumerate(objects)
        ],
    }
    write_json(doc, path)


def read_posteriors(path) -> list:
    doc = json.loads(Path(path).read_text())
    return [LabelPosterior.from_dict(o["posterior"]) for o in doc["objects"]]
