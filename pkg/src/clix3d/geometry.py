"""Oriented 3D boxes: corners, rotated IoU, point containment and BEV NMS.

Boxes are gravity aligned. ``theta`` is the yaw about +z, counterclockwise
when viewed from above, and ``dx, dy, dz`` are full extents along the box's
local x, y and z axes.

Corner order (``box_corners``) is fixed: the bottom face first, counter-
clockwise from above starting at local ``(+dx/2, +dy/2)``, then the top face
in the same order::

    0: (+, +, -)   1: (-, +, -)   2: (-, -, -)   3: (+, -, -)
    4: (+, +, +)   5: (-, +, +)   6: (-, -, +)   7: (+, -, +)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EPS = 1e-9

DEFAULT_CLASSES = ("Car", "Pedestrian", "Cyclist")


class DegenerateBoxError(ValueError):
    """Raised when a box has zero (or negative) footprint or volume."""


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into ``[-pi, pi)``."""
    if isinstance(theta, np.ndarray):
        return (theta + np.pi) % (2.0 * np.pi) - np.pi
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    dx: float
    dy: float
    dz: float
    theta: float
    class_id: int = 0

    def __post_init__(self):
        vals = (self.cx, self.cy, self.cz, self.dx, self.dy, self.dz, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box parameters: {vals}")
        if min(self.dx, self.dy, self.dz) <= 0:
            raise DegenerateBoxError(
                f"box extents must be positive, got {(self.dx, self.dy, self.dz)}")
        for name in ("cx", "cy", "cz", "dx", "dy", "dz"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(self, "class_id", int(self.class_id))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.dx, self.dy, self.dz,
                         self.theta], dtype=np.float64)

    @classmethod
    def from_array(cls, arr, class_id: int = 0) -> "Box3D":
        a = [float(v) for v in arr[:7]]
        return cls(*a, class_id=class_id)

    @property
    def volume(self) -> float:
        return self.dx * self.dy * self.dz


@dataclass(frozen=True)
class ClassSet:
    names: tuple = DEFAULT_CLASSES
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(self.names)
        if not names:
            raise ValueError("ClassSet needs at least one class")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names in {names}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    def __len__(self):
        return len(self.names)

    def id_of(self, name: str) -> int:
        return self._index[name]

    def name_of(self, class_id: int) -> str:
        return self.names[class_id]

    def __contains__(self, name) -> bool:
        return name in self._index


def as_box_array(boxes) -> np.ndarray:
    """Coerce a Box3D, a list of Box3D, or an array into an ``(N, 7)`` array."""
    if isinstance(boxes, Box3D):
        return boxes.as_array()[None]
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
        return arr.reshape(-1, arr.shape[-1])[:, :7] if arr.size else np.zeros((0, 7))
    boxes = list(boxes)
    if not boxes:
        return np.zeros((0, 7))
    if isinstance(boxes[0], Box3D):
        return np.stack([b.as_array() for b in boxes])
    return np.asarray(boxes, dtype=np.float64).reshape(len(boxes), -1)[:, :7]


_CORNER_SIGNS = np.array([
    [1, 1, -1], [-1, 1, -1], [-1, -1, -1], [1, -1, -1],
    [1, 1, 1], [-1, 1, 1], [-1, -1, 1], [1, -1, 1],
], dtype=np.float64)


def box_corners(b) -> np.ndarray:
    """Return the 8 corners of a box as an ``(8, 3)`` array (see module doc for order).

    Accepts an ``(N, 7)`` array as well, returning ``(N, 8, 3)``.
    """
    single = isinstance(b, Box3D) or np.asarray(b, dtype=object).ndim == 1
    arr = as_box_array(b)
    local = 0.5 * _CORNER_SIGNS[None] * arr[:, None, 3:6]
    c, s = np.cos(arr[:, 6]), np.sin(arr[:, 6])
    x = local[..., 0] * c[:, None] - local[..., 1] * s[:, None]
    y = local[..., 0] * s[:, None] + local[..., 1] * c[:, None]
    out = np.stack([x, y, local[..., 2]], axis=-1) + arr[:, None, :3]
    return out[0] if single else out


def box_from_corners(corners, class_id: int = 0) -> Box3D:
    """Inverse of :func:`box_corners` for corners in the documented order."""
    c = np.asarray(corners, dtype=np.float64)
    center = c.mean(axis=0)
    ex = c[0] - c[1]
    ey = c[1] - c[2]
    dz = c[4, 2] - c[0, 2]
    theta = math.atan2(ex[1], ex[0])
    return Box3D(center[0], center[1], center[2], float(np.hypot(ex[0], ex[1])),
                 float(np.hypot(ey[0], ey[1])), float(dz), theta, class_id)


# --- scalar BEV clipping -------------------------------------------------------

def _bev_polygon(cx, cy, dx, dy, theta):
    c, s = math.cos(theta), math.sin(theta)
    hx, hy = 0.5 * dx, 0.5 * dy
    pts = []
    for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        lx, ly = sx * hx, sy * hy
        pts.append((cx + lx * c - ly * s, cy + lx * s + ly * c))
    return pts


def _polygon_area(poly) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def clip_convex(subject, clip):
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        side = [ex * (py - ay) - ey * (px - ax) for px, py in inp]
        m = len(inp)
        for k in range(m):
            p, q = inp[k], inp[(k + 1) % m]
            sp, sq = side[k], side[(k + 1) % m]
            p_in, q_in = sp >= -EPS, sq >= -EPS
            if p_in:
                out.append(p)
            if p_in != q_in and abs(sp - sq) > EPS:
                t = sp / (sp - sq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def bev_intersection_area(a, b) -> float:
    a = a.as_array() if isinstance(a, Box3D) else np.asarray(a, dtype=np.float64)
    b = b.as_array() if isinstance(b, Box3D) else np.asarray(b, dtype=np.float64)
    ra = 0.5 * math.hypot(a[3], a[4])
    rb = 0.5 * math.hypot(b[3], b[4])
    if math.hypot(a[0] - b[0], a[1] - b[1]) > ra + rb + EPS:
        return 0.0
    pa = _bev_polygon(a[0], a[1], a[3], a[4], a[6])
    pb = _bev_polygon(b[0], b[1], b[3], b[4], b[6])
    return max(0.0, _polygon_area(clip_convex(pa, pb)))


def _check_area(arr):
    if arr[3] * arr[4] <= EPS:
        raise DegenerateBoxError(f"zero-area box footprint: {arr.tolist()}")


def iou_bev(a, b) -> float:
    """Rotated bird's-eye-view IoU of two boxes."""
    a = a.as_array() if isinstance(a, Box3D) else np.asarray(a, dtype=np.float64)
    b = b.as_array() if isinstance(b, Box3D) else np.asarray(b, dtype=np.float64)
    _check_area(a)
    _check_area(b)
    inter = bev_intersection_area(a, b)
    union = a[3] * a[4] + b[3] * b[4] - inter
    return float(min(1.0, max(0.0, inter / union)))


def iou_3d(a, b) -> float:
    """Volumetric IoU of two gravity-aligned oriented boxes."""
    a = a.as_array() if isinstance(a, Box3D) else np.asarray(a, dtype=np.float64)
    b = b.as_array() if isinstance(b, Box3D) else np.asarray(b, dtype=np.float64)
    _check_area(a)
    _check_area(b)
    if a[5] <= EPS or b[5] <= EPS:
        raise DegenerateBoxError("zero-height box")
    zlo = max(a[2] - 0.5 * a[5], b[2] - 0.5 * b[5])
    zhi = min(a[2] + 0.5 * a[5], b[2] + 0.5 * b[5])
    h = zhi - zlo
    if h <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * h
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    return float(min(1.0, max(0.0, inter / union)))


# --- batched IoU ---------------------------------------------------------------
# Convex-quad intersection via the hull of (contained vertices + edge crossings),
# vectorized over candidate pairs. Agrees with the clipping path above.

def _bev_corners_array(arr):
    c, s = np.cos(arr[:, 6]), np.sin(arr[:, 6])
    sx = np.array([1.0, -1.0, -1.0, 1.0])
    sy = np.array([1.0, 1.0, -1.0, -1.0])
    lx = 0.5 * arr[:, 3:4] * sx
    ly = 0.5 * arr[:, 4:5] * sy
    x = arr[:, 0:1] + lx * c[:, None] - ly * s[:, None]
    y = arr[:, 1:2] + lx * s[:, None] + ly * c[:, None]
    return np.stack([x, y], axis=-1)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _inside_quad(pts, quad):
    # pts (P, K, 2), quad (P, 4, 2) CCW -> (P, K)
    edges = np.roll(quad, -1, axis=1) - quad
    rel = pts[:, :, None, :] - quad[:, None, :, :]
    side = edges[:, None, :, 0] * rel[..., 1] - edges[:, None, :, 1] * rel[..., 0]
    return np.all(side >= -EPS, axis=-1)


def pairwise_bev_intersection(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """BEV intersection areas for row-aligned box arrays ``a[i]`` and ``b[i]``."""
    p = len(a)
    if p == 0:
        return np.zeros(0)
    qa, qb = _bev_corners_array(a), _bev_corners_array(b)
    in_a = _inside_quad(qa, qb)
    in_b = _inside_quad(qb, qa)
    r = np.roll(qa, -1, axis=1) - qa
    s = np.roll(qb, -1, axis=1) - qb
    denom = _cross(r[:, :, None, :], s[:, None, :, :])
    diff = qb[:, None, :, :] - qa[:, :, None, :]
    safe = np.where(np.abs(denom) > EPS, denom, 1.0)
    t = _cross(diff, s[:, None, :, :]) / safe
    u = _cross(diff, r[:, :, None, :]) / safe
    ok = (np.abs(denom) > EPS) & (t >= -EPS) & (t <= 1 + EPS) & (u >= -EPS) & (u <= 1 + EPS)
    xp = qa[:, :, None, :] + t[..., None] * r[:, :, None, :]
    pts = np.concatenate([qa, qb, xp.reshape(p, 16, 2)], axis=1)
    mask = np.concatenate([in_a, in_b, ok.reshape(p, 16)], axis=1)
    cnt = mask.sum(axis=1)
    centroid = (pts * mask[..., None]).sum(axis=1) / np.maximum(cnt, 1)[:, None]
    rel = pts - centroid[:, None, :]
    ang = np.where(mask, np.arctan2(rel[..., 1], rel[..., 0]), np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    srt = np.take_along_axis(pts, order[..., None], axis=1)
    smask = np.take_along_axis(mask, order, axis=1)
    srt = np.where(smask[..., None], srt, srt[:, :1, :])
    nxt = np.roll(srt, -1, axis=1)
    area = 0.5 * np.sum(_cross(srt, nxt), axis=1)
    return np.where(cnt >= 3, np.maximum(area, 0.0), 0.0)


def _candidate_pairs(a, b):
    ra = 0.5 * np.hypot(a[:, 3], a[:, 4])
    rb = 0.5 * np.hypot(b[:, 3], b[:, 4])
    d = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    return np.nonzero(d <= ra[:, None] + rb[None, :] + EPS)


def iou_bev_matrix(a, b) -> np.ndarray:
    """Pairwise rotated BEV IoU, ``(N, M)``."""
    a, b = as_box_array(a), as_box_array(b)
    out = np.zeros((len(a), len(b)))
    if not len(a) or not len(b):
        return out
    if np.any(a[:, 3] * a[:, 4] <= EPS) or np.any(b[:, 3] * b[:, 4] <= EPS):
        raise DegenerateBoxError("zero-area box footprint")
    i, j = _candidate_pairs(a, b)
    inter = pairwise_bev_intersection(a[i], b[j])
    union = a[i, 3] * a[i, 4] + b[j, 3] * b[j, 4] - inter
    out[i, j] = np.clip(inter / union, 0.0, 1.0)
    return out


def iou_3d_matrix(a, b) -> np.ndarray:
    """Pairwise volumetric IoU, ``(N, M)``."""
    a, b = as_box_array(a), as_box_array(b)
    out = np.zeros((len(a), len(b)))
    if not len(a) or not len(b):
        return out
    if np.any(a[:, 3:6].prod(axis=1) <= EPS) or np.any(b[:, 3:6].prod(axis=1) <= EPS):
        raise DegenerateBoxError("zero-volume box")
    i, j = _candidate_pairs(a, b)
    zlo = np.maximum(a[i, 2] - 0.5 * a[i, 5], b[j, 2] - 0.5 * b[j, 5])
    zhi = np.minimum(a[i, 2] + 0.5 * a[i, 5], b[j, 2] + 0.5 * b[j, 5])
    h = np.maximum(zhi - zlo, 0.0)
    keep = h > 0
    i, j, h = i[keep], j[keep], h[keep]
    inter = pairwise_bev_intersection(a[i], b[j]) * h
    union = a[i, 3:6].prod(axis=1) + b[j, 3:6].prod(axis=1) - inter
    out[i, j] = np.clip(inter / union, 0.0, 1.0)
    return out


# --- containment & suppression ---------------------------------------------------

def points_in_box(points, b) -> np.ndarray:
    """Boolean mask of points (``(N, >=3)``) inside box ``b``."""
    arr = b.as_array() if isinstance(b, Box3D) else np.asarray(b, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, np.shape(points)[-1])[:, :3]
    rel = pts - arr[:3]
    c, s = math.cos(arr[6]), math.sin(arr[6])
    lx = rel[:, 0] * c + rel[:, 1] * s
    ly = -rel[:, 0] * s + rel[:, 1] * c
    return ((np.abs(lx) <= 0.5 * arr[3]) & (np.abs(ly) <= 0.5 * arr[4])
            & (np.abs(rel[:, 2]) <= 0.5 * arr[5]))


def point_in_box(p, b) -> bool:
    return bool(points_in_box(np.asarray(p, dtype=np.float64)[None, :3], b)[0])


def _aabb_halfwidths(arr):
    c, s = np.abs(np.cos(arr[:, 6])), np.abs(np.sin(arr[:, 6]))
    return 0.5 * (arr[:, 3] * c + arr[:, 4] * s), 0.5 * (arr[:, 3] * s + arr[:, 4] * c)


def nms_bev(boxes, scores: Sequence[float], iou_thresh: float, max_keep: int | None = None) -> list[int]:
    """Greedy BEV non-maximum suppression.

    Boxes are visited by descending score (ties: lower index first); a box is
    dropped when its BEV IoU with an already kept box exceeds ``iou_thresh``.
    Exact IoUs are only computed for pairs whose axis-aligned bound can exceed
    the threshold. The sweep stops once ``max_keep`` boxes are kept.
    """
    arr = as_box_array(boxes)
    sc = np.asarray(scores, dtype=np.float64)
    if len(arr) != len(sc):
        raise ValueError("boxes and scores differ in length")
    if not len(arr):
        return []
    if np.any(arr[:, 3] * arr[:, 4] <= EPS):
        raise DegenerateBoxError("zero-area box footprint")
    order = np.lexsort((np.arange(len(sc)), -sc))
    arr = arr[order]
    n = len(arr)
    hx, hy = _aabb_halfwidths(arr)
    area = arr[:, 3] * arr[:, 4]
    i, j = np.triu_indices(n, k=1)
    ox = np.minimum(arr[i, 0] + hx[i], arr[j, 0] + hx[j]) - np.maximum(arr[i, 0] - hx[i], arr[j, 0] - hx[j])
    oy = np.minimum(arr[i, 1] + hy[i], arr[j, 1] + hy[j]) - np.maximum(arr[i, 1] - hy[i], arr[j, 1] - hy[j])
    bound_inter = np.minimum(np.maximum(ox, 0) * np.maximum(oy, 0), np.minimum(area[i], area[j]))
    bound = bound_inter / np.maximum(area[i] + area[j] - bound_inter, EPS)
    cand = bound > iou_thresh
    i, j = i[cand], j[cand]
    inter = pairwise_bev_intersection(arr[i], arr[j])
    iou = np.clip(inter / (area[i] + area[j] - inter), 0.0, 1.0)
    hit = iou > iou_thresh
    i, j = i[hit], j[hit]
    starts = np.searchsorted(i, np.arange(n + 1))
    alive = np.ones(n, dtype=bool)
    keep = []
    for k in range(n):
        if not alive[k]:
            continue
        keep.append(int(order[k]))
        if max_keep is not None and len(keep) >= max_keep:
            break
        alive[j[starts[k]:starts[k + 1]]] = False
    return keep
