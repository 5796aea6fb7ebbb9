"""Canonical KITTI-layout scenes, domain profiles, synthetic scenes and multi-source batching.

On-disk layout of one split::

    {split}/velodyne/{id}.bin    little-endian float32 (x, y, z, intensity) records
    {split}/image_2/{id}.png     8-bit RGB
    {split}/calib/{id}.txt       "P2: " + 12 numbers, the LiDAR-to-pixel projection
    {split}/label_2/{id}.txt     KITTI's 15 label fields (16 with a score)
    {split}/domain.json          the DomainProfile of the split
    {split}/frames.txt           split membership, one id per line

Label geometry is stored in the LiDAR frame: ``h w l`` are ``dz dy dx``, the
location fields are the box center and ``rotation_y`` is the LiDAR yaw. P2
already folds the LiDAR-to-camera extrinsics, so no rectification matrix is
needed.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Box3D, ClassSet, box_corners, iou_bev_matrix, wrap_angle

DEFAULT_IMAGE_DIMS = (192, 624)
LABEL_FIELDS = 15
OCCLUSION_THRESHOLDS = (0.2, 0.5)
FACE_INSET = 0.02              # face returns start 2 cm inside the surface


class MalformedFileError(ValueError):
    def __init__(self, path, line, msg):
        self.path, self.line = str(path), line
        where = f"{path}:{line}" if line else str(path)
        super().__init__(f"{where}: {msg}")


# --- profiles -----------------------------------------------------------------------

@dataclass(frozen=True)
class DomainProfile:
    name: str
    point_cloud_range: tuple
    lidar_height: float
    anchors: dict
    nominal_point_count: int
    ground_shift_on_eval: float = 0.0

    def __post_init__(self):
        r = tuple(float(v) for v in self.point_cloud_range)
        if len(r) != 6 or any(r[i] >= r[i + 3] for i in range(3)):
            raise ValueError(f"profile {self.name}: bad point_cloud_range {r}")
        anchors = {k: tuple(float(x) for x in v) for k, v in self.anchors.items()}
        if any(len(v) != 3 or min(v) <= 0 for v in anchors.values()):
            raise ValueError(f"profile {self.name}: anchor dims must be 3 positive numbers")
        object.__setattr__(self, "point_cloud_range", r)
        object.__setattr__(self, "anchors", anchors)

    def to_json(self) -> dict:
        return {"name": self.name, "point_cloud_range": list(self.point_cloud_range),
                "lidar_height": self.lidar_height,
                "anchors": {k: list(v) for k, v in self.anchors.items()},
                "nominal_point_count": self.nominal_point_count,
                "ground_shift_on_eval": self.ground_shift_on_eval}

    @classmethod
    def from_json(cls, d: dict) -> "DomainProfile":
        return cls(d["name"], tuple(d["point_cloud_range"]), float(d["lidar_height"]),
                   dict(d["anchors"]), int(d["nominal_point_count"]),
                   float(d.get("ground_shift_on_eval", 0.0)))


def load_profiles(path=None) -> dict[str, DomainProfile]:
    """Load a profile registry (JSON keyed by domain name); the packaged one by default."""
    if path is None:
        text = resources.files("clix3d").joinpath("profiles.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return {k: DomainProfile.from_json(v) for k, v in json.loads(text).items()}


def get_profile(name: str, registry: dict | None = None) -> DomainProfile:
    registry = load_profiles() if registry is None else registry
    if name not in registry:
        raise KeyError(f"unknown domain profile {name!r}; known: {sorted(registry)}")
    return registry[name]


# --- frames -------------------------------------------------------------------------

@dataclass
class CameraCalib:
    P: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64).reshape(3, 4)
        if not np.all(np.isfinite(self.P)):
            raise ValueError("calibration matrix has non-finite entries")

    def project(self, xyz) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project LiDAR-frame points; returns ``(u, v, depth)``."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, np.shape(xyz)[-1])[:, :3]
        uvw = xyz @ self.P[:, :3].T + self.P[:, 3]
        depth = uvw[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = uvw[:, 0] / depth
            v = uvw[:, 1] / depth
        return u, v, depth


@dataclass
class Label:
    box: Box3D
    truncation: float = 0.0
    occlusion: int = 0
    bbox: tuple = (0.0, 0.0, 0.0, 0.0)
    alpha: float = 0.0
    score: float | None = None


@dataclass
class Frame:
    points: np.ndarray
    image: np.ndarray
    calib: CameraCalib
    labels: list
    domain: str
    frame_id: str = ""
    pasted: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        # float32 is the on-disk precision; float64 is kept for in-memory augmentation
        pts = np.asarray(self.points)
        if pts.dtype not in (np.float32, np.float64):
            pts = pts.astype(np.float32)
        self.points = pts.reshape(-1, 4)
        if self.pasted is None:
            self.pasted = np.zeros(len(self.points), dtype=bool)

    @property
    def image_dims(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]

    def gt_boxes(self) -> np.ndarray:
        if not self.labels:
            return np.zeros((0, 7))
        return np.stack([l.box.as_array() for l in self.labels])

    def gt_classes(self) -> np.ndarray:
        return np.array([l.box.class_id for l in self.labels], dtype=np.int64)


def frames_equal(a: Frame, b: Frame) -> bool:
    """Field-for-field equality (points, image and calib compared bit-exactly)."""
    return (a.domain == b.domain and a.frame_id == b.frame_id
            and a.points.shape == b.points.shape and np.array_equal(a.points, b.points)
            and a.image.shape == b.image.shape and np.array_equal(a.image, b.image)
            and np.array_equal(a.calib.P, b.calib.P) and a.labels == b.labels)


def canonical_label_order(labels: list) -> list:
    """Sort by class id, then BEV range, then original position."""
    keyed = sorted(enumerate(labels), key=lambda il: (
        il[1].box.class_id, il[1].box.cx ** 2 + il[1].box.cy ** 2, il[0]))
    return [l for _, l in keyed]


def _fmt(x: float) -> str:
    return repr(float(x))


def format_label_line(label: Label, classes: ClassSet) -> str:
    b = label.box
    fields = [classes.name_of(b.class_id), _fmt(label.truncation), str(int(label.occlusion)),
              _fmt(label.alpha), *(_fmt(v) for v in label.bbox),
              _fmt(b.dz), _fmt(b.dy), _fmt(b.dx), _fmt(b.cx), _fmt(b.cy), _fmt(b.cz), _fmt(b.theta)]
    if label.score is not None:
        fields.append(_fmt(label.score))
    return " ".join(fields)


def parse_label_line(line: str, classes: ClassSet, path="<label>", lineno: int = 0) -> Label | None:
    """Parse one KITTI label line; returns ``None`` for classes outside ``classes``."""
    parts = line.split()
    if len(parts) not in (LABEL_FIELDS, LABEL_FIELDS + 1):
        raise MalformedFileError(path, lineno, f"expected 15 or 16 fields, got {len(parts)}")
    name = parts[0]
    try:
        vals = [float(v) for v in parts[1:]]
    except ValueError as exc:
        raise MalformedFileError(path, lineno, f"non-numeric field ({exc})") from None
    if name not in classes:
        return None
    trunc, occ, alpha = vals[0], vals[1], vals[2]
    bbox = tuple(vals[3:7])
    h, w, l, x, y, z, ry = vals[7:14]
    if occ != int(occ):
        raise MalformedFileError(path, lineno, f"occlusion must be an integer, got {occ}")
    try:
        box = Box3D(x, y, z, l, w, h, ry, classes.id_of(name))
    except ValueError as exc:
        raise MalformedFileError(path, lineno, str(exc)) from None
    score = vals[14] if len(vals) == 15 else None
    return Label(box, trunc, int(occ), bbox, alpha, score)


def read_labels(path, classes: ClassSet = ClassSet()) -> list:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing label file {path}")
    out = []
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        lab = parse_label_line(line, classes, path, i)
        if lab is not None:
            out.append(lab)
    return out


def write_labels(path, labels: list, classes: ClassSet = ClassSet()) -> None:
    lines = [format_label_line(l, classes) for l in canonical_label_order(labels)]
    Path(path).write_text("".join(s + "\n" for s in lines), encoding="utf-8")


def read_calib(path) -> CameraCalib:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing calib file {path}")
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if line.startswith("P2:"):
            nums = line[3:].split()
            if len(nums) != 12:
                raise MalformedFileError(path, i, f"P2 needs 12 numbers, got {len(nums)}")
            try:
                return CameraCalib(np.array([float(v) for v in nums]).reshape(3, 4))
            except ValueError as exc:
                raise MalformedFileError(path, i, str(exc)) from None
    raise MalformedFileError(path, 0, "no P2 entry")


def read_points(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing point file {path}")
    raw = path.read_bytes()
    if len(raw) % 16:
        raise MalformedFileError(path, 0, f"{len(raw)} bytes is not a whole number of 16-byte points")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float32)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing image file {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Snap an image to the 8-bit grid so it survives a PNG round trip bit-exactly."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255) / 255.0


def frame_paths(split_dir, frame_id: str) -> dict:
    d = Path(split_dir)
    return {"points": d / "velodyne" / f"{frame_id}.bin", "image": d / "image_2" / f"{frame_id}.png",
            "calib": d / "calib" / f"{frame_id}.txt", "labels": d / "label_2" / f"{frame_id}.txt"}


def read_frame(split_dir, frame_id: str, domain: str | None = None,
               classes: ClassSet = ClassSet()) -> Frame:
    """Read one frame; the domain comes from ``{split_dir}/domain.json`` unless given."""
    p = frame_paths(split_dir, frame_id)
    for kind, path in p.items():
        if not path.exists():
            raise FileNotFoundError(f"frame {frame_id}: missing {kind} file {path}")
    if domain is None:
        djson = Path(split_dir) / "domain.json"
        domain = json.loads(djson.read_text(encoding="utf-8"))["name"] if djson.exists() else ""
    return Frame(read_points(p["points"]), read_image(p["image"]), read_calib(p["calib"]),
                 read_labels(p["labels"], classes), domain, frame_id)


def write_frame(frame: Frame, split_dir, classes: ClassSet = ClassSet()) -> None:
    if not frame.frame_id:
        raise ValueError("frame needs a frame_id to be written")
    p = frame_paths(split_dir, frame.frame_id)
    for path in p.values():
        path.parent.mkdir(parents=True, exist_ok=True)
    p["points"].write_bytes(np.ascontiguousarray(frame.points, dtype="<f4").tobytes())
    write_image(p["image"], frame.image)
    p["calib"].write_text("P2: " + " ".join(_fmt(v) for v in frame.calib.P.reshape(-1)) + "\n",
                          encoding="utf-8")
    write_labels(p["labels"], frame.labels, classes)


def write_split(split_dir, frames: list, profile: DomainProfile,
                classes: ClassSet = ClassSet()) -> None:
    d = Path(split_dir)
    d.mkdir(parents=True, exist_ok=True)
    for f in frames:
        write_frame(f, d, classes)
    (d / "domain.json").write_text(json.dumps(profile.to_json(), indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    (d / "frames.txt").write_text("".join(f.frame_id + "\n" for f in frames), encoding="utf-8")


def list_frame_ids(split_dir) -> list[str]:
    d = Path(split_dir)
    listing = d / "frames.txt"
    if listing.exists():
        return [s.strip() for s in listing.read_text(encoding="utf-8").splitlines() if s.strip()]
    return sorted(p.stem for p in (d / "velodyne").glob("*.bin"))


def read_split_profile(split_dir) -> DomainProfile:
    path = Path(split_dir) / "domain.json"
    if not path.exists():
        raise FileNotFoundError(f"missing {path}")
    return DomainProfile.from_json(json.loads(path.read_text(encoding="utf-8")))


def read_split(split_dir, classes: ClassSet = ClassSet()) -> list[Frame]:
    prof = read_split_profile(split_dir)
    return [read_frame(split_dir, i, prof.name, classes) for i in list_frame_ids(split_dir)]


# --- normalization --------------------------------------------------------------------

def fov_mask(xyz, calib: CameraCalib, image_dims) -> np.ndarray:
    H, W = image_dims
    u, v, depth = calib.project(xyz)
    with np.errstate(invalid="ignore"):
        return (depth > 0) & (u >= 0) & (u < W) & (v >= 0) & (v < H)


def range_mask(xyz, pc_range) -> np.ndarray:
    xyz = np.asarray(xyz)
    lo, hi = np.asarray(pc_range[:3]), np.asarray(pc_range[3:])
    return np.all((xyz[:, :3] >= lo) & (xyz[:, :3] < hi), axis=1)


def shift_calib(calib: CameraCalib, dz: float) -> CameraCalib:
    """Calibration for points translated by ``(0, 0, dz)`` so projections stay put."""
    P = calib.P.copy()
    P[:, 3] -= dz * P[:, 2]
    return CameraCalib(P)


def normalize_to_canonical(frame: Frame, profile: DomainProfile, apply_shift: bool = True) -> Frame:
    """Restrict to the camera FOV, apply the profile's ground shift, clip to its range.

    ``apply_shift=False`` skips the ground shift (used for freshly synthesized frames).
    """
    pts = frame.points
    keep = fov_mask(pts[:, :3].astype(np.float64), frame.calib, frame.image_dims)
    pts = pts[keep].copy()
    pasted = frame.pasted[keep]
    shift = float(profile.ground_shift_on_eval) if apply_shift else 0.0
    calib = frame.calib
    labels = list(frame.labels)
    if shift != 0.0:
        pts[:, 2] = (pts[:, 2].astype(np.float64) + shift).astype(np.float32)
        calib = shift_calib(calib, shift)
        labels = [replace(l, box=replace(l.box, cz=l.box.cz + shift)) for l in labels]
    inr = range_mask(pts[:, :3], profile.point_cloud_range)
    pts, pasted = pts[inr], pasted[inr]
    r = profile.point_cloud_range
    labels = [l for l in labels if r[0] <= l.box.cx < r[3] and r[1] <= l.box.cy < r[4]]
    return Frame(pts, frame.image, calib, canonical_label_order(labels), frame.domain,
                 frame.frame_id, pasted)


# --- synthetic scenes -----------------------------------------------------------------

CLASS_COLORS = {0: (0.80, 0.12, 0.10), 1: (0.15, 0.25, 0.85), 2: (0.10, 0.70, 0.25)}
CLASS_INTENSITY = {0: 0.65, 1: 0.35, 2: 0.50}
CLASS_MIX = (0.6, 0.2, 0.2)
SENSOR_ELEVATION = (math.radians(-24.9), math.radians(2.0))
CAMERA_OFFSET = np.array([0.27, 0.0, -0.08])
LIDAR_TO_CAM = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def camera_matrices(image_dims, focal_ratio: float = 0.58, cy_ratio: float = 0.46):
    H, W = image_dims
    f = focal_ratio * W
    K = np.array([[f, 0.0, W / 2.0], [0.0, f, cy_ratio * H], [0.0, 0.0, 1.0]])
    t = -LIDAR_TO_CAM @ CAMERA_OFFSET
    return K, LIDAR_TO_CAM, t


def make_calib(image_dims=DEFAULT_IMAGE_DIMS) -> CameraCalib:
    """Forward camera sitting just ahead of and below the LiDAR, KITTI-like intrinsics."""
    K, R, t = camera_matrices(image_dims)
    return CameraCalib(K @ np.c_[R, t])


def _to_local(points, boxes):
    # points (N,3), boxes (M,7) -> (N,M,3) in each box frame
    rel = points[:, None, :] - boxes[None, :, :3]
    c, s = np.cos(boxes[:, 6]), np.sin(boxes[:, 6])
    lx = rel[..., 0] * c + rel[..., 1] * s
    ly = -rel[..., 0] * s + rel[..., 1] * c
    return np.stack([lx, ly, rel[..., 2]], axis=-1)


def ray_box_entry(origin, dirs, boxes) -> np.ndarray:
    """Entry parameter ``t`` of rays ``origin + t * dirs`` into boxes, ``inf`` on a miss."""
    n, m = len(dirs), len(boxes)
    if n == 0 or m == 0:
        return np.full((n, m), np.inf)
    o = _to_local(np.asarray(origin, dtype=np.float64)[None], boxes)[0]
    c, s = np.cos(boxes[:, 6]), np.sin(boxes[:, 6])
    dl = np.stack([dirs[:, None, 0] * c + dirs[:, None, 1] * s,
                   -dirs[:, None, 0] * s + dirs[:, None, 1] * c,
                   np.broadcast_to(dirs[:, None, 2], (n, m))], axis=-1)
    half = 0.5 * boxes[:, 3:6]
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half[None] - o[None]) / dl
        t2 = (half[None] - o[None]) / dl
    inside_slab = np.abs(o)[None] <= half[None]
    lo = np.where(dl == 0, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(dl == 0, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    tmin, tmax = lo.max(axis=-1), hi.min(axis=-1)
    hit = (tmax >= tmin) & (tmin > 1e-9)
    return np.where(hit, tmin, np.inf)


def _visible_faces(box, eye):
    """Yield ``(axis, sign, area, face_center)`` for faces of ``box`` facing ``eye``."""
    c, s = math.cos(box[6]), math.sin(box[6])
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    half = 0.5 * box[3:6]
    out = []
    for axis in range(3):
        for sign in (1.0, -1.0):
            n_local = np.zeros(3)
            n_local[axis] = sign
            center = box[:3] + R @ (n_local * half)
            normal = R @ n_local
            if normal @ (eye - center) > 1e-9:
                others = [a for a in range(3) if a != axis]
                area = box[3 + others[0]] * box[3 + others[1]]
                out.append((axis, sign, area, center, normal))
    return out


def _sample_face(box, axis, sign, n, rng, inset: float = 0.0):
    half = 0.5 * box[3:6]
    local = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    local[:, axis] = sign * max(half[axis] - inset, 0.0)
    c, s = math.cos(box[6]), math.sin(box[6])
    x = local[:, 0] * c - local[:, 1] * s
    y = local[:, 0] * s + local[:, 1] * c
    return np.c_[x, y, local[:, 2]] + box[:3]


def _face_grid(box, axis, sign, spacing):
    half = 0.5 * box[3:6]
    others = [a for a in range(3) if a != axis]
    n0 = max(int(math.ceil(box[3 + others[0]] / spacing)), 1)
    n1 = max(int(math.ceil(box[3 + others[1]] / spacing)), 1)
    g0 = (np.arange(n0) + 0.5) / n0 * 2 - 1
    g1 = (np.arange(n1) + 0.5) / n1 * 2 - 1
    a, b = np.meshgrid(g0, g1, indexing="ij")
    local = np.zeros((a.size, 3))
    local[:, others[0]] = a.ravel() * half[others[0]]
    local[:, others[1]] = b.ravel() * half[others[1]]
    local[:, axis] = sign * half[axis]
    c, s = math.cos(box[6]), math.sin(box[6])
    x = local[:, 0] * c - local[:, 1] * s
    y = local[:, 0] * s + local[:, 1] * c
    return np.c_[x, y, local[:, 2]] + box[:3]


def _inside_box(pts, box) -> np.ndarray:
    c, s = math.cos(box[6]), math.sin(box[6])
    d = pts - box[:3]
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    return (np.abs(lx) <= box[3] / 2) & (np.abs(ly) <= box[4] / 2) & (np.abs(d[:, 2]) <= box[5] / 2)


def _shadowed(eye, pts, boxes, own: int) -> np.ndarray:
    """Whether the segment ``eye -> pts`` passes through any box other than ``own``."""
    if len(boxes) <= 1 or len(pts) == 0:
        return np.zeros(len(pts), dtype=bool)
    others = np.array([i for i in range(len(boxes)) if i != own])
    t = ray_box_entry(eye, pts - eye, boxes[others])
    return np.any(t < 1.0 - 1e-9, axis=1)


def occlusion_level(fraction: float) -> int:
    lo, hi = OCCLUSION_THRESHOLDS
    return 0 if fraction < lo else (1 if fraction < hi else 2)


def _place_objects(profile, classes, n_objects, rng, calib, image_dims, max_distance,
                   existing=(), only_class=None):
    H, W = image_dims
    K, _, _ = camera_matrices(image_dims)
    half_fov = math.atan2(W / 2.0, K[0, 0])
    r = profile.point_cloud_range
    boxes, cls = [], []
    names = classes.names
    mix = np.array(CLASS_MIX[:len(names)], dtype=np.float64)
    mix /= mix.sum()
    for _ in range(n_objects):
        c = int(rng.choice(len(names), p=mix)) if only_class is None else only_class
        anchor = np.array(profile.anchors[names[c]])
        for _attempt in range(60):
            dims = np.maximum(anchor * (1.0 + 0.1 * rng.standard_normal(3)), 0.3 * anchor)
            dist = rng.uniform(5.0, max_distance)
            az = rng.uniform(-half_fov - math.radians(4), half_fov + math.radians(4))
            x, y = dist * math.cos(az), dist * math.sin(az)
            if not (r[0] <= x < r[3] and r[1] <= y < r[4]):
                continue
            if c == 0 and rng.uniform() < 0.7:
                theta = rng.choice([0.0, math.pi]) + rng.normal(0.0, 0.15)
            else:
                theta = rng.uniform(-math.pi, math.pi)
            z = -profile.lidar_height + dims[2] / 2.0
            cand = np.array([x, y, z, *dims, wrap_angle(theta)])
            allb = list(existing) + boxes
            if allb:
                grown = cand.copy()
                grown[3:5] += 0.6
                if iou_bev_matrix(grown[None], np.array(allb)).max() > 0:
                    continue
            boxes.append(cand)
            cls.append(c)
            break
    return boxes, cls


def _place_clutter(profile, n_clutter, rng, existing, max_distance):
    r = profile.point_cloud_range
    boxes = []
    for _ in range(n_clutter):
        for _attempt in range(60):
            dims = np.array([rng.uniform(0.3, 6.0), rng.uniform(0.3, 1.5), rng.uniform(0.5, 3.0)])
            dist = rng.uniform(4.0, max_distance)
            az = rng.uniform(-math.pi, math.pi)
            x, y = dist * math.cos(az), dist * math.sin(az)
            if not (r[0] <= x < r[3] and r[1] <= y < r[4]):
                continue
            cand = np.array([x, y, -profile.lidar_height + dims[2] / 2.0, *dims,
                             rng.uniform(-math.pi, math.pi)])
            allb = existing + boxes
            if allb:
                grown = cand.copy()
                grown[3:5] += 0.6
                if iou_bev_matrix(grown[None], np.array(allb)).max() > 0:
                    continue
            boxes.append(cand)
            break
    return boxes


def _lidar_returns(profile, boxes, intens, n_rays, rng):
    """Ground returns by ray casting plus 1/r^2-dense returns on visible box faces."""
    h = profile.lidar_height
    r = profile.point_cloud_range
    eye = np.zeros(3)
    el_lo, el_hi = SENSOR_ELEVATION
    solid_angle = 2 * math.pi * (math.sin(el_hi) - math.sin(el_lo))
    rays_per_sr = n_rays / solid_angle
    az = rng.uniform(-math.pi, math.pi, n_rays)
    el = np.arcsin(rng.uniform(math.sin(el_lo), math.sin(el_hi), n_rays))
    dirs = np.c_[np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
    down = dirs[:, 2] < 0
    dirs = dirs[down]
    t_ground = -h / dirs[:, 2]
    if len(boxes):
        t_box = ray_box_entry(eye, dirs, boxes).min(axis=1)
        dirs, t_ground = dirs[t_box > t_ground], t_ground[t_box > t_ground]
    t_ground = t_ground + rng.normal(0.0, 0.015, len(t_ground))
    ground = dirs * t_ground[:, None]
    ground_i = np.clip(0.15 + 0.05 * rng.standard_normal(len(ground)), 0.0, 1.0)
    chunks = [np.c_[ground, ground_i]]
    counts = np.zeros(len(boxes), dtype=np.int64)
    for k, box in enumerate(boxes):
        pts_k = []
        faces = _visible_faces(box, eye)
        for axis, sign, area, center, normal in faces:
            dist = np.linalg.norm(center)
            cosang = abs(normal @ center) / max(dist, 1e-9)
            lam = rays_per_sr * area * cosang / max(dist * dist, 1e-9)
            n = rng.poisson(lam)
            if n:
                pts_k.append(_sample_face(box, axis, sign, n, rng, FACE_INSET))
        pk = np.concatenate(pts_k) if pts_k else np.zeros((0, 3))
        pk = pk[~_shadowed(eye, pk, boxes, k)]
        if not len(pk):
            # a visible object always gets at least one unshadowed return when one exists
            weights = np.array([f[2] * abs(f[4] @ f[3]) / np.linalg.norm(f[3]) ** 3 for f in faces])
            for _ in range(32):
                fi = int(rng.choice(len(faces), p=weights / weights.sum()))
                cand = _sample_face(box, faces[fi][0], faces[fi][1], 1, rng, FACE_INSET)
                if not _shadowed(eye, cand, boxes, k)[0]:
                    pk = cand
                    break
        rng_dir = pk / np.linalg.norm(pk, axis=1, keepdims=True)
        noisy = pk + rng_dir * rng.normal(0.0, 0.015, (len(pk), 1))
        # range noise must not carry a return off its own object
        out = ~_inside_box(noisy, box)
        noisy[out] = pk[out]
        pk = noisy
        ik = np.clip(intens[k] + 0.08 * rng.standard_normal(len(pk)), 0.0, 1.0)
        counts[k] = len(pk)
        chunks.append(np.c_[pk, ik])
    pts = np.concatenate(chunks)
    inr = (pts[:, 0] >= r[0]) & (pts[:, 0] < r[3]) & (pts[:, 1] >= r[1]) & (pts[:, 1] < r[4])
    return pts[inr].astype(np.float32)


def _render_image(boxes, colors, profile, image_dims, rng):
    """Background ground/sky plus z-buffered splats of camera-facing box surfaces."""
    H, W = image_dims
    K, R, t = camera_matrices(image_dims)
    eye = CAMERA_OFFSET
    vv, uu = np.mgrid[0:H, 0:W]
    pix = np.stack([uu + 0.5, vv + 0.5, np.ones_like(uu, dtype=np.float64)], axis=-1).reshape(-1, 3)
    d_cam = pix @ np.linalg.inv(K).T
    d = d_cam @ R  # camera -> LiDAR frame direction (R is orthonormal)
    img = np.empty((H * W, 3))
    down = d[:, 2] < -1e-6
    tg = np.where(down, (-profile.lidar_height - eye[2]) / np.where(down, d[:, 2], -1.0), np.inf)
    dist = tg * np.linalg.norm(d[:, :2], axis=1)
    fade = np.clip(dist / 80.0, 0.0, 1.0)[:, None]
    ground = np.array([0.42, 0.41, 0.40]) * (1 - fade) + np.array([0.60, 0.62, 0.65]) * fade
    sky_t = np.clip(-d_cam[:, 1] / np.linalg.norm(d_cam, axis=1), 0.0, 1.0)[:, None]
    sky = np.array([0.70, 0.78, 0.88]) * (1 - sky_t) + np.array([0.45, 0.60, 0.85]) * sky_t
    img[:] = np.where(down[:, None] & np.isfinite(tg)[:, None], ground, sky)

    f = K[0, 0]
    spacing = 0.1
    all_pix, all_depth, all_col = [], [], []
    shade = {(2, 1.0): 1.0, (2, -1.0): 0.5, (0, 1.0): 0.85, (0, -1.0): 0.8, (1, 1.0): 0.7, (1, -1.0): 0.72}
    for box, col in zip(boxes, colors):
        for axis, sign, _area, _c, _n in _visible_faces(box, eye):
            pts = _face_grid(box, axis, sign, spacing)
            cam = (pts - eye) @ R.T
            depth = cam[:, 2]
            ok = depth > 0.5
            if not np.any(ok):
                continue
            cam, depth = cam[ok], depth[ok]
            u = f * cam[:, 0] / depth + K[0, 2]
            v = f * cam[:, 1] / depth + K[1, 2]
            rad = np.clip(np.ceil(0.5 * spacing * f / depth).astype(int), 0, 6)
            c = np.clip(np.asarray(col) * shade[(axis, sign)], 0, 1)
            for rr in np.unique(rad):
                sel = rad == rr
                offs = np.arange(-rr, rr + 1)
                ou, ov = np.meshgrid(offs, offs)
                pu = (np.floor(u[sel])[:, None] + ou.ravel()[None]).ravel().astype(np.int64)
                pv = (np.floor(v[sel])[:, None] + ov.ravel()[None]).ravel().astype(np.int64)
                dd = np.repeat(depth[sel], ou.size)
                inb = (pu >= 0) & (pu < W) & (pv >= 0) & (pv < H)
                all_pix.append(pv[inb] * W + pu[inb])
                all_depth.append(dd[inb])
                all_col.append(np.broadcast_to(c, (int(inb.sum()), 3)))
    px = np.concatenate(all_pix) if all_pix else np.zeros(0, np.int64)
    if len(px):
        dp = np.concatenate(all_depth)
        cl = np.concatenate(all_col)
        order = np.lexsort((dp, px))
        px, cl = px[order], cl[order]
        first = np.r_[True, px[1:] != px[:-1]]
        img[px[first]] = cl[first]
    img = img.reshape(H, W, 3) + rng.normal(0.0, 0.03, (H, W, 3))
    return quantize_image(np.clip(img, 0.0, 1.0))


def _truncation(box, calib, image_dims, rng, n: int = 256) -> float:
    local = rng.uniform(-0.5, 0.5, (n, 3)) * box[3:6]
    c, s = math.cos(box[6]), math.sin(box[6])
    pts = np.c_[local[:, 0] * c - local[:, 1] * s, local[:, 0] * s + local[:, 1] * c, local[:, 2]] + box[:3]
    return float(1.0 - fov_mask(pts, calib, image_dims).mean())


def _occlusion_fraction(k, boxes, rng, n: int = 256) -> float:
    eye = CAMERA_OFFSET
    faces = _visible_faces(boxes[k], eye)
    areas = np.array([f[2] for f in faces])
    picks = rng.choice(len(faces), size=n, p=areas / areas.sum())
    pts = np.concatenate([_sample_face(boxes[k], faces[i][0], faces[i][1], int((picks == i).sum()), rng)
                          for i in range(len(faces))])
    return float(_shadowed(eye, pts, boxes, k).mean())


def bbox_2d(box, calib: CameraCalib, image_dims) -> tuple:
    H, W = image_dims
    u, v, depth = calib.project(box_corners(box))
    if np.all(depth <= 0):
        return (0.0, 0.0, 0.0, 0.0)
    u, v = u[depth > 0], v[depth > 0]
    return (float(np.clip(u.min(), 0, W)), float(np.clip(v.min(), 0, H)),
            float(np.clip(u.max(), 0, W)), float(np.clip(v.max(), 0, H)))


def generate_scene(profile: DomainProfile, seed: int, n_objects: int,
                   image_dims=DEFAULT_IMAGE_DIMS, point_scale: float = 0.02,
                   classes: ClassSet = ClassSet(), n_clutter: int | None = None,
                   max_distance: float = 45.0, frame_id: str = "",
                   n_lookalikes: int | None = None) -> Frame:
    """Synthesize one frame for ``profile``; deterministic in ``(profile, seed)``.

    The LiDAR sits at the origin with the ground plane at ``z = -lidar_height``.
    ``round(nominal_point_count * point_scale)`` rays are cast over the full
    azimuth; box faces receive returns at the same angular density (so their
    density falls off as 1/r^2) and shadow both the ground and farther boxes.

    Lookalikes are unlabeled boxes with the first class's size and LiDAR
    intensity but clutter colors: only the image tells them apart.
    """
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(profile.name.encode())])
    rng = np.random.default_rng(ss)
    calib = make_calib(image_dims)
    obj, cls = _place_objects(profile, classes, n_objects, rng, calib, image_dims, max_distance)
    if n_clutter is None:
        n_clutter = int(rng.integers(2, 6))
    if n_lookalikes is None:
        n_lookalikes = int(rng.integers(0, 4))
    look, _ = _place_objects(profile, classes, n_lookalikes, rng, calib, image_dims, max_distance,
                             existing=obj, only_class=0)
    clutter = look + _place_clutter(profile, n_clutter, rng, obj + look, max_distance)
    boxes = np.array(obj + clutter).reshape(-1, 7)
    intens = ([CLASS_INTENSITY.get(c, 0.5) for c in cls] + [CLASS_INTENSITY[0]] * len(look)
              + list(np.clip(rng.uniform(0.1, 0.5, len(clutter) - len(look)), 0, 1)))
    n_rays = int(round(profile.nominal_point_count * point_scale))
    points = _lidar_returns(profile, boxes, intens, n_rays, rng)
    colors = [np.clip(np.array(CLASS_COLORS.get(c, (0.5, 0.5, 0.5))) + rng.normal(0, 0.04, 3), 0, 1)
              for c in cls]
    colors += [np.clip(np.array([0.35, 0.33, 0.25]) + rng.uniform(-0.1, 0.15, 3), 0, 1) for _ in clutter]
    image = _render_image(boxes, colors, profile, image_dims, rng)
    labels = []
    for k, c in enumerate(cls):
        b = boxes[k]
        box = Box3D(*b, class_id=c)
        trunc = _truncation(b, calib, image_dims, rng)
        occ = occlusion_level(_occlusion_fraction(k, boxes, rng))
        labels.append(Label(box, round(trunc, 4), occ, bbox_2d(b, calib, image_dims),
                            wrap_angle(box.theta - math.atan2(box.cy, box.cx))))
    return Frame(points, image, calib, canonical_label_order(labels), profile.name, frame_id)


# --- multi-source batching ----------------------------------------------------------

@dataclass
class MultiSourceBatch:
    frames: list
    per_domain_counts: dict
    domains: list = field(default_factory=list)


def _check_sources(datasets: dict, b: int) -> int:
    if not datasets:
        raise ValueError("need at least one dataset")
    n_s = len(datasets)
    if b <= 0 or b % n_s:
        raise ValueError(f"batch size {b} is not divisible by the {n_s} source domains")
    for name, frames in datasets.items():
        if not len(frames):
            raise ValueError(f"dataset {name!r} is empty")
    return b // n_s


def sample_multi_source_batch(datasets: dict, b: int, seed: int) -> MultiSourceBatch:
    """Draw ``b / n_s`` distinct frames from every domain (domains in sorted order)."""
    per = _check_sources(datasets, b)
    rng = np.random.default_rng(seed)
    frames, doms, counts = [], [], {}
    for name in sorted(datasets):
        items = datasets[name]
        if len(items) < per:
            raise ValueError(f"dataset {name!r} has {len(items)} frames, needs {per}")
        for i in rng.choice(len(items), size=per, replace=False):
            frames.append(items[int(i)])
            doms.append(name)
        counts[name] = per
    return MultiSourceBatch(frames, counts, doms)


class MultiSourceSampler:
    """Epoch iterator of equal-domain batches, without replacement within an epoch."""

    def __init__(self, datasets: dict, b: int, seed: int):
        self.per = _check_sources(datasets, b)
        self.datasets = {k: datasets[k] for k in sorted(datasets)}
        self.b = b
        self.seed = seed

    def __len__(self):
        return min(len(v) for v in self.datasets.values()) // self.per

    def epoch(self, k: int) -> list[MultiSourceBatch]:
        perms = {}
        for j, (name, items) in enumerate(self.datasets.items()):
            rng = np.random.default_rng([self.seed, k, j])
            perms[name] = rng.permutation(len(items))
        out = []
        for i in range(len(self)):
            frames, doms = [], []
            for name, items in self.datasets.items():
                for idx in perms[name][i * self.per:(i + 1) * self.per]:
                    frames.append(items[int(idx)])
                    doms.append(name)
            out.append(MultiSourceBatch(frames, {n: self.per for n in self.datasets}, doms))
        return out
