"""Recorded global augmentations and their exact coordinate reversal.

Application order is fixed: ground-truth pasting, then global rotation about
+z, then global scaling. Each kind draws from its own child seed, so switching
one kind off leaves the draws of the others unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Box3D, iou_bev_matrix, points_in_box, wrap_angle
from .scene import Frame, Label

GT_SAMPLE = "GtSample"
ROTATION = "GlobalRotation"
SCALING = "GlobalScaling"


@dataclass
class AugConfig:
    rotation_range: tuple = (-math.pi / 4, math.pi / 4)
    scale_range: tuple = (0.95, 1.05)
    gt_sample_n: int = 0

    def __post_init__(self):
        self.rotation_range = tuple(float(v) for v in self.rotation_range)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        if len(self.rotation_range) != 2 or self.rotation_range[0] > self.rotation_range[1]:
            raise ValueError("rotation_range must be [lo, hi] with lo <= hi")
        lo, hi = self.scale_range
        if lo <= 0 or lo > hi:
            raise ValueError("scale_range must be [lo, hi] with 0 < lo <= hi")
        if int(self.gt_sample_n) < 0:
            raise ValueError("gt_sample_n must be >= 0")
        self.gt_sample_n = int(self.gt_sample_n)

    @classmethod
    def disabled(cls) -> "AugConfig":
        return cls((0.0, 0.0), (1.0, 1.0), 0)

    @property
    def rotation_enabled(self) -> bool:
        return self.rotation_range != (0.0, 0.0)

    @property
    def scaling_enabled(self) -> bool:
        return self.scale_range != (1.0, 1.0)

    def to_json(self) -> dict:
        return {"rotation_range": list(self.rotation_range), "scale_range": list(self.scale_range),
                "gt_sample_n": self.gt_sample_n}

    @classmethod
    def from_json(cls, d: dict) -> "AugConfig":
        base = cls()
        return cls(tuple(d.get("rotation_range", base.rotation_range)),
                   tuple(d.get("scale_range", base.scale_range)),
                   int(d.get("gt_sample_n", base.gt_sample_n)))


@dataclass(frozen=True)
class AugEntry:
    kind: str
    param: object


@dataclass
class AugLedger:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def kinds(self) -> list[str]:
        return [e.kind for e in self.entries]

    def append(self, kind: str, param) -> None:
        if kind == SCALING and not param > 0:
            raise ValueError("scale factor must be > 0")
        self.entries.append(AugEntry(kind, param))


@dataclass
class GtCluster:
    label: Label
    points: np.ndarray


class GtDatabase:
    """Object point clusters harvested from labeled frames, per class id."""

    def __init__(self, clusters: list[GtCluster] | None = None):
        self.clusters = list(clusters or [])

    def __len__(self):
        return len(self.clusters)

    @classmethod
    def from_frames(cls, frames, min_points: int = 5) -> "GtDatabase":
        out = []
        for f in frames:
            pts = np.asarray(f.points, dtype=np.float64)
            for lab in f.labels:
                inside = points_in_box(pts[:, :3], lab.box.as_array())
                if inside.sum() >= min_points:
                    out.append(GtCluster(lab, pts[inside].copy()))
        return cls(out)


def _rotate_xy(xyz: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    out = np.array(xyz, dtype=np.float64, copy=True)
    x, y = xyz[..., 0], xyz[..., 1]
    out[..., 0] = c * x - s * y
    out[..., 1] = s * x + c * y
    return out


def _rotate_label(lab: Label, angle: float) -> Label:
    b = lab.box
    cx, cy = _rotate_xy(np.array([b.cx, b.cy, b.cz]), angle)[:2]
    return replace(lab, box=replace(b, cx=float(cx), cy=float(cy), theta=wrap_angle(b.theta + angle)))


def _scale_label(lab: Label, s: float) -> Label:
    b = lab.box
    return replace(lab, box=replace(b, cx=b.cx * s, cy=b.cy * s, cz=b.cz * s,
                                    dx=b.dx * s, dy=b.dy * s, dz=b.dz * s))


def _paste(points, pasted, labels, db: GtDatabase, n: int, rng):
    boxes = [l.box.as_array() for l in labels]
    order = rng.permutation(len(db))[:n]
    new_boxes = []
    for i in order:
        cl = db.clusters[int(i)]
        cand = cl.label.box.as_array()
        if boxes and iou_bev_matrix(cand[None], np.array(boxes)).max() > 0:
            continue
        keep = ~points_in_box(points[:, :3], cand)
        points = np.concatenate([points[keep], cl.points])
        pasted = np.concatenate([pasted[keep], np.ones(len(cl.points), dtype=bool)])
        labels = labels + [cl.label]
        boxes.append(cand)
        new_boxes.append(cl.label.box)
    return points, pasted, labels, new_boxes


def apply_augmentations(frame: Frame, config: AugConfig, seed: int,
                        gt_db: GtDatabase | None = None) -> tuple[Frame, AugLedger]:
    """Augment ``frame``; returns the new frame (float64 points) and its ledger.

    Pasted points keep their source coordinates, are appended after the
    surviving original points and flagged in ``Frame.pasted``. Points keep
    their row order through rotation and scaling.
    """
    seeds = np.random.SeedSequence(int(seed)).spawn(3)
    ledger = AugLedger()
    points = np.array(frame.points, dtype=np.float64, copy=True)
    pasted = np.array(frame.pasted, dtype=bool, copy=True)
    labels = list(frame.labels)

    if config.gt_sample_n > 0 and gt_db is not None and len(gt_db):
        points, pasted, labels, new_boxes = _paste(points, pasted, labels, gt_db,
                                                   config.gt_sample_n, np.random.default_rng(seeds[0]))
        if new_boxes:
            ledger.append(GT_SAMPLE, tuple(new_boxes))

    if config.rotation_enabled:
        angle = float(np.random.default_rng(seeds[1]).uniform(*config.rotation_range))
        points[:, :3] = _rotate_xy(points[:, :3], angle)
        labels = [_rotate_label(l, angle) for l in labels]
        ledger.append(ROTATION, angle)

    if config.scaling_enabled:
        s = float(np.random.default_rng(seeds[2]).uniform(*config.scale_range))
        points[:, :3] *= s
        labels = [_scale_label(l, s) for l in labels]
        ledger.append(SCALING, s)

    if not len(ledger):
        return frame, ledger
    out = Frame(points, frame.image, frame.calib, labels, frame.domain, frame.frame_id, pasted)
    return out, ledger


def forward_coords(coords, ledger: AugLedger) -> np.ndarray:
    """Apply the ledger's geometric transforms, in order, to ``(N, 3)`` coordinates."""
    out = np.array(coords, dtype=np.float64, copy=True).reshape(-1, 3)
    for e in ledger.entries:
        if e.kind == ROTATION:
            out = _rotate_xy(out, e.param)
        elif e.kind == SCALING:
            out = out * e.param
    return out


def reverse_coords(coords, ledger: AugLedger) -> np.ndarray:
    """Map augmented-frame coordinates back to the pre-augmentation frame."""
    out = np.array(coords, dtype=np.float64, copy=True).reshape(-1, 3)
    for e in reversed(ledger.entries):
        if e.kind == ROTATION:
            out = _rotate_xy(out, -e.param)
        elif e.kind == SCALING:
            out = out / e.param
    return out
