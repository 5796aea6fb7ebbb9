"""KITTI-style 3D AP: difficulty buckets, greedy matching, interpolated AP and reports."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import ClassSet, as_box_array, box_corners, iou_3d_matrix
from .scene import (CameraCalib, DomainProfile, Label, frame_paths, list_frame_ids,
                    normalize_to_canonical, read_calib, read_frame, read_labels)

DIFFICULTIES = ("easy", "moderate", "hard")
IGNORED = "ignored"
KITTI_IMAGE_HEIGHT = 375.0

THRESHOLD_PRESETS = {
    "kitti": {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5},
    "nuscenes": {"Car": 0.5, "Pedestrian": 0.25, "Cyclist": 0.25},
    "parta2-main": {"Car": 0.5, "Pedestrian": 0.5, "Cyclist": 0.25},
    "parta2-supplement": {"Car": 0.5, "Pedestrian": 0.25, "Cyclist": 0.25},
}


class EvalIdMismatch(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("frame id mismatch:\n" + "\n".join(problems))


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: dict(THRESHOLD_PRESETS["kitti"]))
    mode: str = "R40"
    difficulty_table: dict = field(default_factory=lambda: {
        "easy": (0.15, 0, 40.0), "moderate": (0.30, 1, 25.0), "hard": (0.50, 2, 25.0)})
    reference_image_height: float | None = KITTI_IMAGE_HEIGHT
    difficulty_by_distance: bool = False
    distance_bins: tuple = (30.0, 50.0)

    def __post_init__(self):
        if self.mode not in ("R40", "R11"):
            raise ValueError(f"unknown interpolation mode {self.mode!r}")
        if any(not 0 < t <= 1 for t in self.iou_thresholds.values()):
            raise ValueError("IoU thresholds must lie in (0, 1]")
        tab = {k: tuple(v) for k, v in self.difficulty_table.items()}
        if set(tab) != set(DIFFICULTIES):
            raise ValueError("difficulty table needs easy, moderate and hard rows")
        e, m, h = (tab[d] for d in DIFFICULTIES)
        if not (e[0] <= m[0] <= h[0] and e[1] <= m[1] <= h[1] and e[2] >= m[2] >= h[2]):
            raise ValueError("difficulty table must be monotone (easy within moderate within hard)")
        self.difficulty_table = tab

    @classmethod
    def for_profile(cls, profile_name: str, preset: str | None = None, **kw) -> "EvalConfig":
        name = preset or ("nuscenes" if profile_name == "nuscenes" else "kitti")
        if name not in THRESHOLD_PRESETS:
            raise ValueError(f"unknown threshold preset {name!r}; known {sorted(THRESHOLD_PRESETS)}")
        return cls(iou_thresholds=dict(THRESHOLD_PRESETS[name]), **kw)

    def to_json(self) -> dict:
        return {"iou_thresholds": dict(self.iou_thresholds), "mode": self.mode,
                "difficulty_table": {k: list(v) for k, v in self.difficulty_table.items()},
                "reference_image_height": self.reference_image_height,
                "difficulty_by_distance": self.difficulty_by_distance,
                "distance_bins": list(self.distance_bins)}

    @classmethod
    def from_json(cls, d: dict) -> "EvalConfig":
        d = dict(d)
        if "preset" in d:
            d["iou_thresholds"] = dict(THRESHOLD_PRESETS[d.pop("preset")])
        if "distance_bins" in d:
            d["distance_bins"] = tuple(d["distance_bins"])
        return cls(**d)


# --- difficulty ---------------------------------------------------------------------------

def difficulty_from_values(truncation: float, occlusion: int, height_px: float, cfg: EvalConfig) -> str:
    for name in DIFFICULTIES:
        max_t, max_o, min_h = cfg.difficulty_table[name]
        if truncation <= max_t and occlusion <= max_o and height_px >= min_h:
            return name
    return IGNORED


def projected_height(box, calib: CameraCalib, image_dims) -> float:
    """Height in pixels of the image-clipped projection of the box corners."""
    H, _ = image_dims
    _, v, depth = calib.project(box_corners(box))
    if not np.any(depth > 0):
        return 0.0
    v = np.clip(v[depth > 0], 0, H)
    return float(v.max() - v.min())


def assign_difficulty(label: Label, calib: CameraCalib, image_dims, cfg: EvalConfig | None = None) -> str:
    cfg = cfg or EvalConfig()
    if cfg.difficulty_by_distance:
        d = float(np.hypot(label.box.cx, label.box.cy))
        lo, hi = cfg.distance_bins
        return "easy" if d < lo else ("moderate" if d < hi else "hard")
    h = projected_height(label.box, calib, image_dims)
    if cfg.reference_image_height:
        h *= cfg.reference_image_height / image_dims[0]
    return difficulty_from_values(label.truncation, label.occlusion, h, cfg)


def in_difficulty(bucket: str, difficulty: str) -> bool:
    """Whether a GT of ``bucket`` counts when evaluating ``difficulty`` (cumulative buckets)."""
    if bucket == IGNORED:
        return False
    return DIFFICULTIES.index(bucket) <= DIFFICULTIES.index(difficulty)


# --- matching and AP ----------------------------------------------------------------------

TP, FP, IGNORE = 1, 0, -1


def match_predictions(det_boxes, det_scores, gt_boxes, gt_valid, iou_thresh: float):
    """Greedy matching of score-sorted detections; returns ``(flags, n_false_negative)``.

    ``gt_valid`` marks GTs of the evaluated difficulty; the others only absorb
    detections (flag ``IGNORE``). Detections are visited by descending score,
    ties by lower index.
    """
    det = as_box_array(det_boxes)
    gt = as_box_array(gt_boxes)
    valid = np.asarray(gt_valid, dtype=bool).reshape(-1)
    sc = np.asarray(det_scores, dtype=np.float64)
    flags = np.full(len(det), FP, dtype=np.int64)
    if len(det) == 0:
        return flags, int(valid.sum())
    if len(gt) == 0:
        return flags, 0
    ious = iou_3d_matrix(det, gt)
    taken = np.zeros(len(gt), dtype=bool)
    for d in np.lexsort((np.arange(len(sc)), -sc)):
        ok = (ious[d] >= iou_thresh) & valid & ~taken
        if ok.any():
            g = int(np.argmax(np.where(ok, ious[d], -1.0)))
            taken[g] = True
            flags[d] = TP
        elif np.any((ious[d] >= iou_thresh) & ~valid):
            flags[d] = IGNORE
    return flags, int((valid & ~taken).sum())


def recall_points(mode: str) -> np.ndarray:
    return np.arange(1, 41) / 40.0 if mode == "R40" else np.linspace(0.0, 1.0, 11)


def average_precision(flags, scores, n_gt: int, mode: str = "R40") -> float | None:
    """Interpolated AP of a pooled detection list; ``None`` when there is no GT.

    Precision/recall points are taken at each distinct score (all detections at
    or above it count), so AP does not depend on the order within score ties.
    """
    if n_gt <= 0:
        return None
    f = np.asarray(flags, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    keep = f != IGNORE
    f, s = f[keep], s[keep]
    if len(f) == 0:
        return 0.0
    order = np.argsort(-s, kind="stable")
    f, s = f[order], s[order]
    tp = np.cumsum(f == TP)
    fp = np.cumsum(f == FP)
    last = np.r_[s[1:] != s[:-1], True]
    tp, fp = tp[last], fp[last]
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # running max from the right: best precision at any recall >= r
    best = np.maximum.accumulate(precision[::-1])[::-1]
    out = []
    for r in recall_points(mode):
        idx = np.flatnonzero(recall >= r - 1e-12)
        out.append(best[idx[0]] if len(idx) else 0.0)
    return float(np.mean(out))


# --- dataset evaluation -------------------------------------------------------------------

@dataclass
class EvalFrame:
    frame_id: str
    gt_labels: list
    calib: CameraCalib
    image_dims: tuple
    detections: list      # list of Label with score


def evaluate_frames(frames: list[EvalFrame], cfg: EvalConfig, classes: ClassSet = ClassSet()) -> dict:
    """AP table ``{class: {difficulty: AP in percent or None}}`` over all frames."""
    frames = sorted(frames, key=lambda f: f.frame_id)
    buckets = [[assign_difficulty(l, f.calib, f.image_dims, cfg) for l in f.gt_labels] for f in frames]
    out = {}
    for cid, name in enumerate(classes.names):
        thr = cfg.iou_thresholds.get(name)
        row = {}
        for diff in DIFFICULTIES:
            if thr is None:
                row[diff] = None
                continue
            all_flags, all_scores, n_gt = [], [], 0
            for f, bk in zip(frames, buckets):
                gi = [i for i, l in enumerate(f.gt_labels) if l.box.class_id == cid]
                gtb = [f.gt_labels[i].box for i in gi]
                valid = [in_difficulty(bk[i], diff) for i in gi]
                dets = [d for d in f.detections if d.box.class_id == cid]
                flags, _ = match_predictions([d.box for d in dets], [d.score for d in dets], gtb, valid, thr)
                all_flags.append(flags)
                all_scores.append([d.score for d in dets])
                n_gt += int(np.sum(valid))
            ap = average_precision(np.concatenate(all_flags) if all_flags else [],
                                   np.concatenate([np.asarray(s, dtype=np.float64) for s in all_scores])
                                   if all_scores else [], n_gt, cfg.mode)
            row[diff] = None if ap is None else 100.0 * ap
        out[name] = row
    return out


def _image_dims(path) -> tuple[int, int]:
    with Image.open(path) as im:
        w, h = im.size
    return h, w


def evaluate_dataset(det_dir, gt_dir, cfg: EvalConfig, profile: DomainProfile | None = None,
                     classes: ClassSet = ClassSet()) -> dict:
    """Evaluate prediction label files in ``det_dir`` against the split ``gt_dir``.

    GT frames are passed through :func:`normalize_to_canonical` when a profile
    is given. Every GT frame id needs a prediction file and vice versa.
    """
    det_dir, gt_dir = Path(det_dir), Path(gt_dir)
    gt_ids = list_frame_ids(gt_dir)
    det_ids = sorted(p.stem for p in det_dir.glob("*.txt"))
    problems = [f"{i}: no prediction file" for i in sorted(set(gt_ids) - set(det_ids))]
    problems += [f"{i}: prediction without ground truth" for i in sorted(set(det_ids) - set(gt_ids))]
    if problems:
        raise EvalIdMismatch(problems)
    frames = []
    for fid in gt_ids:
        if profile is not None:
            fr = normalize_to_canonical(read_frame(gt_dir, fid, profile.name, classes), profile)
            labels, calib, dims = fr.labels, fr.calib, fr.image_dims
        else:
            p = frame_paths(gt_dir, fid)
            labels, calib, dims = read_labels(p["labels"], classes), read_calib(p["calib"]), _image_dims(p["image"])
        dets = read_labels(det_dir / f"{fid}.txt", classes)
        for d in dets:
            if d.score is None:
                raise EvalIdMismatch([f"{fid}: prediction line without a score field"])
        frames.append(EvalFrame(fid, labels, calib, dims, dets))
    return evaluate_frames(frames, cfg, classes)


def format_table(report: dict, title: str = "") -> str:
    """Aligned text table, one row per class with easy / moderate / hard columns."""
    lines = [title] if title else []
    lines.append(f"{'class':<12}{'easy':>10}{'moderate':>10}{'hard':>10}")
    for name, row in report.items():
        cells = ["-" if row[d] is None else f"{row[d]:.2f}" for d in DIFFICULTIES]
        lines.append(f"{name:<12}" + "".join(f"{c:>10}" for c in cells))
    return "\n".join(lines) + "\n"


def write_report(report: dict, out_dir, meta: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"schema": 1, "ap": report, "meta": meta or {}}
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "report.txt").write_text(format_table(report), encoding="utf-8")
