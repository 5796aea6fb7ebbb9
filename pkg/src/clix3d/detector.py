"""A small two-stage anchor-based detector over fused voxel features.

Pipeline per frame: voxelize -> 4 pooled voxel stages (each optionally fused
with the matching image-encoder stage) -> bird's-eye-view collapse -> region
proposals from class-specific anchors -> ROI pooling on the stage-3 BEV map ->
ROI classification and box refinement.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .augment import AugLedger
from .contrast import (BACKGROUND, ContrastConfig, FrameProposals, contrastive_loss_op,
                       select_rois)
from .fusion import (StagePlan, encode_image, fuse_features, init_image_encoder,
                     pool_image_features, project_voxels, stage_hierarchy, voxelize)
from .geometry import Box3D, iou_3d_matrix, iou_bev_matrix, nms_bev, wrap_angle
from .scene import DomainProfile, Frame

N_GEO_STAGE1 = 7
N_GEO = 5
OUT_PER_ANCHOR = 8
N_ROI_GEO = 6
N_ROI_POINT_GEO = 6


# --- configuration ----------------------------------------------------------------------

@dataclass
class DetectorConfig:
    classes: tuple = ("Car", "Pedestrian", "Cyclist")
    pc_range: tuple = (0.0, -25.6, -3.0, 51.2, 25.6, 1.0)
    voxel_size: tuple = (0.2, 0.2, 0.25)
    plan: StagePlan = field(default_factory=StagePlan)
    anchors: dict = field(default_factory=lambda: {"Car": (3.9, 1.6, 1.56), "Pedestrian": (0.8, 0.6, 1.73),
                                                   "Cyclist": (1.76, 0.6, 1.73)})
    anchor_z: dict = field(default_factory=dict)
    lidar_height: float = 1.73
    anchor_rotations: tuple = (0.0, math.pi / 2)
    rpn_hidden: int = 128
    roi_dim: int = 64
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    pre_nms: int = 512
    nms_iou: float = 0.7
    post_nms: int = 128
    roi_fg_iou: float = 0.55
    roi_bg_iou: float = 0.25
    rois_per_frame: int = 64
    roi_reg_iou: float = 0.4
    roi_points: int = 32
    roi_point_dim: int = 32
    roi_margin: float = 0.4
    gt_jitter: int = 2
    final_nms: float = 0.1
    score_thresh: float = 0.3
    fusion_enabled: bool = True

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.pc_range = tuple(float(v) for v in self.pc_range)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        self.anchors = {k: tuple(float(x) for x in v) for k, v in self.anchors.items()}
        missing = [c for c in self.classes if c not in self.anchors]
        if missing:
            raise ValueError(f"no anchor dims for classes {missing}")
        if not self.anchor_z:
            self.anchor_z = {c: -self.lidar_height + self.anchors[c][2] / 2 for c in self.classes}
        self.anchor_z = {k: float(v) for k, v in self.anchor_z.items()}
        self.anchor_rotations = tuple(float(r) for r in self.anchor_rotations)
        if not self.neg_iou <= self.pos_iou:
            raise ValueError("neg_iou must not exceed pos_iou")
        if self.roi_points < 1 or self.roi_point_dim < 1 or self.gt_jitter < 0 or self.roi_margin < 0:
            raise ValueError("roi_points and roi_point_dim must be >= 1, gt_jitter and roi_margin >= 0")

    @property
    def n_anchor_types(self) -> int:
        return len(self.classes) * len(self.anchor_rotations)

    @classmethod
    def for_sources(cls, profiles: list[DomainProfile], **kw) -> "DetectorConfig":
        """Anchors and anchor heights averaged over the source-domain profiles."""
        classes = kw.pop("classes", cls.classes if isinstance(cls.classes, tuple) else ("Car", "Pedestrian", "Cyclist"))
        anchors = {c: tuple(float(np.mean([p.anchors[c][k] for p in profiles])) for k in range(3))
                   for c in classes}
        height = float(np.mean([p.lidar_height for p in profiles]))
        return cls(classes=classes, anchors=anchors, lidar_height=height, **kw)

    def to_json(self) -> dict:
        return {"classes": list(self.classes), "pc_range": list(self.pc_range),
                "voxel_size": list(self.voxel_size), "plan": self.plan.to_json(),
                "anchors": {k: list(v) for k, v in self.anchors.items()},
                "anchor_z": dict(self.anchor_z), "lidar_height": self.lidar_height,
                "anchor_rotations": list(self.anchor_rotations), "rpn_hidden": self.rpn_hidden,
                "roi_dim": self.roi_dim, "pos_iou": self.pos_iou, "neg_iou": self.neg_iou,
                "pre_nms": self.pre_nms, "nms_iou": self.nms_iou, "post_nms": self.post_nms,
                "roi_fg_iou": self.roi_fg_iou, "roi_bg_iou": self.roi_bg_iou,
                "rois_per_frame": self.rois_per_frame, "roi_reg_iou": self.roi_reg_iou,
                "roi_points": self.roi_points, "roi_point_dim": self.roi_point_dim,
                "roi_margin": self.roi_margin, "gt_jitter": self.gt_jitter, "final_nms": self.final_nms,
                "score_thresh": self.score_thresh, "fusion_enabled": self.fusion_enabled}

    @classmethod
    def from_json(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        plan = StagePlan.from_json(d.pop("plan", {}))
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown detector config fields {sorted(unknown)}")
        return cls(plan=plan, **d)

    def architecture(self) -> dict:
        """The fields that determine parameter shapes (checked when loading checkpoints)."""
        return {"classes": list(self.classes), "plan": self.plan.to_json(),
                "rpn_hidden": self.rpn_hidden, "roi_dim": self.roi_dim,
                "roi_point_dim": self.roi_point_dim, "n_anchor_types": self.n_anchor_types}


# --- parameters -------------------------------------------------------------------------

def _dense(rng, fan_in, fan_out, name, gain=2.0):
    return ad.parameter(rng.normal(0.0, math.sqrt(gain / fan_in), (fan_in, fan_out)), name)


def init_params(cfg: DetectorConfig, seed: int) -> dict:
    rng = np.random.default_rng([int(seed), 7])
    dims = cfg.plan.dims
    p = {}
    cin = N_GEO_STAGE1
    for i, c in enumerate(dims):
        p[f"vox{i}.W"] = _dense(rng, cin, c, f"vox{i}.W")
        p[f"vox{i}.b"] = ad.parameter(np.zeros(c), f"vox{i}.b")
        # image rows start at zero: fusion begins as the LiDAR-only network and learns what to take
        fw = np.vstack([np.eye(c) + rng.normal(0, 0.05, (c, c)), np.zeros((c, c))])
        rng.normal(0, 0.5 / math.sqrt(c), (c, c))  # keeps the draws of later parameters unchanged
        p[f"fuse{i}.W"] = ad.parameter(fw, f"fuse{i}.W")
        p[f"fuse{i}.b"] = ad.parameter(np.zeros(c), f"fuse{i}.b")
        cin = c + N_GEO
    p.update(init_image_encoder(cfg.plan, rng))
    c4, c3 = dims[-1], dims[-2]
    A = cfg.n_anchor_types
    p["rpn.W1"] = _dense(rng, 9 * c4, cfg.rpn_hidden, "rpn.W1")
    p["rpn.b1"] = ad.parameter(np.zeros(cfg.rpn_hidden), "rpn.b1")
    p["rpn.W2"] = _dense(rng, cfg.rpn_hidden, A * OUT_PER_ANCHOR, "rpn.W2", gain=0.1)
    b2 = np.zeros((A, OUT_PER_ANCHOR))
    b2[:, 0] = -2.0
    p["rpn.b2"] = ad.parameter(b2.reshape(-1), "rpn.b2")
    p["roi.Wp"] = _dense(rng, N_ROI_POINT_GEO + dims[0], cfg.roi_point_dim, "roi.Wp")
    p["roi.bp"] = ad.parameter(np.zeros(cfg.roi_point_dim), "roi.bp")
    p["roi.W1"] = _dense(rng, 9 * c3 + cfg.roi_point_dim + N_ROI_GEO, cfg.roi_dim, "roi.W1", gain=1.0)
    p["roi.b1"] = ad.parameter(np.zeros(cfg.roi_dim), "roi.b1")
    p["roi.Wc"] = _dense(rng, cfg.roi_dim, len(cfg.classes) + 1, "roi.Wc", gain=0.1)
    p["roi.bc"] = ad.parameter(np.zeros(len(cfg.classes) + 1), "roi.bc")
    p["roi.Wr"] = _dense(rng, cfg.roi_dim, 7, "roi.Wr", gain=0.01)
    p["roi.br"] = ad.parameter(np.zeros(7), "roi.br")
    return p


# --- box coding -------------------------------------------------------------------------

def encode_boxes(boxes, anchors) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    if np.any(a[:, 3:6] <= 0):
        raise ValueError("anchor dims must be > 0")
    diag = np.hypot(a[:, 3], a[:, 4])
    return np.stack([(b[:, 0] - a[:, 0]) / diag, (b[:, 1] - a[:, 1]) / diag, (b[:, 2] - a[:, 2]) / a[:, 5],
                     np.log(b[:, 3] / a[:, 3]), np.log(b[:, 4] / a[:, 4]), np.log(b[:, 5] / a[:, 5]),
                     b[:, 6] - a[:, 6]], axis=1)


def decode_boxes(res, anchors) -> np.ndarray:
    r = np.asarray(res, dtype=np.float64).reshape(-1, 7)
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    diag = np.hypot(a[:, 3], a[:, 4])
    return np.stack([a[:, 0] + r[:, 0] * diag, a[:, 1] + r[:, 1] * diag, a[:, 2] + r[:, 2] * a[:, 5],
                     a[:, 3] * np.exp(r[:, 3]), a[:, 4] * np.exp(r[:, 4]), a[:, 5] * np.exp(r[:, 5]),
                     a[:, 6] + r[:, 6]], axis=1)


def encode_box(box: Box3D, anchor: Box3D) -> np.ndarray:
    return encode_boxes(box.as_array(), anchor.as_array())[0]


def decode_box(res, anchor: Box3D) -> Box3D:
    return Box3D(*decode_boxes(res, anchor.as_array())[0], class_id=anchor.class_id)


def fold_half_turn(theta):
    """Map angles into [-pi/2, pi/2): a box and its half-turn are the same box."""
    return np.mod(np.asarray(theta) + np.pi / 2, np.pi) - np.pi / 2


def regression_targets(boxes, anchors) -> np.ndarray:
    t = encode_boxes(boxes, anchors)
    t[:, 6] = fold_half_turn(t[:, 6])
    return t


# --- forward ----------------------------------------------------------------------------

@dataclass
class FrameFeatures:
    stage_feats: list
    n_voxels: int
    bev_cells: np.ndarray        # (A_cells, 2) active stage-4 BEV cells
    anchors: np.ndarray          # (A_cells * T, 7)
    anchor_cls: np.ndarray       # (A_cells * T,)
    rpn_out: object              # Tensor (A_cells * T, 8) or None
    bev3_index: np.ndarray       # stage-3 BEV lookup grid (-1 = empty)
    bev3_feats: object           # Tensor (B3, C3)
    vox_means: np.ndarray = None  # (N, 3) stage-1 voxel point means


def _geo_stage1(grid) -> np.ndarray:
    centers = grid.centers()
    off = (grid.means - centers) / grid.voxel_size
    return np.column_stack([off, grid.intensity, np.log1p(grid.counts) / 3.0,
                            grid.means[:, 2] / 2.0, grid.means[:, 0] / 50.0])


def _geo_stage(st, voxel_size, pc_range, level) -> np.ndarray:
    size = np.asarray(voxel_size) * (2 ** level)
    centers = np.asarray(pc_range[:3]) + (st.coords + 0.5) * size
    off = (st.means - centers) / size
    return np.column_stack([off, np.log1p(st.counts) / 5.0, st.means[:, 2] / 2.0])


def _bev_collapse(coords, feats: ad.Tensor):
    bev, inv = np.unique(coords[:, :2], axis=0, return_inverse=True)
    return bev, ad.segment_max(feats, inv.reshape(-1), len(bev))


def bev_extents(cfg: DetectorConfig, level: int) -> tuple[int, int]:
    ext = np.round((np.array(cfg.pc_range[3:5]) - np.array(cfg.pc_range[:2])) / np.array(cfg.voxel_size[:2]))
    ext = ext.astype(np.int64)
    for _ in range(level):
        ext = (ext - 1) // 2 + 1
    return int(ext[0]), int(ext[1])


def anchors_for_cells(cells, cfg: DetectorConfig) -> tuple[np.ndarray, np.ndarray]:
    lvl = cfg.plan.n_stages - 1
    size = np.array(cfg.voxel_size[:2]) * 2 ** lvl
    xy = np.array(cfg.pc_range[:2]) + (np.asarray(cells, dtype=np.float64) + 0.5) * size
    rows, cls = [], []
    for ci, name in enumerate(cfg.classes):
        l, w, h = cfg.anchors[name]
        for rot in cfg.anchor_rotations:
            rows.append((ci, l, w, h, cfg.anchor_z[name], rot))
    n, T = len(xy), len(rows)
    out = np.zeros((n, T, 7))
    out[:, :, 0:2] = xy[:, None, :]
    for t, (ci, l, w, h, z, rot) in enumerate(rows):
        out[:, t, 2:7] = (z, l, w, h, rot)
        cls.append(ci)
    return out.reshape(-1, 7), np.tile(np.array(cls, dtype=np.int64), n)


def backbone_forward(frame: Frame, cfg: DetectorConfig, params: dict, ledger: AugLedger | None = None,
                     fusion_enabled: bool | None = None):
    """Per-stage fused voxel features plus the voxel hierarchy."""
    fusion = cfg.fusion_enabled if fusion_enabled is None else fusion_enabled
    plan = cfg.plan
    grid = voxelize(frame.points, cfg.voxel_size, cfg.pc_range, frame.pasted)
    if len(grid) == 0:
        return grid, [], []
    stages = stage_hierarchy(grid, plan.n_stages)
    if fusion:
        cmap = project_voxels(grid, frame.calib, frame.image_dims, plan, ledger)
        maps = encode_image(ad.constant((np.asarray(frame.image) - 0.5)[None]), params, plan)
    feats = []
    x = ad.constant(_geo_stage1(grid))
    for i in range(plan.n_stages):
        if i > 0:
            st = stages[i]
            pooled = ad.segment_max(feats[-1], st.child_parent, len(st.coords))
            x = ad.concat([pooled, ad.constant(_geo_stage(st, cfg.voxel_size, cfg.pc_range, i))], axis=1)
        h = ad.relu(ad.linear(x, params[f"vox{i}.W"], params[f"vox{i}.b"]))
        c = plan.dims[i]
        if fusion and plan.fuse_mask[i]:
            img = pool_image_features(maps[i], cmap.stages[i])
            valid = cmap.stages[i].valid
        else:
            img = ad.constant(np.zeros((h.shape[0], c)))
            valid = np.zeros(h.shape[0], dtype=bool)
        feats.append(fuse_features(h, img, valid, params[f"fuse{i}.W"], params[f"fuse{i}.b"]))
    return grid, stages, feats


def _neighbor_index(index_grid, cells, radius=1):
    nx, ny = index_grid.shape
    offs = [(dx, dy) for dx in range(-radius, radius + 1) for dy in range(-radius, radius + 1)]
    out = np.full((len(cells), len(offs)), -1, dtype=np.int64)
    for k, (dx, dy) in enumerate(offs):
        x, y = cells[:, 0] + dx, cells[:, 1] + dy
        ok = (x >= 0) & (x < nx) & (y >= 0) & (y < ny)
        out[ok, k] = index_grid[x[ok], y[ok]]
    return out


def frame_forward(frame: Frame, cfg: DetectorConfig, params: dict, ledger: AugLedger | None = None,
                  fusion_enabled: bool | None = None) -> FrameFeatures:
    grid, stages, feats = backbone_forward(frame, cfg, params, ledger, fusion_enabled)
    T = cfg.n_anchor_types
    if not feats:
        nx3, ny3 = bev_extents(cfg, cfg.plan.n_stages - 2)
        return FrameFeatures([], 0, np.zeros((0, 2), np.int64), np.zeros((0, 7)), np.zeros(0, np.int64),
                             None, np.full((nx3, ny3), -1, np.int64), None, np.zeros((0, 3)))
    L = cfg.plan.n_stages
    bev4, f4 = _bev_collapse(stages[L - 1].coords, feats[L - 1])
    bev3, f3 = _bev_collapse(stages[L - 2].coords, feats[L - 2])
    nx4, ny4 = bev_extents(cfg, L - 1)
    nx3, ny3 = bev_extents(cfg, L - 2)
    idx4 = np.full((nx4, ny4), -1, np.int64)
    idx4[bev4[:, 0], bev4[:, 1]] = np.arange(len(bev4))
    idx3 = np.full((nx3, ny3), -1, np.int64)
    idx3[bev3[:, 0], bev3[:, 1]] = np.arange(len(bev3))
    occ = idx4 >= 0
    dil = occ.copy()
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            sh = np.zeros_like(occ)
            xs = slice(max(dx, 0), nx4 + min(dx, 0))
            xd = slice(max(-dx, 0), nx4 + min(-dx, 0))
            ys = slice(max(dy, 0), ny4 + min(dy, 0))
            yd = slice(max(-dy, 0), ny4 + min(-dy, 0))
            sh[xd, yd] = occ[xs, ys]
            dil |= sh
    cells = np.argwhere(dil)
    nbr = _neighbor_index(idx4, cells)
    g = ad.reshape(ad.gather_rows(f4, nbr.reshape(-1)), (len(cells), 9 * f4.shape[1]))
    h = ad.relu(ad.linear(g, params["rpn.W1"], params["rpn.b1"]))
    out = ad.linear(h, params["rpn.W2"], params["rpn.b2"])
    out = ad.reshape(out, (len(cells) * T, OUT_PER_ANCHOR))
    anchors, acls = anchors_for_cells(cells, cfg)
    return FrameFeatures(feats, len(grid), cells, anchors, acls, out, idx3, f3, grid.means)


def roi_grid_index(boxes, cfg: DetectorConfig, idx3: np.ndarray) -> np.ndarray:
    """Stage-3 BEV rows under a 3 x 3 grid of points inside each box (-1 when empty)."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    g = np.array([-1.0 / 3, 0.0, 1.0 / 3])
    gx, gy = np.meshgrid(g, g, indexing="ij")
    gx, gy = gx.ravel(), gy.ravel()
    lx = gx[None] * b[:, 3:4]
    ly = gy[None] * b[:, 4:5]
    c, s = np.cos(b[:, 6:7]), np.sin(b[:, 6:7])
    x = b[:, 0:1] + lx * c - ly * s
    y = b[:, 1:2] + lx * s + ly * c
    lvl = cfg.plan.n_stages - 2
    size = np.array(cfg.voxel_size[:2]) * 2 ** lvl
    ix = np.floor((x - cfg.pc_range[0]) / size[0]).astype(np.int64)
    iy = np.floor((y - cfg.pc_range[1]) / size[1]).astype(np.int64)
    nx, ny = idx3.shape
    ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    out = np.full(ix.shape, -1, np.int64)
    out[ok] = idx3[ix[ok], iy[ok]]
    return out


def _roi_geometry(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    return np.column_stack([np.log(b[:, 3:6]), b[:, 2] / 2.0, np.cos(2 * b[:, 6]), np.sin(2 * b[:, 6])])


def roi_point_pairs(boxes, means, cfg: DetectorConfig):
    """Stage-1 voxels inside each box grown by ``roi_margin``.

    Returns ``(roi, voxel, local)``: pair indices plus per-pair box-frame
    coordinates (normalized to the grown half extents, then in metres / 2).
    At most ``roi_points`` voxels per box, evenly spaced in index order.
    """
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, N_ROI_POINT_GEO)))
    if len(b) == 0 or len(means) == 0:
        return empty
    half = b[:, 3:6] / 2 + cfg.roi_margin
    tree = cKDTree(means[:, :2])
    cand = tree.query_ball_point(b[:, :2], np.hypot(half[:, 0], half[:, 1]))
    ri, vi, loc = [], [], []
    for r, c in enumerate(cand):
        if not c:
            continue
        c = np.sort(np.asarray(c, dtype=np.int64))
        d = means[c] - b[r, :3]
        cs, sn = math.cos(b[r, 6]), math.sin(b[r, 6])
        l = np.column_stack([cs * d[:, 0] + sn * d[:, 1], -sn * d[:, 0] + cs * d[:, 1], d[:, 2]])
        ok = np.all(np.abs(l) <= half[r], axis=1)
        c, l = c[ok], l[ok]
        if len(c) > cfg.roi_points:
            pick = np.linspace(0, len(c) - 1, cfg.roi_points).round().astype(np.int64)
            c, l = c[pick], l[pick]
        ri.append(np.full(len(c), r, np.int64))
        vi.append(c)
        loc.append(np.column_stack([l / half[r], l / 2.0]))
    if not ri:
        return empty
    return np.concatenate(ri), np.concatenate(vi), np.concatenate(loc)


def roi_forward(ff: FrameFeatures, boxes, cfg: DetectorConfig, params: dict):
    """ROI feature ``f`` (pre-activation), class logits and box residuals."""
    idx = roi_grid_index(boxes, cfg, ff.bev3_index)
    n = len(idx)
    C = ff.bev3_feats.shape[1]
    x = ad.reshape(ad.gather_rows(ff.bev3_feats, idx.reshape(-1)), (n, 9 * C))
    ri, vi, loc = roi_point_pairs(boxes, ff.vox_means, cfg)
    pf = ad.concat([ad.gather_rows(ff.stage_feats[0], vi), ad.constant(loc)], axis=1)
    ph = ad.relu(ad.linear(pf, params["roi.Wp"], params["roi.bp"]))
    # one zero row per ROI (after the ReLU, so the max is unchanged) keeps every segment non-empty
    ph = ad.concat([ph, ad.constant(np.zeros((n, ph.shape[1])))], axis=0)
    pooled = ad.segment_max(ph, np.r_[ri, np.arange(n)], n)
    x = ad.concat([x, pooled, ad.constant(_roi_geometry(boxes))], axis=1)
    f = ad.linear(x, params["roi.W1"], params["roi.b1"])
    h = ad.relu(f)
    return f, ad.linear(h, params["roi.Wc"], params["roi.bc"]), ad.linear(h, params["roi.Wr"], params["roi.br"])


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def propose(ff: FrameFeatures, cfg: DetectorConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Proposal boxes, scores and source anchor indices (pre-NMS top-k, NMS, post-NMS top-k)."""
    if ff.rpn_out is None or len(ff.anchors) == 0:
        return np.zeros((0, 7)), np.zeros(0), np.zeros(0, np.int64)
    out = ff.rpn_out.data
    scores = _sigmoid(out[:, 0])
    order = np.lexsort((np.arange(len(scores)), -scores))[:cfg.pre_nms]
    boxes = decode_boxes(out[order, 1:], ff.anchors[order])
    boxes[:, 3:6] = np.clip(boxes[:, 3:6], 0.05, 20.0)
    boxes[:, 6] = wrap_angle(boxes[:, 6])
    keep = nms_bev(boxes, scores[order], cfg.nms_iou, cfg.post_nms)
    return boxes[keep], scores[order][keep], order[keep]


# --- training targets -------------------------------------------------------------------

def assign_anchors(anchors, anchor_cls, gt_boxes, gt_cls, cfg: DetectorConfig):
    """Per-anchor label (1 pos, 0 neg, -1 ignore) and matched GT index."""
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    match = np.full(n, -1, dtype=np.int64)
    if n == 0 or len(gt_boxes) == 0:
        return labels, match
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    ious = iou_bev_matrix(anchors, gt)
    ious = np.where(anchor_cls[:, None] == np.asarray(gt_cls)[None, :], ious, 0.0)
    best = ious.max(axis=1)
    arg = ious.argmax(axis=1)
    labels[(best >= cfg.neg_iou) & (best < cfg.pos_iou)] = -1
    pos = best >= cfg.pos_iou
    labels[pos] = 1
    match[pos] = arg[pos]
    for g in range(len(gt)):
        col = ious[:, g]
        if col.max() > 0:
            a = int(np.argmax(col))
        else:
            same = np.flatnonzero(anchor_cls == gt_cls[g])
            if not len(same):
                continue
            d = np.hypot(anchors[same, 0] - gt[g, 0], anchors[same, 1] - gt[g, 1])
            a = int(same[np.argmin(d)])
        labels[a] = 1
        match[a] = g
    return labels, match


def jitter_boxes(gt_boxes, n_copies: int, rng) -> np.ndarray:
    """Randomly perturbed copies of ground-truth boxes, used as extra training ROIs."""
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    if n_copies == 0 or len(gt) == 0:
        return np.zeros((0, 7))
    b = np.repeat(gt, n_copies, axis=0)
    diag = np.hypot(b[:, 3], b[:, 4])
    out = b.copy()
    out[:, 0:2] += rng.normal(0.0, 0.15, (len(b), 2)) * diag[:, None]
    out[:, 2] += rng.normal(0.0, 0.15, len(b)) * b[:, 5]
    out[:, 3:6] *= np.exp(rng.normal(0.0, 0.1, (len(b), 3)))
    out[:, 6] = wrap_angle(out[:, 6] + rng.normal(0.0, 0.2, len(b)))
    return out


def sample_roi_targets(rois, gt_boxes, gt_cls, cfg: DetectorConfig, rng):
    """Classification sample ``(idx, labels, gt)`` (label 0 = background) and regression sample ``(idx, gt)``.

    Foreground is 3D IoU >= ``roi_fg_iou``, background < ``roi_bg_iou``;
    regression uses every ROI with IoU >= ``roi_reg_iou`` (capped at half
    of ``rois_per_frame``).
    """
    n = len(rois)
    e = np.zeros(0, np.int64)
    if n == 0:
        return e, e, e, e, e
    if len(gt_boxes):
        ious = iou_3d_matrix(rois, gt_boxes)
        best, arg = ious.max(axis=1), ious.argmax(axis=1)
    else:
        best, arg = np.zeros(n), np.zeros(n, np.int64)
    cap = cfg.rois_per_frame // 2
    fg = np.flatnonzero(best >= cfg.roi_fg_iou)
    bg = np.flatnonzero(best < cfg.roi_bg_iou)
    n_fg = min(len(fg), cap)
    fg = np.sort(rng.choice(fg, n_fg, replace=False)) if n_fg < len(fg) else fg
    n_bg = min(len(bg), cfg.rois_per_frame - len(fg))
    bg = np.sort(rng.choice(bg, n_bg, replace=False)) if n_bg < len(bg) else bg
    idx = np.concatenate([fg, bg]).astype(np.int64)
    labels = np.concatenate([np.asarray(gt_cls)[arg[fg]] + 1 if len(fg) else e,
                             np.zeros(len(bg), np.int64)]).astype(np.int64)
    reg = np.flatnonzero(best >= cfg.roi_reg_iou) if len(gt_boxes) else e
    if len(reg) > cap:
        reg = np.sort(rng.choice(reg, cap, replace=False))
    return idx, labels, arg[idx], reg.astype(np.int64), arg[reg]


# --- losses -----------------------------------------------------------------------------

@dataclass
class LossReport:
    loc: float
    cls: float
    rpn: float
    con: float
    con_weight: float = 0.0

    @property
    def total(self) -> float:
        return self.loc + self.cls + self.rpn + self.con_weight * self.con

    def to_json(self) -> dict:
        return {"loc": self.loc, "cls": self.cls, "rpn": self.rpn, "con": self.con,
                "con_weight": self.con_weight, "total": self.total}


@dataclass
class FrameDecision:
    proposals: np.ndarray
    proposal_scores: np.ndarray
    roi_idx: np.ndarray
    roi_labels: np.ndarray
    roi_gt: np.ndarray
    reg_idx: np.ndarray
    reg_gt: np.ndarray
    jitter: np.ndarray


@dataclass
class Decisions:
    """Discrete choices of one loss evaluation, reusable to freeze them."""
    frames: list
    contrast_src: np.ndarray | None = None
    contrast_cls: np.ndarray | None = None
    contrast_dom: list | None = None
    contrast_fg: np.ndarray | None = None


def batch_loss(frames: list, ledgers: list, params: dict, cfg: DetectorConfig,
               contrast_cfg: ContrastConfig | None, seed: int,
               decisions: Decisions | None = None):
    """Composite loss over a batch; returns ``(total Tensor, LossReport, Decisions)``.

    ``contrast_cfg=None`` switches the contrastive term off. Per-frame terms
    are averaged over the batch.
    """
    rng = np.random.default_rng([int(seed), 11])
    nb = len(frames)
    rpn_terms, cls_terms, loc_terms = [], [], []
    prop_feats, prop_meta = [], []
    new_dec = []
    zero = ad.constant(np.array(0.0))
    for k, (frame, ledger) in enumerate(zip(frames, ledgers)):
        ff = frame_forward(frame, cfg, params, ledger)
        gt = frame.gt_boxes()
        gcls = frame.gt_classes()
        if ff.rpn_out is None:
            e = np.zeros(0, np.int64)
            new_dec.append(FrameDecision(np.zeros((0, 7)), np.zeros(0), e, e, e, e, e, np.zeros((0, 7))))
            continue
        labels, match = assign_anchors(ff.anchors, ff.anchor_cls, gt, gcls, cfg)
        pos, neg = labels == 1, labels == 0
        w = np.zeros(len(labels))
        if pos.any():
            w[pos] = 1.0 / pos.sum()
        if neg.any():
            w[neg] = 1.0 / neg.sum()
        obj = ad.reshape(_column(ff.rpn_out, 0), (len(labels),))
        rpn = ad.bce_with_logits(obj, pos.astype(np.float64), w)
        if pos.any():
            tgt = regression_targets(gt[match[pos]], ff.anchors[pos])
            reg = _rows_cols(ff.rpn_out, np.flatnonzero(pos), 1, 8)
            rpn = ad.add(rpn, ad.scale(ad.smooth_l1(reg, tgt, np.ones(int(pos.sum()))), 1.0 / pos.sum()))
        rpn_terms.append(rpn)

        if decisions is None:
            boxes, scores, _ = propose(ff, cfg)
            jit = jitter_boxes(gt, cfg.gt_jitter, rng)
            rois = np.concatenate([boxes, gt.reshape(-1, 7), jit])
            fd = FrameDecision(boxes, scores, *sample_roi_targets(rois, gt, gcls, cfg, rng), jit)
        else:
            fd = decisions.frames[k]
            boxes, scores = fd.proposals, fd.proposal_scores
            rois = np.concatenate([boxes, gt.reshape(-1, 7), fd.jitter])
        new_dec.append(fd)
        if len(rois) == 0:
            continue
        f, logits, reg = roi_forward(ff, rois, cfg, params)
        if len(fd.roi_idx):
            lg = ad.gather_rows(logits, fd.roi_idx)
            cls_terms.append(ad.cross_entropy(lg, fd.roi_labels, np.full(len(fd.roi_idx), 1.0 / len(fd.roi_idx))))
        if len(fd.reg_idx):
            tgt = regression_targets(gt[fd.reg_gt], rois[fd.reg_idx])
            loc_terms.append(ad.smooth_l1(ad.gather_rows(reg, fd.reg_idx), tgt,
                                          np.full(len(fd.reg_idx), 1.0 / len(fd.reg_idx))))
        if contrast_cfg is not None and len(boxes):
            prop_feats.append(ad.gather_rows(f, np.arange(len(boxes))))
            prop_meta.append((k, len(boxes)))

    def _avg(terms):
        if not terms:
            return zero
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        return ad.scale(acc, 1.0 / nb)

    L_rpn, L_cls, L_loc = _avg(rpn_terms), _avg(cls_terms), _avg(loc_terms)
    L_con = zero
    dec = Decisions(new_dec)
    if contrast_cfg is not None and prop_feats:
        allf = ad.concat(prop_feats, axis=0) if len(prop_feats) > 1 else prop_feats[0]
        offsets = {}
        o = 0
        for k, n in prop_meta:
            offsets[k] = o
            o += n
        if decisions is not None and decisions.contrast_src is not None:
            src, ccls, cdom, cfg_fg = (decisions.contrast_src, decisions.contrast_cls,
                                       decisions.contrast_dom, decisions.contrast_fg)
        else:
            fps = []
            for k, n in prop_meta:
                fps.append(FrameProposals(np.zeros((n, 0)), new_dec[k].proposals, new_dec[k].proposal_scores,
                                          frames[k].gt_boxes(), frames[k].gt_classes(), frames[k].domain,
                                          str(k)))
            rb = select_rois(fps, contrast_cfg, int(rng.integers(2 ** 31)))
            src = np.array([(prop_meta[fi][0], p) for fi, p in rb.source], dtype=np.int64).reshape(-1, 2)
            ccls, cdom, cfg_fg = rb.class_ids, rb.domain_ids, rb.is_foreground
        dec.contrast_src, dec.contrast_cls, dec.contrast_dom, dec.contrast_fg = src, ccls, cdom, cfg_fg
        if len(src) >= 2:
            rows = np.array([offsets[k] + p for k, p in src], dtype=np.int64)
            nz = np.linalg.norm(allf.data[rows], axis=1) > 0
            rows, ccls, cfg_fg = rows[nz], np.asarray(ccls)[nz], np.asarray(cfg_fg)[nz]
            cdom = [d for d, keep in zip(cdom, nz) if keep]
            L_con = contrastive_loss_op(ad.gather_rows(allf, rows), ccls, cdom, cfg_fg, contrast_cfg)
    con_w = contrast_cfg.weight if contrast_cfg is not None else 0.0
    total = ad.add(ad.add(ad.add(L_loc, L_cls), L_rpn), ad.scale(L_con, con_w))
    report = LossReport(float(L_loc.data), float(L_cls.data), float(L_rpn.data), float(L_con.data), con_w)
    return total, report, dec


def _column(t: ad.Tensor, j: int) -> ad.Tensor:
    n, m = t.shape
    sel = np.zeros((m, 1))
    sel[j, 0] = 1.0
    return ad.matmul(t, ad.constant(sel))


def _rows_cols(t: ad.Tensor, rows, c0: int, c1: int) -> ad.Tensor:
    n, m = t.shape
    sel = np.zeros((m, c1 - c0))
    sel[np.arange(c0, c1), np.arange(c1 - c0)] = 1.0
    return ad.matmul(ad.gather_rows(t, rows), ad.constant(sel))


# --- inference --------------------------------------------------------------------------

@dataclass
class Detection:
    box: Box3D
    class_id: int
    score: float


def infer(frame: Frame, params: dict, cfg: DetectorConfig, score_thresh: float | None = None) -> list:
    """Detections after ROI refinement, per-class NMS and score thresholding."""
    thresh = cfg.score_thresh if score_thresh is None else score_thresh
    ff = frame_forward(frame, cfg, params)
    boxes, _, _ = propose(ff, cfg)
    if len(boxes) == 0:
        return []
    _, logits, reg = roi_forward(ff, boxes, cfg, params)
    probs = ad.softmax(logits.data)
    cls = np.argmax(probs[:, 1:], axis=1)
    score = probs[np.arange(len(boxes)), cls + 1]
    refined = decode_boxes(reg.data, boxes)
    refined[:, 3:6] = np.clip(refined[:, 3:6], 0.05, 20.0)
    refined[:, 6] = wrap_angle(refined[:, 6])
    dets = []
    for c in range(len(cfg.classes)):
        sel = np.flatnonzero(cls == c)
        if not len(sel):
            continue
        keep = nms_bev(refined[sel], score[sel], cfg.final_nms)
        for k in keep:
            i = sel[k]
            if score[i] > thresh and np.isfinite(score[i]):
                dets.append(Detection(Box3D(*refined[i], class_id=c), c, float(score[i])))
    dets.sort(key=lambda d: -d.score)
    return dets
