"""ROI selection and the weighted multi-positive contrastive loss across source domains."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import as_box_array, iou_3d_matrix

BACKGROUND = -1


@dataclass
class ContrastConfig:
    m: int = 8
    cross_domain_only: bool = True
    class_weights: dict = field(default_factory=dict)   # class id -> weight, default 1.0
    include_background: bool = True
    weight: float = 1.0                                 # multiplies the loss in the total
    bg_iou_max: float = 0.1

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("m must be >= 0")
        self.class_weights = {int(k): float(v) for k, v in self.class_weights.items()}
        if any(v <= 0 for v in self.class_weights.values()):
            raise ValueError("class weights must be > 0")

    def class_weight(self, c: int) -> float:
        return self.class_weights.get(int(c), 1.0)

    def to_json(self) -> dict:
        return {"m": self.m, "cross_domain_only": self.cross_domain_only,
                "class_weights": {str(k): v for k, v in sorted(self.class_weights.items())},
                "include_background": self.include_background, "weight": self.weight,
                "bg_iou_max": self.bg_iou_max}

    @classmethod
    def from_json(cls, d: dict) -> "ContrastConfig":
        base = cls()
        return cls(int(d.get("m", base.m)), bool(d.get("cross_domain_only", base.cross_domain_only)),
                   dict(d.get("class_weights", {})), bool(d.get("include_background", base.include_background)),
                   float(d.get("weight", base.weight)), float(d.get("bg_iou_max", base.bg_iou_max)))


@dataclass
class FrameProposals:
    """Proposals of one frame: ``features (P, D)``, ``boxes (P, 7)``, ``scores (P,)``."""
    features: object
    boxes: np.ndarray
    scores: np.ndarray
    gt_boxes: np.ndarray
    gt_classes: np.ndarray
    domain: str = ""
    frame_id: str = ""


@dataclass
class RoiBatch:
    features: object                 # (n, D) ndarray or Tensor
    class_ids: np.ndarray
    domain_ids: list
    frame_ids: list
    is_foreground: np.ndarray
    source: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), np.int64))  # (frame, proposal)

    def __len__(self):
        return len(self.class_ids)


def assign_foreground(ious: np.ndarray, scores) -> dict:
    """Greedy one-to-one GT -> proposal assignment by descending IoU (> 0).

    Ties are broken by higher proposal score, then lower proposal index, then
    lower GT index. Returns ``{gt_index: proposal_index}``.
    """
    g_idx, p_idx = np.nonzero(ious > 0)
    if len(g_idx) == 0:
        return {}
    sc = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((g_idx, p_idx, -sc[p_idx], -ious[g_idx, p_idx]))
    out, used = {}, set()
    for k in order:
        g, p = int(g_idx[k]), int(p_idx[k])
        if g in out or p in used:
            continue
        out[g] = p
        used.add(p)
    return out


def select_rois(frames: list, cfg: ContrastConfig, seed: int) -> RoiBatch:
    """Foreground ROIs matched to GTs plus up to ``m`` background proposals per frame."""
    rng = np.random.default_rng(seed)
    feats, cls, doms, fids, fg, src = [], [], [], [], [], []
    for fi, fp in enumerate(frames):
        boxes = as_box_array(fp.boxes)
        if len(boxes) == 0:
            continue
        gts = as_box_array(fp.gt_boxes)
        ious = iou_3d_matrix(gts, boxes) if len(gts) else np.zeros((0, len(boxes)))
        assigned = assign_foreground(ious, fp.scores)
        for g in sorted(assigned):
            src.append((fi, assigned[g]))
            cls.append(int(fp.gt_classes[g]))
            fg.append(True)
        taken = set(assigned.values())
        max_iou = ious.max(axis=0) if len(gts) else np.zeros(len(boxes))
        pool = [p for p in range(len(boxes)) if max_iou[p] < cfg.bg_iou_max and p not in taken]
        if pool and cfg.m > 0:
            pick = rng.choice(len(pool), size=min(cfg.m, len(pool)), replace=False)
            for k in np.sort(pick):
                src.append((fi, pool[int(k)]))
                cls.append(BACKGROUND)
                fg.append(False)
        doms += [fp.domain] * (len(src) - len(doms))
        fids += [fp.frame_id] * (len(src) - len(fids))
    src_arr = np.array(src, dtype=np.int64).reshape(-1, 2)
    if len(src_arr):
        rows = [np.asarray(frames[f].features.data if isinstance(frames[f].features, ad.Tensor)
                           else frames[f].features)[p] for f, p in src_arr]
        features = np.stack(rows)
    else:
        features = np.zeros((0, 0))
    return RoiBatch(features, np.array(cls, dtype=np.int64), doms, fids, np.array(fg, dtype=bool), src_arr)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def pair_weights(class_ids, domain_ids, is_foreground, cfg: ContrastConfig):
    """Pair coefficients for ordered pairs ``(anchor j, partner h)``.

    Returns ``(pos_w, neg_w)`` with the loss equal to
    ``-sum(pos_w * log s + neg_w * log(1 - s))``, ``s = logistic(sim)``.
    """
    c = np.asarray(class_ids)
    fg = np.asarray(is_foreground, dtype=bool)
    n = len(c)
    pos_w = np.zeros((n, n))
    neg_w = np.zeros((n, n))
    if n < 2:
        return pos_w, neg_w
    dom = np.asarray([str(d) for d in domain_ids])
    partner = ~np.eye(n, dtype=bool)
    if not cfg.include_background:
        partner &= fg[None, :]
    if cfg.cross_domain_only and len(set(dom.tolist())) >= 2:
        partner &= dom[:, None] != dom[None, :]
    for i in np.unique(c[fg]):
        anchors = fg & (c == i)
        mask = anchors[:, None] & partner
        y = mask & (c[None, :] == i)
        yn = mask & ~(c[None, :] == i)
        npos, nneg = int(y.sum()), int(yn.sum())
        q = nneg / npos if npos > 0 and nneg > 0 else 1.0
        scale = cfg.class_weight(i) / anchors.sum()
        pos_w += scale * q * y
        neg_w += scale * yn
    return pos_w, neg_w


def contrastive_loss(features, class_ids, domain_ids, is_foreground,
                     cfg: ContrastConfig) -> tuple[float, np.ndarray]:
    """Loss value and its exact gradient with respect to the raw features."""
    F = np.asarray(features, dtype=np.float64)
    n = len(F)
    if n == 0:
        return 0.0, np.zeros_like(F)
    pos_w, neg_w = pair_weights(class_ids, domain_ids, is_foreground, cfg)
    active = (pos_w != 0) | (neg_w != 0)
    if not active.any():
        return 0.0, np.zeros_like(F)
    norms = np.linalg.norm(F, axis=1)
    used = active.any(axis=0) | active.any(axis=1)
    if np.any(norms[used] == 0):
        raise ValueError("contrastive loss needs nonzero feature vectors")
    U = F / np.where(norms == 0, 1.0, norms)[:, None]
    sim = U @ U.T
    loss = -np.sum(pos_w * _log_sigmoid(sim) + neg_w * _log_sigmoid(-sim))
    s = 1.0 / (1.0 + np.exp(-sim))
    G = -(pos_w * (1.0 - s) - neg_w * s)   # d loss / d sim
    gU = G @ U + G.T @ U
    gF = (gU - U * np.sum(U * gU, axis=1, keepdims=True)) / np.where(norms == 0, 1.0, norms)[:, None]
    return float(loss), gF


def contrastive_loss_batch(batch: RoiBatch, cfg: ContrastConfig) -> tuple[float, np.ndarray]:
    F = batch.features.data if isinstance(batch.features, ad.Tensor) else batch.features
    return contrastive_loss(F, batch.class_ids, batch.domain_ids, batch.is_foreground, cfg)


def contrastive_loss_op(features: ad.Tensor, class_ids, domain_ids, is_foreground,
                        cfg: ContrastConfig) -> ad.Tensor:
    """Tape-recorded version of :func:`contrastive_loss`."""
    val, g = contrastive_loss(features.data, class_ids, domain_ids, is_foreground, cfg)
    return ad.custom_op(np.array(val), (features,), lambda go: (go * g,))


def within_between_similarity(features, class_ids, domain_ids, is_foreground) -> tuple[float, float]:
    """Mean cross-domain same-class and mean different-class cosine similarity of foreground ROIs."""
    F = np.asarray(features, dtype=np.float64)
    fg = np.asarray(is_foreground, dtype=bool)
    c = np.asarray(class_ids)
    dom = np.asarray([str(d) for d in domain_ids])
    U = F / np.linalg.norm(F, axis=1, keepdims=True)
    sim = U @ U.T
    pair = fg[:, None] & fg[None, :] & ~np.eye(len(F), dtype=bool)
    same = pair & (c[:, None] == c[None, :]) & (dom[:, None] != dom[None, :])
    diff = pair & (c[:, None] != c[None, :])
    w = float(sim[same].mean()) if same.any() else float("nan")
    b = float(sim[diff].mean()) if diff.any() else float("nan")
    return w, b
