"""Small synthetic fixtures shared by several test modules."""
from __future__ import annotations

import numpy as np

import clix3d.autodiff as ad
from clix3d.contrast import BACKGROUND, ContrastConfig, contrastive_loss_op, within_between_similarity


def toy_roi_batch(seed: int, n_per: int = 6, n_classes: int = 3, dim: int = 16, n_bg: int = 4,
                  domain_shift: float = 1.5):
    """Frozen two-domain ROI inputs: class prototype + strong per-domain offset + noise."""
    rng = np.random.default_rng(seed)
    protos = rng.normal(0, 1, (n_classes, dim))
    shifts = {d: rng.normal(0, domain_shift, dim) for d in ("src_a", "src_b")}
    X, cls, dom, fg = [], [], [], []
    for d, off in shifts.items():
        for c in range(n_classes):
            for _ in range(n_per):
                X.append(protos[c] + off + rng.normal(0, 0.3, dim))
                cls.append(c)
                dom.append(d)
                fg.append(True)
        for _ in range(n_bg):
            X.append(off + rng.normal(0, 1.0, dim))
            cls.append(BACKGROUND)
            dom.append(d)
            fg.append(False)
    return np.array(X), np.array(cls), dom, np.array(fg)


def train_embedding_on_contrast(seed: int, steps: int = 100, lr: float = 0.01, out_dim: int = 16):
    """Adam on a linear embedding ``f = x W`` under the contrastive loss alone.

    Returns ``(within_before, between_before, within_after, between_after)``.
    """
    X, cls, dom, fg = toy_roi_batch(seed)
    rng = np.random.default_rng([seed, 1])
    W = ad.parameter(rng.normal(0, 1 / np.sqrt(X.shape[1]), (X.shape[1], out_dim)), "W")
    cfg = ContrastConfig()
    before = within_between_similarity(X @ W.data, cls, dom, fg)
    state = ad.AdamState(lr=lr, weight_decay=0.0)
    for _ in range(steps):
        W.grad = None
        with ad.Tape() as tape:
            loss = contrastive_loss_op(ad.matmul(ad.constant(X), W), cls, dom, fg, cfg)
        tape.backward(loss)
        ad.adam_step({"W": W}, None, state)
    after = within_between_similarity(X @ W.data, cls, dom, fg)
    return (*before, *after)


SMALL_DETECTOR = dict(rpn_hidden=16, roi_dim=16, roi_point_dim=8, post_nms=24, rois_per_frame=16)


def small_detector_batch(seed: int, domains=("kitti", "lyft"), n_objects: int = 5):
    """Two augmented frames from different domains plus a small detector and its parameters."""
    from clix3d.augment import AugConfig, apply_augmentations
    from clix3d.detector import DetectorConfig, init_params
    from clix3d.scene import generate_scene, get_profile

    cfg = DetectorConfig(**SMALL_DETECTOR)
    frames, ledgers = [], []
    for i, d in enumerate(domains):
        f = generate_scene(get_profile(d), 2 * seed + i, n_objects, image_dims=(32, 104), point_scale=0.01)
        out, led = apply_augmentations(f, AugConfig(), 7 * seed + i)
        frames.append(out)
        ledgers.append(led)
    return frames, ledgers, cfg, init_params(cfg, seed)


def random_eval_scene(rng, max_boxes: int = 20):
    """GT boxes plus noisy detections (some duplicated, some spurious) with tie-prone scores."""
    n_gt = int(rng.integers(0, max_boxes // 2 + 1))
    gt = np.c_[rng.uniform(0, 40, (n_gt, 2)), rng.uniform(-1.5, -0.5, n_gt), rng.uniform(1, 5, (n_gt, 3)),
               rng.uniform(-np.pi, np.pi, n_gt)]
    n_det = int(rng.integers(0, max_boxes - n_gt + 1))
    src = rng.integers(-1, n_gt, n_det) if n_gt else np.full(n_det, -1)
    det = np.c_[rng.uniform(0, 40, (n_det, 2)), rng.uniform(-1.5, -0.5, n_det), rng.uniform(1, 5, (n_det, 3)),
                rng.uniform(-np.pi, np.pi, n_det)]
    for i, s in enumerate(src):
        if s >= 0:
            det[i] = gt[s]
            det[i, :3] += rng.normal(0, 0.25, 3)
            det[i, 3:6] *= np.exp(rng.normal(0, 0.08, 3))
            det[i, 6] += rng.normal(0, 0.1)
    scores = np.round(rng.uniform(0, 1, n_det), int(rng.integers(1, 4)))
    valid = rng.uniform(size=n_gt) < 0.8
    return det, scores, gt, valid
