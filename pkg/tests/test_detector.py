import math

import numpy as np
import pytest

import clix3d.autodiff as ad
from clix3d.contrast import ContrastConfig
from clix3d.detector import (Decisions, DetectorConfig, FrameDecision, anchors_for_cells, assign_anchors,
                             backbone_forward, batch_loss, bev_extents, decode_box, decode_boxes, encode_box,
                             encode_boxes, frame_forward, infer, init_params, jitter_boxes, propose,
                             regression_targets, roi_point_pairs, sample_roi_targets)
from clix3d.geometry import Box3D, iou_3d, iou_bev
from clix3d.scene import CameraCalib, Frame, generate_scene, get_profile

from oracles import inside
from toy import SMALL_DETECTOR, small_detector_batch

P_EX = [[100, 0, 50, 0], [0, 100, 50, 0], [0, 0, 1, 0]]


def empty_frame():
    return Frame(np.zeros((0, 4), np.float32), np.zeros((32, 104, 3)), CameraCalib(P_EX), [], "kitti", "e")


# --- box coding -----------------------------------------------------------------------------

def test_box_equal_anchor_zero_residuals():
    a = Box3D(3.0, -2.0, -1.0, 3.9, 1.6, 1.56, 0.4)
    assert np.all(encode_box(a, a) == 0.0)
    assert decode_box(np.zeros(7), a).as_array().tolist() == a.as_array().tolist()


def test_doubled_dims_log_two():
    a = Box3D(0, 0, 0, 2.0, 1.0, 1.5, 0.0)
    r = encode_box(Box3D(0, 0, 0, 4.0, 2.0, 3.0, 0.0), a)
    np.testing.assert_allclose(r[3:6], math.log(2))
    assert np.all(r[[0, 1, 2, 6]] == 0)


def test_residual_normalization():
    a = Box3D(0, 0, 0, 3.0, 4.0, 2.0, 0.0)
    r = encode_box(Box3D(5.0, -2.5, 1.0, 3.0, 4.0, 2.0, 0.3), a)
    np.testing.assert_allclose(r[[0, 1, 2, 6]], [1.0, -0.5, 0.5, 0.3])


def test_random_round_trip():
    rng = np.random.default_rng(0)
    anchors = np.c_[rng.uniform(-40, 40, (1000, 3)), rng.uniform(0.3, 5, (1000, 3)), rng.uniform(-3, 3, 1000)]
    boxes = np.c_[rng.uniform(-40, 40, (1000, 3)), rng.uniform(0.3, 5, (1000, 3)), rng.uniform(-3, 3, 1000)]
    assert np.abs(decode_boxes(encode_boxes(boxes, anchors), anchors) - boxes).max() < 1e-9


def test_encode_rejects_flat_anchor():
    with pytest.raises(ValueError):
        encode_boxes(np.ones(7), [0, 0, 0, 1, 0, 1, 0])


def test_regression_targets_fold_half_turn():
    a = np.array([0, 0, 0, 4, 2, 1.5, 0.0])
    b = a.copy()
    b[6] = math.pi - 0.1
    assert regression_targets(b, a)[0, 6] == pytest.approx(-0.1)


# --- anchors and assignment -----------------------------------------------------------------

def test_anchor_grid_covers_range_and_rotations():
    cfg = DetectorConfig()
    nx, ny = bev_extents(cfg, cfg.plan.n_stages - 1)
    cells = np.argwhere(np.ones((nx, ny), bool))
    a, cls = anchors_for_cells(cells, cfg)
    assert len(a) == nx * ny * 6
    r = cfg.pc_range
    step = cfg.voxel_size[0] * 8
    assert a[:, 0].min() == pytest.approx(r[0] + step / 2) and a[:, 0].max() == pytest.approx(r[3] - step / 2)
    assert set(np.round(a[:, 6], 6)) == {0.0, round(math.pi / 2, 6)}
    assert sorted(set(cls)) == [0, 1, 2]
    car = a[cls == 0][0]
    assert tuple(car[3:6]) == cfg.anchors["Car"]


def test_for_sources_averages_profiles():
    cfg = DetectorConfig.for_sources([get_profile("kitti"), get_profile("lyft")])
    k, l = get_profile("kitti").anchors["Car"], get_profile("lyft").anchors["Car"]
    np.testing.assert_allclose(cfg.anchors["Car"], (np.array(k) + l) / 2)


def test_assign_anchors_thresholds():
    cfg = DetectorConfig()
    gt = np.array([[10.0, 0, -1, 4, 2, 1.5, 0]])
    anchors = np.array([gt[0],                                 # IoU 1
                        [10.8, 0, -1, 4, 2, 1.5, 0],            # IoU 0.6667
                        [11.0, 0, -1, 4, 2, 1.5, 0],            # IoU 0.6
                        [11.4, 0, -1, 4, 2, 1.5, 0],            # IoU ~0.48 -> ignored
                        [14.0, 0, -1, 4, 2, 1.5, 0],            # IoU 0 -> negative
                        gt[0]])                                 # wrong class
    acls = np.array([0, 0, 0, 0, 0, 1])
    labels, match = assign_anchors(anchors, acls, gt, np.array([0]), cfg)
    assert labels.tolist() == [1, 1, 1, -1, 0, 0]
    assert match.tolist() == [0, 0, 0, -1, -1, -1]
    assert iou_bev(anchors[3], gt[0]) == pytest.approx(2.6 / 5.4)


def test_assign_forces_best_anchor_positive():
    cfg = DetectorConfig()
    gt = np.array([[10.0, 0, -1, 4, 2, 1.5, 0]])
    anchors = np.array([[12.5, 0, -1, 4, 2, 1.5, 0], [20.0, 0, -1, 4, 2, 1.5, 0]])
    labels, match = assign_anchors(anchors, np.zeros(2, int), gt, np.array([0]), cfg)
    assert labels.tolist() == [1, 0] and match.tolist() == [0, -1]


def test_assign_no_gt_all_negative():
    labels, match = assign_anchors(np.ones((3, 7)), np.zeros(3, int), np.zeros((0, 7)), [], DetectorConfig())
    assert labels.tolist() == [0, 0, 0] and match.tolist() == [-1, -1, -1]


# --- ROI targets ----------------------------------------------------------------------------

def test_sample_roi_targets_labels():
    cfg = DetectorConfig(rois_per_frame=8)
    gt = np.array([[10.0, 0, -1, 4, 2, 1.5, 0], [20.0, 5, -1, 0.8, 0.6, 1.7, 0]])
    rois = np.array([gt[0], [10.5, 0, -1, 4, 2, 1.5, 0], [10.0, 3, -1, 4, 2, 1.5, 0], gt[1],
                     [40.0, 0, -1, 4, 2, 1.5, 0], [11.2, 0, -1, 4, 2, 1.5, 0]])
    ious = [max(iou_3d(r, g) for g in gt) for r in rois]
    idx, lab, g, reg, rg = sample_roi_targets(rois, gt, np.array([0, 1]), cfg, np.random.default_rng(0))
    expect_fg = [i for i, v in enumerate(ious) if v >= cfg.roi_fg_iou]
    expect_bg = [i for i, v in enumerate(ious) if v < cfg.roi_bg_iou]
    assert idx.tolist() == expect_fg + expect_bg
    assert lab.tolist() == [1, 1, 2] + [0] * len(expect_bg)
    assert reg.tolist() == [i for i, v in enumerate(ious) if v >= cfg.roi_reg_iou]
    assert rg.tolist() == [0, 0, 1, 0]


def test_sample_roi_targets_caps():
    cfg = DetectorConfig(rois_per_frame=4)
    gt = np.array([[10.0, 0, -1, 4, 2, 1.5, 0]])
    rois = np.repeat(gt, 9, axis=0)
    rois[:, 0] += np.linspace(0, 0.3, 9)
    idx, lab, _, reg, _ = sample_roi_targets(rois, gt, np.array([0]), cfg, np.random.default_rng(1))
    assert len(idx) == 2 and len(reg) == 2 and (lab == 1).all()


def test_jitter_boxes_seeded_and_valid():
    gt = np.array([[10.0, 0, -1, 4, 2, 1.5, 0], [20.0, 5, -1, 0.8, 0.6, 1.7, 1.0]])
    a = jitter_boxes(gt, 3, np.random.default_rng(4))
    b = jitter_boxes(gt, 3, np.random.default_rng(4))
    assert a.shape == (6, 7) and np.array_equal(a, b) and (a[:, 3:6] > 0).all()
    assert np.allclose(np.median(a[:3, :2], axis=0), gt[0, :2], atol=2.0)
    assert jitter_boxes(gt, 0, np.random.default_rng(0)).shape == (0, 7)


def test_roi_point_pairs_match_brute_force():
    rng = np.random.default_rng(3)
    means = np.c_[rng.uniform(0, 30, 600), rng.uniform(-10, 10, 600), rng.uniform(-2, 0.5, 600)]
    boxes = np.c_[rng.uniform(2, 28, (12, 1)), rng.uniform(-8, 8, (12, 1)), rng.uniform(-1.5, -0.5, (12, 1)),
                  rng.uniform(0.8, 5, (12, 3)), rng.uniform(-3, 3, (12, 1))]
    cfg = DetectorConfig(roi_points=10_000, roi_margin=0.3)
    ri, vi, loc = roi_point_pairs(boxes, means, cfg)
    got = set(zip(ri.tolist(), vi.tolist()))
    grown = boxes.copy()
    grown[:, 3:6] += 2 * 0.3
    want = {(r, v) for r in range(len(boxes)) for v in np.flatnonzero(inside(means, grown[r]))}
    assert got == want
    assert np.abs(loc[:, :3]).max() <= 1.0 + 1e-12
    capped = roi_point_pairs(boxes, means, DetectorConfig(roi_points=3, roi_margin=0.3))[0]
    assert np.bincount(capped, minlength=12).max() <= 3


# --- forward --------------------------------------------------------------------------------

def test_stage_dims_and_empty_frame():
    cfg = DetectorConfig(**SMALL_DETECTOR)
    p = init_params(cfg, 0)
    f = generate_scene(get_profile("kitti"), 0, 4, image_dims=(32, 104), point_scale=0.01)
    _, _, feats = backbone_forward(f, cfg, p)
    assert [t.shape[1] for t in feats] == [16, 32, 64, 128]
    ff = frame_forward(empty_frame(), cfg, p)
    assert len(propose(ff, cfg)[0]) == 0
    assert infer(empty_frame(), p, cfg) == []


def test_proposals_deterministic_and_bounded():
    cfg = DetectorConfig(**SMALL_DETECTOR)
    p = init_params(cfg, 1)
    f = generate_scene(get_profile("kitti"), 1, 6, image_dims=(32, 104), point_scale=0.01)
    a = propose(frame_forward(f, cfg, p), cfg)
    b = propose(frame_forward(f, cfg, p), cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert len(a[0]) <= cfg.post_nms and np.all(np.diff(a[1]) <= 0)


def test_infer_threshold_one_is_empty():
    cfg = DetectorConfig(**SMALL_DETECTOR)
    p = init_params(cfg, 0)
    f = generate_scene(get_profile("kitti"), 0, 4, image_dims=(32, 104), point_scale=0.01)
    assert infer(f, p, cfg, score_thresh=1.0) == []
    for d in infer(f, p, cfg, score_thresh=0.0):
        assert 0.0 <= d.score <= 1.0 and math.isfinite(d.score)


# --- losses ---------------------------------------------------------------------------------

def test_loss_report_additive():
    frames, ledgers, cfg, p = small_detector_batch(0)
    total, rep, _ = batch_loss(frames, ledgers, p, cfg, ContrastConfig(weight=0.3), 0)
    assert float(total.data) == pytest.approx(rep.loc + rep.cls + rep.rpn + 0.3 * rep.con, rel=1e-12)
    assert rep.total == rep.loc + rep.cls + rep.rpn + 0.3 * rep.con


def test_no_gt_no_localization_loss():
    frames, ledgers, cfg, p = small_detector_batch(0, n_objects=0)
    _, rep, _ = batch_loss(frames, ledgers, p, cfg, None, 0)
    assert rep.loc == 0.0 and rep.cls > 0 and rep.rpn > 0 and rep.con == 0.0


def test_perfect_refinement_zero_loc():
    frames, ledgers, cfg, p = small_detector_batch(1)
    cfg.gt_jitter = 0
    p["roi.Wr"].data[:] = 0.0
    p["roi.br"].data[:] = 0.0
    # ROIs are exactly the ground-truth boxes and the head predicts zero residuals
    dec = []
    for f in frames:
        n = len(f.labels)
        ar = np.arange(n)
        dec.append(FrameDecision(np.zeros((0, 7)), np.zeros(0), ar, f.gt_classes() + 1, ar, ar, ar,
                                 np.zeros((0, 7))))
    _, rep, _ = batch_loss(frames, ledgers, p, cfg, None, 0, Decisions(dec))
    assert rep.loc == 0.0


def test_full_loss_gradcheck():
    for seed in range(2):
        frames, ledgers, cfg, p = small_detector_batch(seed)
        cc = ContrastConfig(weight=0.5)
        _, _, dec = batch_loss(frames, ledgers, p, cfg, cc, seed)
        err = ad.grad_check(lambda: batch_loss(frames, ledgers, p, cfg, cc, seed, dec)[0], list(p.values()),
                            h=1e-7, n_coords=1, seed=seed)
        assert err < 1e-3


def test_every_parameter_receives_gradient():
    frames, ledgers, cfg, p = small_detector_batch(2)
    with ad.Tape() as tape:
        total, _, _ = batch_loss(frames, ledgers, p, cfg, ContrastConfig(), 2)
    tape.backward(total)
    dead = {k for k, v in p.items() if v.grad is None or not np.any(v.grad)}
    # fusion starts with zero image rows, so the image encoder is cut off until those rows move
    assert dead == {k for k in p if k.startswith("img")}
    for k in p:
        if k.startswith("fuse") and k.endswith(".W"):
            c = p[k].data.shape[1]
            assert np.any(p[k].grad[c:])
            p[k].data[c:] = np.random.default_rng(0).normal(0, 0.1, (c, c))
        p[k].grad = None
    with ad.Tape() as tape:
        total, _, _ = batch_loss(frames, ledgers, p, cfg, ContrastConfig(), 2)
    tape.backward(total)
    assert [k for k, v in p.items() if v.grad is None or not np.any(v.grad)] == []
