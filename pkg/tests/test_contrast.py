import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import clix3d.autodiff as ad
from clix3d.contrast import (BACKGROUND, ContrastConfig, FrameProposals, assign_foreground, contrastive_loss,
                             contrastive_loss_op, cosine_sim, select_rois)

from oracles import brute_contrastive, brute_greedy_assign
from toy import toy_roi_batch, train_embedding_on_contrast

seeds = st.integers(0, 2**31 - 1)


def random_batch(rng, n=None, dim=6):
    n = n or int(rng.integers(2, 14))
    F = rng.normal(size=(n, dim))
    fg = rng.uniform(size=n) < 0.75
    cls = np.where(fg, rng.integers(0, 3, n), BACKGROUND)
    dom = [str(d) for d in rng.choice(["a", "b", "c"][:int(rng.integers(1, 4))], n)]
    return F, cls, dom, fg


def box(x, y=0.0, l=4.0, w=2.0, h=1.5):
    return np.array([x, y, 0.0, l, w, h, 0.0])


# --- cosine similarity ----------------------------------------------------------------------

def test_cosine_examples():
    assert cosine_sim([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([1, 0], [1, 1]) == pytest.approx(1 / math.sqrt(2))
    with pytest.raises(ValueError):
        cosine_sim([0, 0], [1, 0])


# --- loss values ----------------------------------------------------------------------------

def test_single_roi_and_empty_batch():
    cfg = ContrastConfig()
    assert contrastive_loss(np.ones((1, 4)), [0], ["a"], [True], cfg)[0] == 0.0
    v, g = contrastive_loss(np.zeros((0, 4)), [], [], [], cfg)
    assert v == 0.0 and g.shape == (0, 4)


def test_closed_form_positive_pair():
    F = np.array([[1.0, 0.0], [0.0, 1.0]])
    v, g = contrastive_loss(F, [0, 0], ["a", "b"], [True, True], ContrastConfig())
    # both rows are anchors of class 0, each with one positive partner at sim 0: 2 * (-log 0.5) / 2
    assert v == pytest.approx(2 * math.log(2) / 2, abs=1e-6)
    one = contrastive_loss(F, [0, 0], ["a", "b"], [True, True], ContrastConfig())[0] / 1.0
    assert one == pytest.approx(0.693147, abs=1e-6)


def test_closed_form_negative_pair_and_gradient_direction():
    F = np.array([[1.0, 0.0], [0.0, 1.0]])
    # anchor 0 (class 0), partner 1 is background: one negative pair
    v, g = contrastive_loss(F, [0, BACKGROUND], ["a", "b"], [True, False], ContrastConfig())
    assert v == pytest.approx(0.693147, abs=1e-6)
    # a small step along -g lowers the similarity
    F2 = F - 0.01 * g
    assert cosine_sim(F2[0], F2[1]) < 0.0


@settings(max_examples=50)
@given(seeds, st.booleans(), st.booleans())
def test_loss_matches_loop_oracle(seed, cross, bg):
    rng = np.random.default_rng(seed)
    F, cls, dom, fg = random_batch(rng)
    cw = {0: 2.0, 2: 0.5}
    cfg = ContrastConfig(cross_domain_only=cross, include_background=bg, class_weights=cw)
    v, _ = contrastive_loss(F, cls, dom, fg, cfg)
    assert v == pytest.approx(brute_contrastive(F, list(cls), dom, list(fg), cross, bg, cw), rel=1e-10, abs=1e-12)


@settings(max_examples=50)
@given(seeds)
def test_gradcheck_random_batches(seed):
    rng = np.random.default_rng(seed)
    F, cls, dom, fg = random_batch(rng)
    x = ad.parameter(F)
    assert ad.grad_check(lambda: contrastive_loss_op(x, cls, dom, fg, ContrastConfig()), x) < 1e-4


@settings(max_examples=40)
@given(seeds)
def test_scale_and_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    F, cls, dom, fg = random_batch(rng)
    cfg = ContrastConfig()
    v = contrastive_loss(F, cls, dom, fg, cfg)[0]
    G = F.copy()
    G[0] *= 8.0          # a power of two keeps the normalization bit-exact
    assert contrastive_loss(G, cls, dom, fg, cfg)[0] == v
    perm = rng.permutation(len(F))
    w = contrastive_loss(F[perm], cls[perm], [dom[i] for i in perm], fg[perm], cfg)[0]
    assert w == pytest.approx(v, rel=1e-12, abs=1e-14)


def test_zero_feature_rejected():
    F = np.array([[0.0, 0.0], [1.0, 0.0]])
    with pytest.raises(ValueError):
        contrastive_loss(F, [0, 0], ["a", "b"], [True, True], ContrastConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        ContrastConfig(m=-1)
    with pytest.raises(ValueError):
        ContrastConfig(class_weights={0: 0.0})


# --- ROI selection --------------------------------------------------------------------------

def test_no_proposals_empty_batch():
    fp = FrameProposals(np.zeros((0, 4)), np.zeros((0, 7)), np.zeros(0), np.array([box(0)]), np.array([0]), "a")
    assert len(select_rois([fp], ContrastConfig(), 0)) == 0


def test_one_gt_three_proposals():
    gt = box(10)
    props = np.array([box(10.3), box(11.5), box(30)])
    fp = FrameProposals(np.eye(3), props, np.array([0.5, 0.9, 0.1]), np.array([gt]), np.array([0]), "a")
    rb = select_rois([fp], ContrastConfig(m=8), 0)
    assert rb.source[rb.is_foreground].tolist() == [[0, 0]]
    assert rb.source[~rb.is_foreground].tolist() == [[0, 2]]
    assert rb.class_ids.tolist() == [0, BACKGROUND]


def test_two_gts_share_best_proposal():
    ious = np.array([[0.6, 0.3, 0.0], [0.7, 0.0, 0.2]])
    assert assign_foreground(ious, [0.5, 0.5, 0.5]) == {1: 0, 0: 1}


@settings(max_examples=100)
@given(seeds)
def test_assignment_matches_greedy_oracle(seed):
    rng = np.random.default_rng(seed)
    ng, npr = int(rng.integers(0, 5)), int(rng.integers(0, 7))
    ious = np.round(rng.uniform(-0.3, 1, (ng, npr)).clip(0), 1)
    scores = np.round(rng.uniform(0, 1, npr), 1)
    assert assign_foreground(ious, scores) == brute_greedy_assign(ious, list(scores))


def test_background_sampling_seeded_and_bounded():
    props = np.array([box(x) for x in (40, 45, 50, 55, 60, 65, 70, 75, 80, 85, 90)])
    fp = FrameProposals(np.ones((11, 2)), props, np.ones(11), np.zeros((0, 7)), np.zeros(0, int), "a")
    a = select_rois([fp], ContrastConfig(m=4), 7)
    b = select_rois([fp], ContrastConfig(m=4), 7)
    assert len(a) == 4 and a.source.tolist() == b.source.tolist() and not a.is_foreground.any()


# --- directional behavior -------------------------------------------------------------------

def test_toy_batch_has_two_domains():
    X, cls, dom, fg = toy_roi_batch(0)
    assert set(dom) == {"src_a", "src_b"} and (cls[fg] >= 0).all() and (cls[~fg] == BACKGROUND).all()


@pytest.mark.parametrize("seed", [0, 1])
def test_contrast_pulls_classes_together_across_domains(seed):
    w0, b0, w1, b1 = train_embedding_on_contrast(seed)
    assert w1 > w0 and b1 < b0 and w1 > b1
