"""Detector stage: backbone, anchor assignment, proposal head, ROI pooling,
refinement head and the full inference path."""
import numpy as np
import pytest

from lesionpipe.detection import (
    BACKGROUND,
    LESION,
    NEGATIVE,
    NEUTRAL,
    POSITIVE,
    BackboneConfig,
    DetectorConfig,
    DetectorModel,
    Proposal,
    assign_anchor_labels,
    detect,
    generate_proposals,
    match_proposals_to_gt,
    rcnn_loss,
    roi_pool,
    rpn_loss,
)
from lesionpipe.errors import ShapeError
from lesionpipe.geometry import Box, generate_anchors, iou, iou_matrix
from lesionpipe.tensor import Tensor, grad_check, maxpool2d, tsum
from lesionpipe.training import desk_train_config


@pytest.fixture(scope="module")
def small_model():
    cfg = DetectorConfig(input_size=64, backbone=BackboneConfig(channels=(8, 16, 32)))
    return DetectorModel(cfg, rng=0)


# ---------------------------------------------------------------------------
# backbone

def test_backbone_shape_64():
    cfg = DetectorConfig(input_size=64)  # default stride-8 backbone
    model = DetectorModel(cfg, rng=0)
    fm = model.backbone(Tensor(np.zeros((64, 64, 3))))
    assert fm.data.shape == (8, 8, 32)


def test_backbone_deterministic(small_model, rng):
    image = Tensor(rng.random((64, 64, 3)))
    a = small_model.backbone(image).data
    b = small_model.backbone(image).data
    assert np.array_equal(a, b)


def test_backbone_rejects_indivisible_extent(small_model):
    with pytest.raises(ShapeError):
        small_model.backbone(Tensor(np.zeros((30, 64, 3))))


def test_backbone_gradcheck():
    cfg = DetectorConfig(input_size=16, backbone=BackboneConfig(channels=(4, 6)))
    model = DetectorModel(cfg, rng=3)
    x = Tensor(np.random.default_rng(0).random((16, 16, 3)), requires_grad=True)
    probe = np.random.default_rng(1).normal(size=(8, 8, 6))
    err = grad_check(lambda t: tsum(model.backbone(t) * Tensor(probe)), [x],
                     max_components=60, rng=np.random.default_rng(2))
    assert err < 1e-4


# ---------------------------------------------------------------------------
# anchor assignment

def _unit_anchors(boxes):
    return [type("A", (), {"box": b})() for b in boxes]  # duck-typed anchor stubs


def test_assignment_identical_anchor_is_positive():
    anchors = generate_anchors(6, 6, 8, [32.0], [1.0])
    gt = anchors[1].box
    asn = assign_anchor_labels(anchors, [gt])
    assert asn.labels[1] == POSITIVE
    assert np.allclose(asn.targets[1], 0.0)


def test_assignment_disjoint_anchor_is_negative():
    anchors = generate_anchors(6, 6, 8, [16.0], [1.0])
    gt = Box(40, 40, 47, 47)  # overlaps the (1, 1) anchor only
    asn = assign_anchor_labels(anchors, [gt])
    assert asn.labels[0] == NEGATIVE


def test_assignment_promotes_best_anchor_when_none_positive():
    anchors = generate_anchors(6, 6, 8, [32.0], [1.0])
    # a ground truth overlapping every anchor below 0.7
    gt = Box(2.0, 2.0, 15.0, 15.0)
    ious = iou_matrix([a.box for a in anchors], [gt])[:, 0]
    assert ious.max() < 0.7
    asn = assign_anchor_labels(anchors, [gt])
    positives = np.flatnonzero(asn.labels == POSITIVE)
    assert positives.tolist() == [int(ious.argmax())]


def test_assignment_partition_and_guarantee(rng):
    anchors = generate_anchors(9, 9, 8, [24.0, 48.0], [1.0, 0.5])
    for _ in range(50):
        n_gt = int(rng.integers(1, 4))
        gts = []
        while len(gts) < n_gt:
            x1, y1 = rng.uniform(0, 48, size=2)
            w, h = rng.uniform(6, 24, size=2)
            gts.append(Box(x1, y1, x1 + w, y1 + h))
        asn = assign_anchor_labels(anchors, gts)
        # labels partition all anchors
        assert np.all(np.isin(asn.labels, [POSITIVE, NEUTRAL, NEGATIVE]))
        # every gt has at least one positive anchor matched to it
        for j in range(n_gt):
            assert np.any((asn.labels == POSITIVE) & (asn.matched_gt == j)), j


def test_assignment_promotion_is_argmax_per_gt(rng):
    anchors = generate_anchors(6, 6, 8, [16.0, 40.0], [1.0])
    table = None
    for _ in range(30):
        x1, y1 = rng.uniform(0, 40, size=2)
        gt = Box(x1, y1, x1 + rng.uniform(5, 20), y1 + rng.uniform(5, 20))
        asn = assign_anchor_labels(anchors, [gt])
        table = iou_matrix([a.box for a in anchors], [gt])[:, 0]
        if table.max() < 0.7:
            assert asn.labels[int(table.argmax())] == POSITIVE


def test_assignment_requires_gt():
    anchors = generate_anchors(3, 3, 8, [16.0], [1.0])
    with pytest.raises(ValueError):
        assign_anchor_labels(anchors, [])


def test_assignment_thresholds(rng):
    anchors = generate_anchors(9, 9, 8, [24.0], [1.0, 0.5, 2.0])
    for _ in range(30):
        x1, y1 = rng.uniform(0, 50, size=2)
        gt = Box(x1, y1, x1 + rng.uniform(8, 20), y1 + rng.uniform(8, 20))
        asn = assign_anchor_labels(anchors, [gt], pos_thr=0.7, neg_thr=0.4)
        ious = iou_matrix([a.box for a in anchors], [gt])[:, 0]
        for i, lab in enumerate(asn.labels):
            if ious[i] >= 0.7:
                assert lab == POSITIVE
            elif ious[i] >= 0.4:
                assert lab in (NEUTRAL, POSITIVE)  # may be promoted
            else:
                assert lab in (NEGATIVE, POSITIVE)


# ---------------------------------------------------------------------------
# rpn head

def test_rpn_emits_nine_by_five_maps(small_model):
    fm = small_model.backbone(Tensor(np.zeros((64, 64, 3))))
    out = small_model.rpn(fm)
    assert out.num_maps == 45
    assert out.num_anchor_types == 9
    n = len(small_model.anchors)
    assert out.offsets.data.shape == (n, 4)
    assert out.objectness.data.shape == (n,)


def test_rpn_objectness_in_unit_interval(small_model, rng):
    fm = small_model.backbone(Tensor(rng.random((64, 64, 3))))
    out = small_model.rpn(fm)
    assert np.all((out.objectness.data > 0) & (out.objectness.data < 1))


def test_rpn_gradcheck():
    cfg = DetectorConfig(input_size=48, backbone=BackboneConfig(channels=(4,)),
                         rpn_mid_channels=6)
    model = DetectorModel(cfg, rng=1)
    x = Tensor(np.random.default_rng(0).normal(size=(6, 6, 4)), requires_grad=True)
    r = np.random.default_rng(1)
    probe_o = Tensor(r.normal(size=(36, 4)))
    probe_s = Tensor(r.normal(size=36))

    def f(t):
        out = model.rpn(t)
        return tsum(out.offsets * probe_o) + tsum(out.objectness * probe_s)

    err = grad_check(f, [x], max_components=50, rng=r)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# rpn loss

def _toy_assignment_and_output(model, gt):
    fm = model.backbone(Tensor(np.random.default_rng(0).random((64, 64, 3))))
    out = model.rpn(fm)
    asn = assign_anchor_labels(model.anchors, [gt], image_h=64, image_w=64)
    return out, asn


def test_rpn_loss_nonnegative(small_model):
    out, asn = _toy_assignment_and_output(small_model, Box(10, 10, 30, 30))
    assert rpn_loss(out, asn).item() >= 0.0


def test_rpn_loss_perfect_predictions_near_zero(small_model):
    out, asn = _toy_assignment_and_output(small_model, Box(10, 10, 30, 30))
    pos = asn.positive_indices
    neg = asn.negative_indices
    objectness = np.zeros(len(small_model.anchors))
    objectness[pos] = 1.0
    fake = type(out)(Tensor(asn.targets.copy()), Tensor(objectness), out.maps,
                     out.num_anchor_types, out.num_locations)
    assert rpn_loss(fake, asn).item() < 1e-6


def test_rpn_loss_single_positive_half_confidence_is_ln2(small_model):
    asn = assign_anchor_labels(small_model.anchors, [small_model.anchors[0].box],
                               image_h=64, image_w=64)
    only = asn.positive_indices
    labels = np.full(len(small_model.anchors), NEUTRAL, dtype=np.int8)
    labels[only[0]] = POSITIVE
    asn.labels[:] = labels
    objectness = np.full(len(small_model.anchors), 0.5)
    fake_out = type("O", (), {})()
    fake_out.objectness = Tensor(objectness)
    fake_out.offsets = Tensor(asn.targets.copy())
    got = rpn_loss(fake_out, asn).item()
    assert got == pytest.approx(np.log(2.0), abs=1e-9)


def test_rpn_loss_no_non_neutral_raises(small_model):
    asn = assign_anchor_labels(small_model.anchors, [small_model.anchors[0].box],
                               image_h=64, image_w=64)
    asn.labels[:] = NEUTRAL
    fake_out = type("O", (), {})()
    fake_out.objectness = Tensor(np.full(len(small_model.anchors), 0.5))
    fake_out.offsets = Tensor(asn.targets)
    with pytest.raises(ValueError):
        rpn_loss(fake_out, asn)


def test_rpn_loss_sample_cap(small_model):
    out, asn = _toy_assignment_and_output(small_model, Box(10, 10, 30, 30))
    # a tiny cap must still produce a finite loss
    assert np.isfinite(rpn_loss(out, asn, sample_cap=2, rng=np.random.default_rng(0)).item())


# ---------------------------------------------------------------------------
# proposals

def test_generate_proposals_top_k_sorted(small_model, rng):
    fm = small_model.backbone(Tensor(rng.random((64, 64, 3))))
    out = small_model.rpn(fm)
    props = generate_proposals(out, small_model.anchors, 64, 64, top_k=64)
    assert len(props) <= 64
    scores = [p.objectness for p in props]
    assert scores == sorted(scores, reverse=True)
    for p in props:
        assert 0 <= p.box.x1 < p.box.x2 <= 64
        assert 0 <= p.box.y1 < p.box.y2 <= 64


def test_generate_proposals_top_1_is_argmax(small_model, rng):
    fm = small_model.backbone(Tensor(rng.random((64, 64, 3))))
    out = small_model.rpn(fm)
    all_props = generate_proposals(out, small_model.anchors, 64, 64,
                                   top_k=len(small_model.anchors))
    top1 = generate_proposals(out, small_model.anchors, 64, 64, top_k=1)
    assert top1[0] == all_props[0]


def test_generate_proposals_count_144_to_64():
    anchors = generate_anchors(12, 12, 8, [24.0, 48.0, 96.0], [1.0, 0.5, 2.0])
    assert len(anchors) == 144
    n = len(anchors)
    fake_out = type("O", (), {})()
    r = np.random.default_rng(0)
    fake_out.objectness = Tensor(r.random(n))
    fake_out.offsets = Tensor(r.normal(scale=0.05, size=(n, 4)))
    props = generate_proposals(fake_out, anchors, 96, 96, top_k=64)
    assert len(props) == 64
    scores = [p.objectness for p in props]
    assert all(a >= b for a, b in zip(scores, scores[1:]))


def test_generate_proposals_clip(small_model):
    n = len(small_model.anchors)
    offsets = np.zeros((n, 4))
    offsets[:, 2:] = 3.0  # blow every box up well past the image
    fake_out = type("O", (), {})()
    fake_out.objectness = Tensor(np.linspace(0.9, 0.1, n))
    fake_out.offsets = Tensor(offsets)
    props = generate_proposals(fake_out, small_model.anchors, 64, 64, top_k=10)
    for p in props:
        assert (p.box.x1, p.box.y1) >= (0.0, 0.0)
        assert (p.box.x2, p.box.y2) <= (64.0, 64.0)


# ---------------------------------------------------------------------------
# roi pooling

def test_roi_pool_constant_map(small_model):
    fm = Tensor(np.full((16, 16, 4), 1.5))
    out = roi_pool(fm, Box(8, 12, 40, 36), 4)
    assert out.data.shape == (7, 7, 4)
    assert np.allclose(out.data, 1.5)


def test_roi_pool_whole_map_equals_maxpool(rng):
    fm = Tensor(rng.normal(size=(14, 14, 3)))
    # a box covering the whole map at stride 4 -> crop is the identity
    out = roi_pool(fm, Box(0, 0, 56, 56), 4)
    want = maxpool2d(fm, 2, 2)
    assert np.array_equal(out.data, want.data)


def test_roi_pool_output_shape_fixed(small_model, rng):
    fm = Tensor(rng.normal(size=(16, 16, 32)))
    for box in [Box(0, 0, 5, 7), Box(20, 24, 60, 62), Box(1, 1, 63, 63)]:
        assert roi_pool(fm, box, 4).data.shape == (7, 7, 32)


def test_roi_pool_outside_feature_map_raises(rng):
    fm = Tensor(rng.normal(size=(8, 8, 2)))
    with pytest.raises(ValueError):
        roi_pool(fm, Box(0, 0, 80, 80), 4)  # maps to 20 > 8


def test_roi_pool_monotone_under_feature_increase(rng):
    base = rng.normal(size=(16, 16, 2))
    bump = base + rng.uniform(0.0, 1.0, size=base.shape)
    box = Box(6, 4, 40, 44)
    lo = roi_pool(Tensor(base), box, 4).data
    hi = roi_pool(Tensor(bump), box, 4).data
    assert np.all(hi >= lo - 1e-12)


# ---------------------------------------------------------------------------
# rcnn head and loss

def test_rcnn_probs_sum_to_one(small_model, rng):
    pooled = Tensor(rng.normal(size=(7, 7, 32)))
    probs, refine = small_model.rcnn(pooled)
    assert probs.data.shape == (2,)
    assert probs.data.sum() == pytest.approx(1.0, abs=1e-9)
    assert refine.data.shape == (4,)


def test_rcnn_head_shared_across_proposals(small_model, rng):
    pooled = rng.normal(size=(7, 7, 32))
    p1, r1 = small_model.rcnn(Tensor(pooled.copy()))
    p2, r2 = small_model.rcnn(Tensor(pooled.copy()))
    assert np.array_equal(p1.data, p2.data)
    assert np.array_equal(r1.data, r2.data)


def test_rcnn_gradcheck():
    cfg = DetectorConfig(input_size=48, backbone=BackboneConfig(channels=(4,)),
                         rcnn_conv_channels=4, rcnn_hidden=8)
    model = DetectorModel(cfg, rng=2)
    x = Tensor(np.random.default_rng(0).normal(size=(7, 7, 4)), requires_grad=True)
    r = np.random.default_rng(1)
    probe_p = Tensor(r.normal(size=2))
    probe_r = Tensor(r.normal(size=4))

    def f(t):
        probs, refine = model.rcnn(t)
        return tsum(probs * probe_p) + tsum(refine * probe_r)

    assert grad_check(f, [x], max_components=60, rng=r) < 1e-4


def test_rcnn_loss_perfect_predictions(small_model):
    outputs = [(Tensor(np.array([1.0, 0.0])), Tensor(np.zeros(4))),
               (Tensor(np.array([0.0, 1.0])), Tensor(np.zeros(4)))]
    labels = [LESION, BACKGROUND]
    targets = [np.zeros(4), None]
    assert rcnn_loss(outputs, labels, targets).item() < 1e-6


def test_rcnn_loss_uniform_lesion_is_ln2():
    outputs = [(Tensor(np.array([0.5, 0.5])), Tensor(np.zeros(4)))]
    got = rcnn_loss(outputs, [LESION], [np.zeros(4)]).item()
    assert got == pytest.approx(np.log(2.0), abs=1e-9)


def test_rcnn_loss_nonnegative(small_model, rng):
    outputs = []
    labels = []
    targets = []
    for i in range(6):
        p = rng.random(2)
        p /= p.sum()
        outputs.append((Tensor(p), Tensor(rng.normal(size=4))))
        labels.append(LESION if i % 2 == 0 else BACKGROUND)
        targets.append(rng.normal(size=4) if i % 2 == 0 else None)
    assert rcnn_loss(outputs, labels, targets).item() >= 0.0


def test_rcnn_loss_empty_raises():
    with pytest.raises(ValueError):
        rcnn_loss([], [], [])


def test_match_proposals_threshold():
    gt = Box(10, 10, 30, 30)
    props = [Proposal(gt, 1.0), Proposal(Box(40, 40, 60, 60), 0.5)]
    labels, targets = match_proposals_to_gt(props, [gt], image_h=64, image_w=64)
    assert labels == [LESION, BACKGROUND]
    assert np.allclose(targets[0], 0.0)
    assert targets[1] is None


# ---------------------------------------------------------------------------
# detect

def test_detect_empty_when_all_below_threshold(small_model, rng):
    dets = detect(rng.random((64, 64, 3)), small_model, score_threshold=1.0)
    assert dets == []


def test_detect_kept_pairs_below_nms_threshold(small_model, rng):
    dets = detect(rng.random((64, 64, 3)), small_model, score_threshold=0.0)
    for i, a in enumerate(dets):
        for b in dets[i + 1:]:
            assert iou(a.box, b.box) <= small_model.config.nms_threshold


def test_detect_sorted_and_normalized(small_model, rng):
    dets = detect(rng.random((64, 64, 3)), small_model, score_threshold=0.0)
    probs = [d.lesion_prob for d in dets]
    assert probs == sorted(probs, reverse=True)
    for d in dets:
        assert d.class_probs.sum() == pytest.approx(1.0, abs=1e-9)


def test_detect_deterministic(small_model, rng):
    image = rng.random((64, 64, 3))
    a = detect(image, small_model, score_threshold=0.0)
    b = detect(image, small_model, score_threshold=0.0)
    assert len(a) == len(b)
    for da, db in zip(a, b):
        assert da.box == db.box
        assert np.array_equal(da.class_probs, db.class_probs)


# ---------------------------------------------------------------------------
# paper-constant defaults

def test_default_config_constants():
    cfg = DetectorConfig()
    assert cfg.effective_scales == (128.0, 256.0, 512.0)
    assert cfg.anchor_ratios == (1.0, 0.5, 2.0)
    assert cfg.num_anchor_types == 9
    assert (cfg.pos_iou, cfg.neg_iou) == (0.7, 0.4)
    assert cfg.nms_threshold == 0.5
    assert desk_train_config().lr == 0.001
