import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from multiregion import _kernels
from multiregion.errors import InvalidArgumentError
from multiregion.featmap import toy_extract
from multiregion.geometry import RegionKind, RegionSpec, iou_matrix, standard_region_set
from multiregion.localization import (
    CandidateSet,
    LocalizationConfig,
    box_voting,
    detect,
    iterative_localize,
    localize_class,
    mean_max_iou,
    nms,
    nms_indices,
)
from multiregion.pooling import descriptor_layout
from multiregion.recognition import LinearHead, ModelBundle, Regressor


def random_boxes(rng, n, span=100.0, quantize=False):
    xy = rng.uniform(0, span, (n, 2))
    wh = rng.uniform(2, span / 2, (n, 2))
    boxes = np.hstack([xy, xy + wh])
    return np.round(boxes) if quantize else boxes


def oracle_scorer(gts):
    return lambda boxes: iou_matrix(boxes, gts).max(axis=1)


def move_toward(gts, fraction):
    def reg(boxes):
        idx = iou_matrix(boxes, gts).argmax(axis=1)
        return boxes + fraction * (gts[idx] - boxes)
    return reg


class TestNMS:
    def test_single(self):
        c = CandidateSet(0, 1, [0.4], [[0, 0, 5, 5]])
        assert nms(c, 0.3).entries() == c.entries()

    def test_identical_pair(self):
        kept = nms(CandidateSet(0, 1, [0.8, 0.9], [[0, 0, 10, 10]] * 2), 0.3)
        assert kept.scores.tolist() == [0.9]

    def test_below_threshold_both_survive(self):
        # two 10x10 boxes sharing a 10 x 10/3 strip: IoU = (100/3) / (500/3) = 0.2
        a, b = [0, 0, 10, 10], [0, 10 - 10 / 3, 10, 20 - 10 / 3]
        assert iou_matrix([a], [b])[0, 0] == pytest.approx(0.2)
        assert len(nms(CandidateSet(0, 1, [0.9, 0.8], [a, b]), 0.3)) == 2

    def test_tie_prefers_lower_index(self):
        boxes = [[0, 0, 10, 10], [1, 0, 11, 10]]
        assert nms_indices(boxes, [0.5, 0.5], 0.3).tolist() == [0]

    def test_matches_oracle(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 201))
            boxes = random_boxes(rng, n, quantize=True)
            scores = np.round(rng.random(n), 1)  # many ties
            thr = float(rng.uniform(0.05, 0.95))
            assert nms_indices(boxes, scores, thr).tolist() == oracles.nms(boxes, scores, thr)

    def test_numba_numpy_agree(self, rng):
        for _ in range(30):
            boxes = random_boxes(rng, 80)
            order = np.argsort(-rng.random(80), kind="stable").astype(np.int64)
            a = _kernels.greedy_nms_numba(boxes, order, 0.4)
            b = _kernels.greedy_nms_numpy(boxes, order, 0.4)
            np.testing.assert_array_equal(a, b)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.05, 0.9), st.floats(0.0, 0.09))
    def test_stricter_threshold_keeps_fewer(self, seed, thr, delta):
        rng = np.random.default_rng(seed)
        boxes, scores = random_boxes(rng, 60), rng.random(60)
        assert len(nms_indices(boxes, scores, thr)) <= len(nms_indices(boxes, scores, thr + delta))

    def test_bad_threshold(self):
        with pytest.raises(InvalidArgumentError):
            nms_indices([[0, 0, 1, 1]], [1.0], 1.0)


class TestVoting:
    def test_identity_neighborhood(self):
        c = CandidateSet(0, 2, [0.7], [[0, 0, 10, 10]])
        assert box_voting(c, c, 0.5).entries() == c.entries()

    def test_weighted_average(self):
        pool = CandidateSet(0, -1, [1.0, 3.0], [[0, 0, 10, 10], [0, 0, 10, 12]])
        out = box_voting(pool.take([0]), pool, 0.5)
        assert out.boxes[0].tolist() == [0, 0, 10, 11.5]
        assert out.scores.tolist() == [1.0]

    def test_negative_neighbor_ignored(self):
        pool = CandidateSet(0, -1, [2.0, -1.0], [[0, 0, 10, 10], [0, 0, 10, 12]])
        assert box_voting(pool.take([0]), pool, 0.5).boxes[0].tolist() == [0, 0, 10, 10]

    def test_zero_weight_unchanged(self):
        pool = CandidateSet(0, -1, [-0.5, -1.0], [[0, 0, 10, 10], [0, 0, 10, 12]])
        assert box_voting(pool.take([0]), pool, 0.5).boxes[0].tolist() == [0, 0, 10, 10]

    def test_strict_neighborhood(self):
        # IoU exactly 0.5 is not a neighbor
        pool = CandidateSet(0, -1, [1.0, 1.0], [[0, 0, 10, 10], [0, 0, 10, 5]])
        assert box_voting(pool.take([0]), pool, 0.5).boxes[0].tolist() == [0, 0, 10, 10]

    def test_equal_weights_give_mean(self, rng):
        for _ in range(1000):
            center = random_boxes(rng, 1)[0]
            n = int(rng.integers(1, 12))
            jitter = center + rng.uniform(-0.5, 0.5, (n, 4))
            pool = CandidateSet(0, -1, np.full(n + 1, 0.7), np.vstack([center, jitter]))
            out = box_voting(pool.take([0]), pool, 0.5)
            nb = iou_matrix(center[None], pool.boxes)[0] > 0.5
            assert np.abs(out.boxes[0] - pool.boxes[nb].mean(axis=0)).max() < 1e-12

    def test_convex_and_score_preserving(self, rng):
        pool = CandidateSet(3, -1, rng.normal(size=50), random_boxes(rng, 50, span=30))
        kept = nms(pool, 0.3)
        out = box_voting(kept, pool, 0.5)
        assert out.class_id == 3 and out.scores.tolist() == kept.scores.tolist()
        assert (out.boxes[:, 2] > out.boxes[:, 0]).all() and (out.boxes[:, 3] > out.boxes[:, 1]).all()


class TestIterative:
    def test_single_iteration_identity(self, rng):
        boxes = random_boxes(rng, 20)
        scores = rng.normal(size=20)
        res = iterative_localize(boxes, lambda b: scores if len(b) == 20 else None, lambda b: b,
                                 LocalizationConfig(iterations=1))
        keep = scores >= -2.1
        np.testing.assert_array_equal(res.merged.boxes, boxes[keep])
        np.testing.assert_array_equal(res.merged.scores, scores[keep])

    def test_no_rejection_threshold(self, rng):
        boxes = random_boxes(rng, 15)
        res = iterative_localize(boxes, lambda b: -10 * np.ones(len(b)), lambda b: b,
                                 LocalizationConfig(iterations=3, tau_s=-np.inf))
        assert len(res.merged) == 45 and res.rejected == 0

    def test_identity_fixed_point(self, rng):
        gts = random_boxes(rng, 3)
        res = iterative_localize(random_boxes(rng, 30), oracle_scorer(gts), lambda b: b.copy(),
                                 LocalizationConfig(tau_s=-np.inf))
        d1, d2 = res.per_iteration
        assert d1.boxes.tobytes() == d2.boxes.tobytes() and d1.scores.tobytes() == d2.scores.tobytes()

    def test_score_pairs_with_previous_boxes(self):
        gts = np.array([[0, 0, 10, 10.0]])
        props = np.array([[0, 0, 10, 20.0]])
        res = iterative_localize(props, oracle_scorer(gts), move_toward(gts, 0.5),
                                 LocalizationConfig(tau_s=-np.inf))
        d1, d2 = res.per_iteration
        assert d1.scores[0] == pytest.approx(0.5)
        assert d1.boxes[0].tolist() == [0, 0, 10, 15]
        assert d2.scores[0] == pytest.approx(10 / 15)
        rescored = iterative_localize(props, oracle_scorer(gts), move_toward(gts, 0.5),
                                      LocalizationConfig(tau_s=-np.inf, rescore=True))
        assert rescored.per_iteration[0].scores[0] == pytest.approx(10 / 15)

    def test_oracle_regression_improves(self, rng):
        gts = np.array([[20, 20, 60, 70.0], [100, 40, 160, 90]])
        props = np.repeat(gts, 20, axis=0) + rng.uniform(-15, 15, (40, 4))
        res = iterative_localize(props, oracle_scorer(gts), move_toward(gts, 0.5),
                                 LocalizationConfig(tau_s=-np.inf))
        d1, d2 = res.per_iteration
        assert mean_max_iou(d2, gts) > mean_max_iou(d1, gts)

    def test_all_rejected(self, rng):
        res = iterative_localize(random_boxes(rng, 5), lambda b: np.full(len(b), -5.0), lambda b: b)
        assert len(res.merged) == 0 and res.rejected == 5 and "below tau_s" in res.report

    def test_config_validation(self):
        with pytest.raises(InvalidArgumentError):
            LocalizationConfig(iterations=0)
        with pytest.raises(InvalidArgumentError):
            LocalizationConfig(nms_iou=0)


def test_one_object_one_detection(rng):
    gt = np.array([[40, 30, 120, 110.0]])
    props = gt + rng.uniform(-10, 10, (60, 4))
    final, _ = localize_class(props, oracle_scorer(gt), move_toward(gt, 0.5), LocalizationConfig(tau_s=-np.inf))
    assert len(final) == 1
    assert iou_matrix(final.boxes, gt)[0, 0] > 0.9


def _toy_bundle(rng, channels=4, bias=0.0, k=2):
    specs = (RegionSpec(RegionKind.RECT, 1.0, name="a"), RegionSpec(RegionKind.RING, 1.5, 0.8, name="i"))
    layout = descriptor_layout(specs, channels, (2, 2))
    reg_spec = RegionSpec(RegionKind.RECT, 1.3, name="regression")
    reg_layout = descriptor_layout([reg_spec], channels, (2, 2))
    params = {"W": rng.normal(size=(4 * k, reg_layout.length)) * 0.01, "b": np.zeros(4 * k)}
    return ModelBundle(
        class_names=tuple(f"c{i}" for i in range(k)),
        specs=specs, grid=(2, 2), target_side=64.0, layout=layout,
        classifier=LinearHead(rng.normal(size=(k, layout.length)) * 0.1, np.full(k, bias)),
        regressor=Regressor(params, k), regression_layout=reg_layout,
        regression_spec=reg_spec, regression_grid=(2, 2),
    )


class TestDetect:
    @pytest.fixture
    def scene(self, rng):
        return toy_extract(rng.random((80, 120)), scales=[80, 120], stride=8)

    def test_everything_rejected(self, rng, scene):
        bundle = _toy_bundle(rng, bias=-1e6)
        out = detect(scene, random_boxes(rng, 20, span=60), bundle)
        assert set(out) == {0, 1} and all(len(v) == 0 for v in out.values())

    def test_deterministic(self, rng, scene):
        bundle = _toy_bundle(rng, bias=5.0)
        props = random_boxes(rng, 30, span=60)
        a = detect(scene, props, bundle)
        b = detect(scene, props, bundle)
        assert all(a[c].entries() == b[c].entries() for c in a)
        assert all(len(a[c]) > 0 for c in a)
        for c in a:
            assert (a[c].boxes >= 0).all() and (a[c].boxes[:, 2] <= 120).all() and (a[c].boxes[:, 3] <= 80).all()

    def test_regression_scale_must_match(self, rng, scene):
        with pytest.raises(InvalidArgumentError):
            detect(scene, random_boxes(rng, 3, span=60), _toy_bundle(rng), LocalizationConfig(regression_scale=1.5))


def test_standard_specs_cover_detect_path(rng):
    # all ten regions plus semantic-free bundle on a tiny scene
    specs = tuple(standard_region_set())
    layout = descriptor_layout(specs, 4, (2, 2))
    reg_spec = RegionSpec(RegionKind.RECT, 1.3, name="regression")
    reg_layout = descriptor_layout([reg_spec], 4, (2, 2))
    bundle = ModelBundle(("x",), specs, (2, 2), 64.0, layout, LinearHead(np.zeros((1, layout.length)), [1.0]),
                         Regressor.zeros(1, reg_layout.length), reg_layout, reg_spec, (2, 2))
    scene = toy_extract(rng.random((64, 64)), scales=[64], stride=8)
    out = detect(scene, [[10, 10, 40, 40], [12, 11, 41, 39]], bundle)
    assert len(out[0]) == 1
