import math

import numpy as np
import pytest

import oracles
from multiregion.errors import DegenerateDataError, InvalidArgumentError, ModelFormatError, ShapeMismatchError
from multiregion.geometry import BoundingBox, RegionKind, RegionSpec, decode_boxes, encode_boxes, iou_matrix
from multiregion.optim import SGDConfig, logistic_loss, sgd, softmax_loss, squared_loss
from multiregion.pooling import RegionDescriptor, descriptor_layout
from multiregion.recognition import (
    LinearHead,
    ModelBundle,
    Regressor,
    SampleKind,
    SVMConfig,
    label_samples,
    load_bundle,
    regress,
    regress_boxes,
    regressor_config,
    save_bundle,
    score,
    softmax_config,
    train_linear_svm,
    train_regressor,
    train_softmax_head,
    train_svm_hard_negative,
    training_samples,
)
from multiregion.weaksup import ForegroundScorer

GT = BoundingBox(0, 0, 100, 100, class_id=2)


def box_with_iou(percent):
    # a strip of the GT box; IoU is height / 100, exact for integer heights
    if percent == 0:
        return BoundingBox(200, 200, 300, 300)
    return BoundingBox(0, 0, 100, percent)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


class TestLabels:
    def test_softmax_positive(self):
        labels = label_samples([box_with_iou(60)], [GT], rule="softmax")
        assert labels.kind[0] == SampleKind.POSITIVE and labels.class_id[0] == 2
        assert labels.max_iou[0] == pytest.approx(0.6)

    def test_softmax_bands(self):
        labels = label_samples([box_with_iou(v) for v in (5, 10, 30, 49, 50)], [GT])
        assert labels.kind.tolist() == [SampleKind.DISCARDED] + [SampleKind.NEGATIVE] * 3 + [SampleKind.POSITIVE]
        assert labels.class_id.tolist() == [-1, -1, -1, -1, 2]

    def test_regression_keeps_at_point_four(self):
        p = box_with_iou(45)
        labels = label_samples([p, box_with_iou(35)], [GT], rule="regression")
        assert labels.kind.tolist() == [SampleKind.POSITIVE, SampleKind.DISCARDED]
        np.testing.assert_allclose(labels.targets[0], encode_boxes(p.as_array(), GT.as_array())[0])

    def test_svm_negatives_below_point_three(self):
        labels = label_samples([box_with_iou(v) for v in (0, 29, 30, 90)], [GT], rule="svm")
        assert labels.kind.tolist() == [SampleKind.NEGATIVE] * 2 + [SampleKind.DISCARDED] * 2

    def test_argmax_tie_goes_to_lowest_index(self):
        gts = [BoundingBox(0, 0, 10, 10, class_id=0), BoundingBox(0, 0, 10, 10, class_id=1)]
        labels = label_samples([[0, 0, 10, 10]], gts)
        assert labels.gt_index[0] == 0 and labels.class_id[0] == 0

    def test_no_ground_truth(self):
        props = [[0, 0, 5, 5], [3, 3, 9, 9]]
        assert (label_samples(props, [], rule="softmax").kind == SampleKind.DISCARDED).all()
        assert (label_samples(props, [], rule="svm").kind == SampleKind.NEGATIVE).all()

    def test_unknown_rule(self):
        with pytest.raises(InvalidArgumentError):
            label_samples([[0, 0, 1, 1]], [GT], rule="bogus")

    @pytest.mark.parametrize("rule", ["softmax", "svm", "regression"])
    def test_partition(self, rng, rule):
        props = rng.uniform(0, 80, (300, 2))
        props = np.hstack([props, props + rng.uniform(1, 60, (300, 2))])
        gts = np.array([[10, 10, 50, 50], [40, 30, 90, 100.0]])
        labels = label_samples(props, gts, [0, 1], rule)
        kinds = [labels.kind == k for k in SampleKind]
        assert (np.sum(kinds, axis=0) == 1).all()
        ious = iou_matrix(props, gts).max(axis=1)
        np.testing.assert_array_equal(labels.max_iou, ious)
        if rule != "svm":
            thr = 0.5 if rule == "softmax" else 0.4
            assert ((labels.class_id >= 0) == (ious >= thr)).all()

    def test_training_sample_records(self):
        recs = training_samples([box_with_iou(60), box_with_iou(20), box_with_iou(1)], [GT])
        assert [r.label for r in recs] == [2, None]
        assert recs[0].matched_gt.as_array().tolist() == [0, 0, 100, 100]


class TestGradients:
    @pytest.fixture
    def instances(self, rng):
        return [(int(rng.integers(2, 9)), int(rng.integers(1, 6)), int(rng.integers(2, 5))) for _ in range(100)]

    def test_softmax(self, rng, instances):
        for n, d, k in instances:
            x, y = rng.normal(size=(n, d)), rng.integers(0, k, n)
            p = {"W": rng.normal(size=(k, d)), "b": rng.normal(size=k)}
            wd = float(rng.uniform(0, 0.1))
            _, g = softmax_loss(p, x, y, wd)
            for key in p:
                num = oracles.central_difference(lambda: softmax_loss(p, x, y, wd)[0], p[key])
                assert rel_err(g[key], num) < 1e-5

    def test_logistic(self, rng, instances):
        for n, d, k in instances:
            x, y = rng.normal(size=(n, d)), rng.integers(0, 2, (n, k)).astype(float)
            p = {"W": rng.normal(size=(k, d)), "b": rng.normal(size=k)}
            _, g = logistic_loss(p, x, y)
            for key in p:
                num = oracles.central_difference(lambda: logistic_loss(p, x, y)[0], p[key])
                assert rel_err(g[key], num) < 1e-5

    def test_squared_linear(self, rng, instances):
        for n, d, k in instances:
            x, t = rng.normal(size=(n, d)), rng.normal(size=(n, 4 * k))
            mask = (rng.random((n, 4 * k)) < 0.5).astype(float)
            p = {"W": rng.normal(size=(4 * k, d)), "b": rng.normal(size=4 * k)}
            _, g = squared_loss(p, x, t, mask, 0.01)
            for key in p:
                num = oracles.central_difference(lambda: squared_loss(p, x, t, mask, 0.01)[0], p[key])
                assert rel_err(g[key], num) < 1e-5

    def test_squared_hidden(self, rng):
        for _ in range(30):
            n, d, h = 5, 3, 4
            x, t, mask = rng.normal(size=(n, d)), rng.normal(size=(n, 8)), np.ones((n, 8))
            p = {"W1": rng.normal(size=(h, d)), "b1": rng.normal(size=h),
                 "W2": rng.normal(size=(8, h)), "b2": rng.normal(size=8)}
            _, g = squared_loss(p, x, t, mask)
            for key in p:
                num = oracles.central_difference(lambda: squared_loss(p, x, t, mask)[0], p[key])
                assert rel_err(g[key], num) < 1e-5


def test_sgd_zero_lr_is_noop(rng):
    x, y = rng.normal(size=(50, 3)), rng.integers(0, 2, 50)
    p = {"W": rng.normal(size=(2, 3)), "b": rng.normal(size=2)}
    before = {k: v.copy() for k, v in p.items()}
    sgd(p, lambda q, idx: softmax_loss(q, x[idx], y[idx]), 50, SGDConfig(lr=0.0, epochs=3, batch_size=8), 0)
    for k in p:
        np.testing.assert_array_equal(p[k], before[k])


def separable(rng, n=200, d=5, margin=0.5):
    w = rng.normal(size=d)
    w /= np.linalg.norm(w)
    x = rng.normal(size=(n * 3, d))
    s = x @ w
    keep = np.abs(s) > margin
    x, s = x[keep][:n], s[keep][:n]
    return x, (s > 0).astype(np.int64)


class TestSoftmaxHead:
    def test_separable_reaches_full_accuracy(self, rng):
        x, y = separable(rng)
        head = train_softmax_head(x, y, 2, softmax_config(epochs=200), seed=1)
        assert (head.predict(x) == y).mean() == 1.0

    def test_irreducible_case_reported(self):
        x = np.ones((40, 3))
        y = np.array([0, 1] * 20)
        head = train_softmax_head(x, y, 2, softmax_config(epochs=5), seed=0)
        assert head.diagnostics["irreducible_loss"] == pytest.approx(math.log(2))
        assert head.final_loss >= math.log(2) - 1e-12

    def test_deterministic(self, rng):
        x, y = separable(rng)
        a = train_softmax_head(x, y, 2, softmax_config(epochs=3), seed=9)
        b = train_softmax_head(x, y, 2, softmax_config(epochs=3), seed=9)
        assert a.weights.tobytes() == b.weights.tobytes() and a.bias.tobytes() == b.bias.tobytes()

    def test_single_class_refused(self):
        with pytest.raises(DegenerateDataError, match="two distinct labels"):
            train_softmax_head(np.eye(3), [1, 1, 1], 3)


class TestRegressor:
    def test_zero_targets_zero_weights(self, rng):
        x = rng.normal(size=(60, 4))
        reg = train_regressor(x, np.zeros((60, 4)), np.zeros(60, int), 1, regressor_config(epochs=5))
        assert not reg.params["W"].any() and not reg.params["b"].any()
        boxes = rng.uniform(0, 50, (60, 2))
        boxes = np.hstack([boxes, boxes + 10])
        np.testing.assert_allclose(regress_boxes(_bundle(reg=reg, dim=4), x, boxes)[:, 0], boxes, rtol=1e-12)

    def test_linear_family_matches_least_squares(self, rng):
        n, d = 400, 6
        x = rng.normal(size=(n, d)) * rng.uniform(0.5, 3, d) + rng.normal(size=d)
        a, c = rng.normal(size=(4, d)) * 0.1, rng.normal(size=4) * 0.1
        t = x @ a.T + c
        reg = train_regressor(x, t, np.zeros(n, int), 1, regressor_config(epochs=300), seed=3)
        w_ls, b_ls = oracles.least_squares(x, t)
        assert np.abs(reg.params["W"] - w_ls).max() < 1e-4
        assert np.abs(reg.params["b"] - b_ls).max() < 1e-4

    def test_per_class_rows(self, rng):
        x = rng.normal(size=(300, 3))
        cls = rng.integers(0, 2, 300)
        t = np.where(cls[:, None] == 0, 0.1, -0.2) * np.ones((300, 4))
        reg = train_regressor(x, t, cls, 2, regressor_config(epochs=100), seed=0)
        pred = reg.predict(x[:1])[0]
        np.testing.assert_allclose(pred[0], 0.1, atol=1e-3)
        np.testing.assert_allclose(pred[1], -0.2, atol=1e-3)

    def test_hidden_layer_fits(self, rng):
        x = rng.normal(size=(300, 3))
        t = np.abs(x[:, :1]) * np.ones((1, 4)) * 0.2
        reg = train_regressor(x, t, np.zeros(300, int), 1, regressor_config(epochs=200), seed=0, hidden=16)
        base = 0.5 * ((t - t.mean(0)) ** 2).sum(1).mean()
        assert reg.hidden == 16 and reg.final_loss < 0.2 * base

    def test_deterministic(self, rng):
        x, t = rng.normal(size=(50, 3)), rng.normal(size=(50, 4))
        a = train_regressor(x, t, np.zeros(50, int), 1, regressor_config(epochs=4), seed=5, hidden=4)
        b = train_regressor(x, t, np.zeros(50, int), 1, regressor_config(epochs=4), seed=5, hidden=4)
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)

    def test_empty_input(self):
        with pytest.raises(DegenerateDataError):
            train_regressor(np.zeros((0, 3)), np.zeros((0, 4)), [], 1)


class TestSVM:
    def test_matches_dual_oracle(self, rng):
        x = rng.normal(size=(120, 4))
        y = np.where(x[:, 0] + 0.5 * rng.normal(size=120) > 0, 1.0, -1.0)
        cfg = SVMConfig(c=0.7, tol=1e-10, max_epochs=100000)
        svm = train_linear_svm(x, y, cfg)
        w, b = oracles.svm_full_pool(x, y, 0.7)
        assert svm.converged
        np.testing.assert_allclose(svm.weights, w, atol=1e-5)
        assert svm.bias == pytest.approx(b, abs=1e-5)

    def test_pool_inside_training_set_one_round(self, rng):
        pos = rng.normal(1.5, 1, (30, 3))
        pool = rng.normal(-1.5, 1, (80, 3))
        res = train_svm_hard_negative(pos, pool, SVMConfig(), initial=np.arange(80))
        assert res.rounds == 1 and res.converged

    def test_separable_zero_hinge_on_pool(self, rng):
        pos = rng.normal(size=(40, 3)) + [6, 0, 0]
        pool = rng.normal(size=(1500, 3)) - [6, 0, 0]
        res = train_svm_hard_negative(pos, pool, SVMConfig(c=100.0, initial_negatives=20, tol=1e-9), seed=2)
        assert res.converged and res.rounds > 1
        assert (res.svm.scores(pos) >= 1 - 1e-6).all()
        assert (res.svm.scores(pool) <= -1 + 1e-6).all()

    def test_mining_equals_full_pool(self, rng):
        pos = rng.normal(size=(60, 4)) + [1.0, 0.5, 0, 0]
        pool = rng.normal(size=(1000, 4)) - [1.0, 0.5, 0, 0]
        cfg = SVMConfig(c=0.5, initial_negatives=50, tol=1e-10, max_epochs=100000, max_rounds=50)
        mined = train_svm_hard_negative(pos, pool, cfg, seed=4)
        full = train_svm_hard_negative(pos, pool, cfg, initial=np.arange(1000))
        assert mined.converged and mined.rounds > 1
        np.testing.assert_allclose(mined.weights, full.weights, atol=1e-6)
        assert mined.bias == pytest.approx(full.bias, abs=1e-6)
        s_m, s_f = mined.svm.scores(pool), full.svm.scores(pool)
        clear = np.abs(s_f + 1) > 1e-4
        np.testing.assert_array_equal((s_m > -1)[clear], (s_f > -1)[clear])

    def test_empty_pool_trains_once(self, rng):
        res = train_svm_hard_negative(rng.normal(size=(5, 2)), np.zeros((0, 2)))
        assert res.rounds == 1 and (res.svm.scores(rng.normal(size=(5, 2))) is not None)

    def test_needs_positives(self):
        with pytest.raises(DegenerateDataError):
            train_svm_hard_negative(np.zeros((0, 2)), np.ones((3, 2)))


def _bundle(w=None, b=None, reg=None, dim=2, n_classes=None, foreground=False):
    layout = descriptor_layout([RegionSpec(RegionKind.RECT, 1.0, name="a")], 1, (1, dim))
    if w is None:
        w = np.zeros((1, dim))
    if b is None:
        b = np.zeros(len(w))
    k = n_classes or len(w)
    reg = reg or Regressor.zeros(k, dim)
    return ModelBundle(
        class_names=tuple(f"c{i}" for i in range(k)),
        specs=(RegionSpec(RegionKind.RECT, 1.0, name="a"),),
        grid=(1, dim),
        target_side=224.0,
        layout=layout,
        classifier=LinearHead(w, b),
        regressor=reg,
        regression_layout=layout,
        heads={"a": LinearHead(np.ones((k + 1, dim)), np.arange(k + 1))},
        foreground=ForegroundScorer.untrained(k, 4) if foreground else None,
        config={"seed": 1},
    )


class TestScoreAndRegress:
    def test_zero_descriptor_gives_biases(self):
        bundle = _bundle(np.ones((3, 2)), [0.5, -1.0, 2.0])
        np.testing.assert_array_equal(score(bundle, np.zeros(2)), [0.5, -1.0, 2.0])

    def test_hand_weights(self):
        bundle = _bundle(np.array([[2.0, -1.0]]), [0.25])
        assert score(bundle, np.array([3.0, 4.0]))[0] == 2.0 * 3 - 4 + 0.25

    def test_argmax_invariant_to_scaling(self, rng):
        w, b = rng.normal(size=(4, 2)), rng.normal(size=4)
        x = rng.normal(size=(30, 2))
        base = score(_bundle(w, b), x)
        scaled = score(_bundle(3.5 * w, 3.5 * b), x)
        np.testing.assert_allclose(scaled, 3.5 * base, rtol=1e-6)
        np.testing.assert_array_equal(scaled.argmax(1), base.argmax(1))

    def test_layout_mismatch_names_block(self):
        bundle = _bundle()
        other = descriptor_layout([RegionSpec(RegionKind.RECT, 1.5, name="z")], 1, (1, 2))
        with pytest.raises(ShapeMismatchError, match="'z'"):
            score(bundle, RegionDescriptor(np.zeros(2, np.float32), other))
        with pytest.raises(ShapeMismatchError, match="block 'a'"):
            score(bundle, np.zeros(1))

    def test_zero_regressor_returns_candidate(self):
        cand = BoundingBox(3, 4, 20, 30)
        assert regress(_bundle(), np.zeros(2), cand, 0).as_array().tolist() == [3, 4, 20, 30]

    def test_class_conditional(self):
        params = {"W": np.zeros((8, 2)), "b": np.r_[0.1, 0, 0, 0, -0.1, 0, 0, 0]}
        bundle = _bundle(np.zeros((2, 2)), reg=Regressor(params, 2))
        cand = BoundingBox(0, 0, 10, 10)
        assert regress(bundle, np.zeros(2), cand, 0) != regress(bundle, np.zeros(2), cand, 1)

    def test_recovers_ground_truth_on_linear_family(self, rng):
        # descriptor = exact encoded target plus distractor columns
        n = 300
        props = rng.uniform(0, 100, (n, 2))
        props = np.hstack([props, props + rng.uniform(20, 60, (n, 2))])
        gts = props + rng.uniform(-5, 5, (n, 4))
        t = encode_boxes(props, gts)
        x = np.hstack([t, rng.normal(size=(n, 2))])
        reg = train_regressor(x, t, np.zeros(n, int), 1, regressor_config(epochs=300), seed=0)
        bundle = _bundle(np.zeros((1, 6)), reg=reg, dim=6)
        out = regress_boxes(bundle, x, props)[:, 0]
        assert np.abs(out - gts).max() / np.abs(gts).max() < 1e-3
        np.testing.assert_allclose(out, decode_boxes(props, reg.predict(x)[:, 0]), rtol=1e-12)


class TestPersistence:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        params = {"W": rng.normal(size=(8, 2)), "b": rng.normal(size=8)}
        bundle = _bundle(rng.normal(size=(2, 2)), rng.normal(size=2), Regressor(params, 2), foreground=True)
        save_bundle(bundle, tmp_path / "m")
        back = load_bundle(tmp_path / "m")
        x = rng.normal(size=(20, 2))
        boxes = np.tile([[1.0, 2.0, 30.0, 40.0]], (20, 1))
        assert score(back, x).tobytes() == score(bundle, x).tobytes()
        assert regress_boxes(back, x, boxes).tobytes() == regress_boxes(bundle, x, boxes).tobytes()
        assert back.specs == bundle.specs and back.layout == bundle.layout
        assert back.heads["a"].weights.tobytes() == bundle.heads["a"].weights.tobytes()
        assert back.use_semantic and back.config == {"seed": 1}

    def test_hidden_regressor_round_trip(self, rng, tmp_path):
        reg = train_regressor(rng.normal(size=(40, 2)), rng.normal(size=(40, 4)), np.zeros(40, int), 1,
                              regressor_config(epochs=2), hidden=3)
        bundle = _bundle(reg=reg)
        back = load_bundle(save_bundle(bundle, tmp_path / "h"))
        x = rng.normal(size=(5, 2))
        assert back.regressor.predict(x).tobytes() == reg.predict(x).tobytes()

    def test_blob_has_crc_and_rejects_corruption(self, tmp_path):
        path = save_bundle(_bundle(np.ones((1, 2))), tmp_path / "m")
        blob = bytearray((path / "weights.bin").read_bytes())
        blob[0] ^= 1
        (path / "weights.bin").write_bytes(bytes(blob))
        with pytest.raises(ModelFormatError, match="CRC32"):
            load_bundle(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ModelFormatError):
            load_bundle(tmp_path)
