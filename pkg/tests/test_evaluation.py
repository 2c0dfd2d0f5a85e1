import numpy as np
import pytest

import oracles
from multiregion.errors import InvalidArgumentError, UndefinedMetricError
from multiregion.evaluation import (
    REPORT_CATEGORIES,
    EvalConfig,
    ImageTruth,
    MatchResult,
    Outcome,
    ap_from_flags,
    average_precision,
    error_report,
    evaluate,
    localization_auc,
    match_detections,
    metrics_csv,
    metrics_summary,
    score_iou_correlation,
    voc_similarity_groups,
)

GTS = np.array([[0, 0, 10, 10], [20, 20, 30, 30.0]])


def random_match_set(rng):
    n_gt = int(rng.integers(1, 6))
    gts = rng.uniform(0, 50, (n_gt, 2))
    gts = np.hstack([gts, gts + rng.uniform(5, 20, (n_gt, 2))])
    classes = rng.integers(0, 3, n_gt)
    n = int(rng.integers(0, 15))
    dets = gts[rng.integers(0, n_gt, n)] + rng.normal(0, 4, (n, 4)) if n else np.zeros((0, 4))
    dets[:, 2:] = np.maximum(dets[:, 2:], dets[:, :2] + 1)
    return match_detections(rng.random(n), dets, 0, gts, classes, rng.random(n_gt) < 0.2,
                            similarity_groups={0: "g", 1: "g", 2: "h"})


class TestMatching:
    def test_perfect(self):
        m = match_detections([0.9, 0.8], GTS, 0, GTS, [0, 0])
        assert m.is_tp.all() and sorted(m.matched_gt.tolist()) == [0, 1]

    def test_duplicate(self):
        near = [0, 0, 10, 11]  # IoU 10/11 ~ 0.91
        m = match_detections([0.9, 0.8], [GTS[0], near], 0, GTS[:1], [0])
        assert m.outcomes.tolist() == [Outcome.TP, Outcome.DUP]

    def test_localization_band(self):
        # IoU 0.3 with the same-class GT
        m = match_detections([0.5], [[0, 0, 10, 3]], 0, GTS[:1], [0], iou_threshold=0.5)
        assert m.outcomes.tolist() == [Outcome.LOC]

    def test_similar_other_background(self):
        gts = np.array([[0, 0, 10, 10], [50, 50, 60, 60], [100, 100, 110, 110.0]])
        groups = {0: "round", 1: "round", 2: "striped"}
        dets = [[0, 0, 10, 10], [50, 50, 60, 60], [200, 200, 210, 210]]
        m = match_detections([0.9, 0.8, 0.7], dets, 2, gts, [1, 2, 0], similarity_groups=groups)
        # class 2 detection on class-1 box: other group; on its own box: TP; far away: BG
        assert m.outcomes.tolist() == [Outcome.OTH, Outcome.TP, Outcome.BG]
        m = match_detections([0.9], [[0, 0, 10, 10]], 0, gts, [1, 2, 0], similarity_groups=groups)
        assert m.outcomes.tolist() == [Outcome.SIM]

    def test_takes_best_unmatched(self):
        gts = np.array([[0, 0, 10, 10], [0, 0, 10, 12.0]])
        m = match_detections([0.9, 0.8], [[0, 0, 10, 12], [0, 0, 10, 10]], 0, gts, [0, 0])
        assert m.matched_gt.tolist() == [1, 0]

    def test_difficult_ignored(self):
        m = match_detections([0.9], GTS[:1], 0, GTS[:1], [0], difficult=[True])
        assert m.outcomes.tolist() == [Outcome.IGNORED] and m.n_gt == 0

    def test_ranked_by_score(self):
        m = match_detections([0.1, 0.9], [GTS[0], GTS[0]], 0, GTS[:1], [0])
        assert m.scores.tolist() == [0.9, 0.1] and m.outcomes.tolist() == [Outcome.TP, Outcome.DUP]

    def test_each_gt_at_most_once(self, rng):
        for _ in range(300):
            m = random_match_set(rng)
            tp = m.matched_gt[m.is_tp]
            assert len(set(tp.tolist())) == len(tp)


class TestAP:
    def test_hand_case(self):
        assert abs(ap_from_flags([1, 0, 1], 2) - 5 / 6) < 1e-9

    def test_perfect(self):
        assert ap_from_flags([1, 1, 1], 3) == 1.0

    def test_no_detections(self):
        assert ap_from_flags([], 4) == 0.0

    def test_eleven_point(self):
        # precision 1 up to recall 0.5, then 2/3 up to recall 1
        assert ap_from_flags([1, 0, 1], 2, "eleven_point") == pytest.approx((6 * 1 + 5 * 2 / 3) / 11)

    def test_undefined_without_gt(self):
        with pytest.raises(UndefinedMetricError):
            ap_from_flags([0, 0], 0)

    def test_matches_oracle_and_bounds(self, rng):
        for _ in range(300):
            n = int(rng.integers(1, 40))
            flags = rng.random(n) < 0.5
            n_gt = int(flags.sum() + rng.integers(0, 4)) or 1
            ap = ap_from_flags(flags, n_gt)
            assert ap == pytest.approx(oracles.interpolated_ap(flags, n_gt), abs=1e-12)
            assert ap >= oracles.raw_trapezoid_ap(flags, n_gt) - 1e-12

    def test_rank_only(self, rng):
        for _ in range(50):
            m = random_match_set(rng)
            if m.n_gt == 0:
                continue
            warped = MatchResult(np.exp(3 * m.scores) + 2, m.outcomes, m.matched_gt, m.n_gt)
            assert average_precision(warped) == average_precision(m)

    def test_dense_curves_agree(self, rng):
        for _ in range(20):
            flags = rng.random(2000) < np.linspace(0.95, 0.05, 2000)
            n_gt = int(flags.sum())
            assert abs(ap_from_flags(flags, n_gt) - ap_from_flags(flags, n_gt, "eleven_point")) < 0.1


class TestStatistics:
    def test_correlation_extremes(self, rng):
        o = rng.uniform(0.1, 1, 50)
        assert score_iou_correlation(o, o) == pytest.approx(1.0)
        assert score_iou_correlation(-o, o) == pytest.approx(-1.0)

    def test_correlation_hand_case(self):
        s, o = [1.0, 2.0, 3.0, 5.0], [0.2, 0.4, 0.3, 0.9]
        assert score_iou_correlation(s, o) == pytest.approx(oracles.pearson(s, o), abs=1e-12)

    def test_correlation_filters_low_overlap(self):
        s, o = [1.0, 2.0, 3.0, 100.0], [0.2, 0.4, 0.6, 0.05]
        assert score_iou_correlation(s, o) == pytest.approx(1.0)

    def test_correlation_affine_invariant(self, rng):
        for _ in range(200):
            s, o = rng.normal(size=30), rng.uniform(0, 1, 30)
            a, b = rng.uniform(0.1, 10), rng.normal() * 5
            assert abs(score_iou_correlation(a * s + b, o) - score_iou_correlation(s, o)) < 1e-12

    def test_correlation_undefined(self):
        with pytest.raises(UndefinedMetricError):
            score_iou_correlation([1.0, 2.0], [0.5, 0.05])
        with pytest.raises(UndefinedMetricError):
            score_iou_correlation([1.0, 1.0, 1.0], [0.2, 0.5, 0.7])

    def test_spearman(self):
        assert score_iou_correlation([1, 2, 30], [0.2, 0.3, 0.4], "spearman") == pytest.approx(1.0)

    def test_auc_cases(self):
        assert localization_auc([5, 6, 1, 2], [0.6, 0.9, 0.2, 0.3]) == 1.0
        assert localization_auc([1, 1, 1, 1], [0.6, 0.9, 0.2, 0.3]) == 0.5
        # pos {3, 1}, neg {2, 0}: pairs won 3>2, 3>0, 1>0 -> 3/4
        assert localization_auc([3, 1, 2, 0], [0.5, 0.7, 0.49, 0.1]) == 0.75

    def test_auc_matches_brute_force(self, rng):
        for _ in range(40):
            n = int(rng.integers(2, 500))
            o = rng.uniform(0, 1, n)
            s = np.round(rng.normal(size=n) + o, 1)
            pos, neg = s[o >= 0.5], s[(o >= 0.1) & (o < 0.5)]
            if len(pos) == 0 or len(neg) == 0:
                continue
            assert abs(localization_auc(s, o) - oracles.mann_whitney_auc(pos, neg)) < 1e-12

    def test_auc_undefined(self):
        with pytest.raises(UndefinedMetricError):
            localization_auc([1, 2], [0.6, 0.7])


class TestErrorReport:
    def test_all_correct(self):
        m = match_detections([0.9, 0.8], GTS, 0, GTS, [0, 0])
        assert error_report(m) == {"Cor": 1.0, "Loc": 0.0, "Sim": 0.0, "Oth": 0.0, "BG": 0.0, "n": 2}

    def test_one_of_each(self):
        o = np.array([Outcome.LOC, Outcome.SIM, Outcome.OTH, Outcome.BG], np.int8)
        rep = error_report(MatchResult(np.arange(4.0)[::-1], o, np.full(4, -1), 4))
        assert [rep[c] for c in REPORT_CATEGORIES] == [0, 0.25, 0.25, 0.25, 0.25]

    def test_top_n_truncates_and_folds_duplicates(self):
        o = np.array([Outcome.TP, Outcome.DUP, Outcome.BG], np.int8)
        m = MatchResult(np.array([3.0, 2, 1]), o, np.array([0, 0, -1]), 2)
        assert error_report(m) == {"Cor": 0.5, "Loc": 0.5, "Sim": 0.0, "Oth": 0.0, "BG": 0.0, "n": 2}
        assert error_report(m, 3, fold_duplicates=False)["Dup"] == pytest.approx(1 / 3)

    def test_partition(self, rng):
        for _ in range(1000):
            m = random_match_set(rng)
            rep = error_report(m, top_n=int(rng.integers(1, 10)))
            if rep["n"]:
                assert sum(rep[c] for c in REPORT_CATEGORIES) == pytest.approx(1.0, abs=1e-12)


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        EvalConfig(iou_threshold=1.0)
    with pytest.raises(InvalidArgumentError):
        EvalConfig(ap_variant="coco")


def test_voc_preset():
    groups = voc_similarity_groups()
    assert groups[7] == groups[11] == "animal"  # cat, dog
    assert groups[14] == "person"


def test_dataset_evaluation_and_writers():
    truths = {
        "b": ImageTruth(GTS, np.array([0, 1]), np.array([False, False])),
        "a": ImageTruth(GTS[:1], np.array([0]), np.array([False])),
    }
    dets = {
        "a": {0: ([0.9, 0.2], [[0, 0, 10, 10], [0, 0, 10, 4]])},
        "b": {0: ([0.8], [[0, 0, 10, 10]]), 1: ([0.7], [[20, 20, 30, 34]])},
    }
    metrics = evaluate(dets, truths, ["x", "y"], EvalConfig(), thresholds=(0.5, 0.7))
    assert metrics[0].ap[0.5] == 1.0 and metrics[0].n_gt == 2
    # IoU 100/140 ~ 0.714 passes 0.7 but not a stricter threshold
    assert metrics[1].ap[0.7] == 1.0
    csv_text = metrics_csv(metrics)
    lines = csv_text.splitlines()
    assert lines[0] == "# format_version=1"
    assert lines[1].split(",")[:3] == ["class", "ap@0.5", "ap@0.7"]
    assert lines[-1].startswith("mean,1.000000,1.000000")
    summary = metrics_summary(metrics, EvalConfig())
    assert summary["mAP"] == {"0.5": 1.0, "0.7": 1.0} and summary["format_version"] == 1
