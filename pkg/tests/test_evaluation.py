import math

import numpy as np
import pytest

from ocreloc.errors import EvaluationError
from ocreloc.evaluation import (
    INDOOR_THRESHOLDS,
    OUTDOOR_THRESHOLDS,
    evaluate,
    format_accuracy,
    parse_accuracy,
    parse_thresholds,
)
from ocreloc.geometry import Pose, so3_exp


def _offset(gt, meters, degrees):
    R = so3_exp(np.array([0.0, 0.0, math.radians(degrees)])) @ gt.R
    return Pose.from_center(R, gt.center + np.array([meters, 0.0, 0.0]))


def _gt():
    return {f"q{i}": Pose.from_center(np.eye(3), [i, 0, 0]) for i in range(3)}


def test_counting_example():
    gt = _gt()
    res = {n: _offset(gt[n], t, r) for n, (t, r) in zip(sorted(gt), [(0.1, 1), (0.4, 3), (10, 20)])}
    rep = evaluate(res, gt, OUTDOOR_THRESHOLDS)
    assert rep.formatted() == "33.3 / 66.7 / 66.7"
    np.testing.assert_allclose(rep.trans_err, [0.1, 0.4, 10], atol=1e-9)
    np.testing.assert_allclose(rep.rot_err, [1, 3, 20], atol=1e-6)


def test_exact_poses():
    gt = _gt()
    rep = evaluate(gt, gt)
    assert rep.accuracy == (100.0, 100.0, 100.0) and rep.median_trans == 0.0


def test_missing_and_failed_count_as_failures():
    gt = _gt()
    rep = evaluate([("q0", gt["q0"]), ("q1", None)], gt)
    assert rep.formatted() == "33.3 / 33.3 / 33.3"
    assert rep.num_failed == 2
    d = rep.to_dict()
    assert d["queries"]["q2"] == {"trans_m": None, "rot_deg": None}


def test_unknown_name():
    with pytest.raises(EvaluationError):
        evaluate({"nope": Pose.identity()}, _gt())


def test_accuracy_nondecreasing_across_triple():
    rng = np.random.default_rng(0)
    gt = {f"q{i}": Pose.identity() for i in range(40)}
    for th in (OUTDOOR_THRESHOLDS, INDOOR_THRESHOLDS):
        for _ in range(20):
            res = {n: _offset(p, rng.exponential(1.0), rng.exponential(5.0)) for n, p in gt.items()}
            a = evaluate(res, gt, th).accuracy
            assert a[0] <= a[1] <= a[2] and all(0 <= v <= 100 for v in a)


def test_report_format_regression():
    text = "41.9 / 68.2 / 84.3"
    assert format_accuracy(parse_accuracy(text)) == text
    with pytest.raises(EvaluationError):
        parse_accuracy("41.9 / 68.2")
    with pytest.raises(EvaluationError):
        parse_accuracy("141.9 / 68.2 / 84.3")


def test_thresholds_parsing():
    assert parse_thresholds("0.25,2/0.5,5/5,10") == OUTDOOR_THRESHOLDS
    assert parse_thresholds("0.25,10/0.5,10/5,10") == INDOOR_THRESHOLDS
    with pytest.raises(EvaluationError):
        parse_thresholds("1,2/0.5,5/5,10")
    with pytest.raises(EvaluationError):
        parse_thresholds("0.25,2/0.5")
