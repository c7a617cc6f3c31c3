"""Pose accuracy at nested (meters, degrees) thresholds."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import EvaluationError
from .geometry import Pose, pose_error

Thresholds = tuple[tuple[float, float], tuple[float, float], tuple[float, float]]

OUTDOOR_THRESHOLDS: Thresholds = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))
INDOOR_THRESHOLDS: Thresholds = ((0.25, 10.0), (0.5, 10.0), (5.0, 10.0))


@dataclass(frozen=True)
class EvalReport:
    names: tuple[str, ...]
    # inf for queries with no (or a failed) result
    trans_err: np.ndarray
    rot_err: np.ndarray
    thresholds: Thresholds
    accuracy: tuple[float, float, float]
    median_trans: float
    median_rot: float

    @property
    def num_queries(self) -> int:
        return len(self.names)

    @property
    def num_failed(self) -> int:
        return int(np.sum(~np.isfinite(self.trans_err)))

    def formatted(self) -> str:
        return format_accuracy(self.accuracy)

    def to_dict(self) -> dict:
        def num(x):
            return float(x) if math.isfinite(x) else None

        return {
            "accuracy": list(self.accuracy),
            "thresholds": [list(t) for t in self.thresholds],
            "median_trans_m": num(self.median_trans),
            "median_rot_deg": num(self.median_rot),
            "num_queries": self.num_queries,
            "num_failed": self.num_failed,
            "queries": {
                n: {"trans_m": num(t), "rot_deg": num(r)}
                for n, t, r in zip(self.names, self.trans_err.tolist(), self.rot_err.tolist())
            },
        }


def _check_thresholds(thresholds) -> Thresholds:
    th = tuple((float(a), float(b)) for a, b in thresholds)
    if len(th) != 3:
        raise EvaluationError(f"expected three (meters, degrees) thresholds, got {len(th)}")
    for (t0, r0), (t1, r1) in zip(th, th[1:]):
        if t1 < t0 or r1 < r0:
            raise EvaluationError("thresholds must be nested (non-decreasing in both components)")
    return th  # type: ignore[return-value]


def evaluate(
    results: Mapping[str, Optional[Pose]] | Iterable[tuple[str, Optional[Pose]]],
    ground_truth: Mapping[str, Pose],
    thresholds=OUTDOOR_THRESHOLDS,
) -> EvalReport:
    """Score estimated poses against ground truth.

    Queries absent from ``results`` or mapped to ``None`` count as failures
    at every threshold. A result naming an unknown query raises
    :class:`EvaluationError`.
    """
    th = _check_thresholds(thresholds)
    items = results.items() if isinstance(results, Mapping) else results
    got: dict[str, Optional[Pose]] = {}
    for name, pose in items:
        if name not in ground_truth:
            raise EvaluationError(f"no ground truth for query {name!r}")
        got[name] = pose
    names = tuple(sorted(ground_truth))
    te = np.full(len(names), np.inf)
    re_ = np.full(len(names), np.inf)
    for i, name in enumerate(names):
        pose = got.get(name)
        if pose is not None:
            te[i], re_[i] = pose_error(pose, ground_truth[name])
    n = len(names)
    acc = tuple(
        100.0 * float(np.sum((te <= t) & (re_ <= r))) / n if n else 0.0 for t, r in th
    )
    med_t = float(np.median(te)) if n else math.nan
    med_r = float(np.median(re_)) if n else math.nan
    return EvalReport(names, te, re_, th, acc, med_t, med_r)  # type: ignore[arg-type]


def format_accuracy(acc) -> str:
    """``"41.9 / 68.2 / 84.3"`` style, one decimal."""
    return " / ".join(f"{a:.1f}" for a in acc)


_ACC_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*/\s*(\d+(?:\.\d+)?)\s*/\s*(\d+(?:\.\d+)?)\s*$")


def parse_accuracy(text: str) -> tuple[float, float, float]:
    m = _ACC_RE.match(text)
    if not m:
        raise EvaluationError(f"not an accuracy triple: {text!r}")
    vals = tuple(float(g) for g in m.groups())
    if not all(0.0 <= v <= 100.0 for v in vals):
        raise EvaluationError(f"accuracies must lie in [0, 100]: {text!r}")
    return vals  # type: ignore[return-value]


def parse_thresholds(text: str) -> Thresholds:
    """``"0.25,2/0.5,5/5,10"`` -> ((0.25, 2), (0.5, 5), (5, 10))."""
    try:
        pairs = [tuple(float(x) for x in part.split(",")) for part in text.split("/")]
    except ValueError as exc:
        raise EvaluationError(f"bad thresholds {text!r}: {exc}") from None
    if any(len(p) != 2 for p in pairs):
        raise EvaluationError(f"bad thresholds {text!r}: expected m,deg/m,deg/m,deg")
    return _check_thresholds(pairs)
