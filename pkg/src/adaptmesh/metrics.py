"""Reconstruction quality metrics and their reward mappings.

Distances are reported in centimetres; point sets are given in metres.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_THRESHOLD_CM = 15.0


@dataclass(frozen=True)
class QualityReport:
    accuracy_cm: float
    completeness_cm: float
    chamfer_cm: float
    fscore_pct: float
    threshold_cm: float = DEFAULT_THRESHOLD_CM

    def __post_init__(self):
        if min(self.accuracy_cm, self.completeness_cm, self.chamfer_cm) < 0:
            raise ValueError("distance metrics must be non-negative")
        if abs(self.chamfer_cm - 0.5 * (self.accuracy_cm + self.completeness_cm)) > 1e-9:
            raise ValueError("chamfer must be the mean of accuracy and completeness")
        if not 0.0 <= self.fscore_pct <= 100.0:
            raise ValueError("F-score must lie in [0, 100]")
        if not self.threshold_cm > 0:
            raise ValueError("threshold must be positive")

    @classmethod
    def worst(cls, threshold_cm: float = DEFAULT_THRESHOLD_CM, error_cm: float = 100.0) -> "QualityReport":
        """Stand-in report for an empty reconstruction."""
        return cls(error_cm, error_cm, error_cm, 0.0, threshold_cm)

    CSV_HEADER = "accuracy_cm,completeness_cm,chamfer_cm,fscore_pct,threshold_cm"

    def csv_row(self) -> str:
        return (f"{self.accuracy_cm:.6f},{self.completeness_cm:.6f},{self.chamfer_cm:.6f},"
                f"{self.fscore_pct:.6f},{self.threshold_cm:g}")

    def table(self) -> str:
        return "\n".join([
            f"Accuracy     {self.accuracy_cm:10.3f} cm",
            f"Completeness {self.completeness_cm:10.3f} cm",
            f"Chamfer-L1   {self.chamfer_cm:10.3f} cm",
            f"F-score      {self.fscore_pct:10.3f} % (@{self.threshold_cm:g} cm)",
        ])


@dataclass(frozen=True)
class RewardWeights:
    acc: float = 1.0
    comp: float = 1.0
    chamfer: float = 1.0
    fscore: float = 2.0

    def __post_init__(self):
        w = (self.acc, self.comp, self.chamfer, self.fscore)
        if min(w) < 0 or max(w) <= 0:
            raise ValueError("reward weights must be non-negative with one positive")


@dataclass(frozen=True)
class RewardMapping:
    """Piecewise-linear breakpoints (x, reward) for the two reward curves."""

    distance: tuple = ((5.0, 1.0), (15.0, 0.0), (30.0, -1.0))
    fscore: tuple = ((50.0, -1.0), (80.0, 0.0), (100.0, 1.0))


DEFAULT_MAPPING = RewardMapping()


def _check_sets(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("metric point sets must be non-empty")
    return a, b


def nearest_distances(src, dst) -> np.ndarray:
    """Exact Euclidean distance from every ``src`` point to its nearest ``dst`` point (metres)."""
    src, dst = _check_sets(src, dst)
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def accuracy(mesh_samples, gt) -> float:
    """Mean mesh-to-ground-truth nearest distance, cm."""
    return float(nearest_distances(mesh_samples, gt).mean() * 100.0)


def completeness(gt, mesh_samples) -> float:
    """Mean ground-truth-to-mesh nearest distance, cm."""
    return float(nearest_distances(gt, mesh_samples).mean() * 100.0)


def chamfer_l1(acc_cm: float, comp_cm: float) -> float:
    if acc_cm < 0 or comp_cm < 0:
        raise ValueError("distances must be non-negative")
    return 0.5 * (acc_cm + comp_cm)


def _fscore_from(d_pred, d_gt, threshold_cm):
    t = threshold_cm / 100.0
    precision = float(np.mean(d_pred <= t))
    recall = float(np.mean(d_gt <= t))
    if precision + recall == 0:
        return 0.0
    return 200.0 * precision * recall / (precision + recall)


def f_score(mesh_samples, gt, threshold_cm: float = DEFAULT_THRESHOLD_CM) -> float:
    """Harmonic mean of precision and recall at ``threshold_cm``, in percent."""
    if not threshold_cm > 0:
        raise ValueError("threshold must be positive")
    return _fscore_from(nearest_distances(mesh_samples, gt), nearest_distances(gt, mesh_samples), threshold_cm)


def quality_report(mesh_samples, gt, threshold_cm: float = DEFAULT_THRESHOLD_CM) -> QualityReport:
    """All four metrics from one pair of nearest-neighbour passes."""
    d_pred = nearest_distances(mesh_samples, gt)
    d_gt = nearest_distances(gt, mesh_samples)
    acc, comp = float(d_pred.mean() * 100.0), float(d_gt.mean() * 100.0)
    return QualityReport(acc, comp, chamfer_l1(acc, comp), _fscore_from(d_pred, d_gt, threshold_cm), threshold_cm)


def _piecewise(x, knots):
    xs = [k[0] for k in knots]
    ys = [k[1] for k in knots]
    return float(np.interp(x, xs, ys))


def distance_reward(error_cm: float, mapping: RewardMapping = DEFAULT_MAPPING) -> float:
    if error_cm < 0:
        raise ValueError("error must be non-negative")
    return _piecewise(error_cm, mapping.distance)


def fscore_reward(f_pct: float, mapping: RewardMapping = DEFAULT_MAPPING) -> float:
    if not 0.0 <= f_pct <= 100.0:
        raise ValueError("F-score must lie in [0, 100]")
    return _piecewise(f_pct, mapping.fscore)


def composite_reward(report: QualityReport, w: RewardWeights = RewardWeights(),
                     mapping: RewardMapping = DEFAULT_MAPPING) -> float:
    return (w.acc * distance_reward(report.accuracy_cm, mapping)
            + w.comp * distance_reward(report.completeness_cm, mapping)
            + w.chamfer * distance_reward(report.chamfer_cm, mapping)
            + w.fscore * fscore_reward(report.fscore_pct, mapping))
