"""Skeleton accuracy metrics: joint/bone chamfer distances and
matching-based IoU, precision and recall."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .skeleton import Skeleton, bone_segments, require_valid


@dataclass(frozen=True)
class MatchConfig:
    tau: float = 0.1
    spacing: float = 0.01

    def __post_init__(self):
        if not self.tau > 0 or not self.spacing > 0:
            raise ValueError("tau and spacing must be positive")


@dataclass(frozen=True)
class MetricsReport:
    iou: float
    precision: float
    recall: float
    cd_j2j: float
    cd_j2b: float
    cd_b2b: float

    def as_dict(self) -> dict:
        return asdict(self)


def chamfer(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty point set")
    d = cdist(a, b)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def point_segment_distance(points, seg_a, seg_b) -> np.ndarray:
    """(p, s) distances from each point to each closed segment."""
    p = np.asarray(points, dtype=np.float64)[:, None, :]
    a = np.asarray(seg_a, dtype=np.float64)[None, :, :]
    ab = np.asarray(seg_b, dtype=np.float64)[None, :, :] - a
    denom = np.sum(ab * ab, axis=-1)
    t = np.clip(np.sum((p - a) * ab, axis=-1) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(p - closest, axis=-1)


def _joint_to_bones(joints, segs) -> float:
    return float(point_segment_distance(joints, segs[:, 0], segs[:, 1]).min(axis=1).mean())


def cd_j2j(pred: Skeleton, gt: Skeleton) -> float:
    return chamfer(pred.joints, gt.joints)


def cd_j2b(pred: Skeleton, gt: Skeleton) -> float:
    require_valid(pred)
    require_valid(gt)
    return 0.5 * (_joint_to_bones(pred.joints, bone_segments(gt))
                  + _joint_to_bones(gt.joints, bone_segments(pred)))


def sample_bones(segs, spacing: float) -> np.ndarray:
    """Evenly spaced samples along each segment, both endpoints included."""
    out = []
    for a, b in segs:
        n = max(2, int(np.ceil(np.linalg.norm(b - a) / spacing)) + 1)
        t = np.linspace(0.0, 1.0, n)[:, None]
        # symmetric in (a, b) so reversing a bone gives the same samples
        out.append((1.0 - t) * a + t * b)
    return np.concatenate(out, axis=0)


def cd_b2b(pred: Skeleton, gt: Skeleton, cfg: MatchConfig = MatchConfig()) -> float:
    if pred.k < 2 or gt.k < 2:
        raise ValueError("no bones")
    sp, sg = bone_segments(pred), bone_segments(gt)
    return chamfer(sample_bones(sp, cfg.spacing), sample_bones(sg, cfg.spacing))


def matched_count(pred_joints, gt_joints, tau: float) -> int:
    """Largest number of disjoint (pred, gt) pairs closer than ``tau``.

    Out-of-radius pairs cost more than any full set of in-radius pairs, so
    the minimum-cost assignment first maximizes the number of valid pairs.
    """
    d = cdist(np.asarray(pred_joints).reshape(-1, 3), np.asarray(gt_joints).reshape(-1, 3))
    if d.size == 0:
        return 0
    ok = d <= tau
    big = 1.0 + tau * min(d.shape)
    cost = np.where(ok, d, big)
    r, c = linear_sum_assignment(cost)
    return int(np.sum(ok[r, c]))


def joint_match_scores(pred: Skeleton, gt: Skeleton,
                       cfg: MatchConfig = MatchConfig()) -> tuple[float, float, float]:
    m = matched_count(pred.joints, gt.joints, cfg.tau)
    n_pred, n_gt = pred.k, gt.k
    return m / (n_pred + n_gt - m), m / n_pred, m / n_gt


def evaluate(pred: Skeleton, gt: Skeleton, cfg: MatchConfig = MatchConfig()) -> MetricsReport:
    iou, precision, recall = joint_match_scores(pred, gt, cfg)
    return MetricsReport(
        iou=iou, precision=precision, recall=recall,
        cd_j2j=cd_j2j(pred, gt), cd_j2b=cd_j2b(pred, gt), cd_b2b=cd_b2b(pred, gt, cfg),
    )


def mean_report(reports) -> MetricsReport:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    keys = MetricsReport.__dataclass_fields__.keys()
    return MetricsReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})
