"""Training losses, evaluated as diagnostics and fitness metrics.

Nothing here computes gradients; the functions score an estimate against a
known ground-truth offset.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from attnloc.features import DenseFeatureLevel
from attnloc.geometry import DEPTH_MIN, CameraModel, Pose3, PoseSE2Offset, bilinear_sample_many, project_points, wrap_angle
from attnloc.mapdb import KeypointSet
from attnloc.matching import MarginalDistributions, RegularizerWeights


class LossVariant(str, Enum):
    ABSOLUTE = "absolute"  # alpha * sum of absolute residuals
    SQUARED = "squared"  # alpha on squared x, y residuals plus squared yaw


class SimilarityMode(str, Enum):
    REGULARIZED = "regularized"  # margin on post-regulariser costs
    RAW_SQUARED = "raw_squared"  # margin on squared raw descriptor distance


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    C: float = 1.0
    variant: LossVariant = LossVariant.ABSOLUTE
    similarity: SimilarityMode = SimilarityMode.REGULARIZED

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")
        if not self.C >= 0:
            raise ValueError("C must be non-negative")
        object.__setattr__(self, "variant", LossVariant(self.variant))
        object.__setattr__(self, "similarity", SimilarityMode(self.similarity))


def _residuals(est: PoseSE2Offset, gt: PoseSE2Offset) -> tuple[float, float, float]:
    return est.dx - gt.dx, est.dy - gt.dy, wrap_angle(est.dpsi - gt.dpsi)


def loss_absolute(est: PoseSE2Offset, gt: PoseSE2Offset, cfg: LossConfig = LossConfig()) -> float:
    rx, ry, rpsi = _residuals(est, gt)
    if cfg.variant is LossVariant.ABSOLUTE:
        return cfg.alpha * (abs(rx) + abs(ry) + abs(rpsi))
    return cfg.alpha * (rx * rx + ry * ry) + rpsi * rpsi


def _mad(axis, target: float, angular: bool = False) -> float:
    d = axis.nodes - target
    if angular:
        d = np.array([wrap_angle(x) for x in d])
    return float(np.dot(axis.probs, np.abs(d)))


def loss_concentration(m: MarginalDistributions, gt: PoseSE2Offset, cfg: LossConfig = LossConfig()) -> float:
    """``beta`` times the summed mean absolute deviation of each axis about the ground truth."""
    return cfg.beta * (_mad(m.x, gt.dx) + _mad(m.y, gt.dy) + _mad(m.psi, gt.dpsi, angular=True))


def loss_similarity(per_keypoint_cost_at_gt, cfg: LossConfig = LossConfig()) -> float:
    """Hinge ``sum(max(c - C, 0))`` over per-keypoint costs at the ground-truth pose.

    The costs must already be in the form selected by ``cfg.similarity``; see
    :func:`keypoint_costs_at_pose`.
    """
    c = np.asarray(per_keypoint_cost_at_gt, dtype=np.float64).reshape(-1)
    return float(np.maximum(c - cfg.C, 0.0).sum())


def keypoint_costs_at_pose(
    kps: KeypointSet,
    level: DenseFeatureLevel,
    pose: Pose3,
    cam: CameraModel,
    mode: SimilarityMode | str = SimilarityMode.REGULARIZED,
    regularizer: RegularizerWeights | None = None,
) -> np.ndarray:
    """Per-keypoint matching cost with the map keypoints projected through ``pose``.

    Keypoints that fall behind the camera or outside the level are dropped.
    REGULARIZED returns the regulariser output on the L2 distance (identity
    weights when none are given); RAW_SQUARED returns the squared distance.
    """
    mode = SimilarityMode(mode)
    uv, depth = project_points(kps.world, pose, cam)
    uv = uv / level.scale_s
    ok = (depth > DEPTH_MIN) & (uv[:, 0] >= 0) & (uv[:, 0] <= level.width_s - 1)
    ok &= (uv[:, 1] >= 0) & (uv[:, 1] <= level.height_s - 1)
    if not ok.any():
        return np.zeros(0)
    sampled = bilinear_sample_many(level.descriptors, uv[ok, 0], uv[ok, 1])
    diff = kps.descriptors[ok].astype(np.float64) - sampled
    sq = np.einsum("nd,nd->n", diff, diff)
    if mode is SimilarityMode.RAW_SQUARED:
        return sq
    w = regularizer if regularizer is not None else RegularizerWeights.identity()
    return w.apply(np.sqrt(sq))
