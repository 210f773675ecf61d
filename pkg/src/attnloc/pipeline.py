"""Map generation and coarse-to-fine online localization."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from attnloc.features import SCALES, FeaturePyramid, extract_pyramid
from attnloc.geometry import CameraModel, Pose3, PoseSE2Offset, apply_offset
from attnloc.mapdb import MapDatabase, MapError, MapNode, build_node, nearest_node
from attnloc.matching import (
    DEFAULT_GRIDS,
    Collapse,
    CostVolumeConfig,
    MarginalDistributions,
    Marginalization,
    MatchingError,
    RegularizerWeights,
    availability,
    build_cost_volume,
    default_thresholds,
    marginal_distributions,
    marginalize,
    regularize,
)
from attnloc.selection import SelectionConfig

logger = logging.getLogger(__name__)

CASCADE = (8, 4, 2)


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class FrameInput:
    """One time step: a pyramid (or raw image) per camera plus odometry since the last frame."""

    timestamp: float
    views: tuple
    incremental_motion: PoseSE2Offset = field(default_factory=PoseSE2Offset)

    def pyramids(self) -> list[FeaturePyramid]:
        return [v if isinstance(v, FeaturePyramid) else extract_pyramid(v) for v in self.views]


@dataclass(frozen=True)
class LocalizerConfig:
    grids: dict = field(default_factory=lambda: dict(DEFAULT_GRIDS))
    temperature: dict = field(default_factory=lambda: {s: 0.02 for s in SCALES})
    marginalization: Marginalization = Marginalization.REDUCE_AVERAGE
    collapse: Collapse = Collapse.JOINT
    regularizers: dict = field(default_factory=lambda: {s: RegularizerWeights.identity() for s in SCALES})
    thresholds: tuple | None = None  # per-axis variance limits; None -> from the finest grid

    def availability_thresholds(self) -> tuple[float, float, float]:
        if self.thresholds is not None:
            return tuple(self.thresholds)
        return default_thresholds(self.grids[CASCADE[-1]])


@dataclass(frozen=True, eq=False)
class LocalizationResult:
    timestamp: float
    prior: Pose3
    estimated_pose: Pose3
    offset_per_level: tuple[PoseSE2Offset, ...]
    distributions: tuple[MarginalDistributions, ...]
    available: bool
    failed_level: int | None = None
    timing: dict = field(default_factory=dict)

    @property
    def total_offset(self) -> PoseSE2Offset:
        total = PoseSE2Offset()
        for o in self.offset_per_level:
            total = total.compose(o)
        return total

    def same_as(self, other: LocalizationResult) -> bool:
        """Bit-level equality of everything except timing."""
        if (self.available, self.failed_level, self.timestamp) != (other.available, other.failed_level, other.timestamp):
            return False
        if self.estimated_pose != other.estimated_pose or self.offset_per_level != other.offset_per_level:
            return False
        for a, b in zip(self.distributions, other.distributions):
            for da, db in zip(a.axes, b.axes):
                if not np.array_equal(da.probs, db.probs):
                    return False
        return len(self.distributions) == len(other.distributions)


# ---------------------------------------------------------------------------
# map generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MappingFrame:
    frame: FrameInput
    ground_truth: Pose3
    depth_points: tuple  # one entry per camera, as accepted by build_node


def generate_map(mapping_frames: Sequence[MappingFrame], cfg: SelectionConfig = SelectionConfig()) -> MapDatabase:
    """One WFPS-selected node per (frame, camera); node id = frame * cameras + camera."""
    cfg = replace(cfg, weighted=True) if not cfg.weighted else cfg
    return _generate(mapping_frames, cfg)


def _generate(mapping_frames: Sequence[MappingFrame], cfg: SelectionConfig) -> MapDatabase:
    nodes: list[MapNode] = []
    for fi, mf in enumerate(mapping_frames):
        pyramids = mf.frame.pyramids()
        if len(pyramids) != len(mf.depth_points):
            raise PipelineError(f"frame {fi}: {len(pyramids)} views but {len(mf.depth_points)} depth sets")
        for cam_id, (pyr, depth) in enumerate(zip(pyramids, mf.depth_points)):
            node_id = fi * len(pyramids) + cam_id
            try:
                nodes.append(build_node(pyr, depth, mf.ground_truth, cfg, node_id=node_id, camera_id=cam_id))
            except (MapError, ValueError) as exc:
                raise PipelineError(f"frame {fi} camera {cam_id}: {exc}") from exc
    return MapDatabase(tuple(nodes))


def generate_map_with_policy(mapping_frames, cfg: SelectionConfig) -> MapDatabase:
    """Like :func:`generate_map` but honours ``cfg.weighted`` (FPS maps for ablations)."""
    return _generate(mapping_frames, cfg)


# ---------------------------------------------------------------------------
# online localization
# ---------------------------------------------------------------------------


def _level_costs(nodes, pyramids, cameras, pose, scale, cfg: LocalizerConfig) -> np.ndarray:
    grid: CostVolumeConfig = cfg.grids[scale]
    per_cam = []
    for node, pyr, cam in zip(nodes, pyramids, cameras):
        if len(node.level(scale)) == 0:
            continue
        vol = build_cost_volume(node, pyr.level(scale), pose, cam, grid)
        vol = regularize(vol, cfg.regularizers[scale])
        per_cam.append(marginalize(vol, node.level(scale).weights, cfg.marginalization))
    if not per_cam:
        raise MatchingError(f"no keypoints at scale {scale}")
    if len(per_cam) == 1:
        return per_cam[0]
    stack = np.stack(per_cam)
    ok = np.isfinite(stack)
    n = ok.sum(axis=0)
    out = np.full(stack.shape[1:], np.nan)
    s = np.where(ok, stack, 0.0).sum(axis=0)
    out[n > 0] = s[n > 0] / n[n > 0]
    return out


def localize_frame(
    frame: FrameInput,
    prior: Pose3,
    db: MapDatabase,
    cameras: Sequence[CameraModel],
    cfg: LocalizerConfig = LocalizerConfig(),
) -> LocalizationResult:
    """Cascade the matching levels coarse to fine, re-centring each grid on the last estimate."""
    t_start = time.perf_counter()
    timing = {}
    pyramids = frame.pyramids()
    if len(pyramids) != len(cameras):
        raise PipelineError(f"{len(pyramids)} views for {len(cameras)} cameras")
    timing["features_ms"] = (time.perf_counter() - t_start) * 1e3

    t0 = time.perf_counter()
    nodes = [nearest_node(db, prior, camera_id=c) for c in range(len(cameras))]
    timing["query_ms"] = (time.perf_counter() - t0) * 1e3

    pose = prior
    offsets: list[PoseSE2Offset] = []
    dists: list[MarginalDistributions] = []
    failed = None
    for scale in CASCADE:
        t0 = time.perf_counter()
        try:
            costs = _level_costs(nodes, pyramids, cameras, pose, scale, cfg)
            m = marginal_distributions(costs, cfg.grids[scale], cfg.temperature[scale], cfg.collapse)
        except MatchingError as exc:
            logger.debug("t=%.3f: level %d unavailable: %s", frame.timestamp, scale, exc)
            failed = scale
            timing[f"level{scale}_ms"] = (time.perf_counter() - t0) * 1e3
            break
        offsets.append(m.offset)
        dists.append(m)
        pose = apply_offset(pose, m.offset)
        timing[f"level{scale}_ms"] = (time.perf_counter() - t0) * 1e3

    if failed is None:
        available = availability(dists[-1], cfg.availability_thresholds())
    else:
        available = False
        pose = prior
    timing["total_ms"] = (time.perf_counter() - t_start) * 1e3
    return LocalizationResult(frame.timestamp, prior, pose, tuple(offsets), tuple(dists), available, failed, timing)


def run_sequence(
    frames: Sequence[FrameInput],
    initial_prior: Pose3,
    db: MapDatabase,
    cameras: Sequence[CameraModel],
    cfg: LocalizerConfig = LocalizerConfig(),
) -> list[LocalizationResult]:
    """Localize frames in order, dead-reckoning the prior from the last usable pose.

    The first frame uses ``initial_prior`` directly; later priors append the
    frame's incremental motion to the previous estimate, or to the previous
    prior when that frame was unavailable.
    """
    if not frames:
        raise PipelineError("empty frame sequence")
    results: list[LocalizationResult] = []
    prior = initial_prior
    last_ts = None
    for i, frame in enumerate(frames):
        if last_ts is not None and not frame.timestamp > last_ts:
            raise PipelineError(f"frame {i}: timestamps must increase")
        last_ts = frame.timestamp
        if results:
            prev = results[-1]
            base = prev.estimated_pose if prev.available else prev.prior
            prior = apply_offset(base, frame.incremental_motion)
        results.append(localize_frame(frame, prior, db, cameras, cfg))
    return results
