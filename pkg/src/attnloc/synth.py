"""Synthetic worlds with known landmarks, trajectories and appearance change.

Views are rendered straight into descriptor pyramids: every visible landmark
spreads its descriptor over a small cone-shaped footprint around its
projection on each level, over a faint per-view background. The cone keeps
the descriptor exact at a projection that lands on a cell centre while
giving the cost surface a basin a few cells wide.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from attnloc.features import DESCRIPTOR_DIM, SCALES, DenseFeatureLevel, FeaturePyramid
from attnloc.geometry import DEPTH_MIN, CameraModel, Pose3, PoseSE2Offset, apply_offset, project_points

BACKGROUND_MAGNITUDE = 0.05


class WorldSpecError(ValueError):
    pass


@dataclass(frozen=True)
class WorldSpec:
    """Knobs for :func:`generate_world`; also readable from a key = value file."""

    landmarks: int = 500
    poses: int = 100
    pose_spacing: float = 1.0  # meters between consecutive trajectory poses
    stable_fraction: float = 1.0
    unreliable_max_reliability: float = 0.3
    corridor_radius: float = 20.0
    min_lateral: float = 3.0  # keep landmarks off the driven lane
    max_height: float = 8.0
    lookahead: float = 60.0  # corridor length beyond the last pose
    curvature: float = 0.01  # peak path curvature, 1/m
    seed: int = 0
    # camera
    image_width: int = 1280
    image_height: int = 720
    focal: float = 1000.0
    camera_height: float = 1.5

    def __post_init__(self):
        if self.landmarks < 1 or self.poses < 1:
            raise WorldSpecError("landmark and pose counts must be >= 1")
        if not 0.0 <= self.stable_fraction <= 1.0:
            raise WorldSpecError("stable_fraction must lie in [0, 1]")
        if self.corridor_radius <= self.min_lateral:
            raise WorldSpecError("corridor_radius must exceed min_lateral")
        if self.pose_spacing <= 0:
            raise WorldSpecError("pose_spacing must be positive")

    @classmethod
    def from_mapping(cls, values: dict) -> WorldSpec:
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                continue
            kind = types[key]
            kwargs[key] = int(raw) if kind in ("int", int) else float(raw)
        return cls(**kwargs)


def read_kv_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines (``#`` comments) into a dict of strings."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read_string("[root]\n" + Path(path).read_text())
    return dict(parser["root"])


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    landmarks: np.ndarray  # (L, 3)
    descriptors: np.ndarray  # (L, D), unit norm
    reliability: np.ndarray  # (L,)
    trajectory: tuple[Pose3, ...]
    cameras: tuple[CameraModel, ...]
    centerline: np.ndarray  # (M, 3) dense polyline through and beyond the trajectory
    rng_seed: int
    spec: WorldSpec = field(default_factory=WorldSpec)

    def __eq__(self, other):
        if not isinstance(other, SyntheticWorld):
            return NotImplemented
        return (
            np.array_equal(self.landmarks, other.landmarks)
            and np.array_equal(self.descriptors, other.descriptors)
            and np.array_equal(self.reliability, other.reliability)
            and self.trajectory == other.trajectory
            and self.cameras == other.cameras
        )


def default_camera(spec: WorldSpec = WorldSpec()) -> CameraModel:
    w, h = spec.image_width, spec.image_height
    return CameraModel.forward_facing(spec.focal, spec.focal, w / 2, h / 2, w, h, mount=(0.0, 0.0, spec.camera_height))


def _road(spec: WorldSpec, rng: np.random.Generator, length: float, step: float):
    """Arc-length parametrised planar road with a smooth random heading profile."""
    n = int(math.ceil(length / step)) + 1
    s = np.arange(n) * step
    phase = rng.uniform(0, 2 * math.pi)
    wavelength = rng.uniform(80.0, 160.0)
    k = 2 * math.pi / wavelength
    # heading whose derivative (curvature) peaks at spec.curvature
    psi = (spec.curvature / k) * (np.sin(k * s + phase) - math.sin(phase))
    xy = np.zeros((n, 2))
    xy[1:, 0] = np.cumsum(np.cos(0.5 * (psi[1:] + psi[:-1])) * step)
    xy[1:, 1] = np.cumsum(np.sin(0.5 * (psi[1:] + psi[:-1])) * step)
    return s, xy, psi


def generate_world(spec: WorldSpec = WorldSpec(), cameras=None) -> SyntheticWorld:
    rng = np.random.default_rng(spec.seed)
    traj_len = (spec.poses - 1) * spec.pose_spacing
    total = traj_len + spec.lookahead
    s, xy, psi = _road(spec, rng, total, 0.25)
    centerline = np.column_stack([xy, np.zeros(len(s))])

    idx = np.rint(np.arange(spec.poses) * spec.pose_spacing / 0.25).astype(int)
    trajectory = tuple(Pose3.from_xyz_rpy(xy[i, 0], xy[i, 1], 0.0, yaw=psi[i]) for i in idx)

    L = spec.landmarks
    # place in (arc length, lateral, height) with the cross-section inside the radius
    along = rng.uniform(0.0, total, L)
    side = rng.choice([-1.0, 1.0], L)
    lateral = np.empty(L)
    height = np.empty(L)
    todo = np.arange(L)
    while len(todo):
        lat = rng.uniform(spec.min_lateral, spec.corridor_radius, len(todo))
        hgt = rng.uniform(0.0, spec.max_height, len(todo))
        ok = lat * lat + hgt * hgt <= spec.corridor_radius**2
        lateral[todo[ok]] = lat[ok]
        height[todo[ok]] = hgt[ok]
        todo = todo[~ok]
    j = np.clip(np.searchsorted(s, along), 0, len(s) - 1)
    normal = np.column_stack([-np.sin(psi[j]), np.cos(psi[j])])
    base = xy[j]
    pts = np.column_stack([base + (side * lateral)[:, None] * normal, height])

    desc = rng.normal(size=(L, DESCRIPTOR_DIM))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    stable = rng.random(L) < spec.stable_fraction
    if spec.stable_fraction >= 1.0:
        stable[:] = True
    reliability = np.where(stable, 1.0, rng.uniform(0.0, spec.unreliable_max_reliability, L))

    cams = tuple(cameras) if cameras is not None else (default_camera(spec),)
    return SyntheticWorld(pts, desc, reliability, trajectory, cams, centerline, spec.seed, spec)


def distance_to_centerline(world: SyntheticWorld, points: np.ndarray | None = None) -> np.ndarray:
    """Euclidean distance of each point to the world's centerline polyline."""
    pts = world.landmarks if points is None else np.asarray(points, dtype=np.float64).reshape(-1, 3)
    a = world.centerline[:-1]
    ab = world.centerline[1:] - a
    best = np.full(len(pts), np.inf)
    for chunk in range(0, len(pts), 256):
        p = pts[chunk : chunk + 256, None, :]
        t = np.clip(np.sum((p - a) * ab, axis=-1) / np.sum(ab * ab, axis=-1), 0.0, 1.0)
        d = np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)
        best[chunk : chunk + 256] = d.min(axis=1)
    return best


@dataclass(frozen=True)
class RenderParams:
    noise: float = 0.0  # RMS norm of the per-cell additive descriptor noise
    drop_rate: float = 0.0  # probability that an unreliable landmark changes appearance
    seed: int = 0
    splat_radius: dict = field(default_factory=lambda: {2: 3.0, 4: 3.0, 8: 3.0})  # cells


def visible_landmarks(world: SyntheticWorld, pose: Pose3, camera: CameraModel):
    """Indices, pixel coordinates and depths of landmarks inside the image."""
    uv, z = project_points(world.landmarks, pose, camera)
    inside = (z > DEPTH_MIN) & (uv[:, 0] >= 0) & (uv[:, 0] < camera.width) & (uv[:, 1] >= 0) & (uv[:, 1] < camera.height)
    idx = np.flatnonzero(inside)
    return idx, uv[idx], z[idx]


def _splat_level(
    shape: tuple[int, int], cells_uv: np.ndarray, desc: np.ndarray, rel: np.ndarray, radius: float, background: np.ndarray
):
    hs, ws = shape
    r = int(math.ceil(radius))
    off = np.arange(-r, r + 1)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    oy, ox = oy.ravel(), ox.ravel()
    base = np.rint(cells_uv).astype(np.int64)
    cu = base[:, 0:1] + ox[None, :]
    cv = base[:, 1:2] + oy[None, :]
    dist = np.hypot(cu - cells_uv[:, 0:1], cv - cells_uv[:, 1:2])
    k = np.clip(1.0 - dist / radius, 0.0, 1.0)
    inb = (cu >= 0) & (cu < ws) & (cv >= 0) & (cv < hs) & (k > 0)
    lm, _ = np.nonzero(inb)
    flat = (cv * ws + cu)[inb]
    kk = k[inb]
    cells, inv = np.unique(flat, return_inverse=True)
    acc = np.zeros((len(cells), desc.shape[1]))
    wsum = np.zeros(len(cells))
    np.add.at(acc, inv, kk[:, None] * desc[lm])
    np.add.at(wsum, inv, kk)
    # untouched cells keep the background; touched ones blend towards the landmarks
    field_ = background.reshape(hs * ws, -1).astype(np.float32, copy=True)
    bg = field_[cells].astype(np.float64)
    field_[cells] = (acc + np.clip(1.0 - wsum, 0.0, None)[:, None] * bg) / np.maximum(wsum, 1.0)[:, None]

    heat = np.zeros(hs * ws)
    near = inb & (dist <= 1.5)
    lm2, _ = np.nonzero(near)
    np.maximum.at(heat, (cv * ws + cu)[near], rel[lm2])
    return field_.reshape(hs, ws, -1), heat.reshape(hs, ws)


def render_view(
    world: SyntheticWorld,
    pose: Pose3,
    camera: CameraModel | None = None,
    params: RenderParams = RenderParams(),
):
    """Render a descriptor pyramid and exact depth points for a vehicle pose.

    Returns ``(pyramid, (pixels, worlds))`` with pixels in full resolution.
    """
    cam = camera if camera is not None else world.cameras[0]
    rng = np.random.default_rng(params.seed)
    idx, uv, _ = visible_landmarks(world, pose, cam)
    desc = world.descriptors[idx].copy()
    rel = world.reliability[idx]
    if params.drop_rate > 0:
        changed = (rel < 1.0) & (rng.random(len(idx)) < params.drop_rate)
        fresh = rng.normal(size=(int(changed.sum()), DESCRIPTOR_DIM))
        desc[changed] = fresh / np.linalg.norm(fresh, axis=1, keepdims=True)

    levels = []
    for s in SCALES:
        hs, ws = cam.height // s, cam.width // s
        bg = rng.standard_normal((hs, ws, DESCRIPTOR_DIM), dtype=np.float32)
        bg *= np.float32(BACKGROUND_MAGNITUDE / math.sqrt(DESCRIPTOR_DIM))
        fld, heat = _splat_level((hs, ws), uv / s, desc, rel, float(params.splat_radius[s]), bg)
        if params.noise > 0:
            noise = rng.standard_normal(fld.shape, dtype=np.float32)
            fld += noise * np.float32(params.noise / math.sqrt(DESCRIPTOR_DIM))
        levels.append(DenseFeatureLevel(s, fld, heat))
    pyramid = FeaturePyramid(cam.width, cam.height, tuple(levels))
    return pyramid, (uv, world.landmarks[idx].copy())


def perturb_offset(max_dx: float, max_dy: float, max_dpsi: float, seed: int) -> PoseSE2Offset:
    if min(max_dx, max_dy, max_dpsi) < 0:
        raise ValueError("perturbation bounds must be non-negative")
    rng = np.random.default_rng(seed)
    dx, dy, dpsi = rng.uniform(-1.0, 1.0, 3) * np.array([max_dx, max_dy, max_dpsi])
    return PoseSE2Offset(dx, dy, dpsi)


def perturb_pose(pose: Pose3, max_dx: float, max_dy: float, max_dpsi: float, seed: int) -> Pose3:
    """Uniformly perturb ``pose`` within the given bounds (meters, radians)."""
    return apply_offset(pose, perturb_offset(max_dx, max_dy, max_dpsi, seed))
