"""Localization map: per-image nodes of selected keypoints with descriptors,
attention weights and world coordinates, plus nearest-node lookup."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from attnloc.features import DESCRIPTOR_DIM, SCALES, FeaturePyramid, atomic_write_bytes
from attnloc.geometry import Pose3, bilinear_sample_many
from attnloc.selection import SelectionConfig, fps, wfps

MAP_MAGIC = b"ALMP"
MAP_VERSION = 1


class MapError(ValueError):
    pass


class MapFormatError(MapError):
    pass


KEYPOINT_DTYPE = np.dtype(
    [("u", "<f4"), ("v", "<f4"), ("weight", "<f4"), ("world", "<f8", (3,)), ("descriptor", "<f4", (DESCRIPTOR_DIM,))]
)


@dataclass(frozen=True)
class MapKeypoint:
    level_scale: int
    u: float
    v: float
    descriptor: np.ndarray
    weight: float
    world: np.ndarray


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Keypoints of one pyramid level, stored column-wise."""

    scale: int
    records: np.ndarray  # structured array with KEYPOINT_DTYPE

    def __post_init__(self):
        rec = np.ascontiguousarray(self.records, dtype=KEYPOINT_DTYPE)
        rec.setflags(write=False)
        object.__setattr__(self, "records", rec)

    @classmethod
    def from_arrays(cls, scale, uv, weight, world, descriptor) -> KeypointSet:
        rec = np.zeros(len(weight), dtype=KEYPOINT_DTYPE)
        rec["u"] = np.asarray(uv)[:, 0]
        rec["v"] = np.asarray(uv)[:, 1]
        rec["weight"] = weight
        rec["world"] = world
        rec["descriptor"] = descriptor
        return cls(scale, rec)

    def __len__(self):
        return len(self.records)

    @property
    def uv(self) -> np.ndarray:
        return np.stack([self.records["u"], self.records["v"]], axis=1).astype(np.float64)

    @property
    def weights(self) -> np.ndarray:
        return self.records["weight"].astype(np.float64)

    @property
    def world(self) -> np.ndarray:
        return self.records["world"]

    @property
    def descriptors(self) -> np.ndarray:
        return self.records["descriptor"]

    def subset(self, index) -> KeypointSet:
        return KeypointSet(self.scale, self.records[index])

    def keypoints(self) -> list[MapKeypoint]:
        return [
            MapKeypoint(self.scale, float(r["u"]), float(r["v"]), r["descriptor"].copy(), float(r["weight"]), r["world"].copy())
            for r in self.records
        ]

    def validate(self, where: str = "") -> None:
        r = self.records
        if self.scale not in SCALES:
            raise MapError(f"{where}scale {self.scale} not in {SCALES}")
        for name in ("u", "v", "weight"):
            if not np.all(np.isfinite(r[name])):
                raise MapError(f"{where}non-finite {name}")
        if not (np.all(np.isfinite(r["world"])) and np.all(np.isfinite(r["descriptor"]))):
            raise MapError(f"{where}non-finite world point or descriptor")
        bad = np.flatnonzero((r["weight"] < 0) | (r["weight"] > 1))
        if len(bad):
            raise MapError(f"{where}keypoint {bad[0]} weight {float(r['weight'][bad[0]])!r} outside [0, 1]")

    def __eq__(self, other):
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return self.scale == other.scale and self.records.tobytes() == other.records.tobytes()


@dataclass(frozen=True, eq=False)
class MapNode:
    node_id: int
    capture_pose: Pose3
    camera_id: int
    levels: tuple[KeypointSet, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if tuple(lv.scale for lv in self.levels) != SCALES:
            raise MapError(f"node {self.node_id}: levels must be {SCALES}")

    def level(self, scale: int) -> KeypointSet:
        return self.levels[SCALES.index(scale)]

    def keypoints(self, scale: int | None = None) -> list[MapKeypoint]:
        if scale is not None:
            return self.level(scale).keypoints()
        return [kp for lv in self.levels for kp in lv.keypoints()]

    def __eq__(self, other):
        if not isinstance(other, MapNode):
            return NotImplemented
        return (
            self.node_id == other.node_id
            and self.camera_id == other.camera_id
            and self.capture_pose == other.capture_pose
            and all(a == b for a, b in zip(self.levels, other.levels))
        )


def _node_seed(base: int, node_id: int, scale: int) -> int:
    return int(np.random.SeedSequence([base & 0xFFFFFFFFFFFFFFFF, node_id, scale]).generate_state(1, np.uint64)[0])


def _as_depth_arrays(depth_points) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(depth_points, tuple) and len(depth_points) == 2 and isinstance(depth_points[0], np.ndarray):
        pix, world = depth_points
    else:
        pts = list(depth_points)
        pix = np.array([p for p, _ in pts], dtype=np.float64).reshape(-1, 2)
        world = np.array([w for _, w in pts], dtype=np.float64).reshape(-1, 3)
    return np.asarray(pix, dtype=np.float64).reshape(-1, 2), np.asarray(world, dtype=np.float64).reshape(-1, 3)


def build_node(
    pyramid: FeaturePyramid,
    depth_points,
    capture_pose: Pose3,
    cfg: SelectionConfig,
    node_id: int = 0,
    camera_id: int = 0,
) -> MapNode:
    """Select keypoints among pixels with known 3D coordinates on every level.

    ``depth_points`` is either a sequence of ``((u, v), (X, Y, Z))`` pairs in
    full-resolution pixels or a ``(pixels, worlds)`` tuple of arrays.
    """
    pix, world = _as_depth_arrays(depth_points)
    if len(pix) == 0:
        raise MapError("no depth points")
    levels = []
    for scale in SCALES:
        lv = pyramid.level(scale)
        uv = pix / scale
        inside = (uv[:, 0] >= 0) & (uv[:, 0] <= lv.width_s - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= lv.height_s - 1)
        idx = np.flatnonzero(inside)
        if len(idx) < 1:
            raise MapError(f"level s={scale}: no candidates with known 3D coordinates")
        k, n_s = cfg.counts(len(idx), scale)
        if k < len(idx):
            rng = np.random.default_rng(_node_seed(cfg.rng_seed, node_id, scale))
            idx = np.sort(rng.choice(idx, size=k, replace=False))
        cuv = uv[idx]
        w = np.clip(bilinear_sample_many(lv.heatmap, cuv[:, 0], cuv[:, 1]), 0.0, 1.0)
        if cfg.weighted:
            order = wfps(cuv, n_s, weights=w)
        else:
            order = fps(cuv, n_s, seed_index=0)
        sel = idx[order]
        suv = uv[sel]
        desc = bilinear_sample_many(lv.descriptors, suv[:, 0], suv[:, 1])
        levels.append(KeypointSet.from_arrays(scale, suv, w[order], world[sel], desc))
    return MapNode(int(node_id), capture_pose, int(camera_id), tuple(levels))


@dataclass(frozen=True, eq=False)
class MapDatabase:
    nodes: tuple[MapNode, ...] = ()
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        nodes = tuple(self.nodes)
        object.__setattr__(self, "nodes", nodes)
        ids = [n.node_id for n in nodes]
        if len(set(ids)) != len(ids):
            raise MapError("node ids are not unique")
        index = {}
        for cam in sorted({n.camera_id for n in nodes}):
            members = [i for i, n in enumerate(nodes) if n.camera_id == cam]
            pos = np.array([nodes[i].capture_pose.position for i in members])
            index[cam] = (np.array(members), pos, cKDTree(pos))
        all_pos = np.array([n.capture_pose.position for n in nodes]).reshape(-1, 3)
        index[None] = (np.arange(len(nodes)), all_pos, cKDTree(all_pos) if len(nodes) else None)
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @property
    def camera_ids(self) -> list[int]:
        return sorted(k for k in self._index if k is not None)

    def __eq__(self, other):
        if not isinstance(other, MapDatabase):
            return NotImplemented
        return len(self.nodes) == len(other.nodes) and all(a == b for a, b in zip(self.nodes, other.nodes))


def nearest_node(db: MapDatabase, query: Pose3, camera_id: int | None = None) -> MapNode:
    """Node whose capture position is closest to ``query``; ties go to the lowest node id."""
    if len(db.nodes) == 0:
        raise MapError("map database is empty")
    if camera_id not in db._index:
        raise MapError(f"no map nodes for camera {camera_id}")
    members, pos, tree = db._index[camera_id]
    q = query.position
    dist, _ = tree.query(q)
    # collect every node within float noise of the best, then settle exactly
    near = tree.query_ball_point(q, r=dist * (1 + 1e-9) + 1e-12)
    d = pos[near] - q
    exact = np.sqrt(np.sum(d * d, axis=1))
    best = exact.min()
    tied = [members[near[i]] for i in np.flatnonzero(exact == best)]
    return min((db.nodes[i] for i in tied), key=lambda n: n.node_id)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_FILE_HEADER = struct.Struct("<4sHI")
_NODE_HEADER = struct.Struct("<Q3d4dH")
_LEVEL_HEADER = struct.Struct("<BH")


def database_to_bytes(db: MapDatabase) -> bytes:
    parts = [_FILE_HEADER.pack(MAP_MAGIC, MAP_VERSION, len(db.nodes))]
    for node in db.nodes:
        pose = node.capture_pose
        parts.append(_NODE_HEADER.pack(node.node_id, *pose.position, *pose.quaternion, node.camera_id))
        for lv in node.levels:
            if len(lv) > 0xFFFF:
                raise MapError(f"node {node.node_id}: too many keypoints at scale {lv.scale}")
            parts.append(_LEVEL_HEADER.pack(lv.scale, len(lv)))
            parts.append(lv.records.tobytes())
    return b"".join(parts)


def database_from_bytes(buf: bytes) -> MapDatabase:
    if len(buf) < _FILE_HEADER.size:
        raise MapFormatError("header: file truncated")
    magic, version, count = _FILE_HEADER.unpack_from(buf, 0)
    if magic != MAP_MAGIC:
        raise MapFormatError(f"magic: expected {MAP_MAGIC!r}, found {magic!r}")
    if version != MAP_VERSION:
        raise MapFormatError(f"version: unsupported {version}")
    off = _FILE_HEADER.size
    nodes = []
    for rec in range(count):
        where = f"record {rec}: "
        if off + _NODE_HEADER.size > len(buf):
            raise MapFormatError(where + "node header truncated")
        vals = _NODE_HEADER.unpack_from(buf, off)
        off += _NODE_HEADER.size
        node_id, pos, quat, camera_id = vals[0], vals[1:4], vals[4:8], vals[8]
        try:
            pose = Pose3(pos, quat)
        except ValueError as exc:
            raise MapFormatError(where + f"capture pose: {exc}") from None
        levels = []
        for expect in SCALES:
            if off + _LEVEL_HEADER.size > len(buf):
                raise MapFormatError(where + f"level s={expect} header truncated")
            scale, n = _LEVEL_HEADER.unpack_from(buf, off)
            off += _LEVEL_HEADER.size
            if scale != expect:
                raise MapFormatError(where + f"level scale {scale}, expected {expect}")
            nbytes = n * KEYPOINT_DTYPE.itemsize
            if off + nbytes > len(buf):
                raise MapFormatError(where + f"level s={scale} keypoints truncated")
            kps = KeypointSet(scale, np.frombuffer(buf, dtype=KEYPOINT_DTYPE, count=n, offset=off).copy())
            off += nbytes
            try:
                kps.validate(f"level s={scale}: ")
            except MapError as exc:
                raise MapFormatError(where + str(exc)) from None
            levels.append(kps)
        nodes.append(MapNode(node_id, pose, camera_id, tuple(levels)))
    if off != len(buf):
        raise MapFormatError(f"trailing data: {len(buf) - off} unexpected bytes after {count} records")
    try:
        return MapDatabase(tuple(nodes))
    except MapError as exc:
        raise MapFormatError(str(exc)) from None


def save(db: MapDatabase, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, database_to_bytes(db))


def load(path: str | os.PathLike) -> MapDatabase:
    with open(path, "rb") as fh:
        return database_from_bytes(fh.read())
