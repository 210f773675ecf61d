"""Weighted feature matching over a pose cost volume.

Map keypoints are projected into the online descriptor map under every
candidate offset of a regular (dx, dy, dpsi) grid around the prior pose. The
descriptor distance at each projection forms a keypoints x n_x x n_y x n_psi
volume, which is regularised node-by-node, averaged over keypoints and turned
into per-axis probability distributions whose means give the offset.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from enum import Enum

import numba
import numpy as np

from attnloc.features import DenseFeatureLevel, atomic_write_bytes
from attnloc.geometry import DEPTH_MIN, CameraModel, Pose3, PoseSE2Offset, rot_z
from attnloc.mapdb import KeypointSet, MapNode


class MatchingError(RuntimeError):
    pass


class Marginalization(str, Enum):
    REDUCE_AVERAGE = "reduce"
    WEIGHTED_AVERAGE = "weighted"


class Collapse(str, Enum):
    """How the (x, y, psi) cost grid becomes three 1-D distributions.

    JOINT: softmax over the full grid, then sum out the other two axes.
    AVERAGE: average costs over the other two axes, then softmax per axis.
    """

    JOINT = "joint"
    AVERAGE = "average"


@dataclass(frozen=True)
class CostVolumeConfig:
    n_x: int = 11
    n_y: int = 11
    n_psi: int = 11
    step_x: float = 0.05
    step_y: float = 0.05
    step_psi: float = math.radians(0.05)

    def __post_init__(self):
        for name in ("n_x", "n_y", "n_psi"):
            n = getattr(self, name)
            if n < 3 or n % 2 == 0:
                raise ValueError(f"{name}={n} must be odd and >= 3")
        for name in ("step_x", "step_y", "step_psi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.n_x, self.n_y, self.n_psi

    def axis_nodes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        def nodes(n, step):
            return (np.arange(n) - (n - 1) // 2) * step

        return nodes(self.n_x, self.step_x), nodes(self.n_y, self.step_y), nodes(self.n_psi, self.step_psi)


DEFAULT_GRIDS = {
    8: CostVolumeConfig(11, 11, 11, 0.5, 0.5, math.radians(0.4)),
    4: CostVolumeConfig(11, 11, 11, 0.25, 0.25, math.radians(0.2)),
    2: CostVolumeConfig(11, 11, 11, 0.05, 0.05, math.radians(0.05)),
}


@dataclass(frozen=True, eq=False)
class CostVolume:
    raw: np.ndarray  # (N_s, n_x, n_y, n_psi); 0 where invalid
    valid_mask: np.ndarray  # same shape, bool
    cfg: CostVolumeConfig

    def __post_init__(self):
        if self.raw.shape != self.valid_mask.shape or self.raw.ndim != 4:
            raise MatchingError("cost volume and mask shapes differ")
        if self.raw.shape[0] < 1:
            raise MatchingError("cost volume has no keypoints")

    @property
    def n_keypoints(self) -> int:
        return self.raw.shape[0]


def _keypoints_for(node, scale: int) -> KeypointSet:
    if isinstance(node, MapNode):
        return node.level(scale)
    return node


def _grid_terms(world: np.ndarray, prior: Pose3, cam: CameraModel, cfg: CostVolumeConfig):
    """Split camera-frame coordinates into a per-(psi, keypoint) and a per-(psi, x, y) term.

    Camera coordinates of keypoint n under node (i, j, k) are
    ``A[k, n] - B[k, i, j]``; the vehicle pose of node (i, j, k) equals
    ``apply_offset(prior, (dx_i, dy_j, dpsi_k))``.
    """
    xs, ys, psis = cfg.axis_nodes()
    R0 = prior.rotation
    t0 = prior.position
    R_ext = cam.extrinsic.rotation
    t_ext = cam.extrinsic.position
    H0 = rot_z(prior.heading)

    Rz = np.stack([rot_z(p) for p in psis])  # (k, 3, 3)
    R_veh = Rz @ R0
    R_cam = R_veh @ R_ext
    mount = R_veh @ t_ext  # (k, 3)
    rel = np.asarray(world, dtype=np.float64)[None, :, :] - t0 - mount[:, None, :]  # (k, N, 3)
    A = np.einsum("kba,knb->kna", R_cam, rel)  # R_cam^T rel
    d = np.zeros((len(xs), len(ys), 3))
    d[..., 0] = xs[:, None]
    d[..., 1] = ys[None, :]
    shift = d @ H0.T  # (i, j, 3) world displacement
    B = np.einsum("kba,ijb->kija", R_cam, shift)
    return np.ascontiguousarray(A), np.ascontiguousarray(B)


def project_grid(
    world: np.ndarray, prior: Pose3, cam: CameraModel, cfg: CostVolumeConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Camera-frame ``(X, Y, Z)`` of ``world`` (N, 3), each shaped (N, n_x, n_y, n_psi)."""
    A, B = _grid_terms(world, prior, cam, cfg)
    P = A.transpose(1, 0, 2)[:, None, None, :, :] - B.transpose(1, 2, 0, 3)[None]
    return P[..., 0], P[..., 1], P[..., 2]


@numba.njit(cache=True, nogil=True)
def _cost_kernel(A, B, ref, grid, fx, fy, cx, cy, depth_min, raw, valid):  # pragma: no cover - jitted
    n_psi, n_kp = A.shape[0], A.shape[1]
    n_x, n_y = B.shape[1], B.shape[2]
    h, w, dim = grid.shape
    for n in range(n_kp):
        for i in range(n_x):
            for j in range(n_y):
                for k in range(n_psi):
                    X = A[k, n, 0] - B[k, i, j, 0]
                    Y = A[k, n, 1] - B[k, i, j, 1]
                    Z = A[k, n, 2] - B[k, i, j, 2]
                    if not Z > depth_min:
                        continue
                    u = fx * X / Z + cx
                    v = fy * Y / Z + cy
                    if not (u >= 0.0 and u <= w - 1 and v >= 0.0 and v <= h - 1):
                        continue
                    i0 = min(int(u), max(w - 2, 0))
                    j0 = min(int(v), max(h - 2, 0))
                    i1 = min(i0 + 1, w - 1)
                    j1 = min(j0 + 1, h - 1)
                    a = u - i0
                    b = v - j0
                    acc = 0.0
                    for c in range(dim):
                        s = (
                            (1 - a) * (1 - b) * grid[j0, i0, c]
                            + a * (1 - b) * grid[j0, i1, c]
                            + (1 - a) * b * grid[j1, i0, c]
                            + a * b * grid[j1, i1, c]
                        )
                        diff = ref[n, c] - s
                        acc += diff * diff
                    raw[n, i, j, k] = np.sqrt(acc)
                    valid[n, i, j, k] = True


def build_cost_volume(
    node, level: DenseFeatureLevel, prior: Pose3, cam: CameraModel, cfg: CostVolumeConfig
) -> CostVolume:
    """Descriptor L2 distance of every keypoint under every candidate offset.

    ``node`` may be a :class:`MapNode` (its keypoints at ``level.scale_s`` are
    used) or a :class:`KeypointSet`. Entries whose projection is behind the
    camera or outside the level are left at 0 and masked invalid.
    """
    kps = _keypoints_for(node, level.scale_s)
    if len(kps) == 0:
        raise MatchingError(f"no keypoints at scale {level.scale_s}")
    A, B = _grid_terms(kps.world, prior, cam, cfg)
    fx, fy, cx, cy = cam.intrinsics_at(level.scale_s)
    shape = (len(kps),) + cfg.shape
    raw = np.zeros(shape)
    valid = np.zeros(shape, dtype=np.bool_)
    ref = np.ascontiguousarray(kps.descriptors, dtype=np.float64)
    _cost_kernel(A, B, ref, level.descriptors, fx, fy, cx, cy, DEPTH_MIN, raw, valid)
    return CostVolume(raw, valid, cfg)


# ---------------------------------------------------------------------------
# per-node regulariser (1x1x1 convolutions == a scalar MLP at every node)
# ---------------------------------------------------------------------------

REGULARIZER_MAGIC = b"ALRW"
REGULARIZER_VERSION = 1
LEAKY_SLOPE = 0.1


@numba.njit(cache=True, nogil=True)
def _mlp_kernel(c, w1, b1, w2, b2, w3, b3, slope, out):  # pragma: no cover - jitted
    h1 = np.empty(8)
    for m in range(c.shape[0]):
        for a in range(8):
            z = w1[a] * c[m] + b1[a]
            h1[a] = z if z >= 0 else slope * z
        acc = b3[0]
        for a in range(8):
            z = b2[a]
            for b in range(8):
                z += w2[a, b] * h1[b]
            acc += w3[a] * (z if z >= 0 else slope * z)
        out[m] = acc


@dataclass(frozen=True, eq=False)
class RegularizerWeights:
    """Three affine layers 1->8->8->1, leaky rectifier after the first two."""

    w1: np.ndarray  # (8, 1)
    b1: np.ndarray  # (8,)
    w2: np.ndarray  # (8, 8)
    b2: np.ndarray  # (8,)
    w3: np.ndarray  # (1, 8)
    b3: np.ndarray  # (1,)

    def __post_init__(self):
        shapes = {"w1": (8, 1), "b1": (8,), "w2": (8, 8), "b2": (8,), "w3": (1, 8), "b3": (1,)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float32).reshape(shape)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"regularizer parameter {name} is not finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def identity(cls) -> RegularizerWeights:
        """Weights that pass non-negative costs through unchanged."""
        w1 = np.zeros((8, 1))
        w1[0, 0] = 1.0
        w3 = np.zeros((1, 8))
        w3[0, 0] = 1.0
        return cls(w1, np.zeros(8), np.eye(8), np.zeros(8), w3, np.zeros(1))

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = 0.5) -> RegularizerWeights:
        return cls(
            rng.normal(0, scale, (8, 1)),
            rng.normal(0, scale, 8),
            rng.normal(0, scale, (8, 8)),
            rng.normal(0, scale, 8),
            rng.normal(0, scale, (1, 8)),
            rng.normal(0, scale, 1),
        )

    def layers(self):
        return [(self.w1, self.b1), (self.w2, self.b2), (self.w3, self.b3)]

    def is_identity(self) -> bool:
        """True for the pass-through weights of :meth:`identity`."""
        return self == RegularizerWeights.identity()

    def apply(self, costs: np.ndarray) -> np.ndarray:
        """Evaluate the per-node network on every element of ``costs``."""
        c = np.ascontiguousarray(costs, dtype=np.float64)
        out = np.empty_like(c)
        f64 = [np.ascontiguousarray(a, dtype=np.float64) for a in (self.w1[:, 0], self.b1, self.w2, self.b2, self.w3[0], self.b3)]
        _mlp_kernel(c.reshape(-1), *f64, LEAKY_SLOPE, out.reshape(-1))
        return out

    def __eq__(self, other):
        if not isinstance(other, RegularizerWeights):
            return NotImplemented
        return all(np.array_equal(a, b) for (a, _), (b, _) in zip(self.layers(), other.layers())) and all(
            np.array_equal(a, b) for (_, a), (_, b) in zip(self.layers(), other.layers())
        )


def regularize(vol: CostVolume, w: RegularizerWeights) -> CostVolume:
    """Apply the per-node network to every valid cost; invalid entries stay 0."""
    if w.is_identity():
        # non-negative distances pass through the identity network unchanged
        return vol
    out = np.zeros_like(vol.raw)
    if vol.valid_mask.any():
        out[vol.valid_mask] = w.apply(vol.raw[vol.valid_mask])
    return CostVolume(out, vol.valid_mask, vol.cfg)


def regularizer_to_bytes(w: RegularizerWeights) -> bytes:
    parts = [struct.pack("<4sHH", REGULARIZER_MAGIC, REGULARIZER_VERSION, 3)]
    for W, b in w.layers():
        out_dim, in_dim = W.shape
        parts.append(struct.pack("<HH", in_dim, out_dim))
        parts.append(W.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    return b"".join(parts)


def regularizer_from_bytes(buf: bytes) -> RegularizerWeights:
    if len(buf) < 8:
        raise ValueError("regularizer header truncated")
    magic, version, n_layers = struct.unpack_from("<4sHH", buf, 0)
    if magic != REGULARIZER_MAGIC:
        raise ValueError(f"regularizer magic: expected {REGULARIZER_MAGIC!r}, found {magic!r}")
    if version != REGULARIZER_VERSION:
        raise ValueError(f"regularizer version {version} unsupported")
    expect = [(1, 8), (8, 8), (8, 1)]
    if n_layers != len(expect):
        raise ValueError(f"regularizer has {n_layers} layers, expected 3")
    off = 8
    params = []
    for idx, (i_want, o_want) in enumerate(expect):
        if off + 4 > len(buf):
            raise ValueError(f"layer {idx}: header truncated")
        in_dim, out_dim = struct.unpack_from("<HH", buf, off)
        off += 4
        if (in_dim, out_dim) != (i_want, o_want):
            raise ValueError(f"layer {idx}: dims {in_dim}->{out_dim}, expected {i_want}->{o_want}")
        n = out_dim * in_dim + out_dim
        if off + 4 * n > len(buf):
            raise ValueError(f"layer {idx}: parameters truncated")
        vals = np.frombuffer(buf, dtype="<f4", count=n, offset=off)
        off += 4 * n
        params += [vals[: out_dim * in_dim].reshape(out_dim, in_dim), vals[out_dim * in_dim :]]
    if off != len(buf):
        raise ValueError("regularizer file has trailing data")
    return RegularizerWeights(*params)


def save_regularizer(w: RegularizerWeights, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, regularizer_to_bytes(w))


def load_regularizer(path: str | os.PathLike) -> RegularizerWeights:
    with open(path, "rb") as fh:
        return regularizer_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# marginalisation and probability head
# ---------------------------------------------------------------------------


def marginalize(vol: CostVolume, weights, mode: Marginalization | str = Marginalization.REDUCE_AVERAGE) -> np.ndarray:
    """Collapse the keypoint axis; nodes without any valid keypoint become NaN."""
    mode = Marginalization(mode)
    mask = vol.valid_mask
    c = np.where(mask, vol.raw, 0.0)
    if mode is Marginalization.REDUCE_AVERAGE:
        num = c.sum(axis=0)
        den = mask.sum(axis=0).astype(np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if len(w) != vol.n_keypoints:
            raise MatchingError(f"{len(w)} weights for {vol.n_keypoints} keypoints")
        wm = np.where(mask, w[:, None, None, None], 0.0)
        num = (wm * c).sum(axis=0)
        den = wm.sum(axis=0)
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


@dataclass(frozen=True, eq=False)
class AxisDistribution:
    nodes: np.ndarray
    probs: np.ndarray
    mean: float
    variance: float


@dataclass(frozen=True, eq=False)
class MarginalDistributions:
    x: AxisDistribution
    y: AxisDistribution
    psi: AxisDistribution
    available_nodes: int = field(default=0)

    @property
    def axes(self) -> tuple[AxisDistribution, AxisDistribution, AxisDistribution]:
        return self.x, self.y, self.psi

    @property
    def offset(self) -> PoseSE2Offset:
        return PoseSE2Offset(self.x.mean, self.y.mean, self.psi.mean)

    @property
    def variances(self) -> tuple[float, float, float]:
        return self.x.variance, self.y.variance, self.psi.variance


def _axis(nodes: np.ndarray, p: np.ndarray) -> AxisDistribution:
    p = p / p.sum()
    mean = float(np.dot(p, nodes))
    var = float(np.dot(p, (nodes - mean) ** 2))
    return AxisDistribution(nodes, p, mean, var)


def _softmax_neg(costs: np.ndarray, temperature: float) -> np.ndarray:
    ok = np.isfinite(costs)
    z = np.where(ok, -costs / temperature, -np.inf)
    z = z - z[ok].max()
    return np.where(ok, np.exp(z), 0.0)


def marginal_distributions(
    costs: np.ndarray,
    cfg: CostVolumeConfig,
    temperature: float = 0.02,
    collapse: Collapse | str = Collapse.JOINT,
) -> MarginalDistributions:
    """Per-axis offset distributions from a marginalised cost grid (soft-argmax)."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    costs = np.asarray(costs, dtype=np.float64)
    if costs.shape != cfg.shape:
        raise MatchingError(f"cost grid {costs.shape} does not match config {cfg.shape}")
    ok = np.isfinite(costs)
    if not ok.any():
        raise MatchingError("no available node in cost volume")
    xs, ys, psis = cfg.axis_nodes()
    if Collapse(collapse) is Collapse.JOINT:
        p = _softmax_neg(costs, temperature)
        px, py, ppsi = p.sum(axis=(1, 2)), p.sum(axis=(0, 2)), p.sum(axis=(0, 1))
    else:
        px, py, ppsi = (
            _softmax_neg(_nanmean_keep(costs, axes), temperature) for axes in ((1, 2), (0, 2), (0, 1))
        )
    return MarginalDistributions(_axis(xs, px), _axis(ys, py), _axis(psis, ppsi), int(ok.sum()))


def _nanmean_keep(costs: np.ndarray, axes) -> np.ndarray:
    ok = np.isfinite(costs)
    s = np.where(ok, costs, 0.0).sum(axis=axes)
    n = ok.sum(axis=axes)
    out = np.full(s.shape, np.nan)
    out[n > 0] = s[n > 0] / n[n > 0]
    return out


def availability(m: MarginalDistributions, thresholds) -> bool:
    """True when every axis variance is at or below its threshold."""
    return all(var <= thr for var, thr in zip(m.variances, thresholds))


def default_thresholds(fine: CostVolumeConfig) -> tuple[float, float, float]:
    return (2 * fine.step_x) ** 2, (2 * fine.step_y) ** 2, (2 * fine.step_psi) ** 2
