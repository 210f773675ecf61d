"""Dense descriptor maps and attention heatmaps at scales 2, 4 and 8.

Level coordinates are image pixels divided by the scale, so cell ``(i, j)``
of a level sits at image pixel ``(i * s, j * s)``.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from enum import Enum

import numpy as np

SCALES = (2, 4, 8)
DESCRIPTOR_DIM = 8
PYRAMID_MAGIC = b"ALFP"
PYRAMID_VERSION = 1
MIN_IMAGE_SIZE = 16
_HEATMAP_SLACK = 1e-6


class FeatureError(ValueError):
    """Invalid image or feature tensor."""


class FormatError(FeatureError):
    """A pyramid file could not be decoded."""


@dataclass(frozen=True, eq=False)
class DenseFeatureLevel:
    scale_s: int
    descriptors: np.ndarray  # (height_s, width_s, D) float32
    heatmap: np.ndarray  # (height_s, width_s) float32 in [0, 1]

    def __post_init__(self):
        desc = np.ascontiguousarray(self.descriptors, dtype=np.float32)
        heat = np.ascontiguousarray(self.heatmap, dtype=np.float32)
        if desc.ndim != 3 or heat.shape != desc.shape[:2]:
            raise FeatureError(f"level s={self.scale_s}: descriptor {desc.shape} / heatmap {heat.shape} mismatch")
        if desc.shape[0] == 0 or desc.shape[1] == 0:
            raise FeatureError(f"level s={self.scale_s} is empty")
        desc.setflags(write=False)
        heat.setflags(write=False)
        object.__setattr__(self, "descriptors", desc)
        object.__setattr__(self, "heatmap", heat)

    @property
    def width_s(self) -> int:
        return self.descriptors.shape[1]

    @property
    def height_s(self) -> int:
        return self.descriptors.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[2]

    def validate(self) -> None:
        if self.scale_s not in SCALES:
            raise FeatureError(f"scale {self.scale_s} not in {SCALES}")
        if not np.all(np.isfinite(self.descriptors)):
            raise FeatureError(f"level s={self.scale_s}: non-finite descriptor")
        bad = np.argwhere(~((self.heatmap >= -_HEATMAP_SLACK) & (self.heatmap <= 1 + _HEATMAP_SLACK)))
        if len(bad):
            v, u = bad[0]
            raise FeatureError(
                f"level s={self.scale_s}: heatmap[{v}][{u}] = {float(self.heatmap[v, u])!r} outside [0, 1]"
            )

    def __eq__(self, other):
        if not isinstance(other, DenseFeatureLevel):
            return NotImplemented
        return (
            self.scale_s == other.scale_s
            and np.array_equal(self.descriptors, other.descriptors)
            and np.array_equal(self.heatmap, other.heatmap)
        )


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    image_width: int
    image_height: int
    levels: tuple[DenseFeatureLevel, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        scales = tuple(lv.scale_s for lv in self.levels)
        if scales != SCALES:
            raise FeatureError(f"pyramid scales {scales} != {SCALES}")
        for lv in self.levels:
            want = (self.image_height // lv.scale_s, self.image_width // lv.scale_s)
            if (lv.height_s, lv.width_s) != want:
                raise FeatureError(
                    f"level s={lv.scale_s} is {lv.height_s}x{lv.width_s}, expected {want[0]}x{want[1]}"
                )

    def level(self, scale: int) -> DenseFeatureLevel:
        return self.levels[SCALES.index(scale)]

    def __eq__(self, other):
        if not isinstance(other, FeaturePyramid):
            return NotImplemented
        return (
            self.image_width == other.image_width
            and self.image_height == other.image_height
            and all(a == b for a, b in zip(self.levels, other.levels))
        )


class ExtractorChoice(str, Enum):
    GRADIENT = "gradient"


# ---------------------------------------------------------------------------
# stand-in extractor
# ---------------------------------------------------------------------------


def _to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] == 1:
            img = img[..., 0]
        else:
            img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    if img.ndim != 2:
        raise FeatureError(f"unsupported image shape {np.shape(image)}")
    if img.size and img.max() > 1.0:
        img = img / 255.0
    return img


def _cell_windows(field: np.ndarray, s: int, n_rows: int, n_cols: int) -> np.ndarray:
    # Patch of cell (j, i): pixels [i*s - s/2 - 1, i*s + s/2 + 1] in each axis.
    pad = s // 2 + 1
    padded = np.pad(field, pad, mode="edge")
    k = s + 3
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k))[::s, ::s]
    return win[:n_rows, :n_cols]


def extract_pyramid(image: np.ndarray, extractor: ExtractorChoice | str = ExtractorChoice.GRADIENT) -> FeaturePyramid:
    """Deterministic hand-crafted stand-in for a learned descriptor/heatmap network.

    Per cell the descriptor is (mean intensity, mean horizontal, vertical and
    two diagonal gradient responses, intensity std, mean gradient magnitude,
    intensity range) over the cell's patch, L2-normalised. The heatmap is the
    mean squared gradient magnitude over the patch, divided by its per-level
    maximum.
    """
    ExtractorChoice(extractor)
    img = _to_gray(image)
    h, w = img.shape
    if h < MIN_IMAGE_SIZE or w < MIN_IMAGE_SIZE:
        raise FeatureError(f"image {w}x{h} smaller than {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}")

    gy, gx = np.gradient(img)
    p = np.pad(img, 1, mode="edge")
    d1 = (p[2:, 2:] - p[:-2, :-2]) / (2 * np.sqrt(2))
    d2 = (p[:-2, 2:] - p[2:, :-2]) / (2 * np.sqrt(2))
    energy = gx * gx + gy * gy
    mag = np.sqrt(energy)

    levels = []
    for s in SCALES:
        hs, ws = h // s, w // s
        stats = [_cell_windows(f, s, hs, ws).mean(axis=(-2, -1)) for f in (img, gx, gy, d1, d2)]
        wins = _cell_windows(img, s, hs, ws)
        stats.append(wins.std(axis=(-2, -1)))
        stats.append(_cell_windows(mag, s, hs, ws).mean(axis=(-2, -1)))
        stats.append(wins.max(axis=(-2, -1)) - wins.min(axis=(-2, -1)))
        desc = np.stack(stats, axis=-1)
        norm = np.linalg.norm(desc, axis=-1, keepdims=True)
        desc = np.divide(desc, norm, out=np.zeros_like(desc), where=norm > 0)

        heat = _cell_windows(energy, s, hs, ws).mean(axis=(-2, -1))
        peak = heat.max()
        heat = heat / peak if peak > 0 else np.zeros_like(heat)
        levels.append(DenseFeatureLevel(s, desc, np.clip(heat, 0.0, 1.0)))
    return FeaturePyramid(w, h, tuple(levels))


# ---------------------------------------------------------------------------
# tensor files
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHII")
_LEVEL_HEADER = struct.Struct("<BIIB")


def pyramid_to_bytes(p: FeaturePyramid) -> bytes:
    parts = [_HEADER.pack(PYRAMID_MAGIC, PYRAMID_VERSION, p.image_width, p.image_height)]
    for lv in p.levels:
        if lv.descriptors.size == 0:
            raise FeatureError(f"level s={lv.scale_s} is empty")
        parts.append(_LEVEL_HEADER.pack(lv.scale_s, lv.width_s, lv.height_s, lv.dim))
        parts.append(lv.descriptors.astype("<f4", copy=False).tobytes())
        parts.append(lv.heatmap.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def pyramid_from_bytes(buf: bytes) -> FeaturePyramid:
    if len(buf) < _HEADER.size:
        raise FormatError("header: file truncated")
    magic, version, width, height = _HEADER.unpack_from(buf, 0)
    if magic != PYRAMID_MAGIC:
        raise FormatError(f"magic: expected {PYRAMID_MAGIC!r}, found {magic!r}")
    if version != PYRAMID_VERSION:
        raise FormatError(f"version: unsupported {version}")
    off = _HEADER.size
    levels = []
    for idx, expect_scale in enumerate(SCALES):
        if off + _LEVEL_HEADER.size > len(buf):
            raise FormatError(f"level {idx}: header truncated")
        scale, ws, hs, dim = _LEVEL_HEADER.unpack_from(buf, off)
        off += _LEVEL_HEADER.size
        if scale != expect_scale:
            raise FormatError(f"level {idx}: scale {scale}, expected {expect_scale}")
        if (ws, hs) != (width // scale, height // scale):
            raise FormatError(
                f"level {idx}: dimensions {ws}x{hs} inconsistent with image {width}x{height} at scale {scale}"
            )
        if dim != DESCRIPTOR_DIM:
            raise FormatError(f"level {idx}: descriptor dimension {dim}, expected {DESCRIPTOR_DIM}")
        n_desc = hs * ws * dim * 4
        n_heat = hs * ws * 4
        if off + n_desc + n_heat > len(buf):
            raise FormatError(f"level {idx}: tensor data truncated")
        desc = np.frombuffer(buf, dtype="<f4", count=hs * ws * dim, offset=off).reshape(hs, ws, dim)
        off += n_desc
        heat = np.frombuffer(buf, dtype="<f4", count=hs * ws, offset=off).reshape(hs, ws)
        off += n_heat
        try:
            level = DenseFeatureLevel(scale, desc.astype(np.float32), heat.astype(np.float32))
            level.validate()
        except FeatureError as exc:
            raise FormatError(f"level {idx}: {exc}") from None
        levels.append(level)
    if off != len(buf):
        raise FormatError(f"trailing data: {len(buf) - off} unexpected bytes")
    return FeaturePyramid(width, height, tuple(levels))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to ``path`` through a temp file + rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def export_pyramid(p: FeaturePyramid, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, pyramid_to_bytes(p))


def import_pyramid(path: str | os.PathLike) -> FeaturePyramid:
    with open(path, "rb") as fh:
        return pyramid_from_bytes(fh.read())
