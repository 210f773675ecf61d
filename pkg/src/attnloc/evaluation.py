"""Error decomposition, summary metrics and the CSV/JSON formats around them."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from attnloc.geometry import Pose3, PoseSE2Offset, wrap_angle

HORIZONTAL_THRESHOLDS = (0.1, 0.2, 0.3)  # meters
YAW_THRESHOLDS = (0.1, 0.3, 0.6)  # degrees

TRAJECTORY_HEADER = ["timestamp", "x", "y", "z", "qw", "qx", "qy", "qz"]
MOTION_HEADER = ["timestamp", "dx", "dy", "dpsi"]
RESULTS_HEADER = ["timestamp", "available", "horizontal", "longitudinal", "lateral", "yaw_deg"]


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorRecord:
    horizontal: float
    longitudinal: float  # along the ground-truth heading
    lateral: float  # positive to the left of the heading
    yaw: float  # degrees, wrapped
    available: bool = True
    timestamp: float = 0.0


def decompose_error(est: Pose3, gt: Pose3, available: bool = True, timestamp: float = 0.0) -> ErrorRecord:
    """Planar error of ``est`` expressed in the ground-truth heading frame."""
    dx = float(est.position[0] - gt.position[0])
    dy = float(est.position[1] - gt.position[1])
    h = gt.heading
    c, s = math.cos(h), math.sin(h)
    lon = c * dx + s * dy
    lat = -s * dx + c * dy
    yaw = math.degrees(wrap_angle(est.heading - h))
    return ErrorRecord(math.hypot(dx, dy), lon, lat, yaw, bool(available), float(timestamp))


@dataclass(frozen=True)
class MetricsSummary:
    frames: int
    available_frames: int
    available_percent: float
    na_percent: float
    # the remaining fields are None when no frame is available
    rms_horizontal: float | None = None
    max_horizontal: float | None = None
    rms_longitudinal: float | None = None
    max_longitudinal: float | None = None
    rms_lateral: float | None = None
    max_lateral: float | None = None
    rms_yaw: float | None = None
    max_yaw: float | None = None
    horizontal_within: dict | None = None  # threshold -> percent of available frames
    yaw_within: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("horizontal_within", "yaw_within"):
            if d[key] is not None:
                d[key] = {repr(float(k)): v for k, v in d[key].items()}
        return d

    def table(self) -> str:
        lines = [f"frames {self.frames}  available {self.available_percent:.1f}%  N/A {self.na_percent:.1f}%"]
        if self.rms_horizontal is None:
            lines.append("no available frames")
            return "\n".join(lines)
        lines.append(f"{'':12s}{'RMS':>10s}{'max':>10s}")
        for name, rms, mx, unit in (
            ("horizontal", self.rms_horizontal, self.max_horizontal, "m"),
            ("longitudinal", self.rms_longitudinal, self.max_longitudinal, "m"),
            ("lateral", self.rms_lateral, self.max_lateral, "m"),
            ("yaw", self.rms_yaw, self.max_yaw, "deg"),
        ):
            lines.append(f"{name:12s}{rms:10.4f}{mx:10.4f} {unit}")
        lines.append("horizontal < " + "  ".join(f"{k} m: {v:.1f}%" for k, v in self.horizontal_within.items()))
        lines.append("yaw < " + "  ".join(f"{k} deg: {v:.1f}%" for k, v in self.yaw_within.items()))
        return "\n".join(lines)


def _rms(a: np.ndarray) -> float:
    return float(np.sqrt(np.mean(a * a)))


def _within(a: np.ndarray, thresholds) -> dict:
    return {t: 100.0 * float(np.count_nonzero(a < t)) / len(a) for t in thresholds}


def summarize(records) -> MetricsSummary:
    """Metrics over available frames; unavailable frames only enter the N/A ratio."""
    records = list(records)
    if not records:
        raise EvaluationError("no records to summarize")
    ok = [r for r in records if r.available]
    avail = 100.0 * len(ok) / len(records)
    base = dict(frames=len(records), available_frames=len(ok), available_percent=avail, na_percent=100.0 - avail)
    if not ok:
        return MetricsSummary(**base)
    h = np.abs([r.horizontal for r in ok])
    lon = np.abs([r.longitudinal for r in ok])
    lat = np.abs([r.lateral for r in ok])
    yaw = np.abs([r.yaw for r in ok])
    return MetricsSummary(
        **base,
        rms_horizontal=_rms(h),
        max_horizontal=float(h.max()),
        rms_longitudinal=_rms(lon),
        max_longitudinal=float(lon.max()),
        rms_lateral=_rms(lat),
        max_lateral=float(lat.max()),
        rms_yaw=_rms(yaw),
        max_yaw=float(yaw.max()),
        horizontal_within=_within(h, HORIZONTAL_THRESHOLDS),
        yaw_within=_within(yaw, YAW_THRESHOLDS),
    )


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _read_rows(path, header: list[str]) -> list[list[float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise EvaluationError(f"{path}: empty file") from None
        if [c.strip() for c in first] != header:
            raise EvaluationError(f"{path}: expected header {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise EvaluationError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise EvaluationError(f"{path}:{lineno}: {exc}") from None
    return rows


def read_trajectory(path) -> list[tuple[float, Pose3]]:
    out = []
    for t, x, y, z, qw, qx, qy, qz in _read_rows(path, TRAJECTORY_HEADER):
        q = np.array([qw, qx, qy, qz])
        out.append((t, Pose3((x, y, z), q / np.linalg.norm(q))))
    return out


def write_trajectory(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        for t, pose in rows:
            w.writerow([repr(float(t))] + [repr(float(v)) for v in (*pose.position, *pose.quaternion)])


def read_motion(path) -> list[tuple[float, PoseSE2Offset]]:
    return [(t, PoseSE2Offset(dx, dy, dpsi)) for t, dx, dy, dpsi in _read_rows(path, MOTION_HEADER)]


def write_motion(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MOTION_HEADER)
        for t, o in rows:
            w.writerow([repr(float(t)), repr(o.dx), repr(o.dy), repr(o.dpsi)])


def write_results(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULTS_HEADER)
        for r in records:
            w.writerow([repr(r.timestamp), int(r.available), repr(r.horizontal), repr(r.longitudinal), repr(r.lateral), repr(r.yaw)])


def read_results(path) -> list[ErrorRecord]:
    return [
        ErrorRecord(h, lon, lat, yaw, bool(avail), t) for t, avail, h, lon, lat, yaw in _read_rows(path, RESULTS_HEADER)
    ]


def write_summary(path, summary: MetricsSummary) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w") as fh:
        json.dump(summary.to_dict(), fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)
