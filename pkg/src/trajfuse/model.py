"""Domain types shared by every pipeline stage.

Trajectories are stored column-wise (one numpy array per channel) because
every stage works on whole channels at once.  ``Trajectory.states`` gives
the row view as :class:`OrientedBoxState` values when that is handier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

MV_CLASSES = ("car", "tricycle", "van", "truck", "bus", "trailer")
VRU_CLASSES = ("pedestrian", "moped")
CLASSES = MV_CLASSES + VRU_CLASSES


def normalize_angle(a):
    """Wrap angle(s) to [-pi, pi)."""
    out = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    if np.ndim(out) == 0:
        return float(out)
    return out


def angle_diff(a, b):
    """Signed smallest difference ``a - b`` wrapped to [-pi, pi)."""
    return normalize_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


def class_group(cls: str) -> str:
    if cls in MV_CLASSES:
        return "MV"
    if cls in VRU_CLASSES:
        return "VRU"
    raise ValueError(f"unknown class {cls!r}")


@dataclass(frozen=True)
class OrientedBoxState:
    frame_index: int
    time_s: float
    center: tuple[float, float]
    length: float
    width: float
    yaw_rad: float
    heading_rad: float = 0.0
    speed: float = 0.0
    accel: float = 0.0
    confidence: float | None = None
    interpolated: bool = False

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("box dimensions must be positive")
        object.__setattr__(self, "yaw_rad", normalize_angle(self.yaw_rad))
        object.__setattr__(self, "heading_rad", normalize_angle(self.heading_rad))


# Channel name -> dtype.  ``confidence`` is NaN where absent (interpolated).
CHANNELS = {
    "frame": np.int64,
    "x": float,
    "y": float,
    "length": float,
    "width": float,
    "yaw": float,
    "heading": float,
    "speed": float,
    "accel": float,
    "confidence": float,
    "interpolated": bool,
}

# Raw pixel observations carried through for provenance, NaN where absent.
PIXEL_CHANNELS = ("px_x", "px_y", "px_length", "px_width", "px_yaw")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One tracked object; immutable once built.

    Use :meth:`from_arrays` rather than the constructor so arrays are
    validated, copied and frozen.
    """

    track_id: int
    cls: str
    frame_rate_hz: float
    frame: np.ndarray
    x: np.ndarray
    y: np.ndarray
    length: np.ndarray
    width: np.ndarray
    yaw: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    accel: np.ndarray
    confidence: np.ndarray
    interpolated: np.ndarray
    pixel: Mapping[str, np.ndarray] | None = None
    notes: tuple[str, ...] = ()

    @classmethod
    def from_arrays(cls, track_id, cls_name, frame_rate_hz, frame, x, y, length,
                    width, yaw, heading=None, speed=None, accel=None,
                    confidence=None, interpolated=None, pixel=None, notes=()):
        n = len(frame)
        zeros = np.zeros(n)
        cols = {
            "frame": np.asarray(frame, dtype=np.int64),
            "x": np.asarray(x, dtype=float),
            "y": np.asarray(y, dtype=float),
            "length": np.asarray(length, dtype=float),
            "width": np.asarray(width, dtype=float),
            "yaw": normalize_angle(np.asarray(yaw, dtype=float)).reshape(n),
            "heading": zeros if heading is None else normalize_angle(np.asarray(heading, dtype=float)).reshape(n),
            "speed": zeros if speed is None else np.asarray(speed, dtype=float),
            "accel": zeros if accel is None else np.asarray(accel, dtype=float),
            "confidence": np.full(n, np.nan) if confidence is None
            else np.asarray(confidence, dtype=float),
            "interpolated": np.zeros(n, bool) if interpolated is None
            else np.asarray(interpolated, dtype=bool),
        }
        for name, arr in cols.items():
            if arr.shape != (n,):
                raise ValueError(f"track {track_id}: channel {name} has shape {arr.shape}, expected ({n},)")
        if n > 1 and np.any(np.diff(cols["frame"]) <= 0):
            raise ValueError(f"track {track_id}: frames not strictly increasing")
        if n and not (np.all(cols["length"] > 0) and np.all(cols["width"] > 0)):
            raise ValueError(f"track {track_id}: box dimensions must be positive")
        class_group(cls_name)
        px = None
        if pixel is not None:
            px = {k: _frozen(np.asarray(pixel[k], dtype=float)) for k in PIXEL_CHANNELS}
        frozen = {k: _frozen(np.array(v, copy=True)) for k, v in cols.items()}
        return cls(int(track_id), cls_name, float(frame_rate_hz), pixel=px,
                   notes=tuple(notes), **frozen)

    def replace(self, **changes) -> "Trajectory":
        """Copy with some channels replaced (re-validated)."""
        data = {k: getattr(self, k) for k in CHANNELS}
        data.update({k: v for k, v in changes.items() if k in CHANNELS})
        extra = {k: v for k, v in changes.items() if k not in CHANNELS}
        unknown = set(extra) - {"track_id", "cls", "pixel", "notes", "frame_rate_hz"}
        if unknown:
            raise TypeError(f"unknown fields {sorted(unknown)}")
        return Trajectory.from_arrays(
            extra.get("track_id", self.track_id), extra.get("cls", self.cls),
            extra.get("frame_rate_hz", self.frame_rate_hz),
            pixel=extra.get("pixel", self.pixel), notes=extra.get("notes", self.notes),
            **data)

    def take(self, idx) -> "Trajectory":
        """Sub-trajectory from an index array or slice."""
        data = {k: getattr(self, k)[idx] for k in CHANNELS}
        px = None if self.pixel is None else {k: v[idx] for k, v in self.pixel.items()}
        return Trajectory.from_arrays(self.track_id, self.cls, self.frame_rate_hz,
                                      pixel=px, notes=self.notes, **data)

    def __len__(self):
        return len(self.frame)

    @property
    def class_group(self) -> str:
        return class_group(self.cls)

    @property
    def dt(self) -> float:
        return 1.0 / self.frame_rate_hz

    @property
    def time(self) -> np.ndarray:
        return self.frame / self.frame_rate_hz

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return np.column_stack([self.speed * np.cos(self.heading),
                                self.speed * np.sin(self.heading)])

    @property
    def observed(self) -> np.ndarray:
        return ~self.interpolated

    @property
    def states(self) -> tuple[OrientedBoxState, ...]:
        return tuple(self.iter_states())

    def iter_states(self) -> Iterator[OrientedBoxState]:
        t = self.time
        for i in range(len(self)):
            conf = self.confidence[i]
            yield OrientedBoxState(
                int(self.frame[i]), float(t[i]), (float(self.x[i]), float(self.y[i])),
                float(self.length[i]), float(self.width[i]), float(self.yaw[i]),
                float(self.heading[i]), float(self.speed[i]), float(self.accel[i]),
                None if np.isnan(conf) else float(conf), bool(self.interpolated[i]))

    def index_of(self, frame: int) -> int | None:
        i = int(np.searchsorted(self.frame, frame))
        if i < len(self.frame) and self.frame[i] == frame:
            return i
        return None

    def is_gap_free(self) -> bool:
        return len(self) < 2 or bool(np.all(np.diff(self.frame) == 1))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass
class TrackTable:
    """Trajectories keyed by track id, one scene, one unit and frame rate."""

    trajectories: dict[int, Trajectory] = field(default_factory=dict)
    scene_id: str = ""
    unit: str = "pixel"
    frame_rate_hz: float = 10.0
    parse_report: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.unit not in ("pixel", "meter"):
            raise ValueError(f"unit must be 'pixel' or 'meter', got {self.unit!r}")
        for tid, tr in self.trajectories.items():
            if tid != tr.track_id:
                raise ValueError(f"key {tid} does not match track_id {tr.track_id}")
            if tr.frame_rate_hz != self.frame_rate_hz:
                raise ValueError(f"track {tid}: frame rate {tr.frame_rate_hz} != table {self.frame_rate_hz}")

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.sorted())

    def __getitem__(self, tid: int) -> Trajectory:
        return self.trajectories[tid]

    def sorted(self) -> list[Trajectory]:
        return [self.trajectories[k] for k in sorted(self.trajectories)]

    def with_trajectories(self, trajs, unit=None) -> "TrackTable":
        return TrackTable({t.track_id: t for t in trajs}, self.scene_id,
                          unit or self.unit, self.frame_rate_hz)

    def group(self, name: str) -> list[Trajectory]:
        return [t for t in self.sorted() if t.class_group == name]


# --- elementary measures -------------------------------------------------

def trajectory_duration(traj: Trajectory) -> float:
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    return float(traj.frame[-1] - traj.frame[0]) / traj.frame_rate_hz


def net_displacement(traj: Trajectory, unit: str = "meter") -> float:
    """Straight-line distance between the first and last centers."""
    if unit != "meter":
        raise ValueError("unit mismatch: net displacement needs metric coordinates")
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    return math.hypot(traj.x[-1] - traj.x[0], traj.y[-1] - traj.y[0])


def mean_confidence(traj: Trajectory) -> float:
    """Mean confidence over observed (non-interpolated) states."""
    conf = traj.confidence[traj.observed]
    conf = conf[~np.isnan(conf)]
    if conf.size == 0:
        raise ValueError("no observations")
    return float(conf.mean())

