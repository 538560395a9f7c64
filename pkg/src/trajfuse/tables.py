"""Canonical trajectory CSV shared by stage artifacts and the final export.

Columns are the tracker schema followed by the metric channels.  For a
metric table the pixel columns carry the raw observation (empty on
interpolated rows) and ``yaw_rad`` carries the local-frame yaw.
"""

from __future__ import annotations

import csv
from collections import defaultdict

import numpy as np

from .fmt import fmt
from .ingest import TRACK_COLUMNS, DataError
from .model import TrackTable, Trajectory

TRAJ_COLUMNS = list(TRACK_COLUMNS) + ["x_m", "y_m", "speed_mps", "accel_mps2", "heading_rad",
                                      "length_m", "width_m", "interpolated", "movement"]
_PX = ("cx_px", "cy_px", "length_px", "width_px")
_PX_KEYS = ("px_x", "px_y", "px_length", "px_width")


def write_traj_csv(table: TrackTable, path, movements: dict | None = None):
    """Write a meter table; ``movements`` maps track id to movement kind."""
    if table.unit != "meter":
        raise ValueError("trajectory export needs a meter table")
    movements = movements or {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJ_COLUMNS)
        for t in table:
            px = t.pixel or {}
            mv = movements.get(t.track_id, "")
            for i in range(len(t)):
                interp = bool(t.interpolated[i])
                pix = ["" if interp or k not in px else fmt(px[k][i]) for k in _PX_KEYS]
                w.writerow([int(t.frame[i]), t.track_id, t.cls, *pix, fmt(t.yaw[i]),
                            "" if interp else fmt(t.confidence[i]),
                            fmt(t.x[i]), fmt(t.y[i]), fmt(t.speed[i]), fmt(t.accel[i]),
                            fmt(t.heading[i]), fmt(t.length[i]), fmt(t.width[i]),
                            int(interp), mv])


def _f(text: str) -> float:
    return float(text) if text != "" else np.nan


def read_traj_csv(path, frame_rate_hz: float = 10.0, scene_id: str = "") -> TrackTable:
    rows = defaultdict(list)
    cls = {}
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"required file not found: {path}") from None
    with fh:
        reader = csv.DictReader(fh)
        missing = [c for c in TRAJ_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing column {missing[0]!r}")
        for r in reader:
            tid = int(r["track_id"])
            cls[tid] = r["class"]
            rows[tid].append((int(r["frame"]), _f(r["x_m"]), _f(r["y_m"]), _f(r["length_m"]),
                              _f(r["width_m"]), _f(r["yaw_rad"]), _f(r["heading_rad"]),
                              _f(r["speed_mps"]), _f(r["accel_mps2"]), _f(r["confidence"]),
                              int(r["interpolated"]), *(_f(r[k]) for k in _PX)))
    trajs = {}
    for tid in sorted(rows):
        a = np.array(rows[tid], float)
        pixel = {k: a[:, 11 + j] for j, k in enumerate(_PX_KEYS)}
        pixel["px_yaw"] = np.full(len(a), np.nan)
        trajs[tid] = Trajectory.from_arrays(
            tid, cls[tid], frame_rate_hz, a[:, 0].astype(np.int64), a[:, 1], a[:, 2], a[:, 3],
            a[:, 4], a[:, 5], heading=a[:, 6], speed=a[:, 7], accel=a[:, 8], confidence=a[:, 9],
            interpolated=a[:, 10].astype(bool), pixel=pixel)
    return TrackTable(trajs, scene_id, "meter", frame_rate_hz)
