"""Scene statistics, conflict heatmaps and file export."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conflicts import KINDS, conflict_mv_ratio, n_cmvcp, vru_context_share
from .fmt import fmt
from .model import TrackTable

log = logging.getLogger(__name__)


def scene_span(table: TrackTable) -> tuple[float, float]:
    """(start time, duration) covering every frame of the table."""
    frames = [t.frame for t in table if len(t)]
    if not frames:
        return 0.0, 0.0
    lo = min(int(f[0]) for f in frames)
    hi = max(int(f[-1]) for f in frames)
    return lo / table.frame_rate_hz, (hi - lo + 1) / table.frame_rate_hz


def arrival_rate(table: TrackTable, group: str, duration_s: float, t0: float | None = None) -> float:
    """New trajectories of ``group`` per minute whose first frame falls in the window."""
    if not duration_s > 0:
        raise ValueError("duration must be positive")
    if t0 is None:
        t0 = scene_span(table)[0]
    n = sum(1 for t in table.group(group)
            if len(t) and t0 - 1e-9 <= t.time[0] < t0 + duration_s - 1e-9)
    return n / (duration_s / 60.0)


@dataclass
class HeatmapGrid:
    origin: tuple[float, float]
    cell_size: float
    shape: tuple[int, int]                  # (ny, nx)
    counts: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(sum(c.sum() for c in self.counts.values()))


def grid_extent(bounds, cell: float = 1.0, margin: float = 0.0):
    """Bounds snapped outward to whole cells."""
    xmin, ymin, xmax, ymax = bounds
    return (math.floor((xmin - margin) / cell) * cell, math.floor((ymin - margin) / cell) * cell,
            math.ceil((xmax + margin) / cell) * cell, math.ceil((ymax + margin) / cell) * cell)


def cell_index(v, lo: float, cell: float, n: int):
    """Index of the cell ``(lo + i c, lo + (i+1) c]``; the first cell is closed.

    Points on a boundary therefore go to the lower index.  Returns -1
    outside the extent.
    """
    v = np.asarray(v, float)
    i = np.ceil((v - lo) / cell - 1e-12).astype(int) - 1
    i = np.where(np.abs(v - lo) <= 1e-12, 0, i)
    return np.where((i >= 0) & (i < n), i, -1)


def grid_density(events, extent, kinds=KINDS, cell: float = 1.0) -> HeatmapGrid:
    """Count events per cell and conflict kind."""
    xmin, ymin, xmax, ymax = extent
    nx = int(round((xmax - xmin) / cell))
    ny = int(round((ymax - ymin) / cell))
    grid = HeatmapGrid((xmin, ymin), cell, (ny, nx),
                       {k: np.zeros((ny, nx), dtype=np.int64) for k in kinds})
    for e in events:
        if e.kind not in grid.counts:
            continue
        ix = int(cell_index(e.location[0], xmin, cell, nx))
        iy = int(cell_index(e.location[1], ymin, cell, ny))
        if ix >= 0 and iy >= 0:
            grid.counts[e.kind][iy, ix] += 1
    return grid


def write_heatmap(grid: HeatmapGrid, kind: str, path):
    """Matrix CSV, row 0 = lowest y; a comment line records the geometry."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# kind={kind} origin_x={fmt(grid.origin[0])} origin_y={fmt(grid.origin[1])} "
                 f"cell_m={fmt(grid.cell_size)} nx={grid.shape[1]} ny={grid.shape[0]}\n")
        w = csv.writer(fh, lineterminator="\n")
        for row in grid.counts[kind]:
            w.writerow([int(v) for v in row])


# --- scene summary ------------------------------------------------------------

def scene_metrics(table: TrackTable, events, routes, violations, duration_s: float | None = None,
                  assoc_radius: float = 10.0) -> dict:
    """Table-1 style summary; missing values are ``None``."""
    t0, span = scene_span(table)
    duration = duration_s if duration_s else span
    out = {
        "scene_id": table.scene_id or "",
        "duration_s": duration,
        "n_mv": len(table.group("MV")),
        "n_vru": len(table.group("VRU")),
        "arrival_rate_mv_per_min": arrival_rate(table, "MV", duration, t0) if duration > 0 else None,
        "arrival_rate_vru_per_min": arrival_rate(table, "VRU", duration, t0) if duration > 0 else None,
        "n_conflicts": len(events),
    }
    for k in KINDS:
        out[f"conflicts_{k}"] = sum(e.kind == k for e in events)
    out["conflict_mv_ratio"] = conflict_mv_ratio(table, events) if out["n_mv"] else None
    out["n_cmvcp"] = n_cmvcp(events)
    out["vru_context_share"] = vru_context_share(events, table, assoc_radius)
    out["n_routes"] = len(routes)
    for k in ("left", "straight", "right", "uturn", "anomalous"):
        out[f"routes_{k}"] = sum(r.movement_kind == k for r in routes)
    out["n_violations"] = len(violations)
    return out


def write_metrics(metrics: dict, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for k, v in metrics.items():
            fh.write(f"{k}: {'NA' if v is None else (v if isinstance(v, str) else fmt(v))}\n")


CYCLE_COLUMNS = ["cycle", "start_s", "end_s", "entrants", "violations_straight",
                 "violations_left", "rate_straight", "rate_left"]


def write_cycle_rates(rates, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CYCLE_COLUMNS)
        for r in rates:
            w.writerow([r.cycle, r.start_s, r.end_s, r.entrants,
                        r.violations.get("straight", 0), r.violations.get("left", 0),
                        fmt(r.rates.get("straight")), fmt(r.rates.get("left"))])


# --- manifest -------------------------------------------------------------------

def _count_rows(path: Path) -> tuple[int, int]:
    """(data rows, header lines); comment lines and the CSV header are headers."""
    lines = path.read_text(encoding="utf-8").splitlines()
    comments = sum(1 for line in lines if line.startswith("#"))
    header = 1 if path.suffix == ".csv" and not path.name.startswith("heatmap_") else 0
    return len(lines) - comments - header, comments + header


def check_writable(out_dir) -> Path:
    """Create ``out_dir`` if needed and fail early when it cannot be written."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK | os.X_OK):
        raise PermissionError(f"output directory {out} is not writable")
    return out


def write_manifest(out_dir, files, config_hash: str, config_version: int = 1) -> dict:
    """Row counts and checksums of ``files``; returns ``{name: rows}``."""
    out = Path(out_dir)
    rows = {}
    lines = [f"config_hash: {config_hash}", f"config_version: {config_version}",
             "file\trows\theader_lines\tsha256"]
    for name in sorted(files):
        p = out / name
        n, h = _count_rows(p)
        rows[name] = n
        digest = hashlib.sha256(p.read_bytes()).hexdigest()
        lines.append(f"{name}\t{n}\t{h}\t{digest}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines()[3:]:
        name, n, h, digest = line.split("\t")
        out[name] = {"rows": int(n), "header_lines": int(h), "sha256": digest}
    return out


# --- export -------------------------------------------------------------------

@dataclass
class ExportBundle:
    table: TrackTable
    routes: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    events: list = field(default_factory=list)
    cycle_rates: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    heatmap_extent: tuple | None = None
    cell_size: float = 1.0
    conflict_cfg: object = None


def export_all(bundle: ExportBundle, out_dir, config_hash: str, config_version: int = 1) -> dict:
    """Write every final output, then the manifest; returns manifest row counts."""
    from .conflicts import ConflictConfig, write_conflicts
    from .matching import write_routes, write_violations
    from .tables import write_traj_csv

    out = check_writable(out_dir)
    movements = {r.track_id: r.movement_kind for r in bundle.routes}
    files = ["traj.csv", "route.csv", "conflict.csv", "violation.csv", "cycle_rates.csv",
             "metrics.txt"]
    write_traj_csv(bundle.table, out / "traj.csv", movements)
    write_routes(bundle.routes, out / "route.csv")
    write_conflicts(bundle.events, out / "conflict.csv", bundle.conflict_cfg or ConflictConfig())
    write_violations(bundle.violations, out / "violation.csv")
    write_cycle_rates(bundle.cycle_rates, out / "cycle_rates.csv")
    write_metrics(bundle.metrics, out / "metrics.txt")
    extent = bundle.heatmap_extent
    if extent is None:
        locs = np.array([e.location for e in bundle.events]).reshape(-1, 2)
        extent = (grid_extent((*locs.min(0), *locs.max(0)), bundle.cell_size) if len(locs)
                  else (0.0, 0.0, 0.0, 0.0))
    grid = grid_density(bundle.events, extent, KINDS, bundle.cell_size)
    for k in KINDS:
        write_heatmap(grid, k, out / f"heatmap_{k}.csv")
        files.append(f"heatmap_{k}.csv")
    if (out / "filter_report.csv").exists():
        files.append("filter_report.csv")
    return write_manifest(out, files, config_hash, config_version)
