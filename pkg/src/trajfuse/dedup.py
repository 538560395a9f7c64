"""Removal of false and redundant trajectories.

Three stages in fixed order, each fed by the previous one's output:

1. heuristics (duration, displacement, mean confidence),
2. persistent box overlap (TTC overlap marker for k consecutive frames),
3. duplicate paths (DGT of zero plus persistent overlap).

Removal is logical: dropped tracks are listed in a :class:`FilterReport`
with a reason and, for pair stages, the partner that survived.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import shapely
from shapely.ops import unary_union

from .geometry import OVERLAP, box_corners, candidate_pairs, dgt, pair_overlap_series, \
    pair_ttc_series
from .model import TrackTable, Trajectory, mean_confidence, net_displacement, trajectory_duration

log = logging.getLogger(__name__)

REASONS = ("short_duration", "low_displacement", "low_confidence", "ttc_overlap", "dgt_duplicate")


@dataclass(frozen=True)
class FilterConfig:
    min_duration_s: float = 1.0
    min_displacement_m: float = 1.0
    min_confidence: float = 0.5
    k_overlap: int = 5
    min_overlap_ratio: float = 0.5
    pair_radius_m: float = 5.0


@dataclass(frozen=True)
class Removal:
    track_id: int
    reason: str
    partner_id: int | None = None

    def __post_init__(self):
        if self.reason not in REASONS:
            raise ValueError(f"unknown removal reason {self.reason!r}")
        if self.reason in ("ttc_overlap", "dgt_duplicate") and self.partner_id is None:
            raise ValueError(f"{self.reason} removal must name a partner")


@dataclass
class FilterReport:
    removed: list[Removal] = field(default_factory=list)
    kept_count: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def removed_ids(self) -> set[int]:
        return {r.track_id for r in self.removed}

    def merge(self, other: "FilterReport") -> "FilterReport":
        return FilterReport(self.removed + other.removed, other.kept_count, self.notes + other.notes)


# --- stage 1 ------------------------------------------------------------------

def _idle_zone(imap):
    """StopLine polygon plus entry lane groups, where idling is legitimate."""
    if imap is None:
        return None
    parts = [imap.stop_line_polygon] + [g.polygon for g in imap.lane_groups if g.direction == "entry"]
    return unary_union(parts)


def _touches_zone(traj: Trajectory, zone) -> bool:
    if zone is None or len(traj) == 0:
        return False
    boxes = shapely.polygons(box_corners(traj.xy, traj.length, traj.width, traj.yaw))
    return bool(shapely.intersects(zone, boxes).any())


def heuristic_filter(table: TrackTable, min_dur: float = 1.0, min_disp: float = 1.0,
                     min_conf: float = 0.5, imap=None):
    """Drop tracks that are too short, too static or too uncertain.

    Values equal to a threshold pass.  With a map (local frame), motor
    vehicles that touch the stopLine polygon or an entry lane group are
    exempt from the displacement rule, since they may wait at a red light
    for their whole visible life.  Tracks without any confidence values
    skip the confidence rule.
    """
    if table.unit != "meter":
        raise ValueError("heuristic_filter needs a georeferenced (meter) table")
    zone = _idle_zone(imap)
    kept, report = [], FilterReport()
    for t in table:
        reason = None
        if len(t) == 0 or trajectory_duration(t) < min_dur:
            reason = "short_duration"
        elif net_displacement(t) < min_disp and not (t.class_group == "MV" and _touches_zone(t, zone)):
            reason = "low_displacement"
        else:
            try:
                if mean_confidence(t) < min_conf:
                    reason = "low_confidence"
            except ValueError:
                report.notes.append(f"track {t.track_id}: no confidence values, rule skipped")
        if reason:
            report.removed.append(Removal(t.track_id, reason))
        else:
            kept.append(t)
    report.kept_count = len(kept)
    return table.with_trajectories(kept), report


# --- pair stages --------------------------------------------------------------

def _redundant(ta: Trajectory, tb: Trajectory) -> tuple[int, int]:
    """(loser, survivor): shorter life, then lower mean confidence, then higher id."""
    da, db = trajectory_duration(ta), trajectory_duration(tb)
    if not math.isclose(da, db, rel_tol=0, abs_tol=1e-9):
        return (ta.track_id, tb.track_id) if da < db else (tb.track_id, ta.track_id)
    ca, cb = _conf_or_nan(ta), _conf_or_nan(tb)
    if not (np.isnan(ca) or np.isnan(cb)) and ca != cb:
        return (ta.track_id, tb.track_id) if ca < cb else (tb.track_id, ta.track_id)
    hi, lo = max(ta.track_id, tb.track_id), min(ta.track_id, tb.track_id)
    return hi, lo


def _conf_or_nan(t: Trajectory) -> float:
    try:
        return mean_confidence(t)
    except ValueError:
        return math.nan


def _longest_run(frames: np.ndarray, flag: np.ndarray) -> int:
    best = cur = 0
    prev = None
    for f, v in zip(frames.tolist(), flag.tolist()):
        if v and prev is not None and f == prev + 1 and cur > 0:
            cur += 1
        elif v:
            cur = 1
        else:
            cur = 0
        prev = f
        best = max(best, cur)
    return best


def _pairs(table: TrackTable, radius: float):
    """Co-temporal candidate pairs within the same class group."""
    trajs = table.sorted()
    out = []
    for a, b in candidate_pairs(trajs, radius=radius):
        if table[a].class_group == table[b].class_group:
            out.append((a, b))
    return out


def _map(fn, items, executor):
    if executor is None:
        return [fn(x) for x in items]
    return list(executor.map(fn, items))


def _commit(table: TrackTable, flagged, reason: str, report: FilterReport):
    """Apply pair removals in track-id order; a removed track cannot remove others."""
    removed: dict[int, int] = {}
    for a, b in sorted(flagged):
        if a in removed or b in removed:
            continue
        loser, keeper = _redundant(table[a], table[b])
        removed[loser] = keeper
    for tid in sorted(removed):
        report.removed.append(Removal(tid, reason, removed[tid]))
    kept = [t for t in table if t.track_id not in removed]
    report.kept_count = len(kept)
    return table.with_trajectories(kept), report


def ttc_overlap_filter(table: TrackTable, k_overlap: int = 5, radius: float = 5.0, executor=None):
    """Remove the redundant member of pairs whose boxes overlap persistently.

    A pair is flagged when the TTC overlap marker holds for at least
    ``k_overlap`` consecutive shared frames.
    """
    def check(pair):
        ta, tb = table[pair[0]], table[pair[1]]
        frames, value, _ = pair_ttc_series(ta, tb)
        return _longest_run(frames, value == OVERLAP) >= k_overlap

    pairs = _pairs(table, radius)
    flags = _map(check, pairs, executor)
    flagged = [p for p, f in zip(pairs, flags) if f]
    return _commit(table, flagged, "ttc_overlap", FilterReport())


def overlap_ratio(ta: Trajectory, tb: Trajectory) -> float:
    """Shared frames with SAT overlap over the shorter track's frame count."""
    frames, ov = pair_overlap_series(ta, tb)
    n = min(len(ta), len(tb))
    return float(ov.sum()) / n if n else 0.0


def dgt_duplicate_filter(table: TrackTable, min_overlap_ratio: float = 0.5, radius: float = 5.0,
                         executor=None):
    """Remove the shorter member of pairs with DGT = 0 and persistent overlap."""
    report = FilterReport()

    def check(pair):
        ta, tb = table[pair[0]], table[pair[1]]
        ratio = overlap_ratio(ta, tb)
        if ratio == 0.0:
            return False, None
        res = dgt(ta, tb)
        if res.value is None or res.value > 1e-9:
            return False, None
        return ratio >= min_overlap_ratio, ratio

    pairs = _pairs(table, radius)
    results = _map(check, pairs, executor)
    flagged = []
    for p, (flag, ratio) in zip(pairs, results):
        if flag:
            flagged.append(p)
        elif ratio is not None:
            report.notes.append(f"pair {p[0]}-{p[1]}: DGT 0 but overlap ratio {ratio:.3f} "
                                f"< {min_overlap_ratio}; kept")
    for n in report.notes:
        log.info(n)
    return _commit(table, flagged, "dgt_duplicate", report)


def run_filters(table: TrackTable, cfg: FilterConfig = FilterConfig(), imap=None, executor=None):
    """Heuristic, then TTC-overlap, then DGT-duplicate stage."""
    t1, r1 = heuristic_filter(table, cfg.min_duration_s, cfg.min_displacement_m,
                              cfg.min_confidence, imap)
    t2, r2 = ttc_overlap_filter(t1, cfg.k_overlap, cfg.pair_radius_m, executor)
    t3, r3 = dgt_duplicate_filter(t2, cfg.min_overlap_ratio, cfg.pair_radius_m, executor)
    report = r1.merge(r2).merge(r3)
    log.info("filter: %d in, %d heuristic, %d ttc_overlap, %d dgt_duplicate, %d kept",
             len(table), len(r1.removed), len(r2.removed), len(r3.removed), report.kept_count)
    return t3, report


def write_filter_report(report: FilterReport, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["track_id", "reason", "partner_id"])
        for r in sorted(report.removed, key=lambda r: r.track_id):
            w.writerow([r.track_id, r.reason, "" if r.partner_id is None else r.partner_id])


def read_filter_report(path) -> FilterReport:
    rep = FilterReport()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            pid = row["partner_id"]
            rep.removed.append(Removal(int(row["track_id"]), row["reason"], int(pid) if pid else None))
    return rep
