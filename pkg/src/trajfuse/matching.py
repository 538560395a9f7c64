"""Turning movements, signal synchronization and red-light running."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
import shapely

from .fmt import fmt, parse_opt
from .geometry import box_corners
from .ingest import IntersectionMap, SignalTimeline
from .model import Trajectory, angle_diff

log = logging.getLogger(__name__)

ROUTE_KINDS = ("left", "straight", "right", "uturn", "anomalous")
BEARING_TOL = math.radians(45.0)
UTURN_MIN_DEG = 150.0
STOP_SPEED = 0.5        # m/s
STOP_FRAMES = 5


@dataclass(frozen=True)
class RouteAnnotation:
    track_id: int
    entry_edge: str | None
    exit_edge: str | None
    movement_kind: str
    t_entry: float | None
    t_exit: float | None
    movement_id: str | None = None
    proceeds: bool = False

    def __post_init__(self):
        if self.movement_kind not in ROUTE_KINDS:
            raise ValueError(f"unknown movement kind {self.movement_kind!r}")
        if self.t_entry is not None and self.t_exit is not None and self.t_entry > self.t_exit:
            raise ValueError("t_entry after t_exit")


@dataclass(frozen=True)
class ViolationEvent:
    track_id: int
    movement_id: str
    t_violation: float
    kind: str = "red_light_running"
    signal_state_at_entry: str = "red"


def _box_polys(traj: Trajectory):
    return shapely.polygons(box_corners(traj.xy, traj.length, traj.width, traj.yaw))


def entry_exit_times(traj: Trajectory, stop_line_polygon) -> tuple[float | None, float | None]:
    """First and last time the box intersects the stopLine polygon."""
    if len(traj) == 0:
        return None, None
    hit = shapely.intersects(stop_line_polygon, _box_polys(traj))
    idx = np.flatnonzero(hit)
    if idx.size == 0:
        return None, None
    t = traj.time
    return float(t[idx[0]]), float(t[idx[-1]])


def _lane_match(traj: Trajectory, i: int, groups) -> str | None:
    pt = shapely.points(traj.x[i], traj.y[i])
    for g in groups:
        if abs(angle_diff(traj.yaw[i], g.bearing_rad)) <= BEARING_TOL and g.polygon.covers(pt):
            return g.edge_id
    return None


def _edge_bearing(imap: IntersectionMap, edge: str, direction: str) -> float | None:
    for g in imap.lane_groups:
        if g.edge_id == edge and g.direction == direction:
            return g.bearing_rad
    return None


def assign_turn(traj: Trajectory, imap: IntersectionMap) -> RouteAnnotation:
    """Entry/exit edges from lane groups, movement from the map's table.

    The entry edge is the entry lane group that contains the center, with
    yaw within 45 deg of its bearing, at the sample nearest before the
    stopLine entry; the exit edge is found the same way after the exit.
    """
    t_in, t_out = entry_exit_times(traj, imap.stop_line_polygon)
    if t_in is None:
        return RouteAnnotation(traj.track_id, None, None, "anomalous", None, None)
    times = traj.time
    i_in = int(np.searchsorted(times, t_in - 1e-9))
    i_out = int(np.searchsorted(times, t_out - 1e-9))
    entries = [g for g in imap.lane_groups if g.direction == "entry"]
    exits = [g for g in imap.lane_groups if g.direction == "exit"]
    entry = next((e for i in range(i_in, -1, -1) if (e := _lane_match(traj, i, entries))), None)
    exit_ = next((e for i in range(i_out, len(traj)) if (e := _lane_match(traj, i, exits))), None)
    proceeds = proceeds_through(traj, imap.inner_polygon, i_in)
    kind, mid = "anomalous", None
    if entry is not None and exit_ is not None:
        mv = imap.movement_for(entry, exit_)
        if mv is not None:
            kind, mid = mv.kind, mv.movement_id
        elif entry == exit_:
            b0, b1 = _edge_bearing(imap, entry, "entry"), _edge_bearing(imap, exit_, "exit")
            if b0 is not None and b1 is not None and \
                    abs(math.degrees(angle_diff(b0, b1))) > UTURN_MIN_DEG:
                kind = "uturn"
    return RouteAnnotation(traj.track_id, entry, exit_, kind, t_in, t_out, mid, proceeds)


def proceeds_through(traj: Trajectory, inner_polygon, i_in: int) -> bool:
    """True when the center reaches the inner polygon after index ``i_in``
    without stopping (``STOP_FRAMES`` consecutive samples below ``STOP_SPEED``)
    on the way."""
    inner = shapely.contains_xy(inner_polygon, traj.x, traj.y)
    hits = np.flatnonzero(inner[i_in:])
    if hits.size == 0:
        return False
    slow = traj.speed[i_in:i_in + hits[0] + 1] < STOP_SPEED
    run = 0
    for s in slow:
        run = run + 1 if s else 0
        if run >= STOP_FRAMES:
            return False
    return True


def signal_state_at(timeline: SignalTimeline, t: float, movement_id: str) -> str:
    """State of the whole second containing ``t`` plus the clock offset."""
    second = math.floor(t + timeline.clock_offset_s + 1e-9)
    return timeline.state(second, movement_id)


def detect_violations(route: RouteAnnotation, timeline: SignalTimeline,
                      yellow_is_violation: bool = False) -> list[ViolationEvent]:
    """Red-light running: entry on red, then through to the inner polygon without stopping."""
    if route.t_entry is None or route.movement_id is None:
        return []
    state = signal_state_at(timeline, route.t_entry, route.movement_id)
    banned = ("red", "yellow") if yellow_is_violation else ("red",)
    if state not in banned:
        return []
    if not route.proceeds:
        log.info("track %d: stop-line encroachment on %s, no crossing", route.track_id, state)
        return []
    return [ViolationEvent(route.track_id, route.movement_id, route.t_entry,
                           "red_light_running", state)]


def match_all(trajs, imap: IntersectionMap, timeline: SignalTimeline | None,
              yellow_is_violation: bool = False, executor=None):
    """Routes for every MV and the violations found among them."""
    mvs = [t for t in trajs if t.class_group == "MV"]

    def run(t):
        return assign_turn(t, imap)

    routes = [run(t) for t in mvs] if executor is None else list(executor.map(run, mvs))
    violations = []
    if timeline is not None:
        for r in routes:
            try:
                violations += detect_violations(r, timeline, yellow_is_violation)
            except (ValueError, KeyError) as exc:
                log.warning("track %d: signal lookup failed: %s", r.track_id, exc)
    log.info("match: %d routes, %d anomalous, %d violations", len(routes),
             sum(r.movement_kind == "anomalous" for r in routes), len(violations))
    return routes, violations


# --- per-cycle rates ----------------------------------------------------------

@dataclass(frozen=True)
class CycleRate:
    cycle: int
    start_s: int
    end_s: int
    entrants: int
    violations: dict
    rates: dict


def per_cycle_violation_rate(violations, routes, timeline: SignalTimeline,
                             families=("straight", "left")) -> list[CycleRate]:
    """Violations per family over all MV entrants of the cycle.

    Cycles run from one boundary to the next (the last to the end of the
    timeline).  Times are compared on the signal clock.  A cycle without
    entrants reports ``None`` rates.
    """
    bounds = list(timeline.cycle_boundaries)
    if not bounds:
        raise ValueError("signal timeline has no cycle boundaries")
    edges = bounds + [max(timeline.end_s, bounds[-1] + 1)]
    kind_of = {r.track_id: r.movement_kind for r in routes}
    off = timeline.clock_offset_s

    def cycle_of(t):
        s = t + off
        k = int(np.searchsorted(edges, s, side="right")) - 1
        return k if 0 <= k < len(bounds) else None

    entrants = [0] * len(bounds)
    for r in routes:
        if r.t_entry is not None and (k := cycle_of(r.t_entry)) is not None:
            entrants[k] += 1
    counts = [{f: 0 for f in families} for _ in bounds]
    for v in violations:
        fam = kind_of.get(v.track_id)
        k = cycle_of(v.t_violation)
        if fam in families and k is not None:
            counts[k][fam] += 1
    out = []
    for k in range(len(bounds)):
        n = entrants[k]
        rates = {f: (counts[k][f] / n if n else None) for f in families}
        out.append(CycleRate(k + 1, edges[k], edges[k + 1], n, counts[k], rates))
    return out


# --- CSV ----------------------------------------------------------------------

ROUTE_COLUMNS = ["track_id", "entry_edge", "exit_edge", "movement", "t_entry", "t_exit"]
VIOLATION_COLUMNS = ["track_id", "movement_id", "t_violation", "kind"]


def write_routes(routes, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUTE_COLUMNS)
        for r in sorted(routes, key=lambda r: r.track_id):
            w.writerow([r.track_id, r.entry_edge or "", r.exit_edge or "", r.movement_kind,
                        fmt(r.t_entry), fmt(r.t_exit)])


def read_routes(path) -> list[RouteAnnotation]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [RouteAnnotation(int(r["track_id"]), r["entry_edge"] or None, r["exit_edge"] or None,
                                r["movement"], parse_opt(r["t_entry"]), parse_opt(r["t_exit"]))
                for r in csv.DictReader(fh)]


def write_violations(violations, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VIOLATION_COLUMNS)
        for v in sorted(violations, key=lambda v: (v.t_violation, v.track_id)):
            w.writerow([v.track_id, v.movement_id, fmt(v.t_violation), v.kind])


def read_violations(path) -> list[ViolationEvent]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [ViolationEvent(int(r["track_id"]), r["movement_id"], float(r["t_violation"]), r["kind"])
                for r in csv.DictReader(fh)]
