"""Synthetic scenes with known ground truth.

Everything here is generated from closed-form kinematics in the local
metric frame of a four-way intersection; pixel data are obtained by
projecting through a known nadir camera with radial distortion.  Used by
the test suite and to build the bundled golden scene.

Layout (right-hand traffic, meters)::

    stopLine polygon   |x|, |y| <= 15
    inner polygon      |x|, |y| <= 12   (crosswalks occupy 12..15)
    each arm           14 m wide, one lane group per direction
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from shapely.geometry import Polygon, box

from .geometry import box_corners, sat_overlap_convex
from .georef import CameraModel, RulerPair, distort
from .ingest import (Gcp, GcpSet, IntersectionMap, LaneGroup, Movement, SignalTimeline,
                     derive_cycle_boundaries)
from .model import TrackTable, Trajectory, normalize_angle
from .utm import from_utm, to_utm

FPS = 10.0
ARM = 50.0
ROAD_HALF = 7.0
STOP = 15.0
INNER = 12.0
LANE = 3.5
EDGES = ("N", "W", "S", "E")          # counter-clockwise; rotating N by k*90 deg gives EDGES[k]
ORIGIN_LATLON = (31.2, 121.47)


def _rot(xy, k: int):
    a = k * math.pi / 2
    c, s = round(math.cos(a)), round(math.sin(a))
    xy = np.asarray(xy, float)
    return np.stack([c * xy[..., 0] - s * xy[..., 1], s * xy[..., 0] + c * xy[..., 1]], -1)


def _rot_poly(poly: Polygon, k: int) -> Polygon:
    return Polygon(_rot(np.asarray(poly.exterior.coords), k))


def _turn_exit(k: int, kind: str) -> int:
    return {"straight": (k + 2) % 4, "left": (k + 3) % 4, "right": (k + 1) % 4, "uturn": k}[kind]


def intersection_map() -> IntersectionMap:
    """Golden intersection in the local frame."""
    stop = box(-STOP, -STOP, STOP, STOP)
    inner = box(-INNER, -INNER, INNER, INNER)
    cw_n = box(-ROAD_HALF, INNER, ROAD_HALF, STOP)
    entry_n = box(-ROAD_HALF, STOP, 0.0, ARM + 10.0)
    exit_n = box(0.0, STOP, ROAD_HALF, ARM + 10.0)
    crosswalks, groups, moves = [], [], []
    for k, e in enumerate(EDGES):
        crosswalks.append(_rot_poly(cw_n, k))
        groups.append(LaneGroup(e, "entry", _rot_poly(entry_n, k),
                                float(normalize_angle(-math.pi / 2 + k * math.pi / 2)), f"{e}_entry"))
        groups.append(LaneGroup(e, "exit", _rot_poly(exit_n, k),
                                float(normalize_angle(math.pi / 2 + k * math.pi / 2)), f"{e}_exit"))
    for k, e in enumerate(EDGES):
        for kind in ("straight", "left", "right"):
            x = EDGES[_turn_exit(k, kind)]
            moves.append(Movement(e + x, e, x, kind))
    return IntersectionMap(stop, inner, tuple(crosswalks), tuple(groups), tuple(moves), "local")


# --- paths and speed profiles --------------------------------------------------

@dataclass
class LanePath:
    """Dense polyline parametrized by arc length."""

    pts: np.ndarray
    s: np.ndarray = field(init=False)
    heading: np.ndarray = field(init=False)

    def __post_init__(self):
        d = np.diff(self.pts, axis=0)
        self.s = np.concatenate([[0.0], np.cumsum(np.hypot(d[:, 0], d[:, 1]))])
        mid = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
        self.heading = np.concatenate([[mid[0]], 0.5 * (mid[:-1] + mid[1:]), [mid[-1]]])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def at(self, s):
        s = np.clip(np.asarray(s, float), 0.0, self.length)
        x = np.interp(s, self.s, self.pts[:, 0])
        y = np.interp(s, self.s, self.pts[:, 1])
        return np.column_stack([x, y]), normalize_angle(np.interp(s, self.s, self.heading))


def _line(p0, p1, ds=0.05):
    n = max(2, int(math.ceil(math.dist(p0, p1) / ds)) + 1)
    t = np.linspace(0, 1, n)[:, None]
    return (1 - t) * np.asarray(p0, float) + t * np.asarray(p1, float)


def _arc(center, r, a0, a1, ds=0.05):
    n = max(3, int(math.ceil(abs(a1 - a0) * r / ds)) + 1)
    a = np.linspace(a0, a1, n)
    return np.column_stack([center[0] + r * np.cos(a), center[1] + r * np.sin(a)])


def movement_path(entry: str, kind: str, start: float = ARM, end: float = ARM) -> LanePath:
    """Lane-center path for a movement, built on the north approach and rotated."""
    k = EDGES.index(entry)
    a = _line((-LANE, start), (-LANE, STOP))
    if kind == "straight":
        rest = [_line((-LANE, STOP), (-LANE, -end))]
    elif kind == "left":
        r = STOP + LANE
        rest = [_arc((STOP, STOP), r, math.pi, 1.5 * math.pi), _line((STOP, -LANE), (end, -LANE))]
    elif kind == "right":
        r = STOP - LANE
        rest = [_arc((-STOP, STOP), r, 0.0, -0.5 * math.pi), _line((-STOP, LANE), (-end, LANE))]
    elif kind == "uturn":
        rest = [_arc((0.0, STOP), LANE, math.pi, 2 * math.pi), _line((LANE, STOP), (LANE, end))]
    else:
        raise ValueError(kind)
    pts = [a] + rest
    pts = np.concatenate([pts[0]] + [p[1:] for p in pts[1:]])
    return LanePath(_rot(pts, k))


@dataclass
class Profile:
    """Piecewise-constant acceleration: segments ``(t_begin, s_begin, v_begin, a)``."""

    segments: list

    def _seg(self, t):
        starts = np.array([g[0] for g in self.segments])
        return np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(starts) - 1)

    def s(self, t):
        t = np.asarray(t, float)
        k = self._seg(t)
        seg = np.array(self.segments)[k]
        dt = t - seg[..., 0]
        return seg[..., 1] + seg[..., 2] * dt + 0.5 * seg[..., 3] * dt * dt

    def v(self, t):
        t = np.asarray(t, float)
        seg = np.array(self.segments)[self._seg(t)]
        return seg[..., 2] + seg[..., 3] * (t - seg[..., 0])

    def a(self, t):
        return np.array(self.segments)[self._seg(np.asarray(t, float))][..., 3]


def cruise(t0: float, v: float, s0: float = 0.0) -> Profile:
    return Profile([(t0, s0, v, 0.0)])


def stop_and_go(t0: float, v: float, s_stop: float, t_go: float, dec: float = 2.0,
                acc: float = 2.0, s0: float = 0.0) -> Profile:
    """Cruise, brake to a stop at ``s_stop``, wait until ``t_go``, accelerate back to ``v``."""
    d_brake = v * v / (2 * dec)
    t_brake = t0 + (s_stop - d_brake - s0) / v
    if t_brake < t0:
        raise ValueError("not enough room to brake")
    t_stop = t_brake + v / dec
    t_go = max(t_go, t_stop)
    return Profile([(t0, s0, v, 0.0), (t_brake, s_stop - d_brake, v, -dec), (t_stop, s_stop, 0.0, 0.0),
                    (t_go, s_stop, 0.0, acc), (t_go + v / acc, s_stop + v * v / (2 * acc), v, 0.0)])


def vehicle(tid: int, cls: str, path: LanePath, prof: Profile, t0: float, length: float, width: float,
            conf: float = 0.9, fps: float = FPS, t_end: float | None = None) -> Trajectory:
    """Exact trajectory of a box following ``path`` with profile ``prof``."""
    f0 = int(math.ceil(t0 * fps - 1e-9))
    horizon = t_end if t_end is not None else t0 + 600.0
    frames = np.arange(f0, int(horizon * fps) + 1)
    t = frames / fps
    s = prof.s(t)
    keep = s <= path.length
    frames, t, s = frames[keep], t[keep], s[keep]
    xy, yaw = path.at(s)
    v = prof.v(t)
    return Trajectory.from_arrays(tid, cls, fps, frames, xy[:, 0], xy[:, 1], np.full(len(t), length),
                                  np.full(len(t), width), yaw, heading=yaw, speed=np.abs(v),
                                  accel=prof.a(t), confidence=np.full(len(t), conf))


def linear_track(tid, cls, p0, vel, frames, length=4.5, width=1.8, conf=0.9, fps=FPS, yaw=None):
    frames = np.asarray(frames)
    t = (frames - frames[0]) / fps
    xy = np.asarray(p0, float) + np.outer(t, vel)
    h = math.atan2(vel[1], vel[0])
    n = len(frames)
    return Trajectory.from_arrays(tid, cls, fps, frames, xy[:, 0], xy[:, 1], np.full(n, length),
                                  np.full(n, width), np.full(n, h if yaw is None else yaw),
                                  heading=np.full(n, h), speed=np.full(n, math.hypot(*vel)),
                                  confidence=np.full(n, conf))


def tracks_overlap(a: Trajectory, b: Trajectory, margin: float = 0.0) -> bool:
    frames, ia, ib = np.intersect1d(a.frame, b.frame, return_indices=True)
    if frames.size == 0:
        return False
    ca = box_corners(a.xy[ia], a.length[ia] + 2 * margin, a.width[ia] + 2 * margin, a.yaw[ia])
    cb = box_corners(b.xy[ib], b.length[ib] + 2 * margin, b.width[ib] + 2 * margin, b.yaw[ib])
    return bool(sat_overlap_convex(ca, cb).any())


# --- signals -----------------------------------------------------------------------

CYCLE_S = 60
NS_EDGES = ("N", "S")


def _phase_state(sec: int, ns: bool) -> str:
    c = sec % CYCLE_S
    if ns:
        return "green" if c < 25 else "yellow" if c < 28 else "red"
    return "red" if c < 30 else "green" if c < 55 else "yellow" if c < 58 else "red"


def signal_plan(duration_s: int = 200, imap: IntersectionMap | None = None) -> SignalTimeline:
    """Two-phase plan: N/S approaches green 0-25 s, E/W green 30-55 s of each 60 s cycle."""
    imap = imap or intersection_map()
    states = {m.movement_id: [_phase_state(s, m.entry_edge in NS_EDGES) for s in range(duration_s)]
              for m in imap.movements}
    states = dict(sorted(states.items()))
    return SignalTimeline(0, states, derive_cycle_boundaries(states, 0, "NS"), 0.0)


# --- scripted matching scene -----------------------------------------------------

@dataclass(frozen=True)
class Script:
    entry: str
    kind: str
    t0: float
    intent: str = "obey"        # obey | run_red | encroach
    cls: str = "car"


@dataclass
class ScriptedScene:
    table: TrackTable
    imap: IntersectionMap
    timeline: SignalTimeline
    expected_routes: dict           # track_id -> (entry, exit, kind)
    expected_violations: dict       # track_id -> movement_id
    expected_entry_s: dict          # track_id -> t_entry (s)
    scripts: dict


DIMS = {"car": (4.6, 1.9), "van": (5.2, 2.0), "bus": (11.0, 2.5), "truck": (8.0, 2.4)}


def _entry_time(tr: Trajectory, stop_poly) -> float | None:
    import shapely
    polys = shapely.polygons(box_corners(tr.xy, tr.length, tr.width, tr.yaw))
    hit = np.flatnonzero(shapely.intersects(stop_poly, polys))
    return float(tr.time[hit[0]]) if hit.size else None


def _default_scripts() -> list[Script]:
    kinds = ("straight", "left", "right", "straight", "uturn", "straight", "left", "right",
             "straight", "left")
    out = []
    for i in range(40):
        e = EDGES[i % 4]
        kind = kinds[(i // 4) % len(kinds)] if i % 7 else "straight"
        out.append(Script(e, kind, 3.0 + 3.7 * i, "obey", ("car", "car", "van", "truck")[i % 4]))
    # scripted violations and encroachments
    for i, intent in ((5, "run_red"), (14, "run_red"), (22, "run_red"), (31, "encroach"),
                      (9, "encroach")):
        s = out[i]
        out[i] = Script(s.entry, "straight" if intent == "encroach" else s.kind, s.t0, intent, "car")
    return out


def _is_red(tl: SignalTimeline, mid: str, t: float) -> bool:
    return tl.state(math.floor(t + 1e-9), mid) != "green"


def scripted_scene(scripts=None, v: float = 8.0, duration_s: int = 200) -> ScriptedScene:
    """Vehicles through the intersection obeying (or not) a two-phase signal.

    Vehicles are placed greedily in script order; each is delayed in 0.5 s
    steps until it keeps at least 0.5 m from every vehicle already placed
    and its intent is realized (an ``obey`` vehicle that meets red stops
    and queues, ``run_red`` must reach the stop line on red, ``encroach``
    stops 2.5 m past the stop line on red and leaves on green).
    """
    imap = intersection_map()
    tl = signal_plan(duration_s, imap)
    scripts = list(scripts or _default_scripts())
    s_line = ARM - STOP
    placed: list[Trajectory] = []
    queues: dict[str, list[tuple[float, float]]] = {e: [] for e in EDGES}   # (t_go, t_gone)
    routes, viol, entry_s, used = {}, {}, {}, {}
    for i, sc in enumerate(scripts):
        tid = i + 1
        L, W = DIMS[sc.cls]
        x = EDGES[_turn_exit(EDGES.index(sc.entry), sc.kind)]
        mid = sc.entry + x if sc.kind != "uturn" else None
        sig = mid or next(m.movement_id for m in imap.movements
                          if m.entry_edge == sc.entry and m.kind == "left")
        path = movement_path(sc.entry, sc.kind)
        for k in range(120):
            t0 = sc.t0 + 0.5 * k
            t_arr = t0 + (s_line - L / 2) / v
            red = _is_red(tl, sig, t_arr)
            if sc.intent == "run_red":
                if not (red and tl.state(math.floor(t_arr), sig) == "red"
                        and _is_red(tl, sig, t_arr + 2.0)):
                    continue
                prof = cruise(t0, v)
            elif sc.intent == "encroach":
                if not red or _is_red(tl, sig, t_arr - 3.0) is False:
                    continue
                t_green = _next_green(tl, sig, t_arr)
                prof = stop_and_go(t0, v, s_line + 2.5 - L / 2, t_green + 1.0)
            elif red:
                t_green = _next_green(tl, sig, t_arr)
                waiting = [q for q in queues[sc.entry] if q[1] > t_arr]
                slot = len(waiting)
                try:
                    prof = stop_and_go(t0, v, s_line - L / 2 - 1.0 - 8.0 * slot,
                                       t_green + 1.0 + 2.5 * slot)
                except ValueError:
                    continue
            else:
                prof = cruise(t0, v)
            tr = vehicle(tid, sc.cls, path, prof, t0, L, W, conf=0.9, t_end=duration_s - 1)
            if len(tr) < 20 or tr.xy[-1] @ tr.xy[-1] < (ARM - 1) ** 2:
                continue            # must leave the scene before the end
            if any(tracks_overlap(tr, p, 0.5) for p in placed):
                continue
            break
        else:
            raise RuntimeError(f"could not place scripted vehicle {tid}")
        if sc.intent != "run_red" and red:
            queues[sc.entry].append((t_arr, float(tr.time[-1])))
        placed.append(tr)
        used[tid] = Script(sc.entry, sc.kind, t0, sc.intent, sc.cls)
        routes[tid] = (sc.entry, x, sc.kind)
        entry_s[tid] = _entry_time(tr, imap.stop_line_polygon)
        if sc.intent == "run_red":
            viol[tid] = mid
    table = TrackTable({t.track_id: t for t in placed}, "scripted", "meter", FPS)
    return ScriptedScene(table, imap, tl, routes, viol, entry_s, used)


def _next_green(tl: SignalTimeline, mid: str, t: float) -> float:
    sec = math.floor(t)
    while tl.state(sec, mid) != "green":
        sec += 1
    return float(sec)


# --- conflict fixture ----------------------------------------------------------------

@dataclass
class ConflictFixture:
    table: TrackTable
    expected_kinds: dict            # pair -> kind
    decoys: list                    # pairs that must not appear
    expected_ratio: float
    expected_n_cmvcp: float


def _follow(tid, lead_id, y0, x0, frames):
    """Car-following pair: leader at 6 m/s, follower closes from 10 m/s and brakes."""
    lead = linear_track(lead_id, "car", (x0 + 12.0, y0), (6.0, 0.0), frames)
    prof = Profile([(0.0, 0.0, 10.0, 0.0), (0.4, 4.0, 10.0, -4.0), (1.4, 11.0, 6.0, 0.0)])
    t = (frames - frames[0]) / FPS
    s = prof.s(t)
    n = len(frames)
    fol = Trajectory.from_arrays(tid, "car", FPS, frames, x0 + s, np.full(n, y0), np.full(n, 4.5),
                                 np.full(n, 1.8), np.zeros(n), heading=np.zeros(n),
                                 speed=prof.v(t), confidence=np.full(n, 0.9))
    return lead, fol


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def steer(tid, frames, p0, speed, psi, length=4.5, width=1.8, cls="car"):
    """Integrate speed and yaw samples (trapezoid rule) from ``p0``."""
    vx, vy = speed * np.cos(psi), speed * np.sin(psi)
    x = p0[0] + np.concatenate([[0], np.cumsum(0.5 * (vx[1:] + vx[:-1]) / FPS)])
    y = p0[1] + np.concatenate([[0], np.cumsum(0.5 * (vy[1:] + vy[:-1]) / FPS)])
    n = len(frames)
    return Trajectory.from_arrays(tid, cls, FPS, frames, x, y, np.full(n, length), np.full(n, width),
                                  psi, heading=psi, speed=speed, confidence=np.full(n, 0.9))


def _from_xy(tid, frames, xy, length=4.5, width=1.8, cls="car"):
    """Trajectory whose yaw, heading and speed come from analytic position samples."""
    fine = np.gradient(xy, 1 / FPS, axis=0)
    yaw = np.arctan2(fine[:, 1], fine[:, 0])
    n = len(frames)
    return Trajectory.from_arrays(tid, cls, FPS, frames, xy[:, 0], xy[:, 1], np.full(n, length),
                                  np.full(n, width), yaw, heading=yaw,
                                  speed=np.hypot(fine[:, 0], fine[:, 1]), confidence=np.full(n, 0.9))


def conflict_fixture() -> ConflictFixture:
    """Scene built to hold exactly 2 rear-end, 1 sideswipe, 2 angle and 1 head-on conflicts.

    Each interaction sits in its own 300 m tile so pairs cannot interact.
    Two rear-end pairs run side by side (3.5 m apart) so each event has the
    other pair's two cars as associated objects.  A decoy pair closes fast
    on converging headings but is kept apart by a median (disjoint swept
    areas), and a bystander car sits within 10 m of a conflict without
    being conflict-involved.
    """
    frames = np.arange(0, 80)
    trajs = []
    kinds = {}
    # rear-end x2, side by side
    l1, f1 = _follow(2, 1, 0.0, 0.0, frames)
    l2, f2 = _follow(4, 3, 3.5, 0.0, frames)
    trajs += [l1, f1, l2, f2]
    kinds[(1, 2)] = "rear_end"
    kinds[(3, 4)] = "rear_end"
    # bystander parked on the shoulder next to the rear-end pairs, not conflict-involved
    trajs.append(linear_track(5, "car", (12.0, -4.5), (6.0, 0.0), frames))
    # sideswipe: B cuts in from the right lane at 40 deg, straightening ahead of A
    ox = 300.0
    a = linear_track(6, "car", (ox, 0.0), (8.0, 0.0), frames)
    t = frames / FPS
    ramp = np.clip((t - 0.1) / 1.4, 0, 1)
    psi = np.radians(40.0) * (1 - ramp)
    speed = 10.0 / math.cos(math.radians(40.0)) * (1 - ramp) + 10.0 * ramp
    trajs += [a, steer(7, frames, (ox + 3.0, -6.0), speed, psi)]
    kinds[(6, 7)] = "sideswipe"
    # angle x2: B on a collision course brakes to yield behind A
    for k, (ang, ids) in enumerate(((90.0, (8, 9)), (120.0, (10, 11)))):
        ox, oy = 600.0 + 300.0 * k, 0.0
        a = linear_track(ids[0], "car", (ox - 8.0 * 3.0, oy), (8.0, 0.0), frames)
        th = math.radians(ang)
        d = np.array([math.cos(th), math.sin(th)])
        prof = Profile([(0.0, 0.0, 8.0, 0.0), (1.2, 9.6, 8.0, -5.0), (2.4, 15.6, 2.0, 0.0)])
        s = prof.s(t)
        start = np.array([ox, oy]) - 24.0 * d
        xy = start + np.outer(s, d)
        n = len(frames)
        bt = Trajectory.from_arrays(ids[1], "car", FPS, frames, xy[:, 0], xy[:, 1], np.full(n, 4.5),
                                    np.full(n, 1.8), np.full(n, th), heading=np.full(n, th),
                                    speed=prof.v(t), confidence=np.full(n, 0.9))
        trajs += [a, bt]
        kinds[ids] = "angle"
    # head-on: B drifts partly into A's lane, then swerves back to its own
    ox = 1200.0
    a = linear_track(12, "car", (ox, 0.0), (8.0, 0.0), frames)
    bump = _smoothstep((t - 0.3) / 0.8) - _smoothstep((t - 1.3) / 0.6)
    b = _from_xy(13, frames, np.column_stack([ox + 40.0 - 8.0 * t, 3.0 - 1.4 * bump]))
    trajs += [a, b]
    kinds[(12, 13)] = "head_on"
    # decoy: converging on a collision course across a median, then diverting
    ox = 1500.0
    a = linear_track(14, "car", (ox, 0.0), (8.0, 0.0), frames)
    psi = np.radians(-35.0) * np.clip(1.0 - np.maximum(t - 0.6, 0) / 0.6, 0, 1)
    trajs += [a, steer(15, frames, (ox + 2.0, 9.0), np.full(len(t), 8.0), psi)]
    # pedestrian near the rear-end pairs (context only)
    trajs.append(linear_track(16, "pedestrian", (16.0, 8.0), (1.2, 0.0), frames, 0.5, 0.5))
    table = TrackTable({t.track_id: t for t in trajs}, "conflicts", "meter", FPS)
    # 12 of 15 MVs are conflict-involved; only the two rear-end events have
    # associated objects (2 each), so N_CMVCP = (2 + 2) / 6
    return ConflictFixture(table, kinds, [(14, 15), (1, 5), (2, 5)], 12 / 15, 4 / 6)


# --- dedup fixture ------------------------------------------------------------------

@dataclass
class DedupScene:
    table: TrackTable
    ghosts: set
    genuine: set


def dedup_scene(seed: int, n_vehicles: int = 12, n_ghosts: int = 4) -> DedupScene:
    """Genuine traffic on parallel lanes plus injected ghost tracks.

    Ghost types: a full-life duplicate riding on its host with a small
    offset, and a parallel rider whose lateral offset flickers so boxes
    overlap only in short bursts.  Ghosts live shorter than their hosts.
    """
    rng = np.random.default_rng(seed)
    trajs = []
    lanes = np.arange(4) * 3.6
    next_id = 1
    n_frames = 300
    placed = []
    while len(placed) < n_vehicles:
        lane = rng.integers(0, len(lanes))
        direction = 1 if lane < 2 else -1
        v = rng.uniform(4.0, 14.0)
        f0 = int(rng.integers(0, 150))
        n = int(rng.integers(60, 150))
        frames = np.arange(f0, min(f0 + n, n_frames))
        x0 = -60.0 if direction > 0 else 60.0
        L = rng.uniform(4.2, 5.0)
        cand = linear_track(next_id, "car", (x0, lanes[lane]), (direction * v, 0.0), frames, L, 1.8,
                            conf=rng.uniform(0.7, 0.95))
        if any(tracks_overlap(cand, p, 1.0) for p in placed):
            continue
        placed.append(cand)
        next_id += 1
    trajs += placed
    ghosts = set()
    hosts = rng.choice(len(placed), size=min(n_ghosts, len(placed)), replace=False)
    for j, h in enumerate(hosts):
        host = placed[h]
        m = len(host)
        a = int(rng.integers(0, max(1, m // 5)))
        b = m - int(rng.integers(1, max(2, m // 5)))
        sub = host.take(np.arange(a, b))
        if j % 2 == 0:
            off = rng.uniform(-0.3, 0.3, size=2)
            g = sub.replace(x=sub.x + off[0], y=sub.y + off[1], track_id=next_id,
                            confidence=np.full(len(sub), rng.uniform(0.55, 0.8)))
        else:
            pattern = np.where(np.arange(len(sub)) % 5 < 3, 1.2, 2.4)
            g = sub.replace(y=sub.y + pattern, track_id=next_id,
                            confidence=np.full(len(sub), rng.uniform(0.55, 0.8)))
        trajs.append(g)
        ghosts.add(next_id)
        next_id += 1
    table = TrackTable({t.track_id: t for t in trajs}, f"dedup{seed}", "meter", FPS)
    return DedupScene(table, ghosts, {t.track_id for t in placed})


# --- camera and georeferencing fixture ----------------------------------------------

@dataclass(frozen=True)
class SceneCamera:
    """Nadir camera over the local origin, rotated by ``yaw`` about the vertical."""

    fx: float = 2600.0
    fy: float = 2600.0
    cx: float = 1920.0
    cy: float = 1080.0
    altitude_m: float = 140.0
    yaw_rad: float = math.radians(3.0)
    dist: tuple = (-0.05, 0.0, 0.0, 0.0, 0.0)
    width_px: int = 3840
    height_px: int = 2160

    @property
    def model(self) -> CameraModel:
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.dist, None, self.altitude_m,
                           self.width_px, self.height_px)

    def undistorted(self, xy) -> np.ndarray:
        xy = np.asarray(xy, float)
        c, s = math.cos(self.yaw_rad), math.sin(self.yaw_rad)
        u = (c * xy[..., 0] + s * xy[..., 1]) / self.altitude_m
        w = (s * xy[..., 0] - c * xy[..., 1]) / self.altitude_m
        return np.stack([self.cx + self.fx * u, self.cy + self.fy * w], -1)

    def to_pixel(self, xy) -> np.ndarray:
        return distort(self.undistorted(xy), self.model)

    def jacobian(self, xy, step=0.01) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, float))
        jx = (self.to_pixel(xy + [step, 0]) - self.to_pixel(xy - [step, 0])) / (2 * step)
        jy = (self.to_pixel(xy + [0, step]) - self.to_pixel(xy - [0, step])) / (2 * step)
        return np.stack([jx, jy], -1)


def local_origin() -> tuple[float, float]:
    e, n, _ = to_utm(*ORIGIN_LATLON)
    return e, n


def local_to_latlon(xy) -> np.ndarray:
    e0, n0 = local_origin()
    _, _, zone = to_utm(*ORIGIN_LATLON)
    xy = np.asarray(xy, float)
    lat, lon = from_utm(xy[..., 0] + e0, xy[..., 1] + n0, zone)
    return np.stack([lat, lon], -1)


def map_to_wgs84(imap: IntersectionMap) -> IntersectionMap:
    def conv(poly):
        ll = local_to_latlon(np.asarray(poly.exterior.coords))
        return Polygon(ll[:, ::-1])

    return IntersectionMap(conv(imap.stop_line_polygon), conv(imap.inner_polygon),
                           tuple(conv(c) for c in imap.crosswalks),
                           tuple(LaneGroup(g.edge_id, g.direction, conv(g.polygon), g.bearing_rad, g.id)
                                 for g in imap.lane_groups), imap.movements, "wgs84")


GCP_WORLD = np.array([[-40.0, -40.0], [40.0, -40.0], [40.0, 40.0], [-40.0, 40.0], [0.0, 0.0],
                      [-80.0, 10.0], [80.0, -10.0], [20.0, 45.0], [-20.0, -45.0], [60.0, 30.0]])


def make_gcps(cam: SceneCamera, noise_px: float = 0.0, rng=None) -> GcpSet:
    pix = cam.to_pixel(GCP_WORLD)
    if noise_px:
        pix = pix + (rng or np.random.default_rng(0)).normal(0, noise_px, pix.shape)
    ll = local_to_latlon(GCP_WORLD)
    return GcpSet(tuple(Gcp((float(p[0]), float(p[1])), (float(g[0]), float(g[1])))
                        for p, g in zip(pix, ll)))


def make_rulers(cam: SceneCamera, n: int = 12, rng=None) -> list[RulerPair]:
    """Surveyed segments spread over the frame, including the distorted corners."""
    rng = rng or np.random.default_rng(1)
    out = []
    for k in range(n):
        ang = 2 * math.pi * k / n
        r = 25.0 + 60.0 * (k % 3) / 2
        c = np.array([r * math.cos(ang) * 1.6, r * math.sin(ang) * 0.9])
        d = rng.uniform(-math.pi, math.pi)
        half = 0.5 * rng.uniform(8.0, 20.0) * np.array([math.cos(d), math.sin(d)])
        p1, p2 = c - half, c + half
        px = cam.to_pixel(np.array([p1, p2]))
        if np.any(px < 0) or np.any(px[:, 0] > cam.width_px) or np.any(px[:, 1] > cam.height_px):
            continue
        out.append(RulerPair(tuple(px[0]), tuple(px[1]), float(np.linalg.norm(p2 - p1))))
    return out


def render_pixels(table: TrackTable, cam: SceneCamera, rng=None, center_px: float = 0.0,
                  yaw_deg: float = 0.0, dim_rel: float = 0.0) -> TrackTable:
    """Project a metric table into raw pixels, optionally with detector noise."""
    rng = rng or np.random.default_rng(0)
    out = []
    for t in table:
        jac = cam.jacobian(t.xy)
        u = np.column_stack([np.cos(t.yaw), np.sin(t.yaw)])
        nrm = np.column_stack([-np.sin(t.yaw), np.cos(t.yaw)])
        ju = np.einsum("nij,nj->ni", jac, u)
        jn = np.einsum("nij,nj->ni", jac, nrm)
        px = cam.to_pixel(t.xy)
        n = len(t)
        if center_px:
            px = px + rng.normal(0, center_px, px.shape)
        yaw = np.arctan2(ju[:, 1], ju[:, 0])
        if yaw_deg:
            yaw = yaw + np.radians(rng.normal(0, yaw_deg, n))
        length = t.length * np.hypot(ju[:, 0], ju[:, 1])
        width = t.width * np.hypot(jn[:, 0], jn[:, 1])
        if dim_rel:
            length = length * (1 + rng.normal(0, dim_rel, n))
            width = width * (1 + rng.normal(0, dim_rel, n))
        out.append(Trajectory.from_arrays(t.track_id, t.cls, t.frame_rate_hz, t.frame, px[:, 0],
                                          px[:, 1], length, width, normalize_angle(yaw),
                                          confidence=t.confidence))
    return TrackTable({t.track_id: t for t in out}, table.scene_id, "pixel", table.frame_rate_hz)


# --- golden scene ------------------------------------------------------------------

def _pedestrians(start_id: int, duration_s: int) -> list[Trajectory]:
    """Pedestrians on the crosswalks, walking while their road is on red."""
    out = []
    tid = start_id
    for cyc in range(duration_s // CYCLE_S):
        for k, e in enumerate(EDGES):
            ns_road = e in NS_EDGES
            t_start = cyc * CYCLE_S + (31.0 if ns_road else 1.0) + 2.0 * k
            p0 = _rot(np.array([-ROAD_HALF - 2.0, 13.5]), k)
            p1 = _rot(np.array([ROAD_HALF + 2.0, 13.5]), k)
            d = p1 - p0
            v = 1.4 * d / np.linalg.norm(d)
            n = int(np.linalg.norm(d) / 1.4 * FPS)
            f0 = int(round(t_start * FPS))
            out.append(linear_track(tid, "pedestrian", p0, v, np.arange(f0, f0 + n), 0.6, 0.6, 0.85))
            tid += 1
    return out


def golden_truth(duration_s: int = 200) -> tuple[ScriptedScene, TrackTable]:
    """The scripted scene plus pedestrians, in the local frame."""
    sc = scripted_scene(duration_s=duration_s)
    peds = _pedestrians(len(sc.table) + 1, duration_s - 20)
    keep = [p for p in peds if not any(tracks_overlap(p, v, 0.3) for v in sc.table)]
    trajs = sc.table.sorted() + keep
    return sc, TrackTable({t.track_id: t for t in trajs}, "golden", "meter", FPS)


def golden_detections(truth: TrackTable, cam: SceneCamera, seed: int = 7) -> TrackTable:
    """Noisy pixel detections: jitter, dropouts, yaw flips and injected false tracks."""
    rng = np.random.default_rng(seed)
    pix = render_pixels(truth, cam, rng, center_px=1.0, yaw_deg=1.0, dim_rel=0.02)
    out = []
    for t in pix:
        keep = np.ones(len(t), bool)
        for _ in range(int(rng.integers(0, 3))):
            a = int(rng.integers(5, max(6, len(t) - 12)))
            keep[a:a + int(rng.integers(1, 8))] = False
        yaw = t.yaw.copy()
        if t.class_group == "MV" and len(t) > 40:
            a = int(rng.integers(10, len(t) - 20))
            yaw[a:a + 3] = normalize_angle(yaw[a:a + 3] + math.pi)
        conf = np.clip(rng.normal(0.85, 0.05, len(t)), 0.5, 0.99)
        out.append(t.replace(yaw=yaw, confidence=conf).take(np.flatnonzero(keep)))
    nid = max(t.track_id for t in truth) + 1
    host = max((t for t in pix if t.class_group == "MV"), key=len)
    sub = host.take(np.arange(10, len(host) - 10))
    out.append(sub.replace(x=sub.x + 4.0, y=sub.y - 3.0, track_id=nid,
                           confidence=np.full(len(sub), 0.7)))
    f = np.arange(200, 800)
    shadow = cam.to_pixel(np.array([[30.0, 35.0]]))[0]
    n = len(f)
    out.append(Trajectory.from_arrays(nid + 1, "car", FPS, f, shadow[0] + rng.normal(0, 0.5, n),
                                      shadow[1] + rng.normal(0, 0.5, n), np.full(n, 85.0),
                                      np.full(n, 35.0), np.full(n, 0.3), confidence=np.full(n, 0.8)))
    f = np.arange(300, 305)
    out.append(Trajectory.from_arrays(nid + 2, "van", FPS, f, np.full(5, 600.0), np.full(5, 500.0),
                                      np.full(5, 90.0), np.full(5, 35.0), np.zeros(5),
                                      confidence=np.full(5, 0.9)))
    f = np.arange(400, 520)
    p = cam.to_pixel(np.column_stack([np.linspace(-30, -20, 120), np.full(120, -30.0)]))
    out.append(Trajectory.from_arrays(nid + 3, "car", FPS, f, p[:, 0], p[:, 1], np.full(120, 85.0),
                                      np.full(120, 35.0), np.zeros(120), confidence=np.full(120, 0.35)))
    return TrackTable({t.track_id: t for t in out}, "golden", "pixel", FPS)


GOLDEN_CONFIG = """\
config_version: 1
scene_id: golden
frame_rate_hz: 10.0
threads: 1
paths:
  tracks: tracks.csv
  signals: signals.csv
  gcps: gcps.csv
  flight_log: flight_log.csv
  rulers: rulers.csv
  map: map.geojson
  out_dir: out
camera:
  fx: 2600.0
  fy: 2600.0
  cx: 1920.0
  cy: 1080.0
  width_px: 3840
  height_px: 2160
  dist: [0.0, 0.0, 0.0, 0.0, 0.0]
  refine_distortion: true
signal:
  clock_offset_s: 0.0
  reference_movement: NS
"""


def write_golden_inputs(directory, duration_s: int = 200, seed: int = 7) -> Path:
    """Write the golden scene input files and config; returns the config path."""
    from .ingest import FlightLog, write_flight_log, write_gcps, write_map, write_rulers, \
        write_signals, write_tracks

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cam = SceneCamera()
    sc, truth = golden_truth(duration_s)
    write_tracks(golden_detections(truth, cam, seed), d / "tracks.csv")
    write_signals(sc.timeline, d / "signals.csv")
    write_gcps(make_gcps(cam), d / "gcps.csv")
    write_rulers(make_rulers(cam), d / "rulers.csv")
    write_map(map_to_wgs84(sc.imap), d / "map.geojson")
    rng = np.random.default_rng(seed + 1)
    t = np.arange(0.0, float(duration_s))
    write_flight_log(FlightLog(t, 140.0 + rng.normal(0, 0.05, len(t)), np.zeros(len(t)),
                               np.zeros(len(t)), np.zeros(len(t))), d / "flight_log.csv")
    (d / "config.yaml").write_text(GOLDEN_CONFIG, encoding="utf-8")
    return d / "config.yaml"


def golden_dir() -> Path:
    """Bundled golden scene (inputs, config and expected outputs)."""
    return Path(__file__).parent / "data" / "golden"
