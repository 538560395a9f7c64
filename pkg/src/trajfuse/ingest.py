"""Input parsers with strict schemas, plus writers for round-tripping.

Structural problems (missing columns, duplicate keys, broken geometry)
raise.  Row-level value problems in the tracks file are rejected and
itemized in a :class:`ParseReport` so that nothing is dropped silently.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon, mapping, shape
from shapely.validation import explain_validity

from .model import CLASSES, TrackTable, Trajectory

TRACK_COLUMNS = ("frame", "track_id", "class", "cx_px", "cy_px", "length_px",
                 "width_px", "yaw_rad", "confidence")
SIGNAL_COLUMNS = ("time_s", "movement_id", "state")
GCP_COLUMNS = ("pixel_x", "pixel_y", "lat_deg", "lon_deg")
FLIGHT_COLUMNS = ("time_s", "altitude_m", "pitch_deg", "roll_deg", "yaw_deg")
RULER_COLUMNS = ("px_x1", "px_y1", "px_x2", "px_y2", "true_length_m")
SIGNAL_STATES = ("green", "yellow", "red")
ALTITUDE_BAND_M = (80.0, 150.0)


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


class GeometryError(ValueError):
    pass


@dataclass
class ParseReport:
    rows_in: int = 0
    rows_accepted: int = 0
    rejected: list[tuple[int, str]] = field(default_factory=list)

    @property
    def rows_rejected(self) -> int:
        return len(self.rejected)


def _read_csv(path, required, mapping_=None):
    """Yield ``(line_no, row)`` with canonical keys; checks the header."""
    mapping_ = mapping_ or {}
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.reader(row for row in fh if not row.startswith("#"))
    try:
        header = next(reader)
    except StopIteration:
        fh.close()
        raise SchemaError(f"{path}: empty file, expected header") from None
    header = [h.strip() for h in header]
    cols = {}
    for name in required:
        src = mapping_.get(name, name)
        if src not in header:
            fh.close()
            raise SchemaError(f"{path}: missing column {src!r}")
        cols[name] = header.index(src)

    def rows():
        with fh:
            for line_no, raw in enumerate(reader, start=2):
                if not raw or all(not c.strip() for c in raw):
                    continue
                yield line_no, {k: raw[i].strip() if i < len(raw) else "" for k, i in cols.items()}

    return rows()


def parse_tracks(path, schema_config=None, frame_rate_hz: float = 10.0, scene_id: str = "",
                 strict: bool = False) -> TrackTable:
    """Read tracker output into a pixel-unit :class:`TrackTable`.

    ``schema_config`` maps canonical column names to the file's names.
    Frames of a track must appear in increasing order; a repeated
    ``(track_id, frame)`` key is an error.
    """
    report = ParseReport()
    seen: dict[tuple[int, int], int] = {}
    rows_by_track: dict[int, list] = defaultdict(list)
    cls_by_track: dict[int, str] = {}
    for line_no, row in _read_csv(path, TRACK_COLUMNS, schema_config):
        report.rows_in += 1
        try:
            frame = int(row["frame"])
            tid = int(row["track_id"])
            cls = row["class"].lower()
            vals = [float(row[k]) for k in ("cx_px", "cy_px", "length_px", "width_px",
                                            "yaw_rad", "confidence")]
        except ValueError as exc:
            report.rejected.append((line_no, f"unparseable value: {exc}"))
            continue
        reason = None
        if cls not in CLASSES:
            reason = f"unknown class {cls!r}"
        elif not all(math.isfinite(v) for v in vals):
            reason = "non-finite value"
        elif vals[2] <= 0 or vals[3] <= 0:
            reason = "non-positive box dimension"
        elif not 0.0 <= vals[5] <= 1.0:
            reason = "confidence outside [0, 1]"
        elif tid in cls_by_track and cls_by_track[tid] != cls:
            reason = f"class changes within track {tid}"
        if reason:
            report.rejected.append((line_no, reason))
            continue
        key = (tid, frame)
        if key in seen:
            raise DataError(f"{path}: duplicate (track_id, frame) key {key} "
                            f"on lines {seen[key]} and {line_no}")
        seen[key] = line_no
        prev = rows_by_track[tid]
        if prev and prev[-1][0] > frame:
            raise DataError(f"{path}: non-monotone frames in track_id {tid} (line {line_no})")
        cls_by_track[tid] = cls
        prev.append((frame, *vals))
        report.rows_accepted += 1
    if strict and report.rejected:
        line_no, reason = report.rejected[0]
        raise DataError(f"{path}: line {line_no}: {reason}")
    trajs = {}
    for tid, rows in rows_by_track.items():
        a = np.array(rows, float).reshape(-1, 7)
        trajs[tid] = Trajectory.from_arrays(
            tid, cls_by_track[tid], frame_rate_hz, a[:, 0].astype(np.int64), a[:, 1], a[:, 2],
            a[:, 3], a[:, 4], a[:, 5], confidence=a[:, 6])
    table = TrackTable(dict(sorted(trajs.items())), scene_id, "pixel", frame_rate_hz)
    table.parse_report = report
    return table


def _fmt(v) -> str:
    return repr(float(v))


def write_tracks(table: TrackTable, path):
    """Write a pixel table in the tracker schema (full precision)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_COLUMNS)
        for t in table:
            for i in range(len(t)):
                if t.interpolated[i]:
                    continue
                w.writerow([int(t.frame[i]), t.track_id, t.cls, _fmt(t.x[i]), _fmt(t.y[i]),
                            _fmt(t.length[i]), _fmt(t.width[i]), _fmt(t.yaw[i]),
                            _fmt(t.confidence[i])])


# --- signals ---------------------------------------------------------------

@dataclass
class SignalTimeline:
    """Per-second signal states for each movement.

    ``states[movement_id]`` holds one state per second starting at
    ``start_s``.  ``clock_offset_s`` is added to video time before lookup.
    """

    start_s: int
    states: dict[str, list[str]]
    cycle_boundaries: list[int] = field(default_factory=list)
    clock_offset_s: float = 0.0

    @property
    def end_s(self) -> int:
        """Exclusive end of coverage."""
        n = len(next(iter(self.states.values()))) if self.states else 0
        return self.start_s + n

    @property
    def movements(self) -> list[str]:
        return sorted(self.states)

    @property
    def entries(self) -> list[tuple[int, str, str]]:
        out = []
        for k in range(self.end_s - self.start_s):
            for m in self.movements:
                out.append((self.start_s + k, m, self.states[m][k]))
        return out

    def state(self, second: int, movement_id: str) -> str:
        if movement_id not in self.states:
            raise KeyError(f"unknown movement {movement_id!r}")
        k = second - self.start_s
        if not 0 <= k < self.end_s - self.start_s:
            raise ValueError(f"time {second} s outside signal coverage "
                             f"[{self.start_s}, {self.end_s}) s")
        return self.states[movement_id][k]


def derive_cycle_boundaries(states: dict[str, list[str]], start_s: int,
                            reference: str | None = None) -> list[int]:
    """Green onsets of the reference movement (first movement by default)."""
    if not states:
        return []
    ref = reference or sorted(states)[0]
    seq = states[ref]
    out = []
    for k, s in enumerate(seq):
        if s == "green" and (k == 0 or seq[k - 1] != "green"):
            out.append(start_s + k)
    return out


def parse_signals(path, clock_offset_s: float = 0.0, reference_movement: str | None = None,
                  cycle_boundaries=None) -> SignalTimeline:
    by_move: dict[str, dict[int, str]] = defaultdict(dict)
    for line_no, row in _read_csv(path, SIGNAL_COLUMNS):
        try:
            tv = float(row["time_s"])
        except ValueError:
            raise DataError(f"{path}: line {line_no}: bad time {row['time_s']!r}") from None
        if tv != int(tv):
            raise DataError(f"{path}: line {line_no}: time_s must be whole seconds")
        state = row["state"].lower()
        if state not in SIGNAL_STATES:
            raise DataError(f"{path}: line {line_no}: unknown state token {row['state']!r}")
        mv = row["movement_id"]
        if int(tv) in by_move[mv]:
            raise DataError(f"{path}: line {line_no}: duplicate entry ({int(tv)}, {mv})")
        by_move[mv][int(tv)] = state
    if not by_move:
        return SignalTimeline(0, {}, [], clock_offset_s)
    lo = min(min(d) for d in by_move.values())
    hi = max(max(d) for d in by_move.values())
    missing = []
    for mv, d in sorted(by_move.items()):
        gaps = [s for s in range(lo, hi + 1) if s not in d]
        missing += [(mv, s) for s in gaps]
    if missing:
        secs = sorted({s for _, s in missing})
        raise DataError(f"{path}: coverage gap at {', '.join(str(s) for s in secs)} s")
    states = {mv: [d[s] for s in range(lo, hi + 1)] for mv, d in sorted(by_move.items())}
    if reference_movement is not None and reference_movement not in states:
        raise DataError(f"reference movement {reference_movement!r} not in signal file")
    cycles = (sorted(int(c) for c in cycle_boundaries) if cycle_boundaries is not None
              else derive_cycle_boundaries(states, lo, reference_movement))
    return SignalTimeline(lo, states, cycles, clock_offset_s)


def write_signals(tl: SignalTimeline, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SIGNAL_COLUMNS)
        for t, m, s in tl.entries:
            w.writerow([t, m, s])


# --- GCPs, flight log, rulers ----------------------------------------------

@dataclass(frozen=True)
class Gcp:
    pixel: tuple[float, float]
    geodetic: tuple[float, float]   # (lat, lon) degrees


@dataclass(frozen=True)
class GcpSet:
    points: tuple[Gcp, ...]

    def __post_init__(self):
        pts = self.points
        if len(pts) < 4:
            raise DataError(f"need >=4 GCPs, got {len(pts)}")
        pix = np.array([p.pixel for p in pts], float)
        for i in range(len(pix)):
            for j in range(i + 1, len(pix)):
                if np.allclose(pix[i], pix[j], atol=1e-9):
                    raise DataError(f"GCPs {i} and {j} share pixel {tuple(pix[i])}")
        centered = pix - pix.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[-1] <= 1e-9 * max(sv[0], 1.0):
            raise DataError("GCP pixels are collinear")
        for p in pts:
            lat, lon = p.geodetic
            if not (-90 <= lat <= 90 and -180 <= lon <= 180):
                raise DataError(f"GCP geodetic {p.geodetic} is not WGS84 decimal degrees")


def parse_gcps(path) -> GcpSet:
    pts = []
    for line_no, row in _read_csv(path, GCP_COLUMNS):
        try:
            pts.append(Gcp((float(row["pixel_x"]), float(row["pixel_y"])),
                           (float(row["lat_deg"]), float(row["lon_deg"]))))
        except ValueError:
            raise DataError(f"{path}: line {line_no}: unparseable GCP row") from None
    return GcpSet(tuple(pts))


def write_gcps(gcps: GcpSet, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GCP_COLUMNS)
        for p in gcps.points:
            w.writerow([_fmt(p.pixel[0]), _fmt(p.pixel[1]), _fmt(p.geodetic[0]), _fmt(p.geodetic[1])])


@dataclass(frozen=True)
class FlightLog:
    time_s: np.ndarray
    altitude_m: np.ndarray
    pitch_deg: np.ndarray
    roll_deg: np.ndarray
    yaw_deg: np.ndarray

    @property
    def median_altitude_m(self) -> float:
        return float(np.median(self.altitude_m))


def parse_flight_log(path) -> FlightLog:
    rows = []
    for line_no, row in _read_csv(path, FLIGHT_COLUMNS):
        try:
            rows.append([float(row[k]) for k in FLIGHT_COLUMNS])
        except ValueError:
            raise DataError(f"{path}: line {line_no}: unparseable flight-log row") from None
    a = np.array(rows, float).reshape(-1, 5)
    if len(a) == 0:
        raise DataError(f"{path}: flight log has no samples")
    if np.any(np.diff(a[:, 0]) <= 0):
        raise DataError(f"{path}: flight-log time is not monotone")
    lo, hi = ALTITUDE_BAND_M
    bad = (a[:, 1] < lo) | (a[:, 1] > hi)
    if bad.any():
        raise DataError(f"{path}: altitude {a[bad, 1][0]} m outside sanity band [{lo}, {hi}] m")
    return FlightLog(*(a[:, k].copy() for k in range(5)))


def write_flight_log(log: FlightLog, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FLIGHT_COLUMNS)
        for row in zip(log.time_s, log.altitude_m, log.pitch_deg, log.roll_deg, log.yaw_deg):
            w.writerow([_fmt(v) for v in row])


def parse_rulers(path):
    from .georef import RulerPair

    out = []
    for line_no, row in _read_csv(path, RULER_COLUMNS):
        try:
            v = [float(row[k]) for k in RULER_COLUMNS]
        except ValueError:
            raise DataError(f"{path}: line {line_no}: unparseable ruler row") from None
        if v[4] <= 0:
            raise DataError(f"{path}: line {line_no}: ruler length must be positive")
        out.append(RulerPair((v[0], v[1]), (v[2], v[3]), v[4]))
    return out


def write_rulers(pairs, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RULER_COLUMNS)
        for p in pairs:
            w.writerow([_fmt(p.p1[0]), _fmt(p.p1[1]), _fmt(p.p2[0]), _fmt(p.p2[1]),
                        _fmt(p.true_length_m)])


# --- intersection map ------------------------------------------------------

MOVEMENT_KINDS = ("left", "straight", "right", "uturn")
MAP_CRS = ("local", "wgs84", "pixel")


@dataclass(frozen=True)
class LaneGroup:
    edge_id: str
    direction: str          # entry | exit
    polygon: Polygon
    bearing_rad: float      # travel direction, local frame, CCW from +x
    id: str = ""


@dataclass(frozen=True)
class Movement:
    movement_id: str
    entry_edge: str
    exit_edge: str
    kind: str


@dataclass(frozen=True)
class IntersectionMap:
    """Polygons with roles.

    ``crs`` says what the coordinates are: ``local`` (meters in the local
    frame), ``wgs84`` (lon, lat) or ``pixel`` (undistorted pixels).
    Bearings are always in the local metric frame.
    """

    stop_line_polygon: Polygon
    inner_polygon: Polygon
    crosswalks: tuple[Polygon, ...] = ()
    lane_groups: tuple[LaneGroup, ...] = ()
    movements: tuple[Movement, ...] = ()
    crs: str = "local"

    def __post_init__(self):
        if self.crs not in MAP_CRS:
            raise ValueError(f"map crs must be one of {MAP_CRS}")
        validate_map(self)

    def movement_for(self, entry_edge, exit_edge) -> Movement | None:
        for m in self.movements:
            if m.entry_edge == entry_edge and m.exit_edge == exit_edge:
                return m
        return None

    @property
    def edges(self) -> set[str]:
        return {g.edge_id for g in self.lane_groups}


def _check_polygon(poly: Polygon, name: str):
    if poly.is_empty or poly.area <= 0:
        raise GeometryError(f"polygon {name}: zero area")
    if not poly.is_valid:
        raise GeometryError(f"polygon {name}: self-intersecting or invalid ({explain_validity(poly)})")


def validate_map(m: IntersectionMap):
    _check_polygon(m.stop_line_polygon, "stopLine")
    _check_polygon(m.inner_polygon, "inner")
    for k, c in enumerate(m.crosswalks):
        _check_polygon(c, f"crosswalk[{k}]")
    for g in m.lane_groups:
        _check_polygon(g.polygon, g.id or f"laneGroup {g.edge_id}/{g.direction}")
        if g.direction not in ("entry", "exit"):
            raise GeometryError(f"lane group {g.edge_id}: direction must be entry or exit")
    rel = 1e-6 * m.inner_polygon.area      # slivers from reprojected shared edges
    if m.inner_polygon.difference(m.stop_line_polygon).area > rel:
        raise GeometryError("invariant violated: inner polygon not contained in stopLine polygon")
    for k, c in enumerate(m.crosswalks):
        if m.inner_polygon.intersection(c).area > rel:
            raise GeometryError(f"invariant violated: inner polygon overlaps crosswalk[{k}]")
    edges = m.edges
    for mv in m.movements:
        if mv.kind not in MOVEMENT_KINDS:
            raise GeometryError(f"movement {mv.movement_id}: unknown kind {mv.kind!r}")
        for e in (mv.entry_edge, mv.exit_edge):
            if e not in edges:
                raise GeometryError(f"movement {mv.movement_id} references unknown edge {e!r}")


def _ring_closed(coords) -> bool:
    return len(coords) >= 4 and list(coords[0]) == list(coords[-1])


def _polygon_from_feature(feat, fid):
    geom = feat.get("geometry") or {}
    if geom.get("type") != "Polygon":
        raise GeometryError(f"feature {fid}: geometry must be a Polygon")
    for ring in geom.get("coordinates", []):
        if not _ring_closed(ring):
            raise GeometryError(f"feature {fid}: polygon ring is not closed")
    return shape(geom)


def parse_map(path) -> IntersectionMap:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise SchemaError(f"{path}: expected a GeoJSON FeatureCollection")
    props = doc.get("properties") or {}
    crs = props.get("crs", "local")
    stop = inner = None
    crosswalks, groups = [], []
    for k, feat in enumerate(doc.get("features", [])):
        fp = feat.get("properties") or {}
        fid = fp.get("id", str(k))
        role = fp.get("role")
        poly = _polygon_from_feature(feat, fid)
        _check_polygon(poly, fid)
        if role == "stopLine":
            stop = poly
        elif role == "inner":
            inner = poly
        elif role == "crosswalk":
            crosswalks.append(poly)
        elif role == "laneGroup":
            try:
                groups.append(LaneGroup(str(fp["edge_id"]), fp["direction"], poly,
                                        float(fp["bearing_rad"]), fid))
            except KeyError as exc:
                raise SchemaError(f"{path}: laneGroup {fid} missing property {exc}") from None
        else:
            raise SchemaError(f"{path}: feature {fid} has unknown role {role!r}")
    if stop is None or inner is None:
        raise SchemaError(f"{path}: map needs one stopLine and one inner polygon")
    moves = []
    for mv in props.get("movements", []):
        try:
            moves.append(Movement(str(mv["movement_id"]), str(mv["entry_edge"]),
                                  str(mv["exit_edge"]), mv["kind"]))
        except KeyError as exc:
            raise SchemaError(f"{path}: movement entry missing {exc}") from None
    return IntersectionMap(stop, inner, tuple(crosswalks), tuple(groups), tuple(moves), crs)


def map_to_geojson(m: IntersectionMap) -> dict:
    def feat(poly, **props):
        return {"type": "Feature", "properties": props, "geometry": mapping(poly)}

    feats = [feat(m.stop_line_polygon, role="stopLine", id="stopLine"),
             feat(m.inner_polygon, role="inner", id="inner")]
    feats += [feat(c, role="crosswalk", id=f"crosswalk{k}") for k, c in enumerate(m.crosswalks)]
    feats += [feat(g.polygon, role="laneGroup", id=g.id or f"{g.edge_id}_{g.direction}",
                   edge_id=g.edge_id, direction=g.direction, bearing_rad=g.bearing_rad)
              for g in m.lane_groups]
    moves = [{"movement_id": v.movement_id, "entry_edge": v.entry_edge,
              "exit_edge": v.exit_edge, "kind": v.kind} for v in m.movements]
    return {"type": "FeatureCollection", "properties": {"crs": m.crs, "movements": moves},
            "features": feats}


def write_map(m: IntersectionMap, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(map_to_geojson(m), fh, indent=1, sort_keys=True)
        fh.write("\n")
