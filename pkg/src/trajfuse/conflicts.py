"""MV-MV conflict extraction, validation, classification and context.

Candidates come from the minimum TTC per pair and interaction episode;
DGT over a window around the TTC minimum then removes kinematically
plausible but physically impossible conflicts (e.g. vehicles separated by
a median).  Kinds follow the folded yaw difference at the TTC minimum.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .fmt import fmt
from .geometry import candidate_pairs, dgt, pair_ttc_series
from .model import TrackTable, Trajectory, angle_diff

log = logging.getLogger(__name__)

KINDS = ("rear_end", "sideswipe", "angle", "head_on")
DEFAULT_BANDS = ((0.0, 30.0, "rear_end"), (30.0, 85.0, "sideswipe"),
                 (85.0, 150.0, "angle"), (150.0, 180.0, "head_on"))
_TOL = 1e-9


@dataclass(frozen=True)
class ConflictConfig:
    ttc_max_s: float = 2.0
    dgt_max_s: float = 4.0
    episode_gap_s: float = 3.0
    dgt_window_s: float = 5.0
    pair_radius_m: float = 50.0
    assoc_radius_m: float = 10.0
    bands: tuple = DEFAULT_BANDS

    def __post_init__(self):
        check_bands(self.bands)


def check_bands(bands):
    """Bands must tile [0, 180] without gaps or overlaps."""
    bands = sorted((float(lo), float(hi), k) for lo, hi, k in bands)
    if not bands or bands[0][0] != 0.0 or bands[-1][1] != 180.0:
        raise ValueError("classification bands must cover [0, 180]")
    for (lo0, hi0, _), (lo1, _, _) in zip(bands, bands[1:]):
        if hi0 != lo1:
            raise ValueError(f"classification bands leave a gap or overlap at {hi0}")
    for lo, hi, k in bands:
        if not lo < hi:
            raise ValueError(f"empty band for {k}")
        if k not in KINDS:
            raise ValueError(f"unknown conflict kind {k!r}")


@dataclass(frozen=True)
class Candidate:
    pair: tuple[int, int]
    t_min_ttc: float
    min_ttc: float
    frame: int


@dataclass(frozen=True)
class ConflictEvent:
    pair: tuple[int, int]
    t_min_ttc: float
    min_ttc: float
    dgt: float
    location: tuple[float, float]
    delta_psi: float
    kind: str | None = None
    associated_ids: tuple[int, ...] = ()
    n_associated: int = 0
    frame: int = 0

    @property
    def key(self):
        return (self.t_min_ttc, self.pair)


# --- scan -------------------------------------------------------------------

def episodes(frames: np.ndarray, below: np.ndarray, gap_frames: float) -> list[np.ndarray]:
    """Index groups of below-threshold samples; a new group starts when the
    value stays out of range for more than ``gap_frames`` frames."""
    idx = np.flatnonzero(below)
    if idx.size == 0:
        return []
    f = frames[idx]
    cut = np.flatnonzero(np.diff(f) - 1 > gap_frames + 1e-9) + 1
    return np.split(idx, cut)


def scan_pair(ta: Trajectory, tb: Trajectory, cfg: ConflictConfig = ConflictConfig()) -> list[Candidate]:
    frames, value, _ = pair_ttc_series(ta, tb)
    if frames.size == 0:
        return []
    finite = np.isfinite(value) & (value >= 0)
    below = finite & (value <= cfg.ttc_max_s + _TOL)
    out = []
    for grp in episodes(frames, below, cfg.episode_gap_s * ta.frame_rate_hz):
        k = grp[np.argmin(value[grp])]
        f = int(frames[k])
        out.append(Candidate((ta.track_id, tb.track_id), f / ta.frame_rate_hz, float(value[k]), f))
    return out


def min_ttc_scan(table: TrackTable, cfg: ConflictConfig = ConflictConfig(), executor=None) -> list[Candidate]:
    """Minimum finite TTC per co-temporal MV pair and episode, kept when <= ttc_max."""
    mvs = table.group("MV")
    pairs = candidate_pairs(mvs, radius=cfg.pair_radius_m)

    def run(p):
        return scan_pair(table[p[0]], table[p[1]], cfg)

    res = [run(p) for p in pairs] if executor is None else list(executor.map(run, pairs))
    cands = [c for r in res for c in r]
    return sorted(cands, key=lambda c: (c.t_min_ttc, c.pair))


# --- validation and classification ------------------------------------------

def _state(traj: Trajectory, frame: int) -> int:
    i = traj.index_of(frame)
    if i is None:
        raise ValueError(f"track {traj.track_id} has no state at frame {frame}")
    return i


def delta_psi(yaw_a: float, yaw_b: float) -> float:
    """Folded yaw difference in degrees, in [0, 180]."""
    return float(min(180.0, abs(math.degrees(angle_diff(yaw_a, yaw_b)))))


def validate_conflicts(cands, table: TrackTable, cfg: ConflictConfig = ConflictConfig(),
                       executor=None) -> list[ConflictEvent]:
    """Keep candidates whose DGT around the TTC minimum exists and is <= dgt_max."""
    def run(c: Candidate):
        ta, tb = table[c.pair[0]], table[c.pair[1]]
        res = dgt(ta, tb, (c.t_min_ttc - cfg.dgt_window_s, c.t_min_ttc + cfg.dgt_window_s))
        if res.value is None or res.value > cfg.dgt_max_s + _TOL:
            return None
        ia, ib = _state(ta, c.frame), _state(tb, c.frame)
        loc = (0.5 * (ta.x[ia] + tb.x[ib]), 0.5 * (ta.y[ia] + tb.y[ib]))
        return ConflictEvent(c.pair, c.t_min_ttc, c.min_ttc, float(res.value),
                             (float(loc[0]), float(loc[1])), delta_psi(ta.yaw[ia], tb.yaw[ib]),
                             frame=c.frame)

    res = [run(c) for c in cands] if executor is None else list(executor.map(run, cands))
    dropped = sum(r is None for r in res)
    if dropped:
        log.info("conflicts: %d candidates dropped by DGT validation", dropped)
    return sorted((r for r in res if r is not None), key=lambda e: e.key)


def classify(dpsi: float, bands=DEFAULT_BANDS) -> str:
    """Conflict kind for a folded yaw difference in degrees."""
    if not (0.0 <= dpsi <= 180.0):
        raise ValueError(f"delta_psi {dpsi} outside [0, 180]")
    for lo, hi, kind in bands:
        if lo <= dpsi < hi or (hi == 180.0 and dpsi == 180.0):
            return kind
    raise ValueError(f"no band covers {dpsi}")


# --- context ----------------------------------------------------------------

def _neighbors(ev: ConflictEvent, table: TrackTable, radius: float, candidates):
    """Ids among ``candidates`` within ``radius`` of either pair member at the event frame."""
    a, b = table[ev.pair[0]], table[ev.pair[1]]
    pa = a.xy[_state(a, ev.frame)]
    pb = b.xy[_state(b, ev.frame)]
    out = []
    for t in candidates:
        if t.track_id in ev.pair:
            continue
        i = t.index_of(ev.frame)
        if i is None:
            continue
        p = t.xy[i]
        if min(np.hypot(*(p - pa)), np.hypot(*(p - pb))) <= radius + _TOL:
            out.append(t.track_id)
    return sorted(out)


def involved_ids(events) -> set[int]:
    return {i for e in events for i in e.pair}


def associated_objects(ev: ConflictEvent, events, table: TrackTable, radius: float = 10.0) -> tuple[int, ...]:
    """Other conflict-involved MVs within ``radius`` of either member at t_min_ttc."""
    inv = involved_ids(events)
    mvs = [t for t in table.group("MV") if t.track_id in inv]
    return tuple(_neighbors(ev, table, radius, mvs))


def conflict_mv_ratio(table: TrackTable, events) -> float:
    n = len(table.group("MV"))
    if n == 0:
        raise ValueError("no MV trajectories")
    return len(involved_ids(events)) / n


def n_cmvcp(events) -> float | None:
    if not events:
        return None
    return float(np.mean([e.n_associated for e in events]))


def vru_context_share(events, table: TrackTable, radius: float = 10.0) -> float | None:
    """VRUs near conflict pairs as a share of all other agents near them."""
    vru = table.group("VRU")
    everyone = table.sorted()
    num = sum(len(_neighbors(e, table, radius, vru)) for e in events)
    den = sum(len(_neighbors(e, table, radius, everyone)) for e in events)
    return num / den if den else None


def detect_conflicts(table: TrackTable, cfg: ConflictConfig = ConflictConfig(), executor=None):
    """Scan, validate, classify and attach associated objects."""
    cands = min_ttc_scan(table, cfg, executor)
    events = validate_conflicts(cands, table, cfg, executor)
    events = [replace(e, kind=classify(e.delta_psi, cfg.bands)) for e in events]
    out = []
    for e in events:
        ids = associated_objects(e, events, table, cfg.assoc_radius_m)
        out.append(replace(e, associated_ids=ids, n_associated=len(ids)))
    log.info("conflicts: %d candidates, %d events", len(cands), len(out))
    return out


# --- CSV --------------------------------------------------------------------

CONFLICT_COLUMNS = ["id", "track_a", "track_b", "t_min_ttc", "min_ttc", "dgt", "x", "y",
                    "delta_psi_deg", "kind", "n_associated"]


def threshold_header(cfg: ConflictConfig) -> str:
    bands = ";".join(f"{k}:[{fmt(lo)},{fmt(hi)})" for lo, hi, k in cfg.bands)
    return (f"# ttc_max_s={fmt(cfg.ttc_max_s)} dgt_max_s={fmt(cfg.dgt_max_s)} "
            f"episode_gap_s={fmt(cfg.episode_gap_s)} dgt_window_s={fmt(cfg.dgt_window_s)} "
            f"assoc_radius_m={fmt(cfg.assoc_radius_m)} bands={bands}")


def write_conflicts(events, path, cfg: ConflictConfig = ConflictConfig()):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(threshold_header(cfg) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONFLICT_COLUMNS)
        for k, e in enumerate(events, start=1):
            w.writerow([k, e.pair[0], e.pair[1], fmt(e.t_min_ttc), fmt(e.min_ttc), fmt(e.dgt),
                        fmt(e.location[0]), fmt(e.location[1]), fmt(e.delta_psi), e.kind,
                        e.n_associated])


def read_conflicts(path, frame_rate_hz: float = 10.0) -> list[ConflictEvent]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        for r in rows:
            t = float(r["t_min_ttc"])
            out.append(ConflictEvent(
                (int(r["track_a"]), int(r["track_b"])), t, float(r["min_ttc"]), float(r["dgt"]),
                (float(r["x"]), float(r["y"])), float(r["delta_psi_deg"]), r["kind"],
                (), int(r["n_associated"]), int(round(t * frame_rate_hz))))
    return out
