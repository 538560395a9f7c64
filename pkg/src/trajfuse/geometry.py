"""Oriented-box geometry and the two 2D surrogate safety measures.

TTC follows the corner-ray construction: every corner of one box casts a
line along the relative velocity and the hits on the other box's edges are
classified as approaching (hit ahead) or receding (hit behind).  DGT is the
gap between the two objects' first entries into the intersection of their
swept areas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import shapely
from shapely.geometry import Polygon
from shapely.ops import unary_union

from .model import Trajectory

OVERLAP = -1.0
SNAP_GRID = 1e-9
MIN_ZONE_AREA = 1e-4
_EPS_PARALLEL = 1e-12


@dataclass(frozen=True)
class Obb:
    center: tuple[float, float]
    length: float
    width: float
    yaw: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("box dimensions must be positive")

    def corners(self) -> np.ndarray:
        return obb_corners(self)

    def polygon(self) -> Polygon:
        return Polygon(self.corners())


@dataclass(frozen=True)
class CornerRay:
    """Hits of one corner's line on a target box.

    ``distance`` is the nearest approaching hit (``inf`` when there is none).
    """

    distance: float
    approaching: bool
    receding: bool


@dataclass(frozen=True)
class TtcResult:
    value: float
    dtc_m: float | None = None

    @property
    def overlap(self) -> bool:
        return self.value == OVERLAP

    @property
    def finite(self) -> bool:
        return self.value >= 0 and math.isfinite(self.value)


@dataclass(frozen=True)
class DgtResult:
    zone: object | None = None
    t_enter_a: float | None = None
    t_enter_b: float | None = None
    value: float | None = None


def obb_corners(b: Obb) -> np.ndarray:
    """Corners in counter-clockwise order, front-right first."""
    return box_corners(np.array([b.center]), np.array([b.length]),
                       np.array([b.width]), np.array([b.yaw]))[0]


def box_corners(centers, lengths, widths, yaws) -> np.ndarray:
    """Vectorized corners, shape (n, 4, 2)."""
    centers = np.asarray(centers, float).reshape(-1, 2)
    hl = 0.5 * np.asarray(lengths, float).reshape(-1)
    hw = 0.5 * np.asarray(widths, float).reshape(-1)
    yaws = np.asarray(yaws, float).reshape(-1)
    local = np.stack([np.stack([hl, -hw], -1), np.stack([hl, hw], -1),
                      np.stack([-hl, hw], -1), np.stack([-hl, -hw], -1)], axis=1)
    c, s = np.cos(yaws), np.sin(yaws)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], axis=1)
    return np.einsum("nij,nkj->nki", rot, local) + centers[:, None, :]


def _axes(poly: np.ndarray) -> np.ndarray:
    """Edge normals of convex polygon(s), shape (..., k, 2)."""
    edges = np.roll(poly, -1, axis=-2) - poly
    return np.stack([-edges[..., 1], edges[..., 0]], axis=-1)


def sat_overlap_convex(pa: np.ndarray, pb: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Separating-axis test for batches of convex polygons.

    ``pa`` has shape (..., ka, 2) and ``pb`` (..., kb, 2); leading dims
    broadcast.  Touching counts as overlapping.
    """
    pa = np.asarray(pa, float)
    pb = np.asarray(pb, float)
    pa, pb = np.broadcast_arrays(pa, pb) if pa.shape == pb.shape else _bcast(pa, pb)
    axes = np.concatenate([_axes(pa), _axes(pb)], axis=-2)
    proj_a = np.einsum("...ad,...kd->...ak", axes, pa)
    proj_b = np.einsum("...ad,...kd->...ak", axes, pb)
    slack = tol * np.linalg.norm(axes, axis=-1) * (1.0 + np.abs(pa).max(axis=(-2, -1)))[..., None]
    sep = (proj_a.max(-1) < proj_b.min(-1) - slack) | (proj_b.max(-1) < proj_a.min(-1) - slack)
    return ~np.any(sep, axis=-1)


def _bcast(pa, pb):
    lead = np.broadcast_shapes(pa.shape[:-2], pb.shape[:-2])
    return (np.broadcast_to(pa, lead + pa.shape[-2:]),
            np.broadcast_to(pb, lead + pb.shape[-2:]))


def sat_overlap(a: Obb, b: Obb) -> bool:
    return bool(sat_overlap_convex(obb_corners(a), obb_corners(b)))


def corner_ray_distance(c, direction, target: Obb | np.ndarray) -> CornerRay:
    """Intersect the line through ``c`` along ``direction`` with the target's edges."""
    d = np.asarray(direction, float)
    if not np.hypot(*d) > 0:
        raise ValueError("direction must be non-zero")
    poly = obb_corners(target) if isinstance(target, Obb) else np.asarray(target, float)
    dist, appr, rec = _corner_rays(np.asarray(c, float)[None, None, :], d[None, :], poly[None])
    return CornerRay(float(dist[0, 0]), bool(appr[0, 0]), bool(rec[0, 0]))


def _corner_rays(corners: np.ndarray, d: np.ndarray, poly: np.ndarray):
    """Batched corner-ray test.

    corners: (n, m, 2) ray origins; d: (n, 2) directions; poly: (n, k, 2)
    target polygons.  Returns nearest approaching distance (n, m) and the
    approaching/receding flags (n, m).
    """
    a = poly[:, None, :, :]                          # (n,1,k,2)
    e = (np.roll(poly, -1, axis=1) - poly)[:, None]  # (n,1,k,2)
    dd = d[:, None, None, :]                         # (n,1,1,2)
    w = a - corners[:, :, None, :]                   # (n,m,k,2)
    denom = dd[..., 0] * e[..., 1] - dd[..., 1] * e[..., 0]   # cross(d, e)
    elen = np.hypot(e[..., 0], e[..., 1])
    dlen = np.hypot(dd[..., 0], dd[..., 1])
    parallel = np.abs(denom) <= _EPS_PARALLEL * elen * dlen
    with np.errstate(divide="ignore", invalid="ignore"):
        # c + s d = a + u e  ->  s = cross(w, e)/cross(d, e), u = cross(w, d)/cross(d, e)
        s = (w[..., 0] * e[..., 1] - w[..., 1] * e[..., 0]) / denom
        u = (w[..., 0] * dd[..., 1] - w[..., 1] * dd[..., 0]) / denom
    tol = 1e-12
    hit = ~parallel & (u >= -tol) & (u <= 1 + tol)
    # sign of (k - c) . d equals sign of s
    ahead = hit & (s >= 0)
    behind = hit & (s < 0)
    dist = np.where(ahead, np.abs(s) * dlen, np.inf).min(axis=-1)
    return dist, ahead.any(axis=-1), behind.any(axis=-1)


def ttc(a: Obb, va, b: Obb, vb) -> TtcResult:
    """Time-to-collision of two boxes under constant relative velocity."""
    res = ttc_batch(obb_corners(a)[None], np.asarray(va, float)[None],
                    obb_corners(b)[None], np.asarray(vb, float)[None])
    value, dtc = float(res[0][0]), float(res[1][0])
    return TtcResult(value, dtc if math.isfinite(dtc) and value >= 0 else None)


def ttc_batch(ca: np.ndarray, va: np.ndarray, cb: np.ndarray, vb: np.ndarray,
              still_tol: float = 1e-9):
    """Vectorized TTC.

    ``ca``/``cb`` are corner arrays (n, 4, 2); ``va``/``vb`` velocities
    (n, 2).  Returns ``(value, dtc)`` arrays; value is ``-1`` for overlap,
    ``inf`` when nothing approaches.
    """
    ca = np.asarray(ca, float)
    cb = np.asarray(cb, float)
    va = np.asarray(va, float)
    vb = np.asarray(vb, float)
    if not (np.all(np.isfinite(va)) and np.all(np.isfinite(vb))):
        raise ValueError("non-finite velocity")
    v = va - vb
    speed = np.hypot(v[:, 0], v[:, 1])
    n = len(ca)
    value = np.full(n, np.inf)
    dtc = np.full(n, np.inf)
    moving = speed > still_tol
    overlap = sat_overlap_convex(ca, cb)
    if np.any(moving):
        m = moving
        d_ab, ap_ab, re_ab = _corner_rays(ca[m], v[m], cb[m])
        d_ba, ap_ba, re_ba = _corner_rays(cb[m], -v[m], ca[m])
        appr = ap_ab.any(1) | ap_ba.any(1)
        rec = re_ab.any(1) | re_ba.any(1)
        dist = np.minimum(d_ab.min(1), d_ba.min(1))
        val = np.where(appr, dist / speed[m], np.inf)
        # overlapping boxes always show both indicators except in grazing
        # configurations; the SAT result settles those
        both = (appr & rec) | overlap[m]
        val = np.where(both, OVERLAP, val)
        value[m] = val
        dtc[m] = np.where(both | ~appr, np.inf, dist)
    still = ~moving
    value[still & overlap] = OVERLAP
    return value, dtc


# --- swept areas and DGT -------------------------------------------------

def _snap(geom):
    return shapely.set_precision(geom, SNAP_GRID)


def footprints(traj: Trajectory, idx=None) -> np.ndarray:
    sl = slice(None) if idx is None else idx
    return box_corners(np.column_stack([traj.x[sl], traj.y[sl]]), traj.length[sl],
                       traj.width[sl], traj.yaw[sl])


def _window_index(traj: Trajectory, t0: float, t1: float) -> np.ndarray:
    t = traj.time
    eps = 1e-9
    return np.flatnonzero((t >= t0 - eps) & (t <= t1 + eps))


def swept_region(traj: Trajectory, t0: float, t1: float):
    """Union of the per-frame footprints over ``[t0, t1]``."""
    if not t0 <= t1:
        raise ValueError("empty window")
    idx = _window_index(traj, t0, t1)
    if idx.size == 0:
        raise ValueError("empty window")
    polys = shapely.polygons(footprints(traj, idx))
    return _snap(unary_union(polys))


def dgt(traj_a: Trajectory, traj_b: Trajectory, window=None) -> DgtResult:
    """Dynamic gap time of two trajectories over a time window.

    ``window`` defaults to the shared time span.
    """
    lo = max(traj_a.time[0], traj_b.time[0])
    hi = min(traj_a.time[-1], traj_b.time[-1])
    if window is not None:
        lo, hi = max(lo, window[0]), min(hi, window[1])
    if lo > hi + 1e-9:
        return DgtResult()
    zone = swept_region(traj_a, lo, hi).intersection(swept_region(traj_b, lo, hi))
    zone = _snap(zone)
    if zone.is_empty or zone.area < MIN_ZONE_AREA:
        return DgtResult()
    shapely.prepare(zone)
    ta = _first_entry(traj_a, lo, hi, zone)
    tb = _first_entry(traj_b, lo, hi, zone)
    if ta is None or tb is None:
        return DgtResult(zone, ta, tb, None)
    return DgtResult(zone, ta, tb, abs(ta - tb))


def _first_entry(traj: Trajectory, lo: float, hi: float, zone) -> float | None:
    idx = _window_index(traj, lo, hi)
    inside = shapely.intersects(zone, shapely.polygons(footprints(traj, idx)))
    if not inside.any():
        return None
    return float(traj.time[idx[np.argmax(inside)]])


def pair_ttc_series(ta: Trajectory, tb: Trajectory):
    """TTC at every shared frame; returns ``(frames, values, dtc)``."""
    frames, ia, ib = np.intersect1d(ta.frame, tb.frame, assume_unique=True, return_indices=True)
    if frames.size == 0:
        return frames, np.zeros(0), np.zeros(0)
    ca = footprints(ta, ia)
    cb = footprints(tb, ib)
    value, dtc = ttc_batch(ca, ta.velocity[ia], cb, tb.velocity[ib])
    return frames, value, dtc


def pair_overlap_series(ta: Trajectory, tb: Trajectory):
    """SAT overlap at every shared frame; returns ``(frames, overlap)``."""
    frames, ia, ib = np.intersect1d(ta.frame, tb.frame, assume_unique=True, return_indices=True)
    if frames.size == 0:
        return frames, np.zeros(0, bool)
    return frames, sat_overlap_convex(footprints(ta, ia), footprints(tb, ib))


def candidate_pairs(trajs, radius: float = 50.0, cell: float = 10.0) -> list[tuple[int, int]]:
    """Co-temporal pairs that come within ``radius`` of each other.

    Uniform-grid index over box centers per frame.  Conservative: the
    search reach adds both boxes' half-diagonals to ``radius`` so no pair
    whose boxes come within ``radius`` is dropped.
    """
    trajs = list(trajs)
    if len(trajs) < 2:
        return []
    max_half_diag = max((0.5 * float(np.max(np.hypot(t.length, t.width))) for t in trajs if len(t)),
                        default=0.0)
    reach = radius + 2 * max_half_diag
    ncell = int(math.ceil(reach / cell))
    frames = np.concatenate([t.frame for t in trajs])
    owner = np.concatenate([np.full(len(t), k) for k, t in enumerate(trajs)])
    xs = np.concatenate([t.x for t in trajs])
    ys = np.concatenate([t.y for t in trajs])
    gx = np.floor(xs / cell).astype(np.int64)
    gy = np.floor(ys / cell).astype(np.int64)
    order = np.lexsort((owner, frames))
    fs = frames[order]
    bounds = np.flatnonzero(np.diff(fs)) + 1
    pairs = set()
    for sel in np.split(order, bounds):
        if len(sel) < 2:
            continue
        near = ((np.abs(gx[sel][:, None] - gx[sel][None, :]) <= ncell)
                & (np.abs(gy[sel][:, None] - gy[sel][None, :]) <= ncell))
        p, q = np.nonzero(np.triu(near, 1))
        pairs.update(zip(owner[sel][p].tolist(), owner[sel][q].tolist()))
    ids = [t.track_id for t in trajs]
    return sorted(tuple(sorted((ids[p], ids[q]))) for p, q in pairs)
