"""Pixel -> local metric frame: lens correction, homography, UTM.

The chain for a raw pixel ``p`` is::

    undistort(p) -> H -> (lon, lat) -> UTM -> minus local origin

Lens distortion uses the five-coefficient radial + tangential polynomial
``[k1, k2, p1, p2, k3]`` on normalized coordinates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares
from shapely.geometry import Polygon

from .model import TrackTable, Trajectory, normalize_angle
from .utm import UtmZone, from_utm, to_utm, zone_for

log = logging.getLogger(__name__)

GSD_TOLERANCE = 0.05


class DistortionError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    dist: tuple[float, float, float, float, float] = (0.0, 0.0, 0.0, 0.0, 0.0)
    gsd_m_per_px: float | None = None
    altitude_m: float | None = None
    width_px: int = 3840
    height_px: int = 2160

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        dist = tuple(float(c) for c in self.dist)
        if len(dist) != 5:
            raise ValueError("dist must hold [k1, k2, p1, p2, k3]")
        object.__setattr__(self, "dist", dist)
        if self.gsd_m_per_px is None and self.altitude_m is not None:
            object.__setattr__(self, "gsd_m_per_px", self.nominal_gsd)
        if self.gsd_m_per_px is not None and self.altitude_m is not None:
            nominal = self.nominal_gsd
            if abs(self.gsd_m_per_px - nominal) > GSD_TOLERANCE * nominal:
                raise ValueError(
                    f"gsd {self.gsd_m_per_px:.5g} m/px inconsistent with altitude "
                    f"{self.altitude_m} m and focal length (expected {nominal:.5g} +/- 5%)")

    @property
    def nominal_gsd(self) -> float:
        """Nadir ground sampling distance from altitude and focal length."""
        return self.altitude_m / math.sqrt(self.fx * self.fy)

    def with_dist(self, dist) -> "CameraModel":
        return replace(self, dist=tuple(dist))

    def normalize(self, p) -> np.ndarray:
        p = np.asarray(p, float)
        return np.stack([(p[..., 0] - self.cx) / self.fx, (p[..., 1] - self.cy) / self.fy], -1)

    def denormalize(self, q) -> np.ndarray:
        q = np.asarray(q, float)
        return np.stack([q[..., 0] * self.fx + self.cx, q[..., 1] * self.fy + self.cy], -1)

    def check_bounds(self, p, pad: float = 0.1):
        p = np.asarray(p, float).reshape(-1, 2)
        w, h = self.width_px, self.height_px
        bad = ((p[:, 0] < -pad * w) | (p[:, 0] > (1 + pad) * w)
               | (p[:, 1] < -pad * h) | (p[:, 1] > (1 + pad) * h))
        if np.any(bad):
            raise ValueError(f"pixel {tuple(p[np.argmax(bad)])} outside padded image bounds")


def _distort_normalized(q: np.ndarray, dist) -> np.ndarray:
    k1, k2, p1, p2, k3 = dist
    x, y = q[..., 0], q[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return np.stack([xd, yd], -1)


def _distort_jacobian(q: np.ndarray, dist) -> np.ndarray:
    k1, k2, p1, p2, k3 = dist
    x, y = q[..., 0], q[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    drad = k1 + 2.0 * k2 * r2 + 3.0 * k3 * r2 * r2   # d radial / d r2
    j11 = radial + 2 * x * x * drad + 2 * p1 * y + 6 * p2 * x
    j12 = 2 * x * y * drad + 2 * p1 * x + 2 * p2 * y
    j21 = 2 * x * y * drad + 2 * p1 * x + 2 * p2 * y
    j22 = radial + 2 * y * y * drad + 6 * p1 * y + 2 * p2 * x
    return np.stack([np.stack([j11, j12], -1), np.stack([j21, j22], -1)], -2)


def distort(p, cam: CameraModel) -> np.ndarray:
    """Forward lens model: ideal pixel -> observed pixel."""
    return cam.denormalize(_distort_normalized(cam.normalize(p), cam.dist))


def undistort(p, cam: CameraModel, max_iter: int = 20, tol: float = 1e-8,
              check_bounds: bool = True) -> np.ndarray:
    """Invert the lens polynomial (observed pixel -> ideal pixel).

    Newton iteration on normalized coordinates seeded at the observed point;
    zero coefficients return the input unchanged.
    """
    p = np.asarray(p, float)
    if check_bounds:
        cam.check_bounds(p)
    if not any(cam.dist):
        return p.copy()
    target = cam.normalize(p)
    q = target.copy()
    for _ in range(max_iter):
        resid = _distort_normalized(q, cam.dist) - target
        jac = _distort_jacobian(q, cam.dist)
        step = np.linalg.solve(jac, resid[..., None])[..., 0]
        q = q - step
        if np.all(np.abs(step) < tol * 1e-4):
            break
    resid = np.abs(_distort_normalized(q, cam.dist) - target).reshape(-1, 2).max(axis=1)
    bad = ~(resid <= tol)
    if np.any(bad):
        raise DistortionError(
            f"undistortion did not converge for point {tuple(p.reshape(-1, 2)[np.argmax(bad)])}")
    return cam.denormalize(q)


@dataclass(frozen=True)
class RulerPair:
    p1: tuple[float, float]
    p2: tuple[float, float]
    true_length_m: float


def ruler_objective(cam: CameraModel, pairs) -> float:
    r = _ruler_residuals(cam, pairs)
    return float(r @ r)


def _ruler_residuals(cam: CameraModel, pairs) -> np.ndarray:
    a = np.array([p.p1 for p in pairs], float)
    b = np.array([p.p2 for p in pairs], float)
    lengths = np.array([p.true_length_m for p in pairs], float)
    ua = undistort(a, cam, check_bounds=False)
    ub = undistort(b, cam, check_bounds=False)
    return np.hypot(*(ub - ua).T) * cam.gsd_m_per_px - lengths


def refine_distortion(cam0: CameraModel, pairs, center_fraction: float = 0.25) -> CameraModel:
    """Least-squares refinement of the lens coefficients from ruler pairs.

    Minimizes the squared mismatch between undistorted pixel lengths scaled
    by the GSD and the surveyed lengths.  When every endpoint sits within
    ``center_fraction`` of the half-diagonal from the principal point, the
    tangential terms are not identifiable and stay fixed.
    """
    pairs = list(pairs)
    if len(pairs) < 5:
        raise ValueError("insufficient constraints: need >= 5 ruler pairs")
    if cam0.gsd_m_per_px is None:
        raise ValueError("camera has no GSD; give altitude_m or gsd_m_per_px")
    pts = np.array([p.p1 for p in pairs] + [p.p2 for p in pairs], float)
    radius = np.hypot(pts[:, 0] - cam0.cx, pts[:, 1] - cam0.cy)
    half_diag = 0.5 * math.hypot(cam0.width_px, cam0.height_px)
    free = [0, 1, 2, 3, 4]
    if np.all(radius < center_fraction * half_diag):
        log.warning("ruler pairs all near the image center; tangential terms left unchanged")
        free = [0, 1, 4]
    base = np.array(cam0.dist, float)

    def residuals(theta):
        d = base.copy()
        d[free] = theta
        try:
            return _ruler_residuals(cam0.with_dist(d), pairs)
        except DistortionError:
            return np.full(len(pairs), 1e6)

    sol = least_squares(residuals, base[free], method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                        max_nfev=2000)
    d = base.copy()
    d[free] = sol.x
    refined = cam0.with_dist(d)
    if ruler_objective(refined, pairs) > ruler_objective(cam0, pairs):
        return cam0
    return refined


# --- homography ----------------------------------------------------------

def _hartley(points: np.ndarray) -> np.ndarray:
    c = points.mean(axis=0)
    d = np.sqrt(((points - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def apply_h(h: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, float)
    hom = pts @ h[:, :2].T + h[:, 2]
    return hom[..., :2] / hom[..., 2:3]


@dataclass(frozen=True)
class Homography:
    """Undistorted pixel -> (lon, lat) mapping."""

    matrix: np.ndarray
    rms_residual_m: float = 0.0
    target: str = "wgs84"

    def __post_init__(self):
        m = np.asarray(self.matrix, float)
        if m.shape != (3, 3) or abs(np.linalg.det(m)) < 1e-300 or np.linalg.cond(m) > 1e17:
            raise ValueError("homography must be an invertible 3x3 matrix")
        object.__setattr__(self, "matrix", m)

    def to_lonlat(self, pts) -> np.ndarray:
        return apply_h(self.matrix, pts)

    def to_pixel(self, lonlat) -> np.ndarray:
        return apply_h(np.linalg.inv(self.matrix), lonlat)


def fit_homography(gcps, cam: CameraModel | None = None) -> Homography:
    """Normalized DLT from ground control points.

    ``gcps`` is a :class:`~trajfuse.ingest.GcpSet` (or a sequence of
    ``(pixel, (lat, lon))``).  With ``cam`` given the pixels are undistorted
    first.  The RMS residual is measured in meters after projecting both
    the surveyed and the reprojected positions to UTM.
    """
    pix, geo = _gcp_arrays(gcps)
    if len(pix) < 4:
        raise ValueError("need >= 4 GCPs")
    if cam is not None:
        pix = undistort(pix, cam)
    lonlat = geo[:, ::-1]
    ts, td = _hartley(pix), _hartley(lonlat)
    ps = pix @ ts[:2, :2].T + ts[:2, 2]
    pd = lonlat @ td[:2, :2].T + td[:2, 2]
    rows = []
    for (x, y), (u, v) in zip(ps, pd):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    a = np.asarray(rows)
    _, sv, vt = np.linalg.svd(a)
    if np.linalg.matrix_rank(a, tol=1e-10 * sv[0]) < 8:
        raise ValueError("rank-deficient GCP configuration (collinear or coincident points)")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    h = h / h[2, 2] if abs(h[2, 2]) > 1e-12 else h / np.linalg.norm(h)
    rms = _gcp_rms(h, pix, geo)
    return Homography(h, rms)


def _gcp_arrays(gcps):
    points = getattr(gcps, "points", gcps)
    pix = np.array([p.pixel if hasattr(p, "pixel") else p[0] for p in points], float)
    geo = np.array([p.geodetic if hasattr(p, "geodetic") else p[1] for p in points], float)
    return pix, geo


def _gcp_rms(h, pix, geo) -> float:
    ll = apply_h(h, pix)
    zone = zone_for(float(geo[:, 0].mean()), float(geo[:, 1].mean()))
    e1, n1, _ = to_utm(geo[:, 0], geo[:, 1], zone)
    e2, n2, _ = to_utm(ll[:, 1], ll[:, 0], zone)
    return float(np.sqrt(np.mean((e1 - e2) ** 2 + (n1 - n2) ** 2)))


# --- local frame ---------------------------------------------------------

@dataclass(frozen=True)
class LocalFrame:
    zone: UtmZone
    origin_easting_m: float
    origin_northing_m: float

    def from_lonlat(self, lonlat) -> np.ndarray:
        lonlat = np.asarray(lonlat, float)
        e, n, _ = to_utm(lonlat[..., 1], lonlat[..., 0], self.zone)
        return np.stack([np.asarray(e) - self.origin_easting_m,
                         np.asarray(n) - self.origin_northing_m], -1)

    def to_lonlat(self, xy) -> np.ndarray:
        xy = np.asarray(xy, float)
        lat, lon = from_utm(xy[..., 0] + self.origin_easting_m,
                            xy[..., 1] + self.origin_northing_m, self.zone)
        return np.stack([lon, lat], -1)

    def contains_lonlat(self, lonlat, margin_deg: float = 0.5) -> np.ndarray:
        lonlat = np.asarray(lonlat, float)
        dl = np.abs((lonlat[..., 0] - self.zone.central_meridian + 180.0) % 360.0 - 180.0)
        ok = np.isfinite(lonlat).all(-1) & (dl <= 3.0 + margin_deg)
        return ok & (np.abs(lonlat[..., 1]) < 84.0)


def polygon_to_utm(poly: Polygon, crs: str, h: Homography | None, zone=None):
    """Project polygon vertices to UTM; returns ``(Polygon, zone)``."""
    coords = np.asarray(poly.exterior.coords, float)
    holes = [np.asarray(r.coords, float) for r in poly.interiors]

    def to_ll(c):
        if crs == "wgs84":
            return c
        if crs == "pixel":
            if h is None:
                raise ValueError("pixel-coordinate map needs a homography")
            return h.to_lonlat(c)
        raise ValueError(f"cannot project map coordinates from crs {crs!r}")

    ll = to_ll(coords)
    if zone is None:
        zone = zone_for(float(ll[:, 1].mean()), float(ll[:, 0].mean()))
    e, n, _ = to_utm(ll[:, 1], ll[:, 0], zone)
    hole_xy = []
    for hc in holes:
        hl = to_ll(hc)
        he, hn, _ = to_utm(hl[:, 1], hl[:, 0], zone)
        hole_xy.append(np.column_stack([he, hn]))
    return Polygon(np.column_stack([e, n]), hole_xy), zone


def build_local_frame(imap, h: Homography | None = None) -> LocalFrame:
    """Local frame with its origin at the area centroid of the inner polygon."""
    inner = imap.inner_polygon
    if inner is None or inner.area <= 0:
        raise ValueError("geometry error: inner polygon has zero area")
    projected, zone = polygon_to_utm(inner, imap.crs, h)
    if projected.area <= 1e-9:
        raise ValueError("geometry error: projected inner polygon has zero area")
    c = projected.centroid
    return LocalFrame(zone, float(c.x), float(c.y))


class PixelToLocal:
    """Composite raw-pixel -> local-frame mapping with a numeric Jacobian."""

    def __init__(self, cam: CameraModel, h: Homography, frame: LocalFrame):
        self.cam, self.h, self.frame = cam, h, frame

    def lonlat(self, p) -> np.ndarray:
        return self.h.to_lonlat(undistort(p, self.cam, check_bounds=False))

    def __call__(self, p) -> np.ndarray:
        return self.frame.from_lonlat(self.lonlat(p))

    def jacobian(self, p, step: float = 0.5) -> np.ndarray:
        """Central-difference Jacobian d(local)/d(pixel), shape (n, 2, 2)."""
        p = np.asarray(p, float).reshape(-1, 2)
        ex = np.array([step, 0.0])
        ey = np.array([0.0, step])
        pts = np.concatenate([p + ex, p - ex, p + ey, p - ey])
        out = self(pts).reshape(4, len(p), 2)
        jx = (out[0] - out[1]) / (2 * step)
        jy = (out[2] - out[3]) / (2 * step)
        return np.stack([jx, jy], axis=-1)

    def inverse(self, xy) -> np.ndarray:
        """Local frame -> raw pixel."""
        return distort(self.h.to_pixel(self.frame.to_lonlat(xy)), self.cam)


def georeference_trajectory(traj: Trajectory, mapping: PixelToLocal) -> Trajectory:
    """Convert one pixel trajectory to local meters.

    Positions go through the full mapping; length and width use the local
    linear scale along the box axes, and yaw is carried by the Jacobian.
    """
    if len(traj) == 0:
        return traj
    p = np.column_stack([traj.x, traj.y])
    ll = mapping.lonlat(p)
    ok = mapping.frame.contains_lonlat(ll)
    notes = list(traj.notes)
    if not ok.all():
        bad = traj.frame[~ok]
        notes.append(f"georef: {bad.size} point(s) outside UTM zone {mapping.frame.zone} dropped "
                     f"(frames {int(bad[0])}..{int(bad[-1])})")
        log.warning("track %d: %d point(s) mapped outside UTM zone", traj.track_id, bad.size)
        traj = traj.take(np.flatnonzero(ok))
        p, ll = p[ok], ll[ok]
        if len(traj) == 0:
            return traj.replace(notes=tuple(notes))
    xy = mapping.frame.from_lonlat(ll)
    jac = mapping.jacobian(p)
    u = np.column_stack([np.cos(traj.yaw), np.sin(traj.yaw)])
    n = np.column_stack([-np.sin(traj.yaw), np.cos(traj.yaw)])
    ju = np.einsum("nij,nj->ni", jac, u)
    jn = np.einsum("nij,nj->ni", jac, n)
    pixel = {"px_x": traj.x, "px_y": traj.y, "px_length": traj.length,
             "px_width": traj.width, "px_yaw": traj.yaw}
    return traj.replace(
        x=xy[:, 0], y=xy[:, 1],
        length=traj.length * np.hypot(ju[:, 0], ju[:, 1]),
        width=traj.width * np.hypot(jn[:, 0], jn[:, 1]),
        yaw=normalize_angle(np.arctan2(ju[:, 1], ju[:, 0])),
        heading=np.zeros(len(traj)), speed=np.zeros(len(traj)), accel=np.zeros(len(traj)),
        pixel=pixel, notes=tuple(notes))


def georeference_table(t: TrackTable, cam: CameraModel, h: Homography, frame: LocalFrame,
                       executor=None) -> TrackTable:
    if t.unit != "pixel":
        raise ValueError("unit mismatch: georeferencing expects a pixel table")
    mapping = PixelToLocal(cam, h, frame)
    trajs = t.sorted()
    if executor is None:
        out = [georeference_trajectory(tr, mapping) for tr in trajs]
    else:
        out = list(executor.map(lambda tr: georeference_trajectory(tr, mapping), trajs))
    return t.with_trajectories([o for o in out if len(o)], unit="meter")


def write_calibration(path, cam: CameraModel, h: Homography, frame: LocalFrame):
    """Plain-text calibration export (key: value lines)."""
    lines = [
        "# camera calibration and georeference",
        "homography_target: wgs84 (lon, lat); projected to UTM afterwards",
        f"fx: {cam.fx!r}", f"fy: {cam.fy!r}", f"cx: {cam.cx!r}", f"cy: {cam.cy!r}",
        "dist_k1_k2_p1_p2_k3: " + " ".join(repr(float(c)) for c in cam.dist),
        f"gsd_m_per_px: {cam.gsd_m_per_px!r}",
        f"altitude_m: {cam.altitude_m!r}",
        f"image_size_px: {cam.width_px} {cam.height_px}",
        "homography:",
    ]
    lines += ["  " + " ".join(repr(float(v)) for v in row) for row in h.matrix]
    lines += [
        f"rms_residual_m: {h.rms_residual_m!r}",
        f"utm_zone: {frame.zone}",
        f"origin_easting_m: {frame.origin_easting_m!r}",
        f"origin_northing_m: {frame.origin_northing_m!r}",
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_calibration(path):
    """Inverse of :func:`write_calibration`; returns ``(cam, h, frame)``."""
    vals: dict[str, str] = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        in_h = False
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            if line.startswith("  ") and in_h:
                rows.append([float(v) for v in line.split()])
                continue
            in_h = False
            key, _, val = line.partition(":")
            if key == "homography":
                in_h = True
                continue
            vals[key.strip()] = val.strip()

    def opt(v):
        return None if v == "None" else float(v)

    cam = CameraModel(float(vals["fx"]), float(vals["fy"]), float(vals["cx"]), float(vals["cy"]),
                      tuple(float(v) for v in vals["dist_k1_k2_p1_p2_k3"].split()),
                      opt(vals["gsd_m_per_px"]), opt(vals["altitude_m"]),
                      *(int(v) for v in vals["image_size_px"].split()))
    h = Homography(np.array(rows), float(vals["rms_residual_m"]))
    frame = LocalFrame(UtmZone.parse(vals["utm_zone"]), float(vals["origin_easting_m"]),
                       float(vals["origin_northing_m"]))
    return cam, h, frame


def map_to_local(imap, frame: LocalFrame, h: Homography | None = None):
    """Re-express every map polygon in the local metric frame."""
    from .ingest import IntersectionMap, LaneGroup

    if imap.crs == "local":
        return imap

    def conv(poly):
        utm_poly, _ = polygon_to_utm(poly, imap.crs, h, frame.zone)
        shift = np.array([frame.origin_easting_m, frame.origin_northing_m])
        ext = np.asarray(utm_poly.exterior.coords) - shift
        holes = [np.asarray(r.coords) - shift for r in utm_poly.interiors]
        return Polygon(ext, holes)

    return IntersectionMap(
        conv(imap.stop_line_polygon), conv(imap.inner_polygon),
        tuple(conv(c) for c in imap.crosswalks),
        tuple(LaneGroup(g.edge_id, g.direction, conv(g.polygon), g.bearing_rad, g.id)
              for g in imap.lane_groups),
        imap.movements, "local")
