"""Trajectory smoothing, gap filling and motion refinement.

Stage order per trajectory is fixed::

    savgol_dynamic -> kinematic_interpolate -> rts_smooth
        -> median_dimensions -> stabilize_yaw -> correct_yaw_with_heading

:func:`refine_trajectory` runs the whole chain.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import savgol_coeffs

from .model import Trajectory, angle_diff, normalize_angle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SmootherConfig:
    sg_poly_order: int = 2
    sg_max_window: int = 11
    process_noise_q: float = 2.0
    measurement_noise_r: float = 0.25
    max_gap_frames: int = 20
    initial_cov: float = 100.0

    def __post_init__(self):
        if self.sg_max_window % 2 != 1 or self.sg_max_window <= self.sg_poly_order:
            raise ValueError("sg_max_window must be odd and larger than sg_poly_order")
        if not (self.process_noise_q > 0 and self.measurement_noise_r > 0):
            raise ValueError("process_noise_q and measurement_noise_r must be positive")
        if self.max_gap_frames < 0:
            raise ValueError("max_gap_frames must be >= 0")


@dataclass(frozen=True)
class RefineConfig:
    speed_gate: float = 1.0
    max_dev_deg: float = 45.0
    k_stable: int = 5
    tol_stable_deg: float = 5.0
    tol_outlier_deg: float = 30.0


# --- Savitzky-Golay -------------------------------------------------------

_COEFF_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _sg_weights(window: int, order: int) -> np.ndarray:
    key = (window, order)
    if key not in _COEFF_CACHE:
        _COEFF_CACHE[key] = savgol_coeffs(window, order, use="dot")
    return _COEFF_CACHE[key]


def _segments(frames: np.ndarray) -> list[tuple[int, int]]:
    """Index ranges [start, stop) of runs of consecutive frames."""
    if len(frames) == 0:
        return []
    cut = np.flatnonzero(np.diff(frames) != 1) + 1
    starts = np.concatenate([[0], cut])
    stops = np.concatenate([cut, [len(frames)]])
    return list(zip(starts.tolist(), stops.tolist()))


def savgol_dynamic(series, cfg: SmootherConfig = SmootherConfig(), frames=None) -> np.ndarray:
    """Centered S-G smoothing whose window shrinks at ends and gaps.

    Each sample uses the largest odd window (up to ``sg_max_window``) that
    fits inside its run of consecutive frames; the polynomial order drops
    to ``window - 1`` when the window gets that small, which reproduces the
    sample.
    """
    y = np.asarray(series, float)
    n = len(y)
    if n < cfg.sg_poly_order + 2:
        log.warning("series of length %d too short for S-G; passed through", n)
        return y.copy()
    frames = np.arange(n) if frames is None else np.asarray(frames)
    out = y.copy()
    hmax = cfg.sg_max_window // 2
    for s, e in _segments(frames):
        seg = y[s:e]
        m = e - s
        for i in range(m):
            h = min(hmax, i, m - 1 - i)
            if h == 0:
                continue
            w = 2 * h + 1
            out[s + i] = _sg_weights(w, min(cfg.sg_poly_order, w - 1)) @ seg[i - h:i + h + 1]
    return out


def savgol_angle(yaw, cfg: SmootherConfig = SmootherConfig(), frames=None) -> np.ndarray:
    """S-G for box orientation, which is only defined modulo pi.

    Smooths the doubled-angle unit vector and then picks, per sample, the
    branch closest to the raw value so that heading flips are left for the
    refinement stage to decide.
    """
    yaw = np.asarray(yaw, float)
    c = savgol_dynamic(np.cos(2 * yaw), cfg, frames)
    s = savgol_dynamic(np.sin(2 * yaw), cfg, frames)
    half = 0.5 * np.arctan2(s, c)
    alt = half + np.pi
    pick = np.abs(angle_diff(half, yaw)) <= np.abs(angle_diff(alt, yaw))
    return normalize_angle(np.where(pick, half, alt))


def savgol_trajectory(traj: Trajectory, cfg: SmootherConfig) -> Trajectory:
    f = traj.frame
    return traj.replace(
        x=savgol_dynamic(traj.x, cfg, f), y=savgol_dynamic(traj.y, cfg, f),
        length=np.maximum(savgol_dynamic(traj.length, cfg, f), 1e-3),
        width=np.maximum(savgol_dynamic(traj.width, cfg, f), 1e-3),
        yaw=savgol_angle(traj.yaw, cfg, f))


# --- gap filling ------------------------------------------------------------

def _rot(v, ang):
    c, s = math.cos(ang), math.sin(ang)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _adjacent(f, a, b):
    return 0 <= a < len(f) and 0 <= b < len(f) and f[b] - f[a] == 1


def _turn(c_early, c_late):
    if np.hypot(*c_early) < 1e-12 or np.hypot(*c_late) < 1e-12:
        return 0.0
    return float(angle_diff(math.atan2(c_late[1], c_late[0]), math.atan2(c_early[1], c_early[0])))


def _chord_turn(f, xy, idx, side):
    """Per-frame chord and turn rate next to a gap edge.

    ``side=-1`` looks at the samples before ``idx`` (chord ``idx-1 -> idx``),
    ``side=+1`` at those after it (chord ``idx -> idx+1``).  Chords point
    along travel.  Returns ``None`` when the adjacent sample is missing;
    the turn rate is 0 when only one chord is available.
    """
    if side < 0:
        if not _adjacent(f, idx - 1, idx):
            return None
        chord = xy[idx] - xy[idx - 1]
        omega = _turn(xy[idx - 1] - xy[idx - 2], chord) if _adjacent(f, idx - 2, idx - 1) else 0.0
    else:
        if not _adjacent(f, idx, idx + 1):
            return None
        chord = xy[idx + 1] - xy[idx]
        omega = _turn(chord, xy[idx + 2] - xy[idx + 1]) if _adjacent(f, idx + 1, idx + 2) else 0.0
    return chord, omega


def _yaw_rate(f, yaw, idx, side):
    if side < 0:
        return float(angle_diff(yaw[idx], yaw[idx - 1])) if _adjacent(f, idx - 1, idx) else None
    return float(angle_diff(yaw[idx + 1], yaw[idx])) if _adjacent(f, idx, idx + 1) else None


def _fill_gap(f, xy, yaw, i, n):
    """Positions and yaw for the ``n`` frames between indices i and i+1."""
    p0, p1 = xy[i], xy[i + 1]
    fwd = _chord_turn(f, xy, i, -1)
    bwd = _chord_turn(f, xy, i + 1, +1)
    k = np.arange(1, n + 1)
    w = k / (n + 1)
    if fwd is not None and bwd is not None:
        c0, om0 = fwd
        c1, om1 = bwd
        pf = np.empty((n, 2))
        cur, ch = p0.copy(), c0.copy()
        for j in range(n):
            ch = _rot(ch, om0)
            cur = cur + ch
            pf[j] = cur
        pb = np.empty((n, 2))
        cur, ch = p1.copy(), c1.copy()
        for j in range(n - 1, -1, -1):
            ch = _rot(ch, -om1)
            cur = cur - ch
            pb[j] = cur
        pos = (1 - w)[:, None] * pf + w[:, None] * pb
        pos_method = "kinematic"
    else:
        pos = (1 - w)[:, None] * p0 + w[:, None] * p1
        pos_method = "linear"
    r0 = _yaw_rate(f, yaw, i, -1)
    r1 = _yaw_rate(f, yaw, i + 1, +1)
    if r0 is not None and r1 is not None:
        yf = yaw[i] + r0 * k
        yb = yaw[i + 1] - r1 * (n + 1 - k)
        yw = yf + w * angle_diff(yb, yf)
    else:
        yw = yaw[i] + w * angle_diff(yaw[i + 1], yaw[i])
    return pos, normalize_angle(yw), pos_method


def kinematic_interpolate(traj: Trajectory, cfg: SmootherConfig = SmootherConfig()) -> list[Trajectory]:
    """Fill missing frames; returns one trajectory, or several after splits.

    Positions advance with the local per-frame velocity and turn rate from
    both bracketing sides and the two propagations are blended; yaw does
    the same with its angular rate.  Without the neighbors those estimates
    need, positions and yaw fall back to linear interpolation; box
    dimensions always take the nearest observation.  Gaps longer than
    ``max_gap_frames`` split the track; pieces after the first carry a note.
    """
    if len(traj) < 2 or traj.is_gap_free():
        return [traj]
    f = traj.frame
    cuts = np.flatnonzero(np.diff(f) - 1 > cfg.max_gap_frames) + 1
    pieces = np.split(np.arange(len(f)), cuts)
    out = []
    for k, idx in enumerate(pieces):
        piece = traj.take(idx)
        if k > 0:
            piece = piece.replace(notes=piece.notes + (
                f"split from track {traj.track_id} at frame {int(piece.frame[0])} "
                f"(gap > {cfg.max_gap_frames} frames)",))
        out.append(_fill(piece))
    return out


def _fill(traj: Trajectory) -> Trajectory:
    if traj.is_gap_free():
        return traj
    f, xy, yaw = traj.frame, traj.xy, traj.yaw
    cols = {name: [] for name in ("frame", "x", "y", "length", "width", "yaw", "confidence",
                                  "interpolated")}
    px = None if traj.pixel is None else {k: [] for k in traj.pixel}
    for i in range(len(f)):
        cols["frame"].append([f[i]])
        cols["x"].append([traj.x[i]])
        cols["y"].append([traj.y[i]])
        cols["length"].append([traj.length[i]])
        cols["width"].append([traj.width[i]])
        cols["yaw"].append([traj.yaw[i]])
        cols["confidence"].append([traj.confidence[i]])
        cols["interpolated"].append([traj.interpolated[i]])
        if px is not None:
            for key in px:
                px[key].append([traj.pixel[key][i]])
        if i + 1 < len(f) and f[i + 1] - f[i] > 1:
            n = int(f[i + 1] - f[i] - 1)
            pos, yw, _ = _fill_gap(f, xy, yaw, i, n)
            near_left = np.arange(1, n + 1) <= (n + 1) / 2
            cols["frame"].append(np.arange(f[i] + 1, f[i + 1]))
            cols["x"].append(pos[:, 0])
            cols["y"].append(pos[:, 1])
            cols["length"].append(np.where(near_left, traj.length[i], traj.length[i + 1]))
            cols["width"].append(np.where(near_left, traj.width[i], traj.width[i + 1]))
            cols["yaw"].append(yw)
            cols["confidence"].append(np.full(n, np.nan))
            cols["interpolated"].append(np.ones(n, bool))
            if px is not None:
                for key in px:
                    px[key].append(np.full(n, np.nan))
    data = {k: np.concatenate(v) for k, v in cols.items()}
    pixel = None if px is None else {k: np.concatenate(v) for k, v in px.items()}
    return Trajectory.from_arrays(traj.track_id, traj.cls, traj.frame_rate_hz, pixel=pixel,
                                  notes=traj.notes, **data)


# --- RTS smoother -----------------------------------------------------------

@dataclass
class RtsResult:
    x_smooth: np.ndarray      # (n, 2 axes, 2) position/velocity per axis
    p_smooth: np.ndarray      # (n, 2, 2), shared by both axes
    x_filter: np.ndarray
    p_filter: np.ndarray


def rts_filter(z: np.ndarray, dt: float, q: float, r: float, initial_cov: float = 100.0) -> RtsResult:
    """Constant-velocity Kalman filter plus Rauch-Tung-Striebel pass.

    ``z`` is (n, d) positions; each axis is an independent (pos, vel)
    state with identical noise, so the covariance is shared.
    """
    z = np.asarray(z, float)
    n, d = z.shape
    F = np.array([[1.0, dt], [0.0, 1.0]])
    Q = q * np.array([[dt ** 3 / 3, dt ** 2 / 2], [dt ** 2 / 2, dt]])
    H = np.array([1.0, 0.0])
    xf = np.zeros((n, d, 2))
    pf = np.zeros((n, 2, 2))
    xp = np.zeros((n, d, 2))
    pp = np.zeros((n, 2, 2))
    x = np.zeros((d, 2))
    x[:, 0] = z[0]
    if n > 1:
        x[:, 1] = (z[1] - z[0]) / dt
    P = np.eye(2) * initial_cov
    for k in range(n):
        if k > 0:
            x = x @ F.T
            P = F @ P @ F.T + Q
        xp[k], pp[k] = x, P
        s = P[0, 0] + r
        K = P @ H / s
        x = x + np.outer(z[k] - x[:, 0], K)
        P = P - np.outer(K, H @ P)
        P = 0.5 * (P + P.T)
        xf[k], pf[k] = x, P
    xs = xf.copy()
    ps = pf.copy()
    for k in range(n - 2, -1, -1):
        C = pf[k] @ F.T @ np.linalg.inv(pp[k + 1])
        xs[k] = xf[k] + (xs[k + 1] - xp[k + 1]) @ C.T
        ps[k] = pf[k] + C @ (ps[k + 1] - pp[k + 1]) @ C.T
        ps[k] = 0.5 * (ps[k] + ps[k].T)
    return RtsResult(xs, ps, xf, pf)


def rts_smooth(traj: Trajectory, cfg: SmootherConfig = SmootherConfig()) -> Trajectory:
    """Smooth positions and estimate velocity; sets speed, heading, accel."""
    if not traj.is_gap_free():
        raise ValueError(f"track {traj.track_id}: RTS needs a gap-free trajectory; "
                         "run kinematic_interpolate first")
    bad = ~(np.isfinite(traj.x) & np.isfinite(traj.y))
    if bad.any():
        raise ValueError(f"track {traj.track_id}: non-finite position at frame {int(traj.frame[np.argmax(bad)])}")
    if len(traj) == 0:
        return traj
    res = rts_filter(traj.xy, traj.dt, cfg.process_noise_q, cfg.measurement_noise_r, cfg.initial_cov)
    pos = res.x_smooth[:, :, 0]
    vel = res.x_smooth[:, :, 1]
    speed = np.hypot(vel[:, 0], vel[:, 1])
    heading = np.arctan2(vel[:, 1], vel[:, 0])
    return traj.replace(x=pos[:, 0], y=pos[:, 1], speed=speed, heading=heading,
                        accel=central_diff_accel(speed, traj.dt))


def central_diff_accel(speed, dt: float) -> np.ndarray:
    """Central differences inside, one-sided at the ends."""
    v = np.asarray(speed, float)
    if len(v) < 3:
        log.warning("speed series of length %d too short for differencing; zeros returned", len(v))
        return np.zeros(len(v))
    return np.gradient(v, dt, edge_order=1)


# --- motion refinement ------------------------------------------------------

def median_dimensions(traj: Trajectory) -> tuple[float, float]:
    obs = traj.observed
    if not obs.any():
        raise ValueError("no observations")
    return float(np.median(traj.length[obs])), float(np.median(traj.width[obs]))


def apply_median_dimensions(traj: Trajectory) -> Trajectory:
    length, width = median_dimensions(traj)
    n = len(traj)
    return traj.replace(length=np.full(n, length), width=np.full(n, width))


def _runs(consistent: np.ndarray, n: int):
    fwd = np.ones(n, int)
    bwd = np.ones(n, int)
    for i in range(1, n):
        if consistent[i - 1]:
            fwd[i] = fwd[i - 1] + 1
    for i in range(n - 2, -1, -1):
        if consistent[i]:
            bwd[i] = bwd[i + 1] + 1
    return fwd, bwd


def stabilize_yaw(yaws, k_stable: int = 5, tol_stable: float = math.radians(5.0),
                  tol_outlier: float = math.radians(30.0), max_rounds: int = 50) -> np.ndarray:
    """Replace intermittent yaw outliers using stable runs as anchors.

    A forward and a backward pass measure, for every sample, how far a run
    of small consecutive steps (``<= tol_stable``) extends on each side;
    samples inside runs of at least ``k_stable`` become anchors.  Any other
    sample deviating by more than ``tol_outlier`` from both neighboring
    anchors is replaced by interpolation between them.  Repeats until
    nothing changes.  The result is unwrapped (no step exceeds pi).
    """
    y = np.unwrap(np.asarray(yaws, float))
    n = len(y)
    if n < 3:
        return y
    for _ in range(max_rounds):
        consistent = np.abs(np.diff(y)) <= tol_stable
        fwd, bwd = _runs(consistent, n)
        anchor = fwd + bwd - 1 >= k_stable
        if not anchor.any() or anchor.all():
            break
        idx = np.flatnonzero(anchor)
        new = y.copy()
        for i in np.flatnonzero(~anchor):
            pos = np.searchsorted(idx, i)
            left = idx[pos - 1] if pos > 0 else None
            right = idx[pos] if pos < len(idx) else None
            dl = abs(angle_diff(y[i], y[left])) if left is not None else np.inf
            dr = abs(angle_diff(y[i], y[right])) if right is not None else np.inf
            if dl <= tol_outlier or dr <= tol_outlier:
                continue
            if left is not None and right is not None:
                frac = (i - left) / (right - left)
                new[i] = y[left] + frac * (y[right] - y[left])
            else:
                new[i] = y[left if left is not None else right]
        if np.array_equal(new, y):
            break
        y = new
    return np.unwrap(y)


def correct_yaw_with_heading(traj: Trajectory, speed_gate: float = 1.0,
                             max_dev: float = math.radians(45.0)) -> Trajectory:
    """Use the direction of motion to fix flipped or anomalous yaw.

    Above ``speed_gate`` the yaw candidate in ``{yaw, yaw + pi}`` closest
    to the heading is kept; if even that one is ``max_dev`` or more off,
    yaw snaps to the heading.  Slow samples are left alone.
    """
    yaw = traj.yaw.copy()
    moving = traj.speed > speed_gate
    d0 = np.abs(angle_diff(yaw, traj.heading))
    d1 = np.abs(angle_diff(yaw + np.pi, traj.heading))
    flipped = normalize_angle(yaw + np.pi)
    best = np.where(d1 < d0, flipped, yaw)
    best = np.where(np.minimum(d0, d1) >= max_dev - 1e-9, traj.heading, best)
    yaw = np.where(moving, best, yaw)
    return traj.replace(yaw=yaw)


def refine_trajectory(traj: Trajectory, cfg: SmootherConfig = SmootherConfig(),
                      rcfg: RefineConfig = RefineConfig()) -> list[Trajectory]:
    """Full per-track chain; may return several pieces after a split."""
    if len(traj) == 0:
        return []
    sg = savgol_trajectory(traj, cfg)
    out = []
    for piece in kinematic_interpolate(sg, cfg):
        sm = rts_smooth(piece, cfg)
        if sm.observed.any():
            sm = apply_median_dimensions(sm)
        yaw = stabilize_yaw(sm.yaw, rcfg.k_stable, math.radians(rcfg.tol_stable_deg),
                            math.radians(rcfg.tol_outlier_deg))
        sm = sm.replace(yaw=normalize_angle(yaw))
        sm = correct_yaw_with_heading(sm, rcfg.speed_gate, math.radians(rcfg.max_dev_deg))
        out.append(sm)
    return out
