"""Acceptance criteria, one test each.

Every test records a one-line PASS/FAIL verdict; the lines are printed in
the terminal summary (and directly when run with ``-s``).
"""

import math
import shutil
import time
from fractions import Fraction

import numpy as np
import pytest
import shapely

from trajfuse.cli import main
from trajfuse.conflicts import (conflict_mv_ratio, detect_conflicts, n_cmvcp, read_conflicts,
                                write_conflicts)
from trajfuse.dedup import run_filters
from trajfuse.geometry import OVERLAP, box_corners, dgt, ttc_batch
from trajfuse.georef import build_local_frame, fit_homography, georeference_table, refine_distortion
from trajfuse.kinematics import SmootherConfig, central_diff_accel, rts_smooth, savgol_dynamic
from trajfuse.matching import match_all, per_cycle_violation_rate
from trajfuse.model import TrackTable, Trajectory, angle_diff
from trajfuse.synthetic import (SceneCamera, conflict_fixture, dedup_scene, golden_dir,
                                intersection_map, linear_track, make_gcps, make_rulers,
                                map_to_wgs84, render_pixels, scripted_scene)

RESULTS: dict[int, str] = {}


def verdict(n: int, name: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] {n}. {name}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# --- 1. TTC vs forward simulation ---------------------------------------------

def _separation(ca, cb):
    """Largest gap over the SAT axes of both boxes; <= 0 means contact or overlap."""
    def axes(c):
        e = np.roll(c, -1, axis=-2) - c
        return np.stack([-e[..., 1], e[..., 0]], -1)[..., :2, :]

    ax = np.concatenate([axes(ca), axes(cb)], axis=-2)          # (..., 4, 2)
    ax = ax / np.linalg.norm(ax, axis=-1, keepdims=True)
    pa = np.einsum("...kd,...jd->...kj", ax, ca)
    pb = np.einsum("...kd,...jd->...kj", ax, cb)
    gap = np.maximum(pb.min(-1) - pa.max(-1), pa.min(-1) - pb.max(-1))
    return gap.max(-1)


def _first_contact(ca, va, cb, vb, horizon=300.0, dt=1e-3, chunk=250):
    """First SAT contact time under constant velocity, by forward simulation.

    The separation is scanned on a 1 ms grid.  For translating boxes it is a
    maximum of linear functions of time, hence convex, so a bracket is
    found either where it first drops to <= 0 or where it starts rising
    (a contact shorter than one step); the bracket is then refined.
    """
    n = len(ca)
    rel = vb - va
    lo = np.full(n, np.nan)
    hi = np.full(n, np.nan)
    active = np.arange(n)
    prev = _separation(ca, cb)
    steps = (np.arange(chunk) + 1) * dt
    t0 = 0.0
    while active.size and t0 < horizon:
        t = t0 + steps
        shift = t[None, :, None, None] * rel[active][:, None, None, :]
        shape = (active.size, chunk, 4, 2)
        sep = _separation(np.broadcast_to(ca[active][:, None], shape), cb[active][:, None] + shift)
        seq = np.concatenate([prev[active][:, None], sep], 1)
        stop = (seq[:, 1:] <= 0) | (np.diff(seq, axis=1) > 0)
        found = stop.any(1)
        k = np.argmax(stop, 1)
        idx = active[found]
        lo[idx] = np.maximum(t[k[found]] - 2 * dt, 0.0)
        hi[idx] = t[k[found]]
        prev[active] = sep[:, -1]
        active = active[~found]
        t0 += chunk * dt

    def sep_at(tt):
        return _separation(ca, cb + tt[:, None, None] * rel[:, None, :])

    ok = np.isfinite(lo)
    lo, hi = np.nan_to_num(lo), np.nan_to_num(hi)
    # minimum of the convex separation inside the bracket (ternary search)
    a, b = lo.copy(), hi.copy()
    for _ in range(80):
        m1, m2 = a + (b - a) / 3, b - (b - a) / 3
        left = sep_at(m1) <= sep_at(m2)
        b = np.where(left, m2, b)
        a = np.where(left, a, m1)
    tmin = 0.5 * (a + b)
    ok &= sep_at(tmin) <= 1e-9
    # first root between the bracket start and the minimum
    a, b = lo.copy(), tmin
    start_in = sep_at(a) <= 0
    for _ in range(60):
        mid = 0.5 * (a + b)
        touch = sep_at(mid) <= 0
        b = np.where(touch, mid, b)
        a = np.where(touch, a, mid)
    return np.where(ok, np.where(start_in, lo, b), np.nan)


def test_1_ttc_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    ca_l, va_l, cb_l, vb_l = [], [], [], []
    total = 0
    while total < 1000:
        m = 4000
        ca = box_corners(rng.uniform(-30, 30, (m, 2)), rng.uniform(1, 12, m), rng.uniform(0.5, 3, m),
                         rng.uniform(-np.pi, np.pi, m))
        cb = box_corners(rng.uniform(-30, 30, (m, 2)), rng.uniform(1, 12, m), rng.uniform(0.5, 3, m),
                         rng.uniform(-np.pi, np.pi, m))
        va = rng.uniform(-15, 15, (m, 2))
        vb = rng.uniform(-15, 15, (m, 2))
        val, _ = ttc_batch(ca, va, cb, vb)
        keep = np.flatnonzero(np.isfinite(val) & (val > 0))[:1000 - total]
        ca_l.append(ca[keep]); va_l.append(va[keep]); cb_l.append(cb[keep]); vb_l.append(vb[keep])
        total += keep.size
    ca, va, cb, vb = (np.concatenate(x) for x in (ca_l, va_l, cb_l, vb_l))
    val, _ = ttc_batch(ca, va, cb, vb)
    sim = _first_contact(ca, va, cb, vb)
    rel_err = np.abs(sim - val) / val
    worst = float(np.nanmax(rel_err)) if np.isfinite(sim).all() else math.inf

    # overlap marker against SAT (shapely as the reference predicate)
    m = 5000
    oa = box_corners(rng.uniform(-4, 4, (m, 2)), rng.uniform(1, 6, m), rng.uniform(0.5, 3, m),
                     rng.uniform(-np.pi, np.pi, m))
    ob = box_corners(rng.uniform(-4, 4, (m, 2)), rng.uniform(1, 6, m), rng.uniform(0.5, 3, m),
                     rng.uniform(-np.pi, np.pi, m))
    ov, _ = ttc_batch(oa, rng.normal(0, 5, (m, 2)), ob, rng.normal(0, 5, (m, 2)))
    truth = shapely.intersects(shapely.polygons(oa), shapely.polygons(ob))
    agree = float(np.mean((ov == OVERLAP) == truth))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and agree == 1.0 and truth.sum() > 100 and elapsed < 30
    verdict(1, "TTC oracle equivalence", ok,
            f"1000 pairs, max rel err {worst:.2e}; overlap agreement {agree:.1%} "
            f"({int(truth.sum())}/{m} overlapping); {elapsed:.1f} s")


# --- 2. DGT ---------------------------------------------------------------------

def _crossing(rng, k):
    """Two straight crossers through the origin with analytically known zone entries."""
    ta, tb = rng.uniform(-np.pi, np.pi), 0.0
    tb = ta + rng.choice([-1, 1]) * rng.uniform(np.radians(25), np.radians(155))
    va, vb = rng.uniform(5, 12, 2)
    la, lb = rng.uniform(3.5, 10, 2)
    wa, wb = rng.uniform(1.5, 2.6, 2)
    da, db = rng.uniform(20, 45, 2)
    ua, ub = np.array([math.cos(ta), math.sin(ta)]), np.array([math.cos(tb), math.sin(tb)])
    na, nb = np.array([-ua[1], ua[0]]), np.array([-ub[1], ub[0]])
    off = rng.uniform(-1, 1, 2)            # lateral offsets of the lane centers
    pa0 = -da * ua + off[0] * na
    pb0 = -db * ub + off[1] * nb
    frames = np.arange(120)
    a = linear_track(2 * k + 1, "car", pa0, va * ua, frames, la, wa)
    b = linear_track(2 * k + 2, "car", pb0, vb * ub, frames, lb, wb)
    # zone = intersection of the two strips: vertices solve n_a.(p - pa0) = +-wa/2, n_b.(p - pb0) = +-wb/2
    verts = []
    for sa in (-0.5, 0.5):
        for sb in (-0.5, 0.5):
            m = np.array([na, nb])
            rhs = np.array([na @ pa0 + sa * wa, nb @ pb0 + sb * wb])
            verts.append(np.linalg.solve(m, rhs))
    verts = np.array(verts)
    t_a = ((verts - pa0) @ ua).min() - la / 2
    t_b = ((verts - pb0) @ ub).min() - lb / 2
    t_a, t_b = t_a / va, t_b / vb
    # the tracker samples at 10 Hz: first sample at or after the analytic touch
    return a, b, math.ceil(t_a * 10 - 1e-9) / 10, math.ceil(t_b * 10 - 1e-9) / 10


def test_2_dgt():
    rng = np.random.default_rng(77)
    failures = []
    for k in range(120):
        a, b, ea, eb = _crossing(rng, k)
        r = dgt(a, b)
        if r.value is None or abs(r.value - abs(ea - eb)) > 0.1 + 1e-9 \
                or abs(r.t_enter_a - ea) > 0.1 + 1e-9 or abs(r.t_enter_b - eb) > 0.1 + 1e-9:
            failures.append(("crossing", k, r.value, abs(ea - eb)))
    for k in range(40):
        a = linear_track(k + 1, "car", rng.uniform(-20, 20, 2), rng.uniform(-10, 10, 2),
                         np.arange(rng.integers(20, 80)), rng.uniform(3, 10), rng.uniform(1.5, 2.6))
        r = dgt(a, a.replace(track_id=k + 1000))
        if r.value != 0.0:
            failures.append(("duplicate", k, r.value, 0.0))
    for k in range(40):
        th = rng.uniform(-np.pi, np.pi)
        u = np.array([math.cos(th), math.sin(th)])
        n = np.array([-u[1], u[0]])
        frames = np.arange(80)
        gap = rng.uniform(4.0, 30.0)
        a = linear_track(1, "car", (0, 0), rng.uniform(3, 12) * u, frames, 4.5, 2.0)
        b = linear_track(2, "car", gap * n, rng.uniform(-12, 12) * u, frames, 4.5, 2.0)
        r = dgt(a, b)
        if r.value is not None:
            failures.append(("disjoint", k, r.value, None))
    ok = not failures
    verdict(2, "DGT correctness", ok,
            f"{200 - len(failures)}/200 fixtures (120 crossing within 0.1 s, 40 duplicate = 0, "
            f"40 disjoint absent)" + (f"; first failure {failures[0]}" if failures else ""))


# --- 3. dedup --------------------------------------------------------------------

def test_3_dedup():
    missed, wrong = 0, 0
    n_ghosts = n_genuine = 0
    reasons = set()
    for seed in range(50):
        scene = dedup_scene(seed)
        _, rep = run_filters(scene.table)
        removed = rep.removed_ids
        reasons |= {r.reason for r in rep.removed}
        missed += len(scene.ghosts - removed)
        wrong += len(removed & scene.genuine)
        n_ghosts += len(scene.ghosts)
        n_genuine += len(scene.genuine)
    ok = missed == 0 and wrong == 0
    verdict(3, "dedup soundness/completeness", ok,
            f"50 scenes: ghosts removed {n_ghosts - missed}/{n_ghosts}, genuine removed "
            f"{wrong}/{n_genuine}; stages used {sorted(reasons)}")


# --- 4. conflicts -------------------------------------------------------------------

def test_4_conflicts(tmp_path):
    fx = conflict_fixture()
    kept, rep = run_filters(fx.table)
    events = detect_conflicts(kept)
    write_conflicts(events, tmp_path / "conflict.csv")
    back = read_conflicts(tmp_path / "conflict.csv")
    counts = {k: sum(e.kind == k for e in back) for k in ("rear_end", "sideswipe", "angle", "head_on")}
    kinds = {e.pair: e.kind for e in back}
    ratio = conflict_mv_ratio(kept, events)
    ncm = n_cmvcp(back)
    # hand computation: 12 of 15 MVs involved; associated objects 2 + 2 + 0 + 0 + 0 + 0 over 6
    ok = (counts == {"rear_end": 2, "sideswipe": 1, "angle": 2, "head_on": 1}
          and kinds == fx.expected_kinds and not rep.removed
          and Fraction(ratio).limit_denominator(1000) == Fraction(12, 15)
          and Fraction(ncm).limit_denominator(1000) == Fraction(4, 6))
    verdict(4, "conflict pipeline end-to-end", ok,
            f"counts {counts}; conflict_mv_ratio {ratio:.6g} (12/15); n_cmvcp {ncm:.6g} (4/6)")


# --- 5. georeferencing ------------------------------------------------------------------

def test_5_georef():
    scene = scripted_scene()
    truth = scene.table
    sc = SceneCamera()
    pix = render_pixels(truth, sc)
    cam0 = sc.model.with_dist((0.0, 0.0, 0.0, 0.0, 0.0))
    cam = refine_distortion(cam0, make_rulers(sc))
    h = fit_homography(make_gcps(sc), cam)
    frame = build_local_frame(map_to_wgs84(intersection_map()), h)
    out = georeference_table(pix, cam, h, frame)
    err = max(float(np.hypot(*(out[t.track_id].xy - t.xy).T).max()) for t in truth)
    k1 = cam.dist[0]
    k1_rel = abs(k1 - (-0.05)) / 0.05
    ok = err < 0.05 and k1_rel < 0.05
    verdict(5, "georeferencing accuracy", ok,
            f"max position error {err:.2e} m over {len(truth)} tracks; k1 {k1:.5g} "
            f"({k1_rel:.2%} from -0.05)")


# --- 6. smoothing ---------------------------------------------------------------------

def test_6_smoothing():
    wins = 0
    cfg = SmootherConfig()
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(50, 150))
        v = rng.uniform(-15, 15, 2)
        truth = linear_track(seed, "car", rng.uniform(-50, 50, 2), v, np.arange(n))
        noisy = truth.replace(x=truth.x + rng.normal(0, 0.3, n), y=truth.y + rng.normal(0, 0.3, n))
        sm = rts_smooth(noisy, cfg)
        raw = np.sqrt(np.mean(np.sum((noisy.xy - truth.xy) ** 2, 1)))
        smooth = np.sqrt(np.mean(np.sum((sm.xy - truth.xy) ** 2, 1)))
        wins += smooth < raw
    # S-G on quadratics, including short runs around gaps
    sg_err = 0.0
    rng = np.random.default_rng(6)
    for _ in range(50):
        frames = np.sort(rng.choice(400, 200, replace=False))
        c = rng.normal(0, 5, 3)
        t = frames * 0.1
        y = c[0] + c[1] * t + c[2] * t * t
        sg_err = max(sg_err, float(np.max(np.abs(savgol_dynamic(y, frames=frames) - y))))
    # central differences: error bound dt^2/6 max|v'''| for v = A sin(w t)
    acc_ok = True
    ratios = []
    for dt in (0.1, 0.05, 0.025):
        t = np.arange(0, 20, dt)
        amp, w = 3.0, 1.3
        a = central_diff_accel(amp * np.sin(w * t), dt)
        e = float(np.max(np.abs(a[1:-1] - amp * w * np.cos(w * t[1:-1]))))
        acc_ok &= e <= dt * dt / 6 * amp * w ** 3 * 1.0001
        ratios.append(e)
    order = math.log(ratios[0] / ratios[2]) / math.log(4)
    ok = wins >= 95 and sg_err < 1e-9 and acc_ok and abs(order - 2) < 0.05
    verdict(6, "smoothing quality", ok,
            f"RTS better than raw in {wins}/100; S-G quadratic max err {sg_err:.1e}; "
            f"accel error within dt^2 bound, observed order {order:.3f}")


# --- 7. matching ---------------------------------------------------------------------

def _spreadsheet_rates(scene):
    """Per-cycle rates from the scripted ground truth, by plain counting."""
    bounds = [0, 60, 120, 180, 200]
    rows = []
    for c in range(4):
        lo, hi = bounds[c], bounds[c + 1]
        entrants = [tid for tid, t in scene.expected_entry_s.items() if lo <= t < hi]
        cnt = {"straight": 0, "left": 0}
        for tid in scene.expected_violations:
            kind = scene.expected_routes[tid][2]
            if kind in cnt and lo <= scene.expected_entry_s[tid] < hi:
                cnt[kind] += 1
        rows.append({f: (Fraction(cnt[f], len(entrants)) if entrants else None) for f in cnt})
    return rows


def test_7_matching():
    scene = scripted_scene()
    routes, viol = match_all(scene.table.sorted(), scene.imap, scene.timeline)
    got = {r.track_id: (r.entry_edge, r.exit_edge, r.movement_kind) for r in routes}
    errors = sum(got.get(t) != e for t, e in scene.expected_routes.items())
    vset = {(v.track_id, v.movement_id) for v in viol}
    exact = vset == set(scene.expected_violations.items())
    rates = per_cycle_violation_rate(viol, routes, scene.timeline)
    oracle = _spreadsheet_rates(scene)
    got_rates = [{f: (None if r.rates[f] is None else Fraction(r.rates[f]).limit_denominator(1000))
                  for f in ("straight", "left")} for r in rates]
    ok = errors == 0 and len(routes) == 40 and exact and got_rates == oracle
    verdict(7, "matching and violations", ok,
            f"{errors} route errors over {len(routes)} tracks; violations {sorted(vset)}; "
            f"per-cycle rates {'match' if got_rates == oracle else 'differ from'} oracle "
            f"{[{k: str(v) for k, v in r.items()} for r in oracle]}")


# --- 8. determinism ----------------------------------------------------------------------

def _run(tmp_path, name, threads):
    d = tmp_path / name
    shutil.copytree(golden_dir(), d, ignore=shutil.ignore_patterns("expected"))
    assert main(["all", "--config", str(d / "config.yaml"), "--threads", str(threads)]) == 0
    return {p.name: p.read_bytes() for p in sorted((d / "out").iterdir())}


def test_8_determinism(tmp_path):
    a = _run(tmp_path, "a", 1)
    b = _run(tmp_path, "b", 1)
    c = _run(tmp_path, "c", 8)
    same_twice = a == b
    same_threads = a == c
    diff = sorted(k for k in a if a.get(k) != c.get(k) or a.get(k) != b.get(k))
    ok = same_twice and same_threads and len(a) > 10
    verdict(8, "determinism", ok,
            f"{len(a)} files; run twice identical: {same_twice}; threads 1 vs 8 identical: "
            f"{same_threads}" + (f"; differing {diff}" if diff else ""))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
