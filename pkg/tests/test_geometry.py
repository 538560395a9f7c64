import math

import numpy as np
import pytest
import shapely
from hypothesis import given, settings, strategies as st
from shapely.geometry import Polygon

from trajfuse.geometry import (OVERLAP, Obb, box_corners, candidate_pairs, corner_ray_distance, dgt,
                               obb_corners, sat_overlap, sat_overlap_convex, swept_region, ttc,
                               ttc_batch)
from trajfuse.model import Trajectory
from trajfuse.synthetic import linear_track


def ccw_area(c):
    x, y = c[:, 0], c[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def test_corners_axis_aligned():
    c = obb_corners(Obb((0, 0), 2, 1, 0))
    assert {tuple(np.round(p, 12)) for p in c} == {(1, 0.5), (-1, 0.5), (-1, -0.5), (1, -0.5)}
    assert ccw_area(c) > 0


def test_corners_quarter_turn():
    c = obb_corners(Obb((0, 0), 2, 1, math.pi / 2))
    assert np.ptp(c[:, 0]) == pytest.approx(1.0)
    assert np.ptp(c[:, 1]) == pytest.approx(2.0)


def test_corners_rotation_oracle():
    th = math.radians(30)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    base = obb_corners(Obb((0, 0), 4, 2, 0))
    expect = base @ rot.T + [3.0, -1.0]
    assert np.allclose(obb_corners(Obb((3.0, -1.0), 4, 2, th)), expect, atol=1e-12)


def test_sat_examples():
    b = Obb((0, 0), 4, 2, 0.3)
    assert sat_overlap(b, b)
    assert not sat_overlap(b, Obb((100, 0), 4, 2, 0))
    # touching counts as overlap
    assert sat_overlap(Obb((0, 0), 2, 2, 0), Obb((2, 0), 2, 2, 0))


def test_sat_against_sampling_and_shapely(rng):
    n = 10000
    ca = box_corners(rng.uniform(-3, 3, (n, 2)), rng.uniform(0.5, 5, n), rng.uniform(0.5, 3, n),
                     rng.uniform(-np.pi, np.pi, n))
    cb = box_corners(rng.uniform(-3, 3, (n, 2)), rng.uniform(0.5, 5, n), rng.uniform(0.5, 3, n),
                     rng.uniform(-np.pi, np.pi, n))
    got = sat_overlap_convex(ca, cb)
    pa, pb = shapely.polygons(ca), shapely.polygons(cb)
    assert np.array_equal(got, shapely.intersects(pa, pb))
    # dense sampling of A's interior: any sample inside B proves overlap
    u = np.linspace(0.01, 0.99, 25)
    uu, vv = np.meshgrid(u, u)
    for i in range(0, n, 50):
        c = ca[i]
        pts = c[0] + np.outer(uu.ravel(), c[1] - c[0]) + np.outer(vv.ravel(), c[3] - c[0])
        inside = shapely.contains_xy(pb[i], pts[:, 0], pts[:, 1]).any()
        if inside:
            assert got[i]
        elif got[i]:
            # overlap thinner than the sampling pitch
            assert shapely.intersection(pa[i], pb[i]).area < 0.1 * shapely.area(pa[i])


def test_corner_ray_examples():
    box = Obb((5.0, 0.0), 2.0, 2.0, 0.0)       # x in [4, 6]
    r = corner_ray_distance((4.0, 0.0), (1.0, 0.0), box)
    assert r.distance == 0.0 and r.approaching
    r = corner_ray_distance((0.0, 0.0), (-1.0, 0.0), box)
    assert math.isinf(r.distance) and not r.approaching and r.receding
    r = corner_ray_distance((1.0, 0.5), (1.0, 0.0), box)
    assert r.distance == pytest.approx(3.0)
    r = corner_ray_distance((0.0, 5.0), (1.0, 0.0), box)
    assert math.isinf(r.distance) and not (r.approaching or r.receding)


def test_ttc_examples():
    a = Obb((0, 0), 4, 2, 0)
    b = Obb((10, 0), 4, 2, 0)
    r = ttc(a, (2, 0), b, (0, 0))
    assert r.value == pytest.approx(3.0) and r.dtc_m == pytest.approx(6.0)
    r = ttc(a, (-2, 0), b, (0, 0))
    assert math.isinf(r.value) and r.dtc_m is None
    r = ttc(a, (1, 0), Obb((1, 0.5), 4, 2, 0.4), (0, 1))
    assert r.value == OVERLAP and r.dtc_m is None


def test_ttc_still_pairs():
    a = Obb((0, 0), 4, 2, 0)
    assert math.isinf(ttc(a, (1, 1), Obb((10, 0), 4, 2, 0), (1, 1)).value)
    assert ttc(a, (0, 0), Obb((1, 0), 4, 2, 0), (0, 0)).value == OVERLAP


def test_ttc_nonfinite_velocity():
    with pytest.raises(ValueError):
        ttc(Obb((0, 0), 4, 2, 0), (np.nan, 0), Obb((10, 0), 4, 2, 0), (0, 0))


def _random_pairs(rng, n):
    ca = box_corners(rng.uniform(-20, 20, (n, 2)), rng.uniform(1, 6, n), rng.uniform(0.5, 2.5, n),
                     rng.uniform(-np.pi, np.pi, n))
    cb = box_corners(rng.uniform(-20, 20, (n, 2)), rng.uniform(1, 6, n), rng.uniform(0.5, 2.5, n),
                     rng.uniform(-np.pi, np.pi, n))
    return ca, rng.normal(0, 5, (n, 2)), cb, rng.normal(0, 5, (n, 2))


def test_ttc_symmetry(rng):
    ca, va, cb, vb = _random_pairs(rng, 2000)
    v1, d1 = ttc_batch(ca, va, cb, vb)
    v2, d2 = ttc_batch(cb, vb, ca, va)
    assert np.array_equal(np.isinf(v1), np.isinf(v2))
    fin = np.isfinite(v1)
    assert np.allclose(v1[fin], v2[fin], rtol=1e-12, atol=1e-12)


def test_ttc_rigid_invariance(rng):
    ca, va, cb, vb = _random_pairs(rng, 2000)
    th = 0.7
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    off = np.array([350.0, -120.0])
    v1, _ = ttc_batch(ca, va, cb, vb)
    v2, _ = ttc_batch(ca @ rot.T + off, va @ rot.T, cb @ rot.T + off, vb @ rot.T)
    assert np.array_equal(np.isinf(v1), np.isinf(v2))
    fin = np.isfinite(v1)
    assert np.allclose(v1[fin], v2[fin], atol=1e-9)


def _track(tid, xy, yaw, fps=10.0, length=4.0, width=2.0, frames=None):
    xy = np.asarray(xy, float)
    n = len(xy)
    frames = np.arange(n) if frames is None else frames
    return Trajectory.from_arrays(tid, "car", fps, frames, xy[:, 0], xy[:, 1], np.full(n, length),
                                  np.full(n, width), np.full(n, yaw))


def test_swept_stationary():
    t = _track(1, np.zeros((20, 2)), 0.3)
    region = swept_region(t, 0.0, 1.9)
    assert region.symmetric_difference(Polygon(obb_corners(Obb((0, 0), 4, 2, 0.3)))).area < 1e-6


def test_swept_straight_area():
    L = 12.0
    xs = np.linspace(0, L, 31)            # 0.4 m per frame
    t = _track(1, np.column_stack([xs, np.zeros_like(xs)]), 0.0)
    region = swept_region(t, 0.0, 3.0)
    assert region.area == pytest.approx(4.0 * 2.0 + L * 2.0, rel=0.02)


def test_swept_turn_contains_footprints():
    a = np.linspace(0, np.pi / 2, 40)
    xy = np.column_stack([10 * np.cos(a), 10 * np.sin(a)])
    n = len(a)
    t = Trajectory.from_arrays(1, "car", 10.0, np.arange(n), xy[:, 0], xy[:, 1], np.full(n, 4.0),
                               np.full(n, 2.0), a + np.pi / 2)
    region = swept_region(t, 0.0, 3.9).buffer(1e-7)
    for c in box_corners(xy, t.length, t.width, t.yaw):
        assert region.contains(Polygon(c))


def test_swept_empty_window():
    t = _track(1, np.zeros((5, 2)), 0.0)
    with pytest.raises(ValueError, match="empty window"):
        swept_region(t, 10.0, 11.0)


def test_dgt_duplicate_zero():
    t = linear_track(1, "car", (0, 0), (5, 0), np.arange(50))
    res = dgt(t, t.replace(track_id=2))
    assert res.value == 0.0


def test_dgt_crossing_oracle():
    # A along +x, B along +y; the shared zone is the 2x2 square at the origin.
    # A's box (length 4) touches it when x = -3, B's when y = -3.
    frames = np.arange(120)
    a = linear_track(1, "car", (-3 - 3.15 * 5.0, 0.0), (5.0, 0.0), frames, 4.0, 2.0)
    b = linear_track(2, "car", (0.0, -3 - 5.95 * 4.0), (0.0, 4.0), frames, 4.0, 2.0)
    res = dgt(a, b)
    assert res.t_enter_a == pytest.approx(3.2)
    assert res.t_enter_b == pytest.approx(6.0)
    assert res.value == pytest.approx(2.8)


def test_dgt_disjoint_absent():
    frames = np.arange(50)
    a = linear_track(1, "car", (0, 0), (5, 0), frames, 4.0, 2.0)
    b = linear_track(2, "car", (0, 5), (5, 0), frames, 4.0, 2.0)
    res = dgt(a, b)
    assert res.value is None and res.zone is None


def test_dgt_no_shared_time():
    a = linear_track(1, "car", (0, 0), (5, 0), np.arange(10))
    b = linear_track(2, "car", (0, 0), (5, 0), np.arange(20, 30))
    assert dgt(a, b).value is None


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 6.28), st.floats(-500, 500), st.floats(-500, 500))
def test_dgt_rigid_invariance(th, dx, dy):
    frames = np.arange(100)
    a = linear_track(1, "car", (-3 - 3.15 * 5.0, 0.0), (5.0, 0.0), frames, 4.0, 2.0)
    b = linear_track(2, "car", (0.0, -3 - 5.95 * 4.0), (0.0, 4.0), frames, 4.0, 2.0)
    c, s = math.cos(th), math.sin(th)

    def move(t):
        x = c * t.x - s * t.y + dx
        y = s * t.x + c * t.y + dy
        return t.replace(x=x, y=y, yaw=t.yaw + th)

    r0, r1 = dgt(a, b), dgt(move(a), move(b))
    assert r1.value == pytest.approx(r0.value, abs=1e-9)


def test_candidate_pairs_conservative(rng):
    trajs = []
    frames = np.arange(30)
    for i in range(60):
        p0 = rng.uniform(-300, 300, 2)
        trajs.append(linear_track(i + 1, "car", p0, rng.normal(0, 8, 2), frames))
    got = set(candidate_pairs(trajs, radius=50.0))
    for i, a in enumerate(trajs):
        for b in trajs[i + 1:]:
            d = np.hypot(*(a.xy - b.xy).T).min()
            if d <= 50.0:
                assert (a.track_id, b.track_id) in got
