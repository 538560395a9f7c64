import numpy as np
import pytest

from trajfuse.dedup import (FilterConfig, Removal, dgt_duplicate_filter, heuristic_filter,
                            overlap_ratio, read_filter_report, run_filters, ttc_overlap_filter,
                            write_filter_report)
from trajfuse.model import TrackTable
from trajfuse.synthetic import dedup_scene, intersection_map, linear_track


def table(*trajs, unit="meter"):
    return TrackTable({t.track_id: t for t in trajs}, "t", unit, 10.0)


def test_heuristic_boundaries_pass():
    keep = [
        linear_track(1, "car", (0, 0), (5, 0), np.arange(11)),              # exactly 1.0 s
        linear_track(2, "car", (0, 20), (1.0, 0), np.arange(11)),           # exactly 1.0 m
        linear_track(3, "car", (0, 40), (5, 0), np.arange(20), conf=0.5),   # exactly 0.5
    ]
    drop = [
        linear_track(4, "car", (0, 60), (5, 0), np.arange(10)),
        linear_track(5, "car", (0, 80), (0.9, 0), np.arange(11)),
        linear_track(6, "car", (0, 100), (5, 0), np.arange(20), conf=0.49),
    ]
    kept, rep = heuristic_filter(table(*keep, *drop))
    assert sorted(t.track_id for t in kept) == [1, 2, 3]
    assert [(r.track_id, r.reason) for r in rep.removed] == [
        (4, "short_duration"), (5, "low_displacement"), (6, "low_confidence")]
    assert rep.kept_count == 3


def test_heuristic_idle_exemption():
    imap = intersection_map()
    waiting = linear_track(1, "car", (-2.0, 13.0), (0, 0), np.arange(100))     # at the stop line
    parked = linear_track(2, "car", (-30.0, -30.0), (0, 0), np.arange(100))    # off the road
    ped = linear_track(3, "pedestrian", (-2.0, 13.0), (0, 0), np.arange(100), 0.5, 0.5)
    kept, rep = heuristic_filter(table(waiting, parked, ped), imap=imap)
    assert [t.track_id for t in kept] == [1]
    kept, _ = heuristic_filter(table(waiting, parked, ped))
    assert kept.sorted() == []


def test_heuristic_missing_confidence():
    t = linear_track(1, "car", (0, 0), (5, 0), np.arange(20))
    t = t.replace(confidence=np.full(20, np.nan))
    kept, rep = heuristic_filter(table(t))
    assert len(kept) == 1 and "no confidence" in rep.notes[0]


def test_heuristic_needs_meters():
    with pytest.raises(ValueError, match="georeferenced"):
        heuristic_filter(table(linear_track(1, "car", (0, 0), (5, 0), np.arange(20)), unit="pixel"))


def _dup(tid, base, frames, dy=0.3, conf=0.9):
    return linear_track(tid, base.cls, (base.x[0], base.y[0] + dy), (5, 0), frames, conf=conf)


def test_ttc_overlap_run_length():
    a = linear_track(1, "car", (0, 0), (5, 0), np.arange(40))
    five = _dup(2, a, np.arange(5))
    four = linear_track(3, "car", (0, 30.3), (5, 0), np.arange(4))
    c = linear_track(4, "car", (0, 30), (5, 0), np.arange(40))
    kept, rep = ttc_overlap_filter(table(a, five, four, c))
    assert rep.removed == [Removal(2, "ttc_overlap", 1)]
    assert sorted(t.track_id for t in kept) == [1, 3, 4]


def test_redundancy_order():
    a = linear_track(1, "car", (0, 0), (5, 0), np.arange(30), conf=0.7)
    b = _dup(2, a, np.arange(30), conf=0.9)
    _, rep = ttc_overlap_filter(table(a, b))
    assert rep.removed == [Removal(1, "ttc_overlap", 2)]     # same life, lower confidence
    b = _dup(2, a, np.arange(30), conf=0.7)
    _, rep = ttc_overlap_filter(table(a, b))
    assert rep.removed == [Removal(2, "ttc_overlap", 1)]     # full tie: higher id goes


def test_removed_track_cannot_remove():
    a = linear_track(1, "car", (0, 0), (5, 0), np.arange(40))
    b = _dup(2, a, np.arange(30))
    c = _dup(3, a, np.arange(20), dy=0.6)
    kept, rep = ttc_overlap_filter(table(a, b, c))
    assert {(r.track_id, r.partner_id) for r in rep.removed} == {(2, 1), (3, 1)}
    assert [t.track_id for t in kept] == [1]


def test_class_groups_do_not_mix():
    a = linear_track(1, "car", (0, 0), (1.5, 0), np.arange(40))
    p = linear_track(2, "pedestrian", (0, 0.2), (1.5, 0), np.arange(40), 0.6, 0.6)
    kept, rep = ttc_overlap_filter(table(a, p))
    assert len(kept) == 2 and not rep.removed


def _flicker(tid, base, pattern):
    """Parallel rider alternating between overlapping and clear lateral offsets."""
    frames = base.frame
    dy = np.array([pattern[i % len(pattern)] for i in range(len(frames))])
    return base.replace(track_id=tid, y=base.y + dy, frame=frames)


def test_dgt_duplicate():
    a = linear_track(1, "car", (0, 0), (5, 0), np.arange(60))
    b = _flicker(2, a.take(np.arange(45)), [1.2, 1.2, 2.4])
    assert overlap_ratio(a, b) == pytest.approx(30 / 45)
    _, rep = ttc_overlap_filter(table(a, b))
    assert not rep.removed
    kept, rep = dgt_duplicate_filter(table(a, b))
    assert rep.removed == [Removal(2, "dgt_duplicate", 1)]


def test_dgt_duplicate_low_ratio_kept():
    a = linear_track(1, "car", (0, 0), (5, 0), np.arange(60))
    b = _flicker(2, a.take(np.arange(45)), [1.2, 2.4, 2.4])
    kept, rep = dgt_duplicate_filter(table(a, b))
    assert len(kept) == 2
    assert "overlap ratio 0.333 < 0.5" in rep.notes[0]


def test_filters_idempotent():
    scene = dedup_scene(3)
    kept, rep = run_filters(scene.table)
    assert rep.removed
    again, rep2 = run_filters(kept)
    assert not rep2.removed and len(again) == len(kept)


def test_report_round_trip(tmp_path):
    kept, rep = run_filters(dedup_scene(5).table)
    write_filter_report(rep, tmp_path / "r.csv")
    back = read_filter_report(tmp_path / "r.csv")
    assert sorted(back.removed, key=lambda r: r.track_id) == sorted(rep.removed, key=lambda r: r.track_id)


def test_removal_validation():
    with pytest.raises(ValueError, match="partner"):
        Removal(1, "dgt_duplicate")
    with pytest.raises(ValueError, match="unknown"):
        Removal(1, "ghost")


def test_threaded_equals_serial():
    from concurrent.futures import ThreadPoolExecutor
    t = dedup_scene(11).table
    k1, r1 = run_filters(t, FilterConfig())
    with ThreadPoolExecutor(4) as ex:
        k2, r2 = run_filters(t, FilterConfig(), executor=ex)
    assert r1.removed == r2.removed
