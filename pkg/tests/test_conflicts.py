import math

import numpy as np
import pytest

from trajfuse.conflicts import (DEFAULT_BANDS, ConflictConfig, ConflictEvent, check_bands, classify,
                                conflict_mv_ratio, delta_psi, detect_conflicts, episodes,
                                min_ttc_scan, n_cmvcp, read_conflicts, scan_pair,
                                vru_context_share, write_conflicts)
from trajfuse.model import TrackTable
from trajfuse.synthetic import conflict_fixture, linear_track


@pytest.fixture(scope="module")
def fixture():
    return conflict_fixture()


@pytest.fixture(scope="module")
def events(fixture):
    return detect_conflicts(fixture.table)


@pytest.mark.parametrize("dpsi,kind", [(0.0, "rear_end"), (29.999, "rear_end"), (30.0, "sideswipe"),
                                       (84.9, "sideswipe"), (85.0, "angle"), (149.99, "angle"),
                                       (150.0, "head_on"), (180.0, "head_on")])
def test_classify_bands(dpsi, kind):
    assert classify(dpsi) == kind


def test_classify_out_of_range():
    with pytest.raises(ValueError):
        classify(180.5)


def test_band_validation():
    with pytest.raises(ValueError, match="gap or overlap"):
        check_bands(((0, 30, "rear_end"), (40, 180, "angle")))
    with pytest.raises(ValueError, match="gap or overlap"):
        check_bands(((0, 40, "rear_end"), (30, 180, "angle")))
    with pytest.raises(ValueError, match="cover"):
        check_bands(((0, 30, "rear_end"), (30, 170, "angle")))
    check_bands(DEFAULT_BANDS)


def test_delta_psi_folds():
    assert delta_psi(math.radians(350), math.radians(10)) == pytest.approx(20.0)
    assert delta_psi(0.0, math.pi) == pytest.approx(180.0)
    assert delta_psi(math.radians(-170), math.radians(170)) == pytest.approx(20.0)


def test_episodes_gap():
    frames = np.arange(100)
    below = np.zeros(100, bool)
    below[[10, 11, 12, 40, 41, 45, 80]] = True
    groups = episodes(frames, below, gap_frames=30)
    assert [g.tolist() for g in groups] == [[10, 11, 12, 40, 41, 45], [80]]
    # 41 -> 45 leaves exactly 3 frames out of range: same episode
    assert len(episodes(frames, below, gap_frames=3)) == 3
    assert len(episodes(frames, below, gap_frames=2)) == 4


def test_n_cmvcp_example():
    counts = [2] * 29 + [1] * 21              # 58 + 21 = 79 over 50 events
    evs = [ConflictEvent((2 * k, 2 * k + 1), float(k), 1.0, 0.5, (0, 0), 10.0, "rear_end", (), c)
           for k, c in enumerate(counts)]
    assert n_cmvcp(evs) == pytest.approx(1.58)
    assert n_cmvcp([]) is None


def test_ratio_needs_mvs():
    t = TrackTable({1: linear_track(1, "pedestrian", (0, 0), (1, 0), np.arange(20), 0.5, 0.5)},
                   "p", "meter", 10.0)
    with pytest.raises(ValueError, match="no MV"):
        conflict_mv_ratio(t, [])


def test_fixture_kinds(fixture, events):
    got = {e.pair: e.kind for e in events}
    assert got == fixture.expected_kinds
    for pair in fixture.decoys:
        assert pair not in got


def test_decoy_dropped_by_dgt(fixture):
    cands = {c.pair for c in min_ttc_scan(fixture.table)}
    assert (14, 15) in cands


def test_fixture_context(fixture, events):
    assert conflict_mv_ratio(fixture.table, events) == pytest.approx(fixture.expected_ratio)
    assert n_cmvcp(events) == pytest.approx(fixture.expected_n_cmvcp)
    rear = [e for e in events if e.kind == "rear_end"]
    assert {e.associated_ids for e in rear} == {(3, 4), (1, 2)}
    assert vru_context_share(events, fixture.table) == pytest.approx(0.25)


def test_thresholds_inclusive(fixture):
    t = fixture.table
    (c,) = scan_pair(t[1], t[2])
    assert len(scan_pair(t[1], t[2], ConflictConfig(ttc_max_s=c.min_ttc))) == 1
    assert scan_pair(t[1], t[2], ConflictConfig(ttc_max_s=c.min_ttc - 1e-6)) == []
    ev = next(e for e in detect_conflicts(t) if e.pair == (12, 13))
    keep = detect_conflicts(t, ConflictConfig(dgt_max_s=ev.dgt))
    drop = detect_conflicts(t, ConflictConfig(dgt_max_s=ev.dgt - 1e-6))
    assert (12, 13) in {e.pair for e in keep}
    assert (12, 13) not in {e.pair for e in drop}


def test_csv_round_trip(tmp_path, events):
    write_conflicts(events, tmp_path / "c.csv")
    text = (tmp_path / "c.csv").read_text().splitlines()
    assert text[0].startswith("# ttc_max_s=2 dgt_max_s=4")
    back = read_conflicts(tmp_path / "c.csv")
    assert [(e.pair, e.kind, e.n_associated, e.frame) for e in back] == \
           [(e.pair, e.kind, e.n_associated, e.frame) for e in events]
    for a, b in zip(back, events):
        assert a.min_ttc == pytest.approx(b.min_ttc, rel=1e-5)


def test_threaded_equals_serial(fixture, events):
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(8) as ex:
        assert detect_conflicts(fixture.table, executor=ex) == events
