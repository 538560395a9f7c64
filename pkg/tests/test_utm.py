import numpy as np
import pyproj
import pytest

from trajfuse.utm import UtmZone, from_utm, to_utm, zone_for


def _oracle(zone: UtmZone):
    south = "" if zone.north else " +south"
    return pyproj.Proj(f"+proj=utm +zone={zone.number}{south} +ellps=WGS84 +datum=WGS84")


@pytest.mark.parametrize("lat,lon", [(31.2, 121.47), (-33.9, 151.2), (0.0, 3.0), (60.0, 5.3),
                                     (78.2, 15.6), (-45.0, -70.0), (83.5, -179.0)])
def test_forward_matches_pyproj(lat, lon):
    e, n, zone = to_utm(lat, lon)
    pe, pn = _oracle(zone)(lon, lat)
    assert e == pytest.approx(pe, abs=1e-3)
    assert n == pytest.approx(pn, abs=1e-3)


def test_random_points_match_pyproj(rng):
    lat = rng.uniform(-80, 83.9, 300)
    lon = rng.uniform(-180, 180, 300)
    for la, lo in zip(lat, lon):
        e, n, zone = to_utm(la, lo)
        pe, pn = _oracle(zone)(lo, la)
        assert abs(e - pe) < 1e-3 and abs(n - pn) < 1e-3


def test_round_trip(rng):
    lat = rng.uniform(-80, 80, 500)
    lon = rng.uniform(-2.9, 2.9, 500) + 117.0
    zone = UtmZone(50, True)
    e, n, _ = to_utm(lat, lon, zone)
    lat2, lon2 = from_utm(e, n, zone)
    # 1e-9 deg is ~0.1 mm
    assert np.max(np.abs(lat2 - lat)) < 1e-9
    assert np.max(np.abs(lon2 - lon)) < 1e-9


def test_zone_exceptions():
    assert zone_for(60.0, 5.0).number == 32            # Norway
    assert zone_for(78.0, 10.0).number == 33           # Svalbard
    assert zone_for(78.0, 25.0).number == 35
    assert zone_for(31.2, 121.47) == UtmZone(51, True)
    assert zone_for(-10.0, -179.9) == UtmZone(1, False)


def test_polar_rejected():
    with pytest.raises(ValueError, match="unsupported region"):
        to_utm(84.5, 10.0)


def test_zone_text():
    z = UtmZone.parse("51N")
    assert z == UtmZone(51, True) and str(z) == "51N"
    assert z.central_meridian == 123.0
