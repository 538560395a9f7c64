"""WGS84 <-> UTM via the Krüger series (sixth order in n).

Accuracy is at the nanometre level inside a zone, which is far below what
trajectory work needs but makes round trips exact to floating point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

A = 6378137.0
F = 1.0 / 298.257223563
K0 = 0.9996
FALSE_EASTING = 500000.0
FALSE_NORTHING_SOUTH = 10000000.0

_N = F / (2.0 - F)
_N2, _N3, _N4, _N5, _N6 = _N ** 2, _N ** 3, _N ** 4, _N ** 5, _N ** 6
_RECT = A / (1.0 + _N) * (1.0 + _N2 / 4.0 + _N4 / 64.0 + _N6 / 256.0)
_E = math.sqrt(F * (2.0 - F))

_ALPHA = (
    _N / 2 - 2 * _N2 / 3 + 5 * _N3 / 16 + 41 * _N4 / 180 - 127 * _N5 / 288 + 7891 * _N6 / 37800,
    13 * _N2 / 48 - 3 * _N3 / 5 + 557 * _N4 / 1440 + 281 * _N5 / 630 - 1983433 * _N6 / 1935360,
    61 * _N3 / 240 - 103 * _N4 / 140 + 15061 * _N5 / 26880 + 167603 * _N6 / 181440,
    49561 * _N4 / 161280 - 179 * _N5 / 168 + 6601661 * _N6 / 7257600,
    34729 * _N5 / 80640 - 3418889 * _N6 / 1995840,
    212378941 * _N6 / 319334400,
)
_BETA = (
    _N / 2 - 2 * _N2 / 3 + 37 * _N3 / 96 - _N4 / 360 - 81 * _N5 / 512 + 96199 * _N6 / 604800,
    _N2 / 48 + _N3 / 15 - 437 * _N4 / 1440 + 46 * _N5 / 105 - 1118711 * _N6 / 3870720,
    17 * _N3 / 480 - 37 * _N4 / 840 - 209 * _N5 / 4480 + 5569 * _N6 / 90720,
    4397 * _N4 / 161280 - 11 * _N5 / 504 - 830251 * _N6 / 7257600,
    4583 * _N5 / 161280 - 108847 * _N6 / 3991680,
    20648693 * _N6 / 638668800,
)


@dataclass(frozen=True)
class UtmZone:
    number: int
    north: bool

    def __str__(self):
        return f"{self.number}{'N' if self.north else 'S'}"

    @property
    def central_meridian(self) -> float:
        return 6.0 * self.number - 183.0

    @classmethod
    def parse(cls, text: str) -> "UtmZone":
        text = text.strip().upper()
        return cls(int(text[:-1]), text[-1] == "N")


def zone_for(lat: float, lon: float) -> UtmZone:
    """Standard zone including the Norway and Svalbard exceptions."""
    _check_lat(lat)
    lon = (lon + 180.0) % 360.0 - 180.0
    number = int(math.floor((lon + 180.0) / 6.0)) + 1
    number = min(number, 60)
    if 56.0 <= lat < 64.0 and 3.0 <= lon < 12.0:
        number = 32
    if 72.0 <= lat < 84.0:
        if 0.0 <= lon < 9.0:
            number = 31
        elif 9.0 <= lon < 21.0:
            number = 33
        elif 21.0 <= lon < 33.0:
            number = 35
        elif 33.0 <= lon < 42.0:
            number = 37
    return UtmZone(number, lat >= 0.0)


def _check_lat(lat):
    if np.any(np.abs(np.asarray(lat)) >= 84.0):
        raise ValueError("unsupported region: UTM is limited to |lat| < 84 deg")


def to_utm(lat, lon, zone: UtmZone | None = None):
    """Forward projection; returns ``(easting, northing, zone)``.

    Accepts scalars or arrays.  With ``zone`` given, every point is
    projected into that zone (needed for frames that straddle a boundary).
    """
    lat_a = np.asarray(lat, dtype=float)
    lon_a = np.asarray(lon, dtype=float)
    _check_lat(lat_a)
    if zone is None:
        zone = zone_for(float(np.ravel(lat_a)[0]), float(np.ravel(lon_a)[0]))
    phi = np.radians(lat_a)
    lam = np.radians(lon_a - zone.central_meridian)
    lam = (lam + np.pi) % (2 * np.pi) - np.pi

    t = np.sinh(np.arctanh(np.sin(phi)) - _E * np.arctanh(_E * np.sin(phi)))
    xi_p = np.arctan2(t, np.cos(lam))
    eta_p = np.arctanh(np.sin(lam) / np.sqrt(1.0 + t * t))
    xi, eta = xi_p.copy(), eta_p.copy()
    for j, a in enumerate(_ALPHA, start=1):
        xi = xi + a * np.sin(2 * j * xi_p) * np.cosh(2 * j * eta_p)
        eta = eta + a * np.cos(2 * j * xi_p) * np.sinh(2 * j * eta_p)
    easting = FALSE_EASTING + K0 * _RECT * eta
    northing = K0 * _RECT * xi
    if not zone.north:
        northing = northing + FALSE_NORTHING_SOUTH
    if easting.ndim == 0:
        return float(easting), float(northing), zone
    return easting, northing, zone


def from_utm(easting, northing, zone: UtmZone):
    """Inverse projection; returns ``(lat, lon)`` in degrees."""
    e = np.asarray(easting, dtype=float)
    n = np.asarray(northing, dtype=float)
    if not zone.north:
        n = n - FALSE_NORTHING_SOUTH
    xi = n / (K0 * _RECT)
    eta = (e - FALSE_EASTING) / (K0 * _RECT)
    xi_p, eta_p = xi.copy(), eta.copy()
    for j, b in enumerate(_BETA, start=1):
        xi_p = xi_p - b * np.sin(2 * j * xi) * np.cosh(2 * j * eta)
        eta_p = eta_p - b * np.cos(2 * j * xi) * np.sinh(2 * j * eta)
    sinh_eta = np.sinh(eta_p)
    sin_xi, cos_xi = np.sin(xi_p), np.cos(xi_p)
    tau_p = sin_xi / np.sqrt(sinh_eta ** 2 + cos_xi ** 2)
    lam = np.arctan2(sinh_eta, cos_xi)
    tau = _tau_from_tau_prime(tau_p)
    lat = np.degrees(np.arctan(tau))
    lon = np.degrees(lam) + zone.central_meridian
    if lat.ndim == 0:
        return float(lat), float(lon)
    return lat, lon


def _tau_from_tau_prime(tau_p):
    """Newton iteration for the conformal-latitude inversion (Karney 2011)."""
    tau = tau_p.copy()
    for _ in range(8):
        sigma = np.sinh(_E * np.arctanh(_E * tau / np.sqrt(1.0 + tau * tau)))
        tp = tau * np.sqrt(1.0 + sigma * sigma) - sigma * np.sqrt(1.0 + tau * tau)
        dtau = ((tau_p - tp) / np.sqrt(1.0 + tp * tp)
                * (1.0 + (1.0 - _E * _E) * tau * tau)
                / ((1.0 - _E * _E) * np.sqrt(1.0 + tau * tau)))
        tau = tau + dtau
        if np.all(np.abs(dtau) < 1e-15):
            break
    return tau
