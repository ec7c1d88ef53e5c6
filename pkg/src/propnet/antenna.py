"""Antenna engineering parameters and radiation patterns."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AngleOutOfRange, MissingCut, ParseError


def wrap_angle(deg):
    """Wrap degrees into (-180, 180]. Accepts scalars or arrays."""
    w = 180.0 - np.mod(180.0 - np.asarray(deg, dtype=np.float64), 360.0)
    if np.ndim(w) == 0:
        return float(w)
    return w


@dataclass(frozen=True, eq=False)
class RadiationPattern:
    """Two-cut antenna pattern.

    ``horizontal_cut[k]`` is the relative gain (dB, <= 0) at azimuth offset
    ``k`` degrees, k = 0..359. ``vertical_cut[k]`` is the relative gain at
    elevation offset ``k - 90`` degrees, i.e. index 90 is boresight.
    """

    horizontal_cut: np.ndarray
    vertical_cut: np.ndarray
    peak_gain_dbi: float = 0.0
    name: str = "pattern"

    def __post_init__(self):
        h = np.array(self.horizontal_cut, dtype=np.float64)
        v = np.array(self.vertical_cut, dtype=np.float64)
        if h.shape != (360,):
            raise MissingCut(f"horizontal cut needs 360 values, got {h.shape}")
        if v.shape != (181,):
            raise MissingCut(f"vertical cut needs 181 values, got {v.shape}")
        if not (np.isfinite(h).all() and np.isfinite(v).all()):
            raise ParseError("pattern cuts must be finite")
        if h.max() > 0 or v.max() > 0:
            raise ValueError("pattern cuts must be <= 0 dB relative to peak")
        h.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "horizontal_cut", h)
        object.__setattr__(self, "vertical_cut", v)
        object.__setattr__(self, "peak_gain_dbi", float(self.peak_gain_dbi))

    @classmethod
    def omni(cls, peak_gain_dbi: float = 0.0) -> RadiationPattern:
        return cls(np.zeros(360), np.zeros(181), peak_gain_dbi, name=f"omni-{peak_gain_dbi:g}dBi")

    @classmethod
    def sector(
        cls,
        peak_gain_dbi: float = 17.0,
        h_beamwidth_deg: float = 65.0,
        v_beamwidth_deg: float = 7.0,
        front_to_back_db: float = 25.0,
        side_lobe_db: float = 18.0,
    ) -> RadiationPattern:
        """Parabolic-mainlobe sector pattern with floor attenuation."""
        az = np.arange(360.0)
        az = np.minimum(az, 360.0 - az)
        h = -np.minimum(12.0 * (az / h_beamwidth_deg) ** 2, front_to_back_db)
        el = np.arange(-90.0, 91.0)
        v = -np.minimum(12.0 * (el / v_beamwidth_deg) ** 2, side_lobe_db)
        return cls(h, v, peak_gain_dbi, name=f"sector-{h_beamwidth_deg:g}deg-{peak_gain_dbi:g}dBi")


def standard_patterns() -> list[RadiationPattern]:
    """The built-in pattern library used when no pattern files are given."""
    return [
        RadiationPattern.omni(2.0),
        RadiationPattern.sector(17.0, 65.0, 7.0),
        RadiationPattern.sector(15.0, 90.0, 9.0),
        RadiationPattern.sector(18.0, 33.0, 6.5),
    ]


@dataclass(frozen=True)
class MobileConfig:
    height_m: float = 1.5

    def __post_init__(self):
        if not self.height_m > 0:
            raise ValueError(f"mobile height must be > 0, got {self.height_m}")


@dataclass(frozen=True)
class AntennaConfig:
    easting_m: float
    northing_m: float
    height_m: float
    azimuth_deg: float
    tilt_deg: float
    frequency_mhz: float
    tx_power_dbm: float = 43.0
    pattern: RadiationPattern = RadiationPattern.omni(0.0)

    def __post_init__(self):
        if not self.height_m > 0:
            raise ValueError(f"antenna height must be > 0, got {self.height_m}")
        if not self.frequency_mhz > 0:
            raise ValueError(f"frequency must be > 0, got {self.frequency_mhz}")
        if not 0.0 <= self.azimuth_deg < 360.0:
            raise ValueError(f"azimuth must be in [0, 360), got {self.azimuth_deg}")
        if not -90.0 <= self.tilt_deg <= 90.0:
            raise ValueError(f"tilt must be in [-90, 90], got {self.tilt_deg}")

    def metadata(self) -> dict:
        """JSON-friendly description (pattern by name)."""
        return {
            "easting_m": self.easting_m,
            "northing_m": self.northing_m,
            "height_m": self.height_m,
            "azimuth_deg": self.azimuth_deg,
            "tilt_deg": self.tilt_deg,
            "frequency_mhz": self.frequency_mhz,
            "tx_power_dbm": self.tx_power_dbm,
            "pattern": self.pattern.name,
        }


def pattern_gain(p: RadiationPattern, az_off_deg, el_off_deg):
    """Gain in dBi towards (azimuth offset, elevation offset).

    Sum of linearly interpolated cuts on top of the peak gain. The
    horizontal cut wraps around; the vertical cut is defined on [-90, 90].
    Works elementwise on arrays.
    """
    az = np.asarray(az_off_deg, dtype=np.float64)
    el = np.asarray(el_off_deg, dtype=np.float64)
    if np.any(~((el >= -90.0) & (el <= 90.0))):
        raise AngleOutOfRange("elevation offset must lie in [-90, 90]")

    a = np.mod(az, 360.0)
    i0 = np.floor(a).astype(np.int64) % 360
    frac = a - np.floor(a)
    hcut = p.horizontal_cut
    h = hcut[i0] * (1.0 - frac) + hcut[(i0 + 1) % 360] * frac

    e = el + 90.0
    j0 = np.minimum(np.floor(e).astype(np.int64), 179)
    efrac = e - j0
    vcut = p.vertical_cut
    v = vcut[j0] * (1.0 - efrac) + vcut[j0 + 1] * efrac

    g = p.peak_gain_dbi + h + v
    if g.ndim == 0:
        return float(g)
    return g


def load_pattern(path: str | Path) -> RadiationPattern:
    """Parse a pattern file (``GAIN``, ``HORIZONTAL 360``, ``VERTICAL 181`` blocks).

    The cuts are re-normalised so their maxima are 0 dB; the removed offset
    is folded into the peak gain.
    """
    path = Path(path)
    lines = [ln.split() for ln in path.read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln[0].startswith("#")]
    peak = None
    cuts: dict[str, dict[float, float]] = {}
    i = 0
    while i < len(lines):
        key = lines[i][0].upper()
        try:
            if key == "GAIN":
                peak = float(lines[i][1])
                i += 1
            elif key in ("HORIZONTAL", "VERTICAL"):
                n = int(lines[i][1])
                block = lines[i + 1 : i + 1 + n]
                if len(block) != n:
                    raise ParseError(f"{path}: {key} block truncated")
                cuts[key] = {float(a): float(g) for a, g in block}
                i += 1 + n
            else:
                raise ParseError(f"{path}: unexpected line {' '.join(lines[i])!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"{path}: malformed line {' '.join(lines[i])!r}") from None
    if peak is None:
        raise ParseError(f"{path}: missing GAIN line")
    for key, expected in (("HORIZONTAL", range(0, 360)), ("VERTICAL", range(-90, 91))):
        if key not in cuts:
            raise MissingCut(f"{path}: missing {key} cut")
        if sorted(cuts[key]) != [float(a) for a in expected]:
            raise MissingCut(f"{path}: {key} cut must list every integer degree in {expected}")
    h = np.array([cuts["HORIZONTAL"][float(a)] for a in range(360)])
    v = np.array([cuts["VERTICAL"][float(a)] for a in range(-90, 91)])
    h_max, v_max = h.max(), v.max()
    return RadiationPattern(h - h_max, v - v_max, peak + h_max + v_max, name=path.stem)


def save_pattern(p: RadiationPattern, path: str | Path) -> None:
    out = [f"GAIN {p.peak_gain_dbi!r}", "HORIZONTAL 360"]
    out += [f"{a} {g!r}" for a, g in enumerate(p.horizontal_cut.tolist())]
    out.append("VERTICAL 181")
    out += [f"{a - 90} {g!r}" for a, g in enumerate(p.vertical_cut.tolist())]
    Path(path).write_text("\n".join(out) + "\n")


def compass_bearing(d_east, d_north):
    """Bearing in degrees clockwise from north, in [0, 360)."""
    b = np.degrees(np.arctan2(d_east, d_north)) % 360.0
    if np.ndim(b) == 0:
        return float(b)
    return b


def distance_m(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])
