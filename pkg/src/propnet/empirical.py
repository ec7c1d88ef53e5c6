"""Okumura-Hata urban path loss and a simple calibratable SPM-style model."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .antenna import AntennaConfig, MobileConfig
from .errors import NonPositiveDistance, OutOfValidityRange, RangeWarning, RankDeficient
from .geodata import GisPatch
from .tensor import pixel_offsets

SMALL_MEDIUM = "small_medium"
LARGE = "large"
CITY_SIZES = (SMALL_MEDIUM, LARGE)

# Published validity box of the urban model.
F_RANGE_MHZ = (150.0, 1500.0)
HB_RANGE_M = (30.0, 200.0)
HM_RANGE_M = (1.0, 10.0)
D_RANGE_KM = (1.0, 10.0)
# Per-pixel matrices include near-antenna cells; distance is clamped to this.
MIN_D_KM = 0.01

N_CLUTTER_CODES = 22


@dataclass(frozen=True)
class HataInput:
    f: float  # MHz
    h_B: float  # m
    h_M: float  # m
    d: float  # km
    city_size: str = SMALL_MEDIUM


def _check_range(name, value, lo, hi, strict):
    v = np.asarray(value)
    if np.any(v < lo) or np.any(v > hi):
        msg = f"{name} outside Okumura-Hata validity range [{lo:g}, {hi:g}]"
        if strict:
            raise OutOfValidityRange(msg)
        warnings.warn(msg, RangeWarning, stacklevel=3)


def hata_correction(f, h_M, city_size: str = SMALL_MEDIUM, strict: bool = True):
    """Mobile antenna height correction factor C_H in dB.

    Large cities switch from the low-band to the high-band formula above
    200 MHz; exactly 200 MHz uses the low-band formula.
    """
    if city_size not in CITY_SIZES:
        raise ValueError(f"city_size must be one of {CITY_SIZES}")
    _check_range("f", f, *F_RANGE_MHZ, strict)
    _check_range("h_M", h_M, *HM_RANGE_M, strict)
    f = np.asarray(f, dtype=np.float64)
    h_M = np.asarray(h_M, dtype=np.float64)
    if city_size == SMALL_MEDIUM:
        c = 0.8 + (1.1 * np.log10(f) - 0.7) * h_M - 1.56 * np.log10(f)
    else:
        low = 8.29 * np.log10(1.54 * h_M) ** 2 - 1.1
        high = 3.2 * np.log10(11.75 * h_M) ** 2 - 4.97
        c = np.where(f <= 200.0, low, high)
    return float(c) if c.ndim == 0 else c


def hata_urban(inp: HataInput, strict: bool = True):
    """Urban Okumura-Hata path loss L_U in dB. Fields may be arrays."""
    _check_range("h_B", inp.h_B, *HB_RANGE_M, strict)
    _check_range("d", inp.d, *D_RANGE_KM, strict)
    c_h = hata_correction(inp.f, inp.h_M, inp.city_size, strict)
    log_hb = np.log10(inp.h_B)
    loss = (
        69.55
        + 26.16 * np.log10(inp.f)
        - 13.82 * log_hb
        - c_h
        + (44.9 - 6.55 * log_hb) * np.log10(inp.d)
    )
    return float(loss) if np.ndim(loss) == 0 else loss


def pixel_distance_km(patch: GisPatch) -> np.ndarray:
    de, dn = pixel_offsets(patch.shape, patch.resolution_m)
    return np.maximum(np.hypot(de, dn) / 1000.0, MIN_D_KM)


def hata_matrix(
    patch: GisPatch,
    ant: AntennaConfig,
    mobile: MobileConfig = MobileConfig(),
    city_size: str = SMALL_MEDIUM,
):
    """Permissive per-pixel Hata prediction over the patch (all pixels valid)."""
    from .raysim import PathLossMatrix

    d = pixel_distance_km(patch)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RangeWarning)
        loss = hata_urban(HataInput(ant.frequency_mhz, ant.height_m, mobile.height_m, d, city_size), strict=False)
    return PathLossMatrix(loss, np.ones(patch.shape, dtype=bool))


# ----------------------------------------------------------------------- SPM


@dataclass(frozen=True, eq=False)
class SpmParams:
    """PL = K1 + K2 log d + K3 log h_B + K4 log d log h_B + clutter_offset[code].

    ``rank_deficient`` is set when a calibration fell back to the
    minimum-norm least-squares solution.
    """

    k: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    clutter_offset: np.ndarray = field(default_factory=lambda: np.zeros(N_CLUTTER_CODES))
    rank_deficient: bool = False

    def __post_init__(self):
        k = tuple(float(x) for x in self.k)
        off = np.array(self.clutter_offset, dtype=np.float64)
        if len(k) != 4 or off.shape != (N_CLUTTER_CODES,):
            raise ValueError("SPM needs 4 coefficients and 22 clutter offsets")
        if not (np.isfinite(k).all() and np.isfinite(off).all()):
            raise ValueError("SPM parameters must be finite")
        off.setflags(write=False)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "clutter_offset", off)

    @classmethod
    def from_hata(cls, f_mhz: float, h_M: float = 1.5, city_size: str = SMALL_MEDIUM) -> SpmParams:
        """Uncalibrated defaults: the urban Hata model at one carrier frequency."""
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RangeWarning)
            c_h = hata_correction(f_mhz, h_M, city_size, strict=False)
        k1 = 69.55 + 26.16 * np.log10(f_mhz) - c_h
        return cls((k1, 44.9, -13.82, -6.55))


def _design_columns(d_km, h_B):
    ld = np.log10(d_km)
    lh = np.log10(h_B)
    return np.stack([np.ones_like(ld), ld, lh, ld * lh], axis=-1)


def spm_predict(p: SpmParams, d_km, h_B, clutter_code):
    """SPM path loss in dB; arguments broadcast elementwise."""
    d_km = np.asarray(d_km, dtype=np.float64)
    if np.any(d_km <= 0):
        raise NonPositiveDistance("SPM distance must be > 0")
    h_B = np.asarray(h_B, dtype=np.float64)
    code = np.asarray(clutter_code).astype(np.int64)
    cols = _design_columns(*np.broadcast_arrays(d_km, h_B))
    loss = cols @ np.asarray(p.k) + p.clutter_offset[code]
    return float(loss) if loss.ndim == 0 else loss


def spm_matrix(p: SpmParams, patch: GisPatch, ant: AntennaConfig):
    from .raysim import PathLossMatrix

    d = pixel_distance_km(patch)
    codes = patch.clutter.filled(0.0).astype(np.int64)
    return PathLossMatrix(spm_predict(p, d, ant.height_m, codes), np.ones(patch.shape, dtype=bool))


def spm_design(d_km, h_B, clutter_code, codes_free) -> np.ndarray:
    """Design matrix for the free parameters: K1..K4, then one column per free clutter code."""
    cols = _design_columns(np.asarray(d_km, float), np.asarray(h_B, float))
    code = np.asarray(clutter_code).astype(np.int64)
    ind = (code[:, None] == np.asarray(codes_free)[None, :]).astype(np.float64)
    return np.hstack([cols, ind])


def calibrate_spm(measurements, allow_rank_deficient: bool = True) -> SpmParams:
    """Least-squares fit of the SPM to ``(d_km, h_B, clutter_code, observed_dB)`` rows.

    The clutter offsets are collinear with K1, so the lowest clutter code
    present is the reference and keeps offset 0. Codes absent from the data
    also keep 0. With fewer rows than free parameters the fit is refused;
    rank deficiency with enough rows yields the minimum-norm solution,
    flagged on the result (or raises when ``allow_rank_deficient`` is off).
    """
    m = np.asarray(measurements, dtype=np.float64).reshape(-1, 4)
    d_km, h_B, code, observed = m.T
    if np.any(d_km <= 0):
        raise NonPositiveDistance("calibration distances must be > 0")
    present = np.unique(code.astype(np.int64))
    codes_free = present[1:]
    A = spm_design(d_km, h_B, code, codes_free)
    n, p = A.shape
    if n < p:
        raise RankDeficient(f"{n} measurements cannot determine {p} free parameters")
    sol, _, rank, _ = np.linalg.lstsq(A, observed, rcond=None)
    deficient = rank < p
    if deficient and not allow_rank_deficient:
        raise RankDeficient(f"design matrix rank {rank} < {p} free parameters")
    offsets = np.zeros(N_CLUTTER_CODES)
    offsets[codes_free] = sol[4:]
    return SpmParams(tuple(sol[:4]), offsets, rank_deficient=bool(deficient))


def read_measurements(path: str | Path) -> np.ndarray:
    """Read a calibration CSV with header ``d_km,h_b_m,clutter,observed_db``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["d_km", "h_b_m", "clutter", "observed_db"]
        if reader.fieldnames != expected:
            raise ValueError(f"{path}: expected header {','.join(expected)}")
        rows = [[float(r[k]) for k in expected] for r in reader]
    return np.array(rows).reshape(-1, 4)


def write_measurements(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["d_km", "h_b_m", "clutter", "observed_db"])
        for d, h, c, o in np.asarray(rows).reshape(-1, 4):
            w.writerow([repr(float(d)), repr(float(h)), int(c), repr(float(o))])
