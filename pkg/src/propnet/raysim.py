"""Synthetic deterministic path-loss simulator used to label training data.

Path loss per pixel is free-space loss over the 3-D link distance, plus
Deygout multi-knife-edge diffraction over the terrain+building profile,
plus a per-clutter additive loss, minus the antenna gain towards the pixel.
Reflections and scattering are not modelled.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .antenna import AntennaConfig, MobileConfig, pattern_gain
from .errors import DegenerateGeometry, NonPositiveInput, ParseError, SamePixel, ShapeMismatch
from .geodata import GisPatch
from .tensor import antenna_ground, antenna_reference, compute_los_angles

SPEED_OF_LIGHT_M_MHZ = 299.792458
KNIFE_EDGE_CUTOFF = -0.78
INVALID = np.nan
MATRIX_MAGIC = b"PLM1"

# Synthetic losses by clutter code; illustrative, not calibrated against anything.
DEFAULT_CLUTTER_LOSS_DB = (
    0.0,  # 0 unknown / padding
    0.0,  # 1 open land
    -2.0,  # 2 water
    8.0,  # 3 forest
    9.0,  # 4 dense urban
    6.0,  # 5 urban
    4.0,  # 6 suburban
    3.0,  # 7 village
    2.0,  # 8 park
    1.0,  # 9 agricultural
    5.0,  # 10 industrial
    7.0,  # 11 dense forest
    1.0,  # 12 grassland
    -1.0,  # 13 lake
    -1.0,  # 14 river
    2.0,  # 15 airport
    3.0,  # 16 commercial low-rise
    8.0,  # 17 high-rise
    4.0,  # 18 mixed residential
    0.5,  # 19 rock / bare
    1.5,  # 20 sand
    6.0,  # 21 swamp / wetland vegetation
)


def wavelength_m(f_mhz: float) -> float:
    return SPEED_OF_LIGHT_M_MHZ / f_mhz


@dataclass(frozen=True, eq=False)
class ClutterLossTable:
    loss_db: np.ndarray

    def __post_init__(self):
        loss = np.array(self.loss_db, dtype=np.float64)
        if loss.shape != (22,):
            raise ValueError(f"clutter loss table needs 22 entries, got {loss.shape}")
        if loss[0] != 0.0:
            raise ValueError("clutter code 0 (unknown) must map to 0 dB")
        if not np.isfinite(loss).all():
            raise ValueError("clutter losses must be finite")
        loss.setflags(write=False)
        object.__setattr__(self, "loss_db", loss)

    @classmethod
    def default(cls) -> ClutterLossTable:
        return cls(np.array(DEFAULT_CLUTTER_LOSS_DB))

    @classmethod
    def zeros(cls) -> ClutterLossTable:
        return cls(np.zeros(22))

    def __getitem__(self, code):
        return self.loss_db[np.asarray(code).astype(np.int64)]


def read_clutter_table(path: str | Path) -> ClutterLossTable:
    loss = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["code", "loss_db"]:
            raise ParseError(f"{path}: expected header code,loss_db")
        for row in reader:
            try:
                loss[int(row["code"])] = float(row["loss_db"])
            except (TypeError, ValueError):
                raise ParseError(f"{path}: bad row {row}") from None
    if sorted(loss) != list(range(22)):
        raise ParseError(f"{path}: need exactly one row for each code 0..21")
    return ClutterLossTable(np.array([loss[c] for c in range(22)]))


def write_clutter_table(table: ClutterLossTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["code", "loss_db"])
        for code, loss in enumerate(table.loss_db.tolist()):
            w.writerow([code, repr(loss)])


@dataclass(frozen=True, eq=False)
class PathLossMatrix:
    """Path loss in dB with a validity mask; invalid cells hold NaN."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool)
        values = np.array(self.values, dtype=np.float64)
        if values.shape != mask.shape or values.ndim != 2:
            raise ShapeMismatch(f"values {values.shape} and mask {mask.shape} must be equal 2-D shapes")
        values = np.where(mask, values, INVALID)
        if not np.isfinite(values[mask]).all():
            raise ValueError("valid path-loss cells must be finite")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def with_mask(self, mask: np.ndarray) -> PathLossMatrix:
        """Same values restricted to ``mask`` (intersected with the current mask)."""
        return PathLossMatrix(self.values, self.mask & np.asarray(mask, dtype=bool))


def write_matrix(m: PathLossMatrix, path: str | Path) -> None:
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<2I", h, w))
        fh.write(m.values.astype("<f4").tobytes())
        fh.write(m.mask.astype(np.uint8).tobytes())


def read_matrix(path: str | Path) -> PathLossMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != MATRIX_MAGIC or len(raw) < 12:
        raise ParseError(f"{path}: not a PLM1 matrix file")
    h, w = struct.unpack("<2I", raw[4:12])
    n = h * w
    if len(raw) != 12 + 5 * n:
        raise ParseError(f"{path}: size does not match a {h}x{w} matrix")
    values = np.frombuffer(raw[12 : 12 + 4 * n], dtype="<f4").reshape(h, w).astype(np.float64)
    mask = np.frombuffer(raw[12 + 4 * n :], dtype=np.uint8).reshape(h, w)
    if np.any(mask > 1):
        raise ParseError(f"{path}: mask bytes must be 0 or 1")
    return PathLossMatrix(values, mask.astype(bool))


# ------------------------------------------------------------------ free space


def free_space_loss(d_m, f_mhz):
    """Friis free-space loss in dB (distance in metres, frequency in MHz)."""
    d = np.asarray(d_m, dtype=np.float64)
    f = np.asarray(f_mhz, dtype=np.float64)
    if np.any(d <= 0) or np.any(f <= 0):
        raise NonPositiveInput("distance and frequency must be > 0")
    loss = 32.44 + 20.0 * np.log10(d / 1000.0) + 20.0 * np.log10(f)
    return float(loss) if loss.ndim == 0 else loss


# --------------------------------------------------------------------- profile


@dataclass(frozen=True, eq=False)
class Profile:
    """Obstruction heights along the antenna-receiver path.

    ``distances_m`` are horizontal distances from the antenna; heights are
    absolute (terrain + building). ``tx_alt_m``/``rx_alt_m`` are the
    absolute altitudes of the two link ends, ``total_m`` the horizontal
    length of the link.
    """

    distances_m: np.ndarray
    heights_m: np.ndarray
    tx_alt_m: float
    rx_alt_m: float
    total_m: float

    def __post_init__(self):
        d = np.asarray(self.distances_m, dtype=np.float64)
        h = np.asarray(self.heights_m, dtype=np.float64)
        if d.shape != h.shape or d.ndim != 1:
            raise ShapeMismatch("profile distances and heights must be equal-length vectors")
        if d.size and (d[0] <= 0 or np.any(np.diff(d) <= 0) or d[-1] >= self.total_m):
            raise ValueError("profile distances must be strictly increasing inside (0, total)")
        object.__setattr__(self, "distances_m", d)
        object.__setattr__(self, "heights_m", h)

    def __len__(self) -> int:
        return self.distances_m.size


def _crossings(start: float, end: float) -> np.ndarray:
    """Parameters t in (0, 1) where start + t*(end-start) crosses a cell boundary k + 0.5."""
    lo, hi = min(start, end), max(start, end)
    first = math.floor(lo - 0.5) + 1.5
    b = np.arange(first, hi, 1.0)
    b = b[(b > lo) & (b < hi)]
    return (b - start) / (end - start)


_MIN_SEGMENT = 1e-9


def traverse(start: tuple[float, float], end: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cells strictly between the start and end cells along a straight segment.

    Returns (rows, cols, t_mid) where ``t_mid`` is the segment parameter at
    the middle of the stretch inside each crossed cell. Stretches of zero
    length (the line clipping a cell corner) are ignored.
    """
    r0, c0 = start
    r1, c1 = end
    ts = [np.array([0.0, 1.0])]
    if r1 != r0:
        ts.append(_crossings(r0, r1))
    if c1 != c0:
        ts.append(_crossings(c0, c1))
    t = np.unique(np.concatenate(ts))
    a, b = t[:-1], t[1:]
    keep = (b - a) > _MIN_SEGMENT
    a, b = a[keep], b[keep]
    mid = 0.5 * (a + b)
    # drop the first (antenna) and last (receiver) cell
    mid = mid[1:-1]
    rows = np.rint(r0 + mid * (r1 - r0)).astype(np.int64)
    cols = np.rint(c0 + mid * (c1 - c0)).astype(np.int64)
    return rows, cols, mid


def _link_altitudes(patch: GisPatch, ant: AntennaConfig, mobile: MobileConfig):
    terrain = patch.terrain.filled(0.0)
    return terrain, antenna_ground(terrain) + ant.height_m, terrain + mobile.height_m


def extract_profile(
    patch: GisPatch,
    ant: AntennaConfig,
    target_pixel: tuple[int, int],
    mobile: MobileConfig = MobileConfig(),
) -> Profile:
    """Sample terrain+building once per pixel crossed on the way to ``target_pixel``."""
    r0, c0 = antenna_reference(patch.shape)
    r1, c1 = target_pixel
    res = patch.resolution_m
    total = math.hypot(r1 - r0, c1 - c0) * res
    if total == 0.0:
        raise SamePixel("target coincides with the antenna position")
    terrain, tx_alt, rx_alt = _link_altitudes(patch, ant, mobile)
    rows, cols, mid = traverse((r0, c0), (r1, c1))
    heights = terrain[rows, cols] + patch.building.filled(0.0)[rows, cols]
    return Profile(mid * total, heights, tx_alt, float(rx_alt[r1, c1]), total)


# ------------------------------------------------------------------ knife edge


def _fresnel_v(s, h, a_pos, a_alt, b_pos, b_alt, lam):
    line = a_alt + (b_alt - a_alt) * (s - a_pos) / (b_pos - a_pos)
    d1 = s - a_pos
    d2 = b_pos - s
    return (h - line) * np.sqrt(2.0 * (d1 + d2) / (lam * d1 * d2))


def knife_edge_v(profile: Profile, edge_index: int, f_mhz: float) -> float:
    """Fresnel-Kirchhoff parameter of one profile sample against the direct line."""
    if not 0 <= edge_index < len(profile):
        raise IndexError(f"edge index {edge_index} outside profile of length {len(profile)}")
    s = profile.distances_m[edge_index]
    if s <= 0 or s >= profile.total_m:
        raise DegenerateGeometry("edge coincides with a link end")
    v = _fresnel_v(
        s,
        profile.heights_m[edge_index],
        0.0,
        profile.tx_alt_m,
        profile.total_m,
        profile.rx_alt_m,
        wavelength_m(f_mhz),
    )
    return float(v)


def knife_edge_loss(v):
    """Single knife-edge loss J(v) in dB; 0 for v <= -0.78."""
    v = np.asarray(v, dtype=np.float64)
    x = v - 0.1
    with np.errstate(divide="ignore", invalid="ignore"):
        j = 6.9 + 20.0 * np.log10(np.sqrt(x * x + 1.0) + x)
    j = np.where(v > KNIFE_EDGE_CUTOFF, j, 0.0)
    return float(j) if j.ndim == 0 else j


def _deygout(s, h, a, b, lam, extra_levels):
    if s.size == 0:
        return 0.0
    v = _fresnel_v(s, h, a[0], a[1], b[0], b[1], lam)
    i = int(np.argmax(v))
    if v[i] <= KNIFE_EDGE_CUTOFF:
        return 0.0
    loss = float(knife_edge_loss(v[i]))
    if extra_levels > 0:
        edge = (s[i], h[i])
        loss += _deygout(s[:i], h[:i], a, edge, lam, extra_levels - 1)
        loss += _deygout(s[i + 1 :], h[i + 1 :], edge, b, lam, extra_levels - 1)
    return loss


def diffraction_loss(profile: Profile, f_mhz: float) -> float:
    """Deygout diffraction loss with at most one sub-edge on each side of the main edge."""
    return _deygout(
        profile.distances_m,
        profile.heights_m,
        (0.0, profile.tx_alt_m),
        (profile.total_m, profile.rx_alt_m),
        wavelength_m(f_mhz),
        extra_levels=1,
    )


# -------------------------------------------------------------- batched path


def _batch_crossings(start: float, end: np.ndarray, max_len: int) -> np.ndarray:
    """Vectorised :func:`_crossings`; padded with +inf to ``max_len`` columns."""
    lo = np.minimum(start, end)
    hi = np.maximum(start, end)
    first = np.floor(lo - 0.5) + 1.5
    b = first[:, None] + np.arange(max_len)[None, :]
    ok = (b > lo[:, None]) & (b < hi[:, None])
    delta = (end - start)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (b - start) / delta
    return np.where(ok, t, np.inf)


def _batch_max_v(s, h, ok, a_pos, a_alt, b_pos, b_alt, lam):
    """Row-wise principal edge among samples flagged ``ok``: (index, v)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        v = _fresnel_v(s, h, a_pos[:, None], a_alt[:, None], b_pos[:, None], b_alt[:, None], lam)
    v = np.where(ok, v, -np.inf)
    idx = np.argmax(v, axis=1)
    return idx, v[np.arange(len(idx)), idx]


def batch_diffraction_loss(
    patch: GisPatch,
    tx_alt: float,
    rx_alt: np.ndarray,
    targets: np.ndarray,
    f_mhz: float,
    include_buildings: bool = True,
) -> np.ndarray:
    """Deygout loss for many target pixels at once; equals :func:`diffraction_loss` per target.

    With ``include_buildings=False`` the profile is bare terrain.
    """
    n = len(targets)
    if n == 0:
        return np.zeros(0)
    h_grid, w_grid = patch.shape
    r0, c0 = antenna_reference(patch.shape)
    r1 = targets[:, 0].astype(np.float64)
    c1 = targets[:, 1].astype(np.float64)
    total = np.hypot(r1 - r0, c1 - c0) * patch.resolution_m
    lam = wavelength_m(f_mhz)

    t = np.concatenate(
        [
            np.zeros((n, 1)),
            np.ones((n, 1)),
            _batch_crossings(r0, r1, h_grid + 1),
            _batch_crossings(c0, c1, w_grid + 1),
        ],
        axis=1,
    )
    t.sort(axis=1)
    a, b = t[:, :-1], t[:, 1:]
    with np.errstate(invalid="ignore"):
        seg_ok = np.isfinite(b) & ((b - a) > _MIN_SEGMENT)
    # drop the first (antenna) and last (receiver) kept stretch of each row
    order = np.cumsum(seg_ok, axis=1)
    n_kept = order[:, -1:]
    interior = seg_ok & (order > 1) & (order < n_kept)
    mid = np.where(interior, 0.5 * (a + np.where(np.isfinite(b), b, a)), 0.0)

    rows = np.clip(np.rint(r0 + mid * (r1 - r0)[:, None]).astype(np.int64), 0, h_grid - 1)
    cols = np.clip(np.rint(c0 + mid * (c1 - c0)[:, None]).astype(np.int64), 0, w_grid - 1)
    surface = patch.terrain.filled(0.0)
    if include_buildings:
        surface = surface + patch.building.filled(0.0)
    h = surface[rows, cols]
    s = mid * total[:, None]

    zero = np.zeros(n)
    tx = np.full(n, tx_alt)
    idx, v_main = _batch_max_v(s, h, interior, zero, tx, total, rx_alt, lam)
    active = v_main > KNIFE_EDGE_CUTOFF
    loss = np.where(active, knife_edge_loss(np.where(active, v_main, 0.0)), 0.0)

    pos = np.arange(s.shape[1])[None, :]
    edge_s = s[np.arange(n), idx]
    edge_h = h[np.arange(n), idx]
    left_ok = interior & (pos < idx[:, None]) & active[:, None]
    right_ok = interior & (pos > idx[:, None]) & active[:, None]
    for ok, a_pos, a_alt, b_pos, b_alt in (
        (left_ok, zero, tx, edge_s, edge_h),
        (right_ok, edge_s, edge_h, total, rx_alt),
    ):
        _, v_sub = _batch_max_v(s, h, ok, a_pos, a_alt, b_pos, b_alt, lam)
        hit = ok.any(axis=1) & (v_sub > KNIFE_EDGE_CUTOFF)
        loss = loss + np.where(hit, knife_edge_loss(np.where(hit, v_sub, 0.0)), 0.0)
    return loss


def simulate(
    patch: GisPatch,
    ant: AntennaConfig,
    mobile: MobileConfig = MobileConfig(),
    clutter_table: ClutterLossTable | None = None,
    chunk: int = 8192,
) -> PathLossMatrix:
    """Path-loss matrix over the whole patch; every pixel is valid.

    The diffraction term is the Deygout loss over terrain plus buildings,
    floored at the bare-terrain Deygout loss. Depth-limited Deygout alone
    can drop when a tall building replaces several comparable terrain
    edges as the principal edge; the floor keeps buildings from ever
    lowering the path loss.
    """
    if clutter_table is None:
        clutter_table = ClutterLossTable.default()
    los = compute_los_angles(patch, ant)
    terrain, tx_alt, rx_alt = _link_altitudes(patch, ant, mobile)

    dist3d = np.hypot(los.distance_m, tx_alt - rx_alt)
    loss = free_space_loss(dist3d, ant.frequency_mhz)
    loss = loss + clutter_table[patch.clutter.filled(0.0)]
    loss = loss - pattern_gain(ant.pattern, los.az_off, los.el_off)

    h, w = patch.shape
    r0, c0 = antenna_reference(patch.shape)
    rows, cols = np.mgrid[0:h, 0:w]
    targets = np.stack([rows.ravel(), cols.ravel()], axis=1)
    targets = targets[(targets[:, 0] != r0) | (targets[:, 1] != c0)]
    has_buildings = bool(patch.building.filled(0.0).any())
    diff = np.zeros((h, w))
    for start in range(0, len(targets), chunk):
        tg = targets[start : start + chunk]
        rx = rx_alt[tg[:, 0], tg[:, 1]]
        d = batch_diffraction_loss(patch, tx_alt, rx, tg, ant.frequency_mhz)
        if has_buildings:
            d = np.maximum(d, batch_diffraction_loss(patch, tx_alt, rx, tg, ant.frequency_mhz, include_buildings=False))
        diff[tg[:, 0], tg[:, 1]] = d
    return PathLossMatrix(loss + diff, np.ones((h, w), dtype=bool))


# -------------------------------------------------------------------- roads


_STEPS = np.array([(-1, 0), (0, 1), (1, 0), (0, -1)])


def road_mask(W: int, H: int, seed: int, coverage_target: float = 0.075) -> np.ndarray:
    """Drive-test style validity mask: 4-connected random-walk road polylines.

    Roads mostly run straight and occasionally turn; new roads usually branch
    off existing ones. Walking stops as soon as the requested pixel count is
    reached, so coverage matches the target to within one pixel.
    """
    if not 0.01 <= coverage_target <= 0.5:
        raise ValueError(f"coverage target must lie in [0.01, 0.5], got {coverage_target}")
    rng = np.random.default_rng(seed)
    mask = np.zeros((H, W), dtype=bool)
    want = max(1, int(round(coverage_target * W * H)))
    count = 0
    road_pixels: list[tuple[int, int]] = []
    while count < want:
        if road_pixels and rng.random() < 0.7:
            r, c = road_pixels[rng.integers(len(road_pixels))]
        else:
            r, c = int(rng.integers(H)), int(rng.integers(W))
        heading = int(rng.integers(4))
        length = int(rng.integers(max(4, min(H, W) // 8), max(5, min(H, W) // 2) + 1))
        for _ in range(length):
            if not mask[r, c]:
                mask[r, c] = True
                road_pixels.append((r, c))
                count += 1
                if count >= want:
                    break
            if rng.random() < 0.1:
                heading = (heading + (1 if rng.random() < 0.5 else 3)) % 4
            nr, nc = r + _STEPS[heading][0], c + _STEPS[heading][1]
            if not (0 <= nr < H and 0 <= nc < W):
                break
            r, c = int(nr), int(nc)
    return mask
