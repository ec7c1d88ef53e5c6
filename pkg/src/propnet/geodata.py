"""GIS raster layers: ASCII-grid IO, map bundles and antenna-centred patches.

Rasters are stored row-major with row 0 at the northern edge. A cell
represents the whole ``resolution_m`` x ``resolution_m`` square, and world
coordinates map to the containing cell by floor division.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    AllNoData,
    AntennaOutsideMap,
    DimensionMismatch,
    InvalidResolution,
    ParseError,
)

LAYER_KINDS = ("clutter", "building", "terrain")
MAX_CLUTTER_CODE = 21
DEFAULT_NODATA = -9999.0

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """One georeferenced GIS layer.

    ``origin`` is the (easting, northing) of the top-left cell corner.
    ``values`` has shape ``(height, width)``.
    """

    values: np.ndarray
    resolution_m: float
    origin: tuple[float, float] = (0.0, 0.0)
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DimensionMismatch(f"raster must be a non-empty 2-D array, got shape {values.shape}")
        if not self.resolution_m > 0:
            raise InvalidResolution(f"resolution must be > 0, got {self.resolution_m}")
        bad = ~np.isfinite(values) & (values != self.nodata)
        if bad.any():
            raise ParseError("raster contains non-finite cells that are not the nodata sentinel")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "resolution_m", float(self.resolution_m))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.values != self.nodata

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Values with nodata cells replaced by ``fill``."""
        return np.where(self.valid, self.values, fill)

    def same_grid(self, other: RasterGrid) -> bool:
        return (
            self.values.shape == other.values.shape
            and self.resolution_m == other.resolution_m
            and self.origin == other.origin
        )

    def world_to_pixel(self, easting: float, northing: float) -> tuple[int, int]:
        """(row, col) of the cell containing the point; may lie outside the grid."""
        col = math.floor((easting - self.origin[0]) / self.resolution_m)
        row = math.floor((self.origin[1] - northing) / self.resolution_m)
        return row, col

    def pixel_center(self, row: int, col: int) -> tuple[float, float]:
        return (
            self.origin[0] + (col + 0.5) * self.resolution_m,
            self.origin[1] - (row + 0.5) * self.resolution_m,
        )

    def __eq__(self, other):
        if not isinstance(other, RasterGrid):
            return NotImplemented
        return (
            self.same_grid(other)
            and self.nodata == other.nodata
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class GisMap:
    clutter: RasterGrid
    building: RasterGrid
    terrain: RasterGrid
    name: str = "map"

    def __post_init__(self):
        if not (self.clutter.same_grid(self.building) and self.clutter.same_grid(self.terrain)):
            raise DimensionMismatch("clutter, building and terrain layers must share one grid")
        _check_clutter(self.clutter)
        _check_building(self.building)

    @property
    def resolution_m(self) -> float:
        return self.clutter.resolution_m

    @property
    def shape(self) -> tuple[int, int]:
        return self.clutter.values.shape

    def bounds(self) -> tuple[float, float, float, float]:
        """(min_easting, min_northing, max_easting, max_northing)."""
        h, w = self.shape
        e0, n0 = self.clutter.origin
        r = self.resolution_m
        return e0, n0 - h * r, e0 + w * r, n0

    def contains(self, easting: float, northing: float) -> bool:
        row, col = self.clutter.world_to_pixel(easting, northing)
        h, w = self.shape
        return 0 <= row < h and 0 <= col < w


def _check_clutter(grid: RasterGrid) -> None:
    codes = grid.values[grid.valid]
    if codes.size and (
        np.any(codes != np.round(codes)) or codes.min() < 0 or codes.max() > MAX_CLUTTER_CODE
    ):
        raise ParseError(f"clutter codes must be integers in [0, {MAX_CLUTTER_CODE}]")


def _check_building(grid: RasterGrid) -> None:
    heights = grid.values[grid.valid]
    if heights.size and heights.min() < 0:
        raise ParseError("building heights must be >= 0")


@dataclass(frozen=True, eq=False)
class GisPatch:
    """Antenna-centred window of a :class:`GisMap`.

    The antenna cell sits at ``center_pixel = (H // 2, W // 2)``.
    """

    clutter: RasterGrid
    building: RasterGrid
    terrain: RasterGrid
    center_pixel: tuple[int, int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not (self.clutter.same_grid(self.building) and self.clutter.same_grid(self.terrain)):
            raise DimensionMismatch("patch layers must share one grid")
        h, w = self.clutter.values.shape
        expected = (h // 2, w // 2)
        if self.center_pixel is None:
            object.__setattr__(self, "center_pixel", expected)
        elif tuple(self.center_pixel) != expected:
            raise DimensionMismatch(f"center_pixel must be {expected}, got {self.center_pixel}")

    @property
    def resolution_m(self) -> float:
        return self.clutter.resolution_m

    @property
    def shape(self) -> tuple[int, int]:
        return self.clutter.values.shape

    @classmethod
    def from_arrays(
        cls,
        clutter: np.ndarray,
        building: np.ndarray,
        terrain: np.ndarray,
        resolution_m: float,
        origin: tuple[float, float] = (0.0, 0.0),
    ) -> GisPatch:
        return cls(
            RasterGrid(clutter, resolution_m, origin),
            RasterGrid(building, resolution_m, origin),
            RasterGrid(terrain, resolution_m, origin),
        )


# --------------------------------------------------------------------------- IO


def load_raster(path: str | Path, layer_kind: str = "terrain") -> RasterGrid:
    """Read an ASCII grid file.

    Header keys are case-insensitive; ``nodata_value`` is optional and
    defaults to -9999.
    """
    if layer_kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {layer_kind!r}")
    lines = Path(path).read_text().splitlines()
    header: dict[str, float] = {}
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        key = parts[0].lower()
        if key not in _HEADER_KEYS:
            break
        if len(parts) != 2:
            raise ParseError(f"{path}: malformed header line {lines[i]!r}")
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise ParseError(f"{path}: bad header value in {lines[i]!r}") from None
        i += 1
    for key in _HEADER_KEYS[:5]:
        if key not in header:
            raise ParseError(f"{path}: missing header key {key!r}")
    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows) or ncols < 1 or nrows < 1:
        raise ParseError(f"{path}: ncols/nrows must be positive integers")
    ncols, nrows = int(ncols), int(nrows)
    cellsize = header["cellsize"]
    if not cellsize > 0:
        raise InvalidResolution(f"{path}: cellsize must be > 0, got {cellsize}")
    nodata = header.get("nodata_value", DEFAULT_NODATA)

    try:
        cells = np.array(" ".join(lines[i:]).split(), dtype=np.float64)
    except ValueError:
        raise ParseError(f"{path}: non-numeric cell value") from None
    if cells.size != ncols * nrows:
        raise DimensionMismatch(f"{path}: header declares {ncols * nrows} cells, found {cells.size}")
    values = cells.reshape(nrows, ncols)
    origin = (header["xllcorner"], header["yllcorner"] + nrows * cellsize)
    grid = RasterGrid(values, cellsize, origin, nodata)
    if layer_kind == "clutter":
        _check_clutter(grid)
    elif layer_kind == "building":
        _check_building(grid)
    return grid


def save_raster(grid: RasterGrid, path: str | Path) -> None:
    """Write ``grid`` as an ASCII grid (6 significant digits)."""
    r = grid.resolution_m
    xll = grid.origin[0]
    yll = grid.origin[1] - grid.height * r
    out = [
        f"ncols {grid.width}",
        f"nrows {grid.height}",
        f"xllcorner {xll!r}",
        f"yllcorner {yll!r}",
        f"cellsize {r!r}",
        f"nodata_value {grid.nodata:g}",
    ]
    out.extend(" ".join(f"{v:.6g}" for v in row) for row in grid.values)
    Path(path).write_text("\n".join(out) + "\n")


def load_gis_map(directory: str | Path) -> GisMap:
    d = Path(directory)
    layers = {kind: load_raster(d / f"{kind}.asc", kind) for kind in LAYER_KINDS}
    return GisMap(name=d.name, **layers)


def save_gis_map(gis_map: GisMap, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for kind in LAYER_KINDS:
        save_raster(getattr(gis_map, kind), d / f"{kind}.asc")


# ---------------------------------------------------------------------- windows


def extract_patch(gis_map: GisMap, antenna_xy: tuple[float, float], W: int, H: int) -> GisPatch:
    """Cut a ``H`` x ``W`` window centred on the cell containing ``antenna_xy``.

    Cells outside the source map are padded with clutter 0, building 0 and
    the nearest terrain edge value. Nodata clutter/building cells become 0.
    The terrain layer is min-shifted to 0.
    """
    if W < 8 or H < 8:
        raise ValueError(f"patch must be at least 8x8, got {W}x{H}")
    row, col = gis_map.clutter.world_to_pixel(*antenna_xy)
    mh, mw = gis_map.shape
    if not (0 <= row < mh and 0 <= col < mw):
        raise AntennaOutsideMap(f"antenna {antenna_xy} lies outside map {gis_map.name!r}")

    rows = row + np.arange(H) - H // 2
    cols = col + np.arange(W) - W // 2
    inside = ((rows >= 0) & (rows < mh))[:, None] & ((cols >= 0) & (cols < mw))[None, :]
    rc = np.clip(rows, 0, mh - 1)[:, None]
    cc = np.clip(cols, 0, mw - 1)[None, :]

    def window(grid: RasterGrid, pad_zero: bool) -> np.ndarray:
        if pad_zero:
            return np.where(inside, grid.filled(0.0)[rc, cc], 0.0)
        return grid.values[rc, cc]

    res = gis_map.resolution_m
    origin = (
        gis_map.clutter.origin[0] + cols[0] * res,
        gis_map.clutter.origin[1] - rows[0] * res,
    )
    terrain_nodata = gis_map.terrain.nodata
    patch = GisPatch(
        RasterGrid(window(gis_map.clutter, True), res, origin),
        RasterGrid(window(gis_map.building, True), res, origin),
        RasterGrid(window(gis_map.terrain, False), res, origin, terrain_nodata),
    )
    return normalize_terrain(patch)


def normalize_terrain(patch: GisPatch) -> GisPatch:
    """Subtract the lowest valid terrain cell so the minimum becomes 0."""
    t = patch.terrain
    valid = t.valid
    if not valid.any():
        raise AllNoData("terrain layer has no valid cells")
    lowest = t.values[valid].min()
    shifted = np.where(valid, t.values - lowest, t.nodata)
    return replace(patch, terrain=replace(t, values=shifted))


# ------------------------------------------------------------ synthetic maps


def random_map(
    size: int,
    resolution_m: float,
    seed: int,
    name: str | None = None,
    building_density: float = 0.25,
) -> GisMap:
    """Generate a plausible synthetic city map.

    Smooth terrain, clutter zones (water, open, forest, suburban, urban,
    dense urban) and rectangular buildings inside built-up zones. Purely a
    test-data generator; nothing here is calibrated against real cities.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size

    def smooth_field(n_waves: int, max_freq: float) -> np.ndarray:
        f = np.zeros((size, size))
        for _ in range(n_waves):
            kx, ky = rng.uniform(-max_freq, max_freq, 2)
            phase = rng.uniform(0, 2 * np.pi)
            f += np.cos(2 * np.pi * (kx * xx + ky * yy) + phase) / (1.0 + math.hypot(kx, ky))
        f -= f.min()
        return f / max(f.max(), 1e-12)

    terrain = 40.0 * smooth_field(6, 3.0) + 5.0 * smooth_field(10, 8.0)
    urbanity = smooth_field(8, 4.0)

    clutter = np.full((size, size), 1.0)  # open
    clutter[urbanity > 0.35] = 6.0  # suburban
    clutter[urbanity > 0.55] = 5.0  # urban
    clutter[urbanity > 0.75] = 4.0  # dense urban
    forest = (urbanity < 0.3) & (smooth_field(5, 5.0) > 0.6)
    clutter[forest] = 3.0
    clutter[terrain < np.quantile(terrain, 0.04)] = 2.0  # water

    building = np.zeros((size, size))
    max_h = {6.0: 12.0, 5.0: 30.0, 4.0: 60.0}
    built = np.isin(clutter, list(max_h))
    n_buildings = int(building_density * built.sum() / 20)
    for _ in range(n_buildings):
        r, c = rng.integers(0, size, 2)
        code = clutter[r, c]
        if code not in max_h:
            continue
        bh, bw = rng.integers(2, 6, 2)
        height = rng.uniform(5.0, max_h[code])
        block = building[r : r + bh, c : c + bw]
        np.maximum(block, np.round(height, 1), out=block)

    res = float(resolution_m)
    origin = (0.0, size * res)
    return GisMap(
        RasterGrid(clutter, res, origin),
        RasterGrid(building, res, origin),
        RasterGrid(np.round(terrain + 100.0, 2), res, origin),
        name=name or f"synthetic-{seed}",
    )
