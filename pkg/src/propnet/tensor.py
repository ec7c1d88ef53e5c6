"""The 8-channel input tensor and dihedral data augmentation.

Channel order: clutter, building, terrain, azimuth offset, tilt offset,
antenna height, frequency, antenna gain. Storage is channel x row x column.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .antenna import AntennaConfig, compass_bearing, pattern_gain, wrap_angle
from .errors import NonSquare, ParseError, ScaleOverflow, ShapeMismatch
from .geodata import GisPatch

CHANNELS = (
    "clutter",
    "building",
    "terrain",
    "azimuth",
    "tilt",
    "antenna_height",
    "frequency",
    "antenna_gain",
)
N_CHANNELS = len(CHANNELS)
AZIMUTH_CHANNEL = CHANNELS.index("azimuth")

# Fixed unit scales; per-sample statistics would leak label information.
CLUTTER_SCALE = 21.0
HEIGHT_SCALE_M = 100.0
ANGLE_AZ_SCALE = 180.0
ANGLE_EL_SCALE = 90.0
FREQ_SCALE_MHZ = 3000.0
GAIN_SCALE_DB = 30.0
MAX_SCALED = 10.0

TENSOR_MAGIC = b"PLT1"


@dataclass(frozen=True, eq=False)
class InputTensor:
    data: np.ndarray  # (C, H, W)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeMismatch(f"tensor must be C x H x W, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("tensor values must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def channel(self, name: str) -> np.ndarray:
        return self.data[CHANNELS.index(name)]


@dataclass(frozen=True, eq=False)
class LosAngles:
    az_off: np.ndarray  # degrees in (-180, 180]
    el_off: np.ndarray  # degrees in [-90, 90]
    distance_m: np.ndarray  # horizontal distance, singular pixel clamped


def antenna_reference(shape: tuple[int, int]) -> tuple[float, float]:
    """Continuous (row, col) of the antenna used for all LOS geometry.

    This is the geometric centre of the patch, the fixed point of every
    dihedral transform. For odd sizes it is the centre of the antenna
    pixel; for even sizes it is the corner shared by the four central
    pixels, half a pixel from ``center_pixel``.
    """
    h, w = shape
    return (h - 1) / 2.0, (w - 1) / 2.0


def pixel_offsets(shape: tuple[int, int], resolution_m: float) -> tuple[np.ndarray, np.ndarray]:
    """(east, north) offsets in metres from the antenna reference to every pixel centre."""
    h, w = shape
    r0, c0 = antenna_reference(shape)
    rows, cols = np.mgrid[0:h, 0:w]
    return (cols - c0) * resolution_m, -(rows - r0) * resolution_m


def antenna_ground(terrain: np.ndarray) -> float:
    """Ground altitude under the antenna: bilinear value at the reference point."""
    h, w = terrain.shape
    rs = sorted({(h - 1) // 2, h // 2})
    cs = sorted({(w - 1) // 2, w // 2})
    return float(terrain[np.ix_(rs, cs)].mean())


def compute_los_angles(patch: GisPatch, ant: AntennaConfig) -> LosAngles:
    res = patch.resolution_m
    de, dn = pixel_offsets(patch.shape, res)
    dist = np.hypot(de, dn)
    singular = dist == 0.0

    az_off = wrap_angle(compass_bearing(de, dn) - ant.azimuth_deg)

    terrain = patch.terrain.filled(0.0)
    antenna_alt = antenna_ground(terrain) + ant.height_m
    dist = np.where(singular, res / 2.0, dist)
    depression = np.degrees(np.arctan2(antenna_alt - terrain, dist))
    el_off = np.clip(depression - ant.tilt_deg, -90.0, 90.0)

    az_off = np.where(singular, 0.0, az_off)
    el_off = np.where(singular, -90.0, el_off)
    return LosAngles(az_off, el_off, dist)


def build_input_tensor(patch: GisPatch, ant: AntennaConfig) -> InputTensor:
    los = compute_los_angles(patch, ant)
    h, w = patch.shape
    gain = pattern_gain(ant.pattern, los.az_off, los.el_off)
    data = np.stack(
        [
            patch.clutter.filled(0.0) / CLUTTER_SCALE,
            patch.building.filled(0.0) / HEIGHT_SCALE_M,
            patch.terrain.filled(0.0) / HEIGHT_SCALE_M,
            los.az_off / ANGLE_AZ_SCALE,
            los.el_off / ANGLE_EL_SCALE,
            np.full((h, w), ant.height_m / HEIGHT_SCALE_M),
            np.full((h, w), ant.frequency_mhz / FREQ_SCALE_MHZ),
            gain / GAIN_SCALE_DB,
        ]
    )
    worst = np.abs(data).max(axis=(1, 2))
    if (worst > MAX_SCALED).any():
        names = [CHANNELS[i] for i in np.flatnonzero(worst > MAX_SCALED)]
        raise ScaleOverflow(f"scaled channel magnitude exceeds {MAX_SCALED}: {names}")
    return InputTensor(data)


# ----------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentTransform:
    """Counter-clockwise rotation (multiple of 90 degrees), then optional left-right mirror."""

    rotation: int = 0
    mirror: bool = False

    def __post_init__(self):
        if self.rotation not in (0, 90, 180, 270):
            raise ValueError(f"rotation must be 0/90/180/270, got {self.rotation}")

    @classmethod
    def all(cls) -> list[AugmentTransform]:
        return [cls(r, m) for m in (False, True) for r in (0, 90, 180, 270)]

    @property
    def is_identity(self) -> bool:
        return self.rotation == 0 and not self.mirror

    def apply(self, a: np.ndarray) -> np.ndarray:
        """Transform the last two (row, col) axes of ``a``."""
        out = np.rot90(a, self.rotation // 90, axes=(-2, -1))
        if self.mirror:
            out = out[..., ::-1]
        return np.ascontiguousarray(out)

    def apply_to_azimuth(self, azimuth_deg: float) -> float:
        """Main-lobe azimuth that keeps the transformed map physically consistent."""
        az = azimuth_deg - self.rotation
        if self.mirror:
            az = -az
        return float(np.mod(az, 360.0))

    def then(self, other: AugmentTransform) -> AugmentTransform:
        """The single transform equal to applying ``self`` and then ``other``."""
        # Represent each element as (k, m): x -> M^m R^k x. Then
        # M^m2 R^k2 M^m1 R^k1 = M^(m1+m2) R^(k1 + (-1)^m1 k2).
        k1, m1 = self.rotation // 90, int(self.mirror)
        k2, m2 = other.rotation // 90, int(other.mirror)
        k = (k1 + (-k2 if m1 else k2)) % 4
        return AugmentTransform(90 * k, bool((m1 + m2) % 2))

    def inverse(self) -> AugmentTransform:
        if self.mirror:
            return self
        return AugmentTransform((360 - self.rotation) % 360, False)


def augment(tensor: InputTensor, label, t: AugmentTransform):
    """Apply ``t`` to a tensor and its label (any object with ``values`` and ``mask``).

    The azimuth channel changes sign under reflection; every other value is
    only moved.
    """
    h, w = tensor.shape[1:]
    if t.rotation in (90, 270) and h != w:
        raise NonSquare(f"cannot rotate a non-square {h}x{w} tensor by {t.rotation}")
    if t.is_identity:
        return tensor, label
    new_label = None
    if label is None:
        data, _, _ = augment_arrays(tensor.data, None, None, t)
    else:
        data, values, mask = augment_arrays(tensor.data, label.values, label.mask, t)
        new_label = replace(label, values=values, mask=mask)
    return InputTensor(data), new_label


def augment_arrays(data: np.ndarray, values, mask, t: AugmentTransform):
    """Array-level :func:`augment` for a ``(C, H, W)`` tensor and optional label/mask."""
    data = t.apply(data)
    if t.mirror:
        data[AZIMUTH_CHANNEL] = -data[AZIMUTH_CHANNEL]
    values = None if values is None else t.apply(values)
    mask = None if mask is None else t.apply(mask)
    return data, values, mask


# ------------------------------------------------------------------------ IO


def write_tensor(tensor: InputTensor, path: str | Path) -> None:
    c, h, w = tensor.shape
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<3I", c, h, w))
        fh.write(tensor.data.astype("<f4").tobytes())


def read_tensor(path: str | Path) -> InputTensor:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC or len(raw) < 16:
        raise ParseError(f"{path}: not a PLT1 tensor file")
    c, h, w = struct.unpack("<3I", raw[4:16])
    body = raw[16:]
    if len(body) != 4 * c * h * w:
        raise ParseError(f"{path}: expected {c * h * w} float32 values, found {len(body) // 4}")
    return InputTensor(np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(np.float64))
