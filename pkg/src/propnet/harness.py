"""Dataset synthesis, training, evaluation, calibration fine-tuning and filter export."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .antenna import AntennaConfig, MobileConfig, RadiationPattern, standard_patterns
from .errors import EmptySplit, NoValidPixels, PlacementExhausted, ShapeMismatch
from .empirical import SpmParams, hata_matrix, pixel_distance_km, spm_matrix
from .geodata import GisMap, GisPatch, extract_patch
from .net.optim import AdamHyper, OptimizerState, adam_step
from .net.plnet import MAE, ArchSpec, ModelWeights, init_weights, masked_loss, plnet_backward, plnet_forward, save_weights
from .raysim import ClutterLossTable, PathLossMatrix, read_matrix, road_mask, simulate, write_matrix
from .tensor import AugmentTransform, InputTensor, augment_arrays, build_input_tensor, read_tensor, write_tensor

log = logging.getLogger(__name__)

SPLITS = ("train", "test", "calibrate", "holdout")
FIELD_COVERAGE = 0.075


@dataclass(frozen=True, eq=False)
class SampleMeta:
    antenna: AntennaConfig
    map_id: str
    map_path: str | None = None
    mask_seed: int | None = None


@dataclass(frozen=True, eq=False)
class PathLossSample:
    input: InputTensor
    label: PathLossMatrix
    meta: SampleMeta
    split: str = "train"

    @property
    def mask(self) -> np.ndarray:
        return self.label.mask


@dataclass
class Dataset:
    samples: list[PathLossSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def split(self, tag: str) -> list[PathLossSample]:
        return [s for s in self.samples if s.split == tag]

    def maps(self, tag: str | None = None) -> set[str]:
        return {s.meta.map_id for s in self.samples if tag is None or s.split == tag}

    def __add__(self, other: Dataset) -> Dataset:
        return Dataset(self.samples + other.samples)


# ------------------------------------------------------------------ synthesis


@dataclass(frozen=True)
class SynthConfig:
    """Sampling ranges for virtual antennas (synthetic defaults, not from field data)."""

    patch_size: int = 64
    height_range_m: tuple[float, float] = (20.0, 60.0)
    tilt_range_deg: tuple[float, float] = (0.0, 12.0)
    frequencies_mhz: tuple[float, ...] = (900.0, 1800.0, 2600.0)
    tx_power_range_dbm: tuple[float, float] = (40.0, 46.0)
    mobile: MobileConfig = MobileConfig()
    coverage: float = FIELD_COVERAGE
    max_tries: int = 2000


def place_antennas(gis_map: GisMap, count: int, min_separation_m: float, rng, existing=(), max_tries: int = 2000):
    """Rejection-sample ``count`` points inside the map, pairwise >= ``min_separation_m`` apart."""
    e0, n0, e1, n1 = gis_map.bounds()
    points = list(existing)
    placed = []
    for _ in range(count):
        for _try in range(max_tries):
            p = (float(rng.uniform(e0, e1)), float(rng.uniform(n0, n1)))
            if not gis_map.contains(*p):
                continue
            if all(math.hypot(p[0] - q[0], p[1] - q[1]) >= min_separation_m for q in points):
                break
        else:
            raise PlacementExhausted(
                f"could not place antenna {len(placed) + 1}/{count} on {gis_map.name!r} "
                f"with separation {min_separation_m:g} m after {max_tries} tries"
            )
        points.append(p)
        placed.append(p)
    return placed


def synth_dataset(
    maps: Sequence[GisMap],
    n_samples: int,
    seed: int,
    field_mode: bool = False,
    split: str = "train",
    config: SynthConfig = SynthConfig(),
    patterns: Sequence[RadiationPattern] | None = None,
    clutter_table: ClutterLossTable | None = None,
    map_paths: Sequence[str] | None = None,
) -> Dataset:
    """Place virtual antennas on ``maps`` and label each patch with :func:`raysim.simulate`.

    Samples cycle through the maps. Antennas on one map are at least one
    patch width apart. In field mode every label keeps only a random road
    network of valid pixels.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    if n_samples == 0:
        return Dataset()
    if not maps:
        raise ValueError("at least one map is required")
    patterns = list(patterns or standard_patterns())
    rng = np.random.default_rng(seed)
    size = config.patch_size

    counts = [n_samples // len(maps) + (i < n_samples % len(maps)) for i in range(len(maps))]
    positions = {}
    for i, (gis_map, count) in enumerate(zip(maps, counts)):
        separation = size * gis_map.resolution_m
        positions[i] = place_antennas(gis_map, count, separation, rng, max_tries=config.max_tries)

    samples = []
    for k in range(n_samples):
        i = k % len(maps)
        gis_map = maps[i]
        easting, northing = positions[i][k // len(maps)]
        ant = AntennaConfig(
            easting_m=easting,
            northing_m=northing,
            height_m=float(rng.uniform(*config.height_range_m)),
            azimuth_deg=float(rng.uniform(0.0, 360.0)) % 360.0,
            tilt_deg=float(rng.uniform(*config.tilt_range_deg)),
            frequency_mhz=float(rng.choice(config.frequencies_mhz)),
            tx_power_dbm=float(rng.uniform(*config.tx_power_range_dbm)),
            pattern=patterns[int(rng.integers(len(patterns)))],
        )
        mask_seed = int(rng.integers(2**31))
        patch = extract_patch(gis_map, (easting, northing), size, size)
        label = simulate(patch, ant, config.mobile, clutter_table)
        if field_mode:
            label = label.with_mask(road_mask(size, size, mask_seed, config.coverage))
        meta = SampleMeta(ant, gis_map.name, map_paths[i] if map_paths else None, mask_seed if field_mode else None)
        samples.append(PathLossSample(build_input_tensor(patch, ant), label, meta, split))
    return Dataset(samples)


def split_roads(samples: Iterable[PathLossSample], seed: int, coverage: float = FIELD_COVERAGE):
    """Two disjoint drive-test road sets per sample: (calibration, holdout).

    The holdout roads are a fresh road network with calibration pixels removed.
    """
    cal, hold = [], []
    rng = np.random.default_rng(seed)
    for s in samples:
        h, w = s.label.shape
        a = road_mask(w, h, int(rng.integers(2**31)), coverage)
        b = road_mask(w, h, int(rng.integers(2**31)), coverage) & ~a
        cal.append(replace(s, label=s.label.with_mask(a), split="calibrate"))
        hold.append(replace(s, label=s.label.with_mask(b), split="holdout"))
    return cal, hold


def min_pairwise_separation(samples: Sequence[PathLossSample]) -> float:
    """Smallest antenna distance between samples on the same map (inf if none)."""
    best = math.inf
    by_map: dict[str, list[tuple[float, float]]] = {}
    for s in samples:
        by_map.setdefault(s.meta.map_id, []).append((s.meta.antenna.easting_m, s.meta.antenna.northing_m))
    for pts in by_map.values():
        for a in range(len(pts)):
            for b in range(a + 1, len(pts)):
                best = min(best, math.hypot(pts[a][0] - pts[b][0], pts[a][1] - pts[b][1]))
    return best


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 8
    loss_mode: str = MAE
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    max_iterations: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @property
    def hyper(self) -> AdamHyper:
        return AdamHyper(self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float = math.nan
    rmse_db: float = math.nan


def _usable(samples: Sequence[PathLossSample]) -> list[PathLossSample]:
    out = []
    for s in samples:
        if s.label.mask.any():
            out.append(s)
        else:
            warnings.warn(f"skipping sample on map {s.meta.map_id!r}: no valid pixels", stacklevel=3)
    return out


def _stack(samples: Sequence[PathLossSample]):
    shapes = {s.input.shape for s in samples}
    if len(shapes) != 1:
        raise ShapeMismatch(f"all samples must share one tensor shape, got {sorted(shapes)}")
    x = np.stack([s.input.data for s in samples]).astype(np.float32)
    y = np.stack([np.where(s.label.mask, s.label.values, 0.0) for s in samples]).astype(np.float32)
    m = np.stack([s.label.mask for s in samples])
    return x, y, m


def _run_epochs(
    w: ModelWeights,
    samples: Sequence[PathLossSample],
    epochs: int,
    batch_size: int,
    loss_mode: str,
    hyper: AdamHyper,
    augment_on: bool,
    seed: int,
    val: Sequence[PathLossSample] | None = None,
    checkpoint_every: int = 0,
    checkpoint_dir: str | None = None,
    max_iterations: int | None = None,
):
    x_all, y_all, m_all = _stack(samples)
    n = len(samples)
    rng = np.random.default_rng(seed)
    state = OptimizerState.for_weights(w, hyper)
    transforms = AugmentTransform.all()
    history: list[EpochRecord] = []
    iteration = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        count_sum = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x, y, m = x_all[idx], y_all[idx], m_all[idx]
            if augment_on:
                picks = rng.integers(len(transforms), size=len(idx))
                x, y, m = x.copy(), y.copy(), m.copy()
                for b, t_idx in enumerate(picks):
                    t = transforms[t_idx]
                    if not t.is_identity:
                        x[b], y[b], m[b] = augment_arrays(x[b], y[b], m[b], t)
            pred, acts = plnet_forward(w, x, cache=True)
            report = masked_loss(pred, y, m, loss_mode)
            grads = plnet_backward(w, acts, report.gradient)
            w, state = adam_step(w, grads, state)
            loss_sum += report.value * report.valid_pixel_count
            count_sum += report.valid_pixel_count
            iteration += 1
            if max_iterations is not None and iteration >= max_iterations:
                break
        record = EpochRecord(epoch, loss_sum / count_sum)
        if val:
            record.val_loss = evaluate_loss(w, val, loss_mode)
            record.rmse_db = evaluate_rmse(w, val)
        history.append(record)
        log.info("epoch %d train_loss %.4f val_loss %.4f rmse %.3f", epoch, record.train_loss, record.val_loss, record.rmse_db)
        if checkpoint_every and checkpoint_dir and epoch % checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_weights(w, Path(checkpoint_dir) / f"epoch{epoch:04d}.plw")
        if max_iterations is not None and iteration >= max_iterations:
            break
    return w, history


def train(
    dataset: Dataset | Sequence[PathLossSample],
    spec: ArchSpec = ArchSpec(),
    cfg: TrainConfig = TrainConfig(),
    val: Sequence[PathLossSample] | None = None,
    init: ModelWeights | None = None,
) -> tuple[ModelWeights, list[EpochRecord]]:
    """Mini-batch Adam on the masked loss.

    When a :class:`Dataset` is given only its ``train`` split is used. With
    augmentation on, each sample gets one of the 8 dihedral transforms per
    epoch. Fully determined by ``cfg.seed``.
    """
    samples = dataset.split("train") if isinstance(dataset, Dataset) else list(dataset)
    samples = _usable(samples)
    if not samples:
        raise EmptySplit("no usable training samples")
    w = init.copy() if init is not None else init_weights(spec, cfg.seed)
    return _run_epochs(
        w,
        samples,
        cfg.epochs,
        cfg.batch_size,
        cfg.loss_mode,
        cfg.hyper,
        cfg.augment,
        cfg.seed,
        val=val,
        checkpoint_every=cfg.checkpoint_every,
        checkpoint_dir=cfg.checkpoint_dir,
        max_iterations=cfg.max_iterations,
    )


@dataclass(frozen=True)
class FinetuneConfig:
    """Fine-tuning on calibration roads: a few epochs at a tenth of the base learning rate.

    ``batch_size=None`` means full batch.
    """

    epochs: int = 5
    lr_factor: float = 0.1
    base_lr: float = 1e-3
    batch_size: int | None = None
    loss_mode: str = MAE
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def finetune(
    w: ModelWeights, calibration: Sequence[PathLossSample], cfg: FinetuneConfig = FinetuneConfig()
) -> ModelWeights:
    """Continue training ``w`` on calibration samples; ``w`` itself is not modified."""
    samples = _usable(list(calibration))
    if not samples:
        raise EmptySplit("calibration split is empty")
    if cfg.epochs == 0:
        return w.copy()
    new_w, _ = _run_epochs(
        w.copy(),
        samples,
        cfg.epochs,
        cfg.batch_size or len(samples),
        cfg.loss_mode,
        AdamHyper(lr=cfg.base_lr * cfg.lr_factor),
        cfg.augment,
        cfg.seed,
    )
    return new_w


# ---------------------------------------------------------------- evaluation


def predict(w: ModelWeights, samples: Sequence[PathLossSample], batch_size: int = 16) -> list[np.ndarray]:
    out = []
    for start in range(0, len(samples), batch_size):
        x = np.stack([s.input.data for s in samples[start : start + batch_size]])
        out.extend(np.asarray(plnet_forward(w, x), dtype=np.float64))
    return out


def pooled_rmse(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    """RMSE over every valid pixel of every sample, each pixel weighted equally."""
    if len(preds) == 0:
        raise EmptySplit("cannot evaluate an empty split")
    sq = 0.0
    count = 0
    for p, t, m in zip(preds, truths, masks):
        m = np.asarray(m, dtype=bool)
        if not m.any():
            raise NoValidPixels("sample without valid pixels")
        d = np.asarray(p, dtype=np.float64)[m] - np.asarray(t, dtype=np.float64)[m]
        sq += float(d @ d)
        count += int(m.sum())
    return math.sqrt(sq / count)


def evaluate_rmse(w: ModelWeights, samples: Sequence[PathLossSample]) -> float:
    samples = list(samples)
    if not samples:
        raise EmptySplit("cannot evaluate an empty split")
    preds = predict(w, samples)
    return pooled_rmse(preds, [s.label.values for s in samples], [s.label.mask for s in samples])


def evaluate_loss(w: ModelWeights, samples: Sequence[PathLossSample], mode: str = MAE) -> float:
    samples = list(samples)
    preds = np.stack(predict(w, samples))
    truth = np.stack([s.label.values for s in samples])
    mask = np.stack([s.label.mask for s in samples])
    return masked_loss(preds, truth, mask, mode).value


# ---------------------------------------------------------------- baselines

BASELINES = ("hata", "spm", "raysim")


def sample_patch(sample: PathLossSample, gis_map: GisMap) -> GisPatch:
    """Re-extract the GIS patch a sample was generated from."""
    ant = sample.meta.antenna
    h, w = sample.label.shape
    return extract_patch(gis_map, (ant.easting_m, ant.northing_m), w, h)


def spm_measurements(samples: Sequence[PathLossSample], maps: dict[str, GisMap]) -> np.ndarray:
    """Calibration rows ``(d_km, h_B, clutter, observed_dB)`` from every valid label pixel."""
    rows = []
    for s in samples:
        patch = sample_patch(s, maps[s.meta.map_id])
        m = s.label.mask
        d = pixel_distance_km(patch)[m]
        codes = patch.clutter.filled(0.0)[m]
        rows.append(np.column_stack([d, np.full(d.shape, s.meta.antenna.height_m), codes, s.label.values[m]]))
    return np.vstack(rows) if rows else np.empty((0, 4))


def baseline_matrix(
    sample: PathLossSample,
    gis_map: GisMap,
    model: str,
    spm: SpmParams | None = None,
    mobile: MobileConfig = MobileConfig(),
    clutter_table: ClutterLossTable | None = None,
) -> PathLossMatrix:
    """Conventional-model prediction for one sample, masked like its label.

    ``spm=None`` uses the uncalibrated Hata-derived SPM defaults.
    """
    patch = sample_patch(sample, gis_map)
    ant = sample.meta.antenna
    if model == "hata":
        out = hata_matrix(patch, ant, mobile)
    elif model == "spm":
        out = spm_matrix(spm or SpmParams.from_hata(ant.frequency_mhz, mobile.height_m), patch, ant)
    elif model == "raysim":
        out = simulate(patch, ant, mobile, clutter_table)
    else:
        raise ValueError(f"unknown baseline {model!r}; expected one of {BASELINES}")
    return out.with_mask(sample.label.mask)


def baseline_rmse(samples: Sequence[PathLossSample], maps: dict[str, GisMap], model: str, **kwargs) -> float:
    samples = list(samples)
    preds = [baseline_matrix(s, maps[s.meta.map_id], model, **kwargs).values for s in samples]
    return pooled_rmse(preds, [s.label.values for s in samples], [s.label.mask for s in samples])


# ------------------------------------------------------------- filter export


@dataclass
class FilterImage:
    """One 3x3 first-layer kernel slice, min-max normalised to [0, 1]."""

    channel: int
    index: int
    image: np.ndarray
    kmin: float
    kmax: float

    def to_uint8(self) -> np.ndarray:
        return np.rint(self.image * 255.0).astype(np.uint8)

    def restore(self, pixels: np.ndarray | None = None) -> np.ndarray:
        """Map (quantised) image values back to kernel weights."""
        img = self.image if pixels is None else np.asarray(pixels, dtype=np.float64) / 255.0
        return self.kmin + img * (self.kmax - self.kmin)


def export_first_layer_filters(w: ModelWeights) -> list[list[FilterImage]]:
    """First encoder kernels grouped by input channel.

    A constant kernel maps to a uniform 0.5 image.
    """
    k = np.asarray(w.params["enc1.w"], dtype=np.float64)
    out = []
    for c in range(k.shape[1]):
        images = []
        for o in range(k.shape[0]):
            kern = k[o, c]
            lo, hi = float(kern.min()), float(kern.max())
            img = np.full(kern.shape, 0.5) if hi == lo else (kern - lo) / (hi - lo)
            images.append(FilterImage(c, o, img, lo, hi))
        out.append(images)
    return out


# ---------------------------------------------------------------- manifests


def _antenna_from_meta(meta: dict, patterns: dict[str, RadiationPattern]) -> AntennaConfig:
    fields = dict(meta)
    name = fields.pop("pattern")
    if name not in patterns:
        raise KeyError(f"unknown antenna pattern {name!r}")
    return AntennaConfig(pattern=patterns[name], **fields)


def save_dataset(dataset: Dataset | Sequence[PathLossSample], out_dir: str | Path, manifest_name: str = "manifest.json") -> Path:
    """Write tensors, labels and a JSON manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(dataset):
        tensor_rel = f"samples/{i:05d}.plt"
        label_rel = f"samples/{i:05d}.plm"
        write_tensor(s.input, out / tensor_rel)
        write_matrix(s.label, out / label_rel)
        entries.append(
            {
                "tensor": tensor_rel,
                "label": label_rel,
                "split": s.split,
                "map_id": s.meta.map_id,
                "map_path": s.meta.map_path,
                "mask_seed": s.meta.mask_seed,
                "antenna": s.meta.antenna.metadata(),
            }
        )
    path = out / manifest_name
    path.write_text(json.dumps({"version": 1, "samples": entries}, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(
    manifest: str | Path, split: str | None = None, patterns: Sequence[RadiationPattern] | None = None
) -> Dataset:
    manifest = Path(manifest)
    doc = json.loads(manifest.read_text())
    library = {p.name: p for p in (list(patterns or []) + standard_patterns())}
    root = manifest.parent
    samples = []
    for e in doc["samples"]:
        if split is not None and e["split"] != split:
            continue
        meta = SampleMeta(_antenna_from_meta(e["antenna"], library), e["map_id"], e.get("map_path"), e.get("mask_seed"))
        samples.append(PathLossSample(read_tensor(root / e["tensor"]), read_matrix(root / e["label"]), meta, e["split"]))
    return Dataset(samples)


def write_history(history: Sequence[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "rmse_db"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.rmse_db)])
