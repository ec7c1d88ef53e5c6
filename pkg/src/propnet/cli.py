"""``propnet`` command-line entry point.

Exit codes: 0 success, 1 failed self-check (gradcheck), 2 configuration
error, 3 data generation failure, 4 shape mismatch or malformed input file,
5 empty split.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .antenna import MobileConfig, load_pattern
from .empirical import calibrate_spm
from .errors import (
    AllNoData,
    AntennaOutsideMap,
    DimensionMismatch,
    EmptySplit,
    NoValidPixels,
    NonDivisibleSize,
    ParseError,
    PlacementExhausted,
    PropnetError,
    ScaleOverflow,
    ShapeMismatch,
)
from .geodata import GisMap, load_gis_map
from .harness import (
    BASELINES,
    SPLITS,
    Dataset,
    FinetuneConfig,
    SynthConfig,
    TrainConfig,
    baseline_matrix,
    evaluate_rmse,
    export_first_layer_filters,
    finetune,
    load_dataset,
    pooled_rmse,
    predict,
    save_dataset,
    spm_measurements,
    synth_dataset,
    train,
    write_history,
)
from .net import MAE, MSE, ArchSpec, grad_check, load_weights, plnet_forward, save_weights
from .raysim import PathLossMatrix, read_clutter_table, read_matrix, write_matrix
from .tensor import read_tensor

log = logging.getLogger("propnet")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_GENERATION = 3
EXIT_SHAPE = 4
EXIT_EMPTY = 5

DEFAULT_RANGE_DB = (60.0, 160.0)
# 8 colour stops from low to high path loss (dark blue to yellow).
PALETTE = np.array(
    [
        (48, 18, 59),
        (65, 69, 171),
        (57, 162, 252),
        (27, 229, 181),
        (116, 254, 93),
        (201, 239, 52),
        (251, 185, 56),
        (245, 105, 24),
    ],
    dtype=np.float64,
)


class ConfigError(Exception):
    pass


# ------------------------------------------------------------------ rendering


def db_to_unit(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if not hi > lo:
        raise ConfigError(f"render range must satisfy low < high, got {lo:g}..{hi:g}")
    return np.clip((np.asarray(values, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)


def render_gray(m: PathLossMatrix, lo: float = DEFAULT_RANGE_DB[0], hi: float = DEFAULT_RANGE_DB[1]) -> np.ndarray:
    """Linear grayscale, higher loss brighter; invalid pixels are black."""
    u = db_to_unit(np.where(m.mask, m.values, lo), lo, hi)
    return np.where(m.mask, np.rint(u * 255.0), 0).astype(np.uint8)


def render_color(m: PathLossMatrix, lo: float = DEFAULT_RANGE_DB[0], hi: float = DEFAULT_RANGE_DB[1]) -> np.ndarray:
    """Piecewise-linear interpolation through :data:`PALETTE`; invalid pixels are black."""
    u = db_to_unit(np.where(m.mask, m.values, lo), lo, hi)
    stops = np.linspace(0.0, 1.0, len(PALETTE))
    rgb = np.stack([np.interp(u, stops, PALETTE[:, k]) for k in range(3)], axis=-1)
    rgb[~m.mask] = 0.0
    return np.rint(rgb).astype(np.uint8)


def write_pgm(img: np.ndarray, path: str | Path) -> None:
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def write_ppm(img: np.ndarray, path: str | Path) -> None:
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) written by this module."""
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if int(maxval) != 255 or magic not in (b"P5", b"P6"):
        raise ParseError(f"{path}: unsupported image header")
    shape = (h, w) if magic == b"P5" else (h, w, 3)
    return np.frombuffer(body, dtype=np.uint8).reshape(shape)


# -------------------------------------------------------------------- helpers


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _map_dirs(root: Path) -> list[Path]:
    if (root / "clutter.asc").exists():
        return [root]
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / "clutter.asc").exists())
    if not dirs:
        raise ConfigError(f"no maps under {root} (expected clutter/building/terrain .asc files)")
    return dirs


def _load_patterns(directory: str | None):
    if not directory:
        return None
    return [load_pattern(p) for p in sorted(_require(directory, "patterns dir").glob("*.pat"))]


def _load_split(args, split: str | None) -> Dataset:
    manifest = _require(args.data, "--data manifest")
    try:
        ds = load_dataset(manifest, split, _load_patterns(getattr(args, "patterns", None)))
    except (KeyError, json.JSONDecodeError) as exc:
        raise ParseError(f"{manifest}: bad manifest ({exc})") from None
    if not ds.samples:
        raise EmptySplit(f"{manifest}: no samples in split {split!r}")
    return ds


def _maps_for(ds: Dataset) -> dict[str, GisMap]:
    maps = {}
    for s in ds:
        if s.meta.map_id in maps:
            continue
        if not s.meta.map_path:
            raise ConfigError(f"manifest sample on map {s.meta.map_id!r} records no map_path")
        maps[s.meta.map_id] = load_gis_map(_require(s.meta.map_path, "map"))
    return maps


def _clutter_table(args):
    path = getattr(args, "clutter_table", None)
    return read_clutter_table(_require(path, "clutter table")) if path else None


def _spec(args) -> ArchSpec:
    try:
        return ArchSpec(base_channels=args.base_channels, depth=args.depth)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    root = _require(args.maps, "--maps directory")
    if not root.is_dir():
        raise ConfigError(f"--maps must be a directory: {root}")
    if args.n < 0:
        raise ConfigError("--n must be >= 0")
    if args.split not in SPLITS:
        raise ConfigError(f"--split must be one of {SPLITS}")
    dirs = _map_dirs(root)
    maps = [load_gis_map(d) for d in dirs]
    try:
        cfg = SynthConfig(patch_size=args.patch_size, coverage=args.coverage)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ds = synth_dataset(
        maps,
        args.n,
        args.seed,
        field_mode=args.field_mode,
        split=args.split,
        config=cfg,
        patterns=_load_patterns(args.patterns),
        clutter_table=_clutter_table(args),
        map_paths=[str(d.resolve()) for d in dirs],
    )
    path = save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _load_split(args, args.split)
    val = None
    if args.val:
        val = _load_split(argparse.Namespace(data=args.val, patterns=args.patterns), args.val_split).samples
    try:
        cfg = TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch_size,
            loss_mode=args.loss,
            lr=args.lr,
            augment=not args.no_augment,
            seed=args.seed,
            checkpoint_every=args.checkpoint_every,
            checkpoint_dir=args.checkpoint_dir,
            max_iterations=args.max_iterations,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    w, history = train(ds.samples, _spec(args), cfg, val=val)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(w, out)
    write_history(history, args.history or out.with_suffix(".history.csv"))
    print(f"train_loss={history[-1].train_loss:.6f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    w = load_weights(_require(args.weights, "--weights"))
    ds = _load_split(args, args.split)
    rmse = evaluate_rmse(w, ds.samples)
    print(f"samples={len(ds)}")
    print(f"rmse_db={rmse:.6f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    w = load_weights(_require(args.weights, "--weights"))
    out = Path(args.out)
    if args.tensor:
        tensor = read_tensor(_require(args.tensor, "--tensor"))
        pred = np.asarray(plnet_forward(w, tensor.data), dtype=np.float64)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_matrix(PathLossMatrix(pred, np.ones(pred.shape, dtype=bool)), out)
        print(f"wrote {out}")
        return EXIT_OK
    ds = _load_split(args, args.split)
    out.mkdir(parents=True, exist_ok=True)
    for i, pred in enumerate(predict(w, ds.samples)):
        write_matrix(PathLossMatrix(pred, np.ones(pred.shape, dtype=bool)), out / f"{i:05d}.plm")
    print(f"wrote {len(ds)} matrices to {out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    src = _require(args.weights, "--weights")
    w = load_weights(src)
    cal = _load_split(args, args.split).samples
    try:
        cfg = FinetuneConfig(
            epochs=args.epochs, lr_factor=args.lr_factor, base_lr=args.lr, loss_mode=args.loss, seed=args.seed
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    before = evaluate_rmse(w, cal)
    new_w = finetune(w, cal, cfg)
    after = evaluate_rmse(new_w, cal)
    out = Path(args.out) if args.out else src.with_name(src.stem + ".finetuned" + src.suffix)
    save_weights(new_w, out)
    print(f"rmse_before_db={before:.6f}")
    print(f"wrote {out}")
    print(f"rmse_db={after:.6f}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    if args.calibrate and args.model != "spm":
        raise ConfigError("--calibrate only applies to --model spm")
    ds = _load_split(args, args.split)
    maps = _maps_for(ds)
    mobile = MobileConfig(args.mobile_height)
    spm = None
    if args.model == "spm" and args.calibrate:
        cal = ds if args.calibrate_split in (None, args.split) else _load_split(args, args.calibrate_split)
        cal_maps = {**maps, **_maps_for(cal)}
        spm = calibrate_spm(spm_measurements(cal.samples, cal_maps))
        if spm.rank_deficient:
            log.warning("SPM calibration was rank deficient; using the minimum-norm fit")
    table = _clutter_table(args)
    preds = []
    for s in ds:
        m = baseline_matrix(s, maps[s.meta.map_id], args.model, spm=spm, mobile=mobile, clutter_table=table)
        # Score at the float32 storage precision of the label files.
        preds.append(m.values.astype(np.float32).astype(np.float64))
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            write_matrix(m, Path(args.out) / f"{len(preds) - 1:05d}.plm")
    if spm is not None and args.out:
        params = {"k": list(spm.k), "clutter_offset": spm.clutter_offset.tolist(), "rank_deficient": spm.rank_deficient}
        (Path(args.out) / "spm_params.json").write_text(json.dumps(params, indent=2) + "\n")
    rmse = pooled_rmse(preds, [s.label.values for s in ds], [s.label.mask for s in ds])
    print(f"model={args.model}{' (calibrated)' if spm is not None else ''}")
    print(f"rmse_db={rmse:.6f}")
    return EXIT_OK


def cmd_render(args) -> int:
    lo, hi = args.range
    out = Path(args.out)
    if args.weights:
        w = load_weights(_require(args.weights, "--weights"))
        out.mkdir(parents=True, exist_ok=True)
        count = 0
        for per_channel in export_first_layer_filters(w):
            for f in per_channel:
                img = np.kron(f.to_uint8(), np.ones((args.scale, args.scale), dtype=np.uint8))
                write_pgm(img, out / f"filter_c{f.channel}_k{f.index:03d}.pgm")
                count += 1
        print(f"wrote {count} filter images to {out}")
        return EXIT_OK
    m = read_matrix(_require(args.matrix, "--matrix or --weights"))
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.palette == "gray":
        write_pgm(render_gray(m, lo, hi), out)
    else:
        write_ppm(render_color(m, lo, hi), out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    status = EXIT_OK
    modes = [MSE, MAE] if args.mode == "BOTH" else [args.mode]
    for mode in modes:
        r = grad_check(seed=args.seed, eps=args.eps, mode=mode, n_params=args.n_params)
        tol = 1e-5 if mode == MSE else 1e-4
        ok = r.max_rel_error < tol
        status = status if ok else EXIT_CHECK_FAILED
        print(
            f"{mode}: max_rel_error={r.max_rel_error:.3e} checked={r.n_checked} "
            f"skipped_kinks={r.n_skipped_kinks} {'PASS' if ok else 'FAIL'}"
        )
    return status


# --------------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option defaults; explicit flags win")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_arch(p):
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--depth", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    return _build()[0]


def _build():
    parser = argparse.ArgumentParser(prog="propnet", description="Path-loss prediction toolkit.")
    parser.add_argument("--version", action="version", version=f"propnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="place virtual antennas and simulate labelled samples")
    _add_common(p)
    p.add_argument("--maps", help="a map directory or a directory of map directories")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--field-mode", action="store_true", help="keep only drive-test road pixels valid")
    p.add_argument("--split", default="train")
    p.add_argument("--out", default="dataset")
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--coverage", type=float, default=0.075)
    p.add_argument("--patterns", help="directory of *.pat antenna pattern files")
    p.add_argument("--clutter-table", help="CSV code,loss_db")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train PLNet on a dataset manifest")
    _add_common(p)
    p.add_argument("--data", help="dataset manifest")
    p.add_argument("--split", default="train")
    p.add_argument("--val", help="validation manifest")
    p.add_argument("--val-split", default="test")
    p.add_argument("--out", default="plnet.plw")
    p.add_argument("--history", help="CSV training history (default: next to the weights)")
    p.add_argument("--epochs", type=int, default=80)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--loss", type=str.upper, choices=(MAE, MSE), default=MAE)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--checkpoint-dir")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--patterns")
    _add_arch(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="pooled masked RMSE of a model on a split")
    _add_common(p)
    p.add_argument("--weights")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--patterns")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write predicted path-loss matrices")
    _add_common(p)
    p.add_argument("--weights")
    p.add_argument("--data", help="dataset manifest (one matrix per sample)")
    p.add_argument("--split")
    p.add_argument("--tensor", help="single PLT1 input tensor instead of a manifest")
    p.add_argument("--out", default="predictions")
    p.add_argument("--patterns")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("finetune", help="calibrate a model on drive-test roads")
    _add_common(p)
    p.add_argument("--weights")
    p.add_argument("--data")
    p.add_argument("--split", default="calibrate")
    p.add_argument("--out", help="output weights (default: <weights>.finetuned.plw)")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3, help="base learning rate before --lr-factor")
    p.add_argument("--lr-factor", type=float, default=0.1)
    p.add_argument("--loss", type=str.upper, choices=(MAE, MSE), default=MAE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patterns")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("baseline", help="run a conventional model over a split")
    _add_common(p)
    p.add_argument("--model", choices=BASELINES, default="hata")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="directory for predicted matrices")
    p.add_argument("--calibrate", action="store_true", help="least-squares fit the SPM before predicting")
    p.add_argument("--calibrate-split", help="split to fit on (default: --split)")
    p.add_argument("--mobile-height", type=float, default=1.5)
    p.add_argument("--clutter-table")
    p.add_argument("--patterns")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("render", help="PGM/PPM heatmaps of matrices or first-layer filters")
    _add_common(p)
    p.add_argument("--matrix", help="PLM1 matrix file")
    p.add_argument("--weights", help="render first-layer filters of these weights instead")
    p.add_argument("--out", default="render.pgm")
    p.add_argument("--palette", choices=("gray", "color"), default="gray")
    p.add_argument("--range", type=float, nargs=2, default=list(DEFAULT_RANGE_DB), metavar=("LOW", "HIGH"))
    p.add_argument("--scale", type=int, default=1, help="integer upscaling of filter images")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    _add_common(p)
    p.add_argument("--mode", type=str.upper, choices=(MSE, MAE, "BOTH"), default="BOTH")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--n-params", type=int, default=200)
    p.set_defaults(func=cmd_gradcheck)
    return parser, sub.choices


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse once to find ``--config``, then again with its values as defaults."""
    parser, commands = _build()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        path = _require(args.config, "--config")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        known = vars(args)
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        unknown = sorted(set(doc) - set(known) - {"config"})
        if unknown:
            raise ConfigError(f"{path}: unknown option(s) {unknown} for {args.command}")
        commands[args.command].set_defaults(**doc)
        args = parser.parse_args(argv)
    return args


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"propnet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # argparse usage errors and --help
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"propnet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PlacementExhausted, ScaleOverflow, AllNoData, AntennaOutsideMap) as exc:
        print(f"propnet: generation failed: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except (EmptySplit, NoValidPixels) as exc:
        print(f"propnet: empty split: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (ParseError, ShapeMismatch, NonDivisibleSize, DimensionMismatch) as exc:
        print(f"propnet: bad input: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (PropnetError, ValueError) as exc:
        print(f"propnet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
