import json

import numpy as np
import pytest

from propnet.cli import main, read_pnm, render_gray
from propnet.geodata import random_map, save_gis_map
from propnet.net import ArchSpec, init_weights, load_weights, save_weights
from propnet.raysim import PathLossMatrix, read_matrix, write_matrix
from propnet.tensor import read_tensor

ARCH = ["--base-channels", "4", "--depth", "2"]


def last_value(out, key):
    lines = [ln for ln in out.strip().splitlines() if ln.startswith(key + "=")]
    return float(lines[-1].split("=", 1)[1])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for s in range(2):
        save_gis_map(random_map(96, 10.0, seed=s, name=f"town{s}"), root / "maps" / f"town{s}")
    return root


@pytest.fixture(scope="module")
def field_manifest(work):
    out = work / "field"
    code = main(["synth", "--maps", str(work / "maps"), "--n", "8", "--seed", "7", "--field-mode",
                 "--patch-size", "16", "--out", str(out)])
    assert code == 0
    return out / "manifest.json"


@pytest.fixture(scope="module")
def overfit(work, field_manifest):
    one = work / "one"
    assert main(["synth", "--maps", str(work / "maps" / "town0"), "--n", "1", "--seed", "3", "--field-mode",
                 "--patch-size", "16", "--out", str(one)]) == 0
    weights = work / "overfit.plw"
    code = main(["train", "--data", str(one / "manifest.json"), "--out", str(weights), "--epochs", "400",
                 "--batch-size", "1", "--lr", "3e-3", "--loss", "mse", "--no-augment", *ARCH])
    assert code == 0
    return one / "manifest.json", weights


def test_synth_count(field_manifest):
    doc = json.loads(field_manifest.read_text())
    assert len(doc["samples"]) == 8
    assert {e["map_id"] for e in doc["samples"]} == {"town0", "town1"}


def test_synth_missing_maps(tmp_path):
    assert main(["synth", "--maps", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_synth_byte_identical(work, field_manifest, tmp_path):
    main(["synth", "--maps", str(work / "maps"), "--n", "8", "--seed", "7", "--field-mode",
          "--patch-size", "16", "--out", str(tmp_path / "again")])
    assert (tmp_path / "again" / "manifest.json").read_bytes() == field_manifest.read_bytes()
    a = sorted((field_manifest.parent / "samples").iterdir())
    b = sorted((tmp_path / "again" / "samples").iterdir())
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_synth_placement_failure(work, tmp_path):
    code = main(["synth", "--maps", str(work / "maps" / "town0"), "--n", "500", "--patch-size", "64",
                 "--out", str(tmp_path / "o")])
    assert code == 3


def test_eval_prints_rmse_last(overfit, capsys):
    manifest, weights = overfit
    capsys.readouterr()
    assert main(["eval", "--weights", str(weights), "--data", str(manifest), "--split", "train"]) == 0
    out = capsys.readouterr().out
    assert out.strip().splitlines()[-1].startswith("rmse_db=")
    assert last_value(out, "rmse_db") < 2.0


def test_eval_empty_split(overfit):
    manifest, weights = overfit
    assert main(["eval", "--weights", str(weights), "--data", str(manifest), "--split", "test"]) == 5


def test_eval_shape_mismatch(field_manifest, tmp_path):
    save_weights(init_weights(ArchSpec(8, 4, 5), 0), tmp_path / "deep.plw")
    assert main(["eval", "--weights", str(tmp_path / "deep.plw"), "--data", str(field_manifest),
                 "--split", "train"]) == 4


def test_predict_writes_plm(overfit, tmp_path):
    manifest, weights = overfit
    out = tmp_path / "pred"
    assert main(["predict", "--weights", str(weights), "--data", str(manifest), "--out", str(out)]) == 0
    files = sorted(out.glob("*.plm"))
    assert len(files) == 1
    m = read_matrix(files[0])
    assert m.shape == (16, 16) and m.mask.all()


def test_predict_single_tensor(overfit, tmp_path):
    manifest, weights = overfit
    tensor = manifest.parent / "samples" / "00000.plt"
    out = tmp_path / "p.plm"
    assert main(["predict", "--weights", str(weights), "--tensor", str(tensor), "--out", str(out)]) == 0
    assert read_matrix(out).shape == read_tensor(tensor).shape[1:]


def test_finetune_not_worse(work, overfit, capsys, tmp_path):
    _, weights = overfit
    full = tmp_path / "full"
    main(["synth", "--maps", str(work / "maps" / "town1"), "--n", "2", "--seed", "11", "--patch-size", "16",
          "--split", "calibrate", "--out", str(full)])
    capsys.readouterr()
    out_w = tmp_path / "tuned.plw"
    code = main(["finetune", "--weights", str(weights), "--data", str(full / "manifest.json"),
                 "--out", str(out_w), "--epochs", "3", "--loss", "MSE"])
    assert code == 0
    out = capsys.readouterr().out
    assert last_value(out, "rmse_db") <= last_value(out, "rmse_before_db") + 1e-6
    assert load_weights(out_w).spec == load_weights(weights).spec


def test_finetune_default_output_name(overfit, field_manifest):
    _, weights = overfit
    code = main(["finetune", "--weights", str(weights), "--data", str(field_manifest), "--split", "train",
                 "--epochs", "1"])
    assert code == 0
    assert weights.with_name("overfit.finetuned.plw").exists()


def test_render_mid_gray(tmp_path):
    write_matrix(PathLossMatrix(np.full((4, 5), 110.0), np.ones((4, 5), bool)), tmp_path / "m.plm")
    assert main(["render", "--matrix", str(tmp_path / "m.plm"), "--out", str(tmp_path / "m.pgm")]) == 0
    img = read_pnm(tmp_path / "m.pgm")
    assert img.shape == (4, 5)
    assert np.all(np.abs(img.astype(int) - 127) <= 1)


def test_render_invalid_is_black(tmp_path):
    write_matrix(PathLossMatrix(np.full((3, 3), 90.0), np.zeros((3, 3), bool)), tmp_path / "m.plm")
    for palette, name in (("gray", "g.pgm"), ("color", "c.ppm")):
        assert main(["render", "--matrix", str(tmp_path / "m.plm"), "--palette", palette,
                     "--out", str(tmp_path / name)]) == 0
        assert not read_pnm(tmp_path / name).any()


def test_render_color_shape(tmp_path):
    write_matrix(PathLossMatrix(np.linspace(60, 160, 12).reshape(3, 4), np.ones((3, 4), bool)), tmp_path / "m.plm")
    assert main(["render", "--matrix", str(tmp_path / "m.plm"), "--palette", "color",
                 "--out", str(tmp_path / "c.ppm")]) == 0
    assert read_pnm(tmp_path / "c.ppm").shape == (3, 4, 3)


def test_render_monotone():
    values = np.linspace(40, 180, 500).reshape(20, 25)
    img = render_gray(PathLossMatrix(values, np.ones(values.shape, bool)))
    assert np.all(np.diff(img.reshape(-1).astype(int)) >= 0)


def test_render_filters(tmp_path):
    save_weights(init_weights(ArchSpec(8, 16, 4), 0), tmp_path / "w.plw")
    assert main(["render", "--weights", str(tmp_path / "w.plw"), "--out", str(tmp_path / "f"), "--scale", "4"]) == 0
    files = list((tmp_path / "f").glob("*.pgm"))
    assert len(files) == 16 * 8
    assert read_pnm(files[0]).shape == (12, 12)


def test_render_malformed(tmp_path):
    (tmp_path / "bad.plm").write_bytes(b"junk")
    assert main(["render", "--matrix", str(tmp_path / "bad.plm"), "--out", str(tmp_path / "x.pgm")]) == 4


def test_render_bad_range(tmp_path):
    write_matrix(PathLossMatrix(np.zeros((2, 2)), np.ones((2, 2), bool)), tmp_path / "m.plm")
    assert main(["render", "--matrix", str(tmp_path / "m.plm"), "--range", "100", "50",
                 "--out", str(tmp_path / "x.pgm")]) == 2


def test_baseline_hata_finite(field_manifest, capsys, tmp_path):
    capsys.readouterr()
    assert main(["baseline", "--model", "hata", "--data", str(field_manifest), "--split", "train",
                 "--out", str(tmp_path / "b")]) == 0
    assert np.isfinite(last_value(capsys.readouterr().out, "rmse_db"))
    assert len(list((tmp_path / "b").glob("*.plm"))) == 8


def test_baseline_raysim_zero(field_manifest, capsys):
    capsys.readouterr()
    assert main(["baseline", "--model", "raysim", "--data", str(field_manifest), "--split", "train"]) == 0
    assert last_value(capsys.readouterr().out, "rmse_db") == 0.0


def test_baseline_spm_calibration_helps(field_manifest, capsys):
    capsys.readouterr()
    main(["baseline", "--model", "spm", "--data", str(field_manifest), "--split", "train"])
    raw = last_value(capsys.readouterr().out, "rmse_db")
    main(["baseline", "--model", "spm", "--calibrate", "--data", str(field_manifest), "--split", "train"])
    tuned = last_value(capsys.readouterr().out, "rmse_db")
    assert tuned < raw


def test_help_exits_zero(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["--help"]) == 0
    for cmd in ("synth", "train", "eval", "predict", "finetune", "baseline", "render", "gradcheck"):
        assert main([cmd, "--help"]) == 0
    assert list(tmp_path.iterdir()) == []


def test_unknown_command():
    assert main(["frobnicate"]) == 2


def test_config_file_flags_win(work, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"maps": str(work / "maps"), "n": 3, "patch_size": 16, "seed": 1,
                               "out": str(tmp_path / "from_cfg")}))
    assert main(["synth", "--config", str(cfg)]) == 0
    assert len(json.loads((tmp_path / "from_cfg" / "manifest.json").read_text())["samples"]) == 3
    assert main(["synth", "--config", str(cfg), "--n", "2", "--out", str(tmp_path / "flags")]) == 0
    assert len(json.loads((tmp_path / "flags" / "manifest.json").read_text())["samples"]) == 2


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["synth", "--config", str(cfg)]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "MSE:" in out and "MAE:" in out and "FAIL" not in out
