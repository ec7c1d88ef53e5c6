import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from propnet.errors import EmptySplit, PlacementExhausted
from propnet.geodata import random_map
from propnet.harness import (
    Dataset,
    FinetuneConfig,
    SynthConfig,
    TrainConfig,
    baseline_matrix,
    baseline_rmse,
    evaluate_loss,
    evaluate_rmse,
    export_first_layer_filters,
    finetune,
    load_dataset,
    min_pairwise_separation,
    pooled_rmse,
    predict,
    save_dataset,
    spm_measurements,
    split_roads,
    synth_dataset,
    train,
    write_history,
)
from propnet.net import MSE, ArchSpec, init_weights
from propnet.raysim import PathLossMatrix
from propnet.tensor import AugmentTransform

TINY = ArchSpec(8, 4, 2)
SMALL = SynthConfig(patch_size=16)


@pytest.fixture(scope="module")
def maps():
    return [random_map(96, 10.0, seed=s, name=f"m{s}") for s in range(3)]


@pytest.fixture(scope="module")
def field_data(maps):
    return synth_dataset(maps[:2], 6, seed=3, field_mode=True, config=SMALL)


@pytest.fixture(scope="module")
def full_data(maps):
    return synth_dataset(maps[:2], 4, seed=8, config=SynthConfig(patch_size=32))


# ---------------------------------------------------------------- synthesis


def test_zero_samples(maps):
    assert len(synth_dataset(maps, 0, seed=1)) == 0


def test_synth_deterministic(maps):
    a = synth_dataset(maps[:1], 3, seed=5, config=SMALL)
    b = synth_dataset(maps[:1], 3, seed=5, config=SMALL)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.input.data, y.input.data)
        np.testing.assert_array_equal(x.label.values, y.label.values)
        assert x.meta.antenna.metadata() == y.meta.antenna.metadata()


def test_synth_ranges_and_shapes(maps):
    ds = synth_dataset(maps, 6, seed=2, config=SMALL)
    for s in ds:
        a = s.meta.antenna
        assert 20 <= a.height_m <= 60 and 0 <= a.tilt_deg <= 12 and 0 <= a.azimuth_deg < 360
        assert a.frequency_mhz in (900.0, 1800.0, 2600.0)
        assert s.input.shape == (8, 16, 16)
        assert s.label.mask.all()
    assert ds.maps() == {"m0", "m1", "m2"}


def test_field_mode_coverage(field_data):
    for s in field_data:
        assert 0.06 <= s.label.mask.mean() <= 0.09
        assert np.isnan(s.label.values[~s.label.mask]).all()


def test_separation(maps):
    ds = synth_dataset(maps[:1], 8, seed=9, config=SMALL)
    assert min_pairwise_separation(ds.samples) >= 16 * 10.0


def test_placement_exhausted():
    tiny = random_map(20, 10.0, seed=0)
    with pytest.raises(PlacementExhausted):
        synth_dataset([tiny], 10, seed=0, config=SynthConfig(patch_size=16, max_tries=50))


def test_disjoint_map_splits(maps):
    ds = synth_dataset(maps[:2], 4, seed=1, config=SMALL) + synth_dataset(
        maps[2:], 2, seed=2, split="test", config=SMALL
    )
    assert ds.maps("train").isdisjoint(ds.maps("test"))
    assert len(ds.split("test")) == 2


def test_split_roads_disjoint(full_data):
    cal, hold = split_roads(full_data.samples, seed=4)
    for c, h in zip(cal, hold):
        assert c.split == "calibrate" and h.split == "holdout"
        assert not np.any(c.label.mask & h.label.mask)
        assert c.label.mask.any() and h.label.mask.any()


# ------------------------------------------------------------------ training


def test_single_sample_descent(field_data):
    cfg = TrainConfig(epochs=30, batch_size=1, lr=3e-3, augment=False, loss_mode=MSE)
    w, hist = train(field_data.samples[:1], TINY, cfg)
    assert [r.epoch for r in hist] == list(range(1, 31))
    before = evaluate_loss(init_weights(TINY, cfg.seed), field_data.samples[:1], MSE)
    assert evaluate_loss(w, field_data.samples[:1], MSE) < before


def test_training_deterministic(field_data):
    cfg = TrainConfig(epochs=2, batch_size=2, seed=3)
    a, ha = train(field_data, TINY, cfg)
    b, hb = train(field_data, TINY, cfg)
    assert a.equals(b)
    assert [r.train_loss for r in ha] == [r.train_loss for r in hb]


def test_empty_mask_sample_skipped(field_data):
    s = field_data.samples[0]
    empty = replace(s, label=s.label.with_mask(np.zeros(s.label.shape, bool)))
    with pytest.warns(UserWarning, match="no valid pixels"):
        train([empty, field_data.samples[1]], TINY, TrainConfig(epochs=1))
    with pytest.warns(UserWarning), pytest.raises(EmptySplit):
        train([empty], TINY, TrainConfig(epochs=1))


def test_validation_history_and_checkpoints(field_data, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=3, checkpoint_every=1, checkpoint_dir=str(tmp_path / "ck"))
    _, hist = train(field_data, TINY, cfg, val=field_data.samples[:2])
    assert all(math.isfinite(r.val_loss) and math.isfinite(r.rmse_db) for r in hist)
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["epoch0001.plw", "epoch0002.plw"]
    write_history(hist, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss,rmse_db"


def test_max_iterations(field_data):
    _, hist = train(field_data, TINY, TrainConfig(epochs=50, batch_size=1, max_iterations=4))
    assert len(hist) == 1


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# ------------------------------------------------------------------- metrics


def test_rmse_identity_and_offset():
    rng = np.random.default_rng(0)
    truths = [rng.uniform(80, 140, (4, 4)) for _ in range(3)]
    masks = [rng.random((4, 4)) < 0.5 for _ in range(3)]
    for m in masks:
        m[0, 0] = True
    assert pooled_rmse(truths, truths, masks) == 0.0
    assert pooled_rmse([t + 3.0 for t in truths], truths, masks) == 3.0


def test_rmse_pooling_hand_example():
    truth = [np.zeros((2, 2)), np.zeros((2, 2))]
    preds = [np.full((2, 2), math.sqrt(2.0)), np.zeros((2, 2))]
    masks = [np.ones((2, 2), bool)] * 2
    assert pooled_rmse(preds, truth, masks) == pytest.approx(1.0, abs=1e-15)


@given(st.integers(0, 2**31), st.integers(1, 10))
def test_rmse_matches_concatenated_oracle(seed, n):
    rng = np.random.default_rng(seed)
    preds = [rng.normal(120, 10, (5, 6)) for _ in range(n)]
    truths = [rng.normal(120, 10, (5, 6)) for _ in range(n)]
    masks = [rng.random((5, 6)) < 0.4 for _ in range(n)]
    for m in masks:
        m[rng.integers(5), rng.integers(6)] = True
    errs = np.concatenate([(p - t)[m] for p, t, m in zip(preds, truths, masks)])
    oracle = math.sqrt(np.mean(errs**2))
    assert pooled_rmse(preds, truths, masks) == pytest.approx(oracle, abs=1e-9)
    perm = rng.permutation(n)
    shuffled = pooled_rmse([preds[i] for i in perm], [truths[i] for i in perm], [masks[i] for i in perm])
    assert shuffled == pytest.approx(oracle, abs=1e-9)


def test_rmse_empty_split():
    with pytest.raises(EmptySplit):
        pooled_rmse([], [], [])
    with pytest.raises(EmptySplit):
        evaluate_rmse(init_weights(TINY, 0), [])


def test_rmse_invariant_under_augmentation():
    rng = np.random.default_rng(3)
    pred = rng.normal(120, 10, (8, 8))
    truth = rng.normal(120, 10, (8, 8))
    mask = rng.random((8, 8)) < 0.3
    mask[0, 0] = True
    base = pooled_rmse([pred], [truth], [mask])
    for t in AugmentTransform.all():
        assert pooled_rmse([t.apply(pred)], [t.apply(truth)], [t.apply(mask)]) == pytest.approx(base, abs=1e-12)


def test_evaluate_rmse_uses_model(field_data):
    w = init_weights(TINY, 0)
    preds = predict(w, field_data.samples)
    expected = pooled_rmse(preds, [s.label.values for s in field_data], [s.label.mask for s in field_data])
    assert evaluate_rmse(w, field_data.samples) == expected


# ------------------------------------------------------------------ finetune


def test_finetune_zero_epochs_is_copy(field_data):
    w = init_weights(TINY, 1)
    out = finetune(w, field_data.samples, FinetuneConfig(epochs=0))
    assert out.equals(w) and out is not w


def test_finetune_descends_and_preserves_input(full_data):
    w, _ = train(full_data, TINY, TrainConfig(epochs=3, batch_size=2, lr=3e-3, loss_mode=MSE, augment=False))
    snapshot = w.copy()
    cal, _ = split_roads(full_data.samples, seed=1)
    cfg = FinetuneConfig(epochs=3, loss_mode=MSE)
    before = evaluate_loss(w, cal, MSE)
    tuned = finetune(w, cal, cfg)
    assert evaluate_loss(tuned, cal, MSE) <= before + 1e-6
    assert w.equals(snapshot)
    assert finetune(w, cal, cfg).equals(tuned)


def test_finetune_empty():
    with pytest.raises(EmptySplit):
        finetune(init_weights(TINY, 0), [])


# ------------------------------------------------------------------- filters


def test_filter_counts():
    filters = export_first_layer_filters(init_weights(ArchSpec(), 0))
    assert len(filters) == 8
    assert all(len(per_channel) == 16 for per_channel in filters)


def test_constant_kernel_is_half_gray():
    w = init_weights(TINY, 0)
    w.params["enc1.w"][2, 5] = 0.7
    img = export_first_layer_filters(w)[5][2]
    np.testing.assert_array_equal(img.image, 0.5)
    np.testing.assert_allclose(img.restore(), 0.7)


def test_filter_round_trip_quantisation():
    w = init_weights(ArchSpec(), 3)
    k = w.params["enc1.w"]
    for per_channel in export_first_layer_filters(w):
        for f in per_channel:
            kern = k[f.index, f.channel]
            span = f.kmax - f.kmin
            assert f.image.min() >= 0 and f.image.max() <= 1
            err = np.abs(f.restore(f.to_uint8()) - kern).max()
            assert err <= span / 255 / 2 + 1e-6


# ----------------------------------------------------------------- baselines


def test_baseline_raysim_reproduces_labels(maps, field_data):
    lookup = {m.name: m for m in maps}
    assert baseline_rmse(field_data.samples, lookup, "raysim") == pytest.approx(0.0, abs=1e-9)


def test_baseline_masks_follow_labels(maps, field_data):
    lookup = {m.name: m for m in maps}
    s = field_data.samples[0]
    m = baseline_matrix(s, lookup[s.meta.map_id], "hata")
    np.testing.assert_array_equal(m.mask, s.label.mask)
    assert np.isfinite(m.values[m.mask]).all()
    with pytest.raises(ValueError):
        baseline_matrix(s, lookup[s.meta.map_id], "cost231")


def test_spm_measurement_rows(maps, field_data):
    rows = spm_measurements(field_data.samples, {m.name: m for m in maps})
    assert rows.shape == (sum(int(s.label.mask.sum()) for s in field_data), 4)
    assert np.all(rows[:, 0] > 0)


# ---------------------------------------------------------------- manifests


def test_manifest_round_trip(tmp_path, field_data):
    path = save_dataset(field_data, tmp_path / "ds")
    back = load_dataset(path)
    assert len(back) == len(field_data)
    for a, b in zip(field_data, back):
        np.testing.assert_array_equal(b.input.data, a.input.data.astype(np.float32))
        np.testing.assert_array_equal(b.label.mask, a.label.mask)
        assert b.meta.antenna.metadata() == a.meta.antenna.metadata()
        assert b.meta.mask_seed == a.meta.mask_seed
    assert len(load_dataset(path, split="test")) == 0
    again = save_dataset(field_data, tmp_path / "ds2")
    assert path.read_bytes() == again.read_bytes()


def test_dataset_container():
    ds = Dataset()
    assert len(ds) == 0 and ds.split("train") == [] and ds.maps() == set()


def test_no_warnings_on_clean_training(field_data):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        train(field_data, TINY, TrainConfig(epochs=1, batch_size=6))


def test_label_dtype(field_data):
    assert isinstance(field_data.samples[0].label, PathLossMatrix)
