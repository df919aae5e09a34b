import collections

import numpy as np
import pytest

from msct.data import (
    CATEGORIES, CATEGORY_LABELS, FeatureFormatError, ManifestError, MissingFeatureFileError,
    ModalityEmbedding, SampleRecord, UnknownCategoryError, batch_iter, export_dataset,
    generate_dataset, latent_path, load_manifest, read_features, split_modalities,
    stack_modalities, write_features,
)


def _latent_corr(rec, emb):
    la = emb.recover(rec.audio, "audio").ravel()
    lv = emb.recover(rec.visual, "visual").ravel()
    return np.corrcoef(la, lv)[0, 1]


def test_label_mapping_is_a_bijection():
    assert set(CATEGORY_LABELS) == set(CATEGORIES)
    assert set(CATEGORY_LABELS.values()) == {(1, 1, 1), (0, 1, 0), (1, 0, 0), (0, 0, 0)}
    for cat, (y_a, y_v, y_m) in CATEGORY_LABELS.items():
        assert y_m == (y_a and y_v)
        assert (cat[0:2] == "RA") == bool(y_a) and (cat[2:4] == "RV") == bool(y_v)


def test_counts_and_balance():
    data = generate_dataset(16, seed=7, n_val_per_category=2, n_test_per_category=3)
    assert (len(data.train), len(data.val), len(data.test)) == (64, 8, 12)
    counts = collections.Counter(r.category for r in data.train)
    assert counts == {c: 16 for c in CATEGORIES}
    ids = [r.sample_id for split in ("train", "val", "test") for r in data[split]]
    assert len(set(ids)) == len(ids)
    assert data.train[0].audio.shape == (8, 12) and data.train[0].visual.shape == (8, 12)


def test_same_seed_is_bit_identical():
    a = generate_dataset(4, seed=3, n_test_per_category=2)
    b = generate_dataset(4, seed=3, n_test_per_category=2)
    assert a == b
    assert not generate_dataset(4, seed=4) == a


def test_train_split_independent_of_other_split_sizes():
    a = generate_dataset(4, seed=3)
    b = generate_dataset(4, seed=3, n_val_per_category=5, n_test_per_category=5)
    assert a.train == b.train


def test_noiseless_real_pair_is_perfectly_correlated():
    emb = ModalityEmbedding.draw(4, 12, 12, seed=0)
    data = generate_dataset(5, noise_sigma=0.0, seed=1)
    for rec in data.train:
        if rec.category == "RARV":
            assert _latent_corr(rec, emb) == pytest.approx(1.0, abs=1e-12)


def test_monte_carlo_correlations():
    emb = ModalityEmbedding.draw(4, 12, 12, seed=0)
    data = generate_dataset(250, noise_sigma=0.1, seed=11)  # 1000 samples
    by_cat = collections.defaultdict(list)
    for rec in data.train:
        by_cat[rec.category].append(_latent_corr(rec, emb))
    fafv = np.mean(by_cat["FAFV"])
    assert abs(fafv) < 0.05
    real = np.mean(by_cat["RARV"])
    fake = np.mean(by_cat["FARV"] + by_cat["RAFV"] + by_cat["FAFV"])
    assert real - fake > 0.5


def test_latent_path_is_moving_average():
    path = latent_path(np.random.default_rng(0), 6, 2, window=3)
    steps = np.random.default_rng(0).normal(size=(8, 2))
    ref = np.stack([steps[t:t + 3].mean(axis=0) for t in range(6)])
    np.testing.assert_allclose(path, ref, atol=1e-14)


def test_latent_path_integrated_walk():
    path = latent_path(np.random.default_rng(0), 5, 1, window=1, persistence=1.0)
    steps = np.random.default_rng(0).normal(size=(5, 1))
    np.testing.assert_allclose(path, np.cumsum(steps, axis=0), atol=1e-14)


@pytest.mark.parametrize("kwargs", [{"n_per_category": 0}, {"n_per_category": 2, "T": 0},
                                    {"n_per_category": 2, "noise_sigma": -1.0},
                                    {"n_per_category": 2, "smoothing_window": 0}])
def test_generator_rejects_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        generate_dataset(**kwargs)


# files

def test_export_round_trip(tmp_path):
    data = generate_dataset(3, seed=2, n_val_per_category=1, n_test_per_category=2)
    manifest = export_dataset(data, tmp_path)
    assert manifest.read_text().splitlines()[0] == "sample_id,category,split,audio_path,visual_path"
    assert load_manifest(manifest) == data


def test_feature_file_layout(tmp_path):
    arr = np.arange(6, dtype=float).reshape(2, 3)
    write_features(tmp_path / "f.bin", arr)
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:8] == b"MSCTFEAT"
    assert raw[8:16] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.frombuffer(raw[16:], "<f8").tolist() == arr.ravel().tolist()
    np.testing.assert_array_equal(read_features(tmp_path / "f.bin"), arr)


def test_header_only_manifest(tmp_path):
    (tmp_path / "m.csv").write_text("sample_id,category,split,audio_path,visual_path\n")
    data = load_manifest(tmp_path / "m.csv")
    assert len(data) == 0 and data.train == []


def _one_sample_manifest(tmp_path, category="RARV"):
    write_features(tmp_path / "a.bin", np.ones((4, 3)))
    write_features(tmp_path / "v.bin", np.ones((4, 2)))
    (tmp_path / "m.csv").write_text("sample_id,category,split,audio_path,visual_path\n"
                                    f"s1,{category},train,a.bin,v.bin\n")
    return tmp_path / "m.csv"


def test_unknown_category_names_row(tmp_path):
    with pytest.raises(UnknownCategoryError, match=r"m.csv:2.*s1.*XYZV"):
        load_manifest(_one_sample_manifest(tmp_path, "XYZV"))


def test_missing_feature_file(tmp_path):
    path = _one_sample_manifest(tmp_path)
    (tmp_path / "v.bin").unlink()
    with pytest.raises(MissingFeatureFileError, match="s1"):
        load_manifest(path)


def test_nan_features_rejected(tmp_path):
    path = _one_sample_manifest(tmp_path)
    bad = np.ones((4, 2))
    bad[1, 1] = np.nan
    write_features(tmp_path / "v.bin", bad)
    with pytest.raises(FeatureFormatError, match="NaN"):
        load_manifest(path)


def test_bad_magic_and_truncation(tmp_path):
    path = _one_sample_manifest(tmp_path)
    raw = (tmp_path / "a.bin").read_bytes()
    (tmp_path / "a.bin").write_bytes(raw[:-8])
    with pytest.raises(FeatureFormatError, match="header says"):
        load_manifest(path)
    (tmp_path / "a.bin").write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(FeatureFormatError):
        load_manifest(path)


def test_bad_header_and_missing_manifest(tmp_path):
    (tmp_path / "m.csv").write_text("id,cat\n")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "m.csv")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "nope.csv")


def test_record_rejects_unknown_category():
    with pytest.raises(UnknownCategoryError):
        SampleRecord("x", "RRRR", np.zeros((2, 2)), np.zeros((2, 2)))


# batching

def test_batch_sizes():
    records = generate_dataset(3, seed=0).train[:10]
    assert [len(b) for b in batch_iter(records, 4)] == [4, 4, 2]


def test_batch_layout():
    records = generate_dataset(2, seed=0).train
    batch = next(batch_iter(records, 3))
    assert batch.audio.shape == (3, 12, 8) and batch.visual.shape == (3, 8, 12)
    np.testing.assert_array_equal(batch.audio[0], records[0].audio.T)
    assert batch.y_m.tolist() == [CATEGORY_LABELS[r.category][2] for r in records[:3]]


def test_shuffle_is_seeded_and_covers_each_once():
    records = generate_dataset(5, seed=0).train
    order = lambda s: [i for b in batch_iter(records, 3, shuffle_seed=s) for i in b.sample_ids]  # noqa: E731
    assert order(9) == order(9)
    assert order(9) != order(10)
    assert collections.Counter(order(9)) == collections.Counter(r.sample_id for r in records)


def test_batch_errors():
    with pytest.raises(ValueError):
        list(batch_iter([], 4))
    with pytest.raises(ValueError):
        list(batch_iter(generate_dataset(1).train, 0))


def test_stack_split_inverse(rng):
    audio, visual = rng.normal(size=(3, 5, 8)), rng.normal(size=(3, 8, 4))
    X = stack_modalities(audio, visual)
    assert X.shape == (3, 8, 9)
    a2, v2 = split_modalities(X, 5)
    np.testing.assert_array_equal(a2, audio)
    np.testing.assert_array_equal(v2, visual)
