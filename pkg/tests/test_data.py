import collections

import numpy as np
import pytest

from conftest import small_dataset
from priornet.data import (
    Dataset,
    DatasetManifest,
    ManifestEntry,
    Preprocessing,
    SyntheticSpec,
    generate_synthetic_dataset,
    sample_training_pair,
    split_dataset,
    steps_per_epoch,
    synthesize,
)
from priornet.errors import ConfigError, DataError, FormatError, GenerationError


def _manifest(n, root="."):
    return DatasetManifest([ManifestEntry(f"img{i}.pvol", f"lbl{i}.pvol") for i in range(n)], 3, 3, root)


def test_candi_split_counts():
    out = split_dataset(_manifest(103), test_count=21, seed=0)
    assert len(out.split("test")) == 21
    assert len(out.split("train")) == 82


def test_split_set_algebra():
    m = _manifest(40)
    out = split_dataset(m, test_fraction=0.25, seed=3)
    train = {out.entries[i].image for i in out.split("train")}
    test = {out.entries[i].image for i in out.split("test")}
    assert not train & test
    assert train | test == {e.image for e in m.entries}
    assert len(test) == 10


def test_split_deterministic_and_seeded():
    m = _manifest(30)
    a = split_dataset(m, test_count=5, seed=1).split("test")
    assert a == split_dataset(m, test_count=5, seed=1).split("test")
    assert a != split_dataset(m, test_count=5, seed=2).split("test")


def test_split_degenerate_and_infeasible():
    assert len(split_dataset(_manifest(7), test_fraction=0.0).split("train")) == 7
    with pytest.raises(ConfigError):
        split_dataset(_manifest(7), test_count=8)


def test_manifest_validation():
    with pytest.raises(DataError):
        DatasetManifest([ManifestEntry("a", "b"), ManifestEntry("a", "c")], 1)
    with pytest.raises(DataError):
        DatasetManifest([ManifestEntry("a", "b", "val")], 1)


def test_manifest_read_errors(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("a\tb\ttrain\n")
    with pytest.raises(FormatError):
        DatasetManifest.read(path)
    path.write_text("# num_classes = 1\na\tb\ttrain\n")
    with pytest.raises(DataError):
        DatasetManifest.read(path)
    path.write_text("# num_classes = 1\na b train\n")
    with pytest.raises(FormatError):
        DatasetManifest.read(path)


def test_generate_contract_and_determinism(tmp_path):
    spec = SyntheticSpec(num_volumes=10, shape=(32, 32, 32), num_classes=3, seed=4)
    m1 = generate_synthetic_dataset(spec, tmp_path / "a")
    generate_synthetic_dataset(spec, tmp_path / "b")
    assert len(m1.entries) == 10
    for name in [e.image for e in m1.entries] + [e.label for e in m1.entries] + ["manifest.tsv"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    back = DatasetManifest.read(tmp_path / "a" / "manifest.tsv")
    assert back.num_classes == 3 and back.dimensionality == 3
    data = Dataset.from_manifest(back)
    for lbl in data.labels:
        assert set(np.unique(lbl)) == {0, 1, 2, 3}


def test_generate_nifti_with_split(tmp_path):
    spec = SyntheticSpec(num_volumes=4, shape=(24, 24, 24), num_classes=1, radius_range=(3, 4),
                         test_count=1, file_format="nii", seed=2)
    m = generate_synthetic_dataset(spec, tmp_path)
    assert m.entries[0].image.endswith(".nii")
    assert len(m.split("test")) == 1


def test_blobs_do_not_touch():
    for image, labels in synthesize(SyntheticSpec(num_volumes=5, seed=9)):
        for c in (1, 2, 3):
            mask = labels == c
            grown = mask.copy()
            for axis in range(3):
                grown |= np.roll(mask, 1, axis) | np.roll(mask, -1, axis)
            assert not (grown & (labels > 0) & (labels != c)).any()


def test_class_intensity_statistics():
    spec = SyntheticSpec(num_volumes=4, class_means=(1.0, 3.0, -2.0), class_stds=(0.5, 0.1, 0.3),
                         noise_std=0.4, background_mean=0.5, seed=11)
    pairs = synthesize(spec)
    images = np.concatenate([p[0].ravel() for p in pairs]).astype(np.float64)
    labels = np.concatenate([p[1].ravel() for p in pairs])
    for c, (mean, std) in enumerate(zip(spec.class_means, spec.class_stds), start=1):
        values = images[labels == c]
        sigma = np.hypot(std, spec.noise_std)
        assert abs(values.mean() - mean) < 3 * sigma / np.sqrt(values.size)
        assert values.std() == pytest.approx(sigma, rel=0.1)
    bg = images[labels == 0]
    assert abs(bg.mean() - 0.5) < 3 * 0.4 / np.sqrt(bg.size)


def test_generation_error_when_crowded():
    with pytest.raises(GenerationError):
        synthesize(SyntheticSpec(num_volumes=1, shape=(16, 16, 16), num_classes=8,
                                 radius_range=(3.0, 3.5), max_retries=5))


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(num_classes=2, class_means=(1.0,))
    with pytest.raises(ConfigError):
        SyntheticSpec(file_format="mha")


def test_preprocessing_pipeline():
    img = np.linspace(-400, 400, 4 * 4 * 4).reshape(4, 4, 4)
    from priornet.volume import LabelMap, Volume

    out, lbl = Preprocessing(("truncate", "zscore"), crop=(2, 2, 2)).apply(
        Volume(img), LabelMap(np.ones((4, 4, 4), int), 1))
    assert out.shape == (2, 2, 2) and lbl.data.shape == (2, 2, 2)
    assert abs(out.data.mean()) < 1e-6
    with pytest.raises(ConfigError):
        Preprocessing(("flip",))


def test_pair_sampling_reproducible(tiny_data):
    a = [sample_training_pair(tiny_data, np.random.default_rng(5)) for _ in range(3)]
    b = [sample_training_pair(tiny_data, np.random.default_rng(5)) for _ in range(3)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.target.data, y.target.data)
        np.testing.assert_array_equal(x.bundle.template.data, y.bundle.template.data)


def _template_index(data, pair):
    for i, img in enumerate(data.images):
        if np.array_equal(img, pair.bundle.template.data):
            return i
    raise AssertionError("template not found")


def test_template_frequency_uniform():
    data = small_dataset(num_volumes=5, test=0, k=1, shape=(12, 12, 12))
    rng = np.random.default_rng(0)
    counts = collections.Counter(_template_index(data, sample_training_pair(data, rng)) for _ in range(10_000))
    for i in range(5):
        assert counts[i] / 10_000 == pytest.approx(0.2, abs=0.02)


def test_template_never_from_test_split():
    data = small_dataset(num_volumes=6, test=3, k=1, shape=(12, 12, 12))
    rng = np.random.default_rng(1)
    for _ in range(200):
        assert data.splits[_template_index(data, sample_training_pair(data, rng))] == "train"


def test_single_training_volume_pairs_with_itself():
    data = small_dataset(num_volumes=3, test=2, k=1, shape=(12, 12, 12))
    pair = sample_training_pair(data, np.random.default_rng(0))
    np.testing.assert_array_equal(pair.target.data, pair.bundle.template.data)


def test_slice_mode_single_volume_uses_different_slices():
    data = small_dataset(num_volumes=2, test=1, k=1, shape=(16, 16, 16), dimensionality=2)
    keys = data.samples("train")
    assert len(keys) > 1 and all(k[0] == 0 for k in keys)
    assert data.sample_shape() == (16, 16)
    rng = np.random.default_rng(0)
    for _ in range(20):
        pair = sample_training_pair(data, rng)
        assert pair.target.data.shape == (16, 16)
        assert not np.array_equal(pair.target.data, pair.bundle.template.data)


def test_empty_train_split():
    data = small_dataset(num_volumes=2, test=2, k=1, shape=(12, 12, 12))
    with pytest.raises(DataError):
        sample_training_pair(data, np.random.default_rng(0))


def test_sampling_from_manifest(tmp_path):
    m = generate_synthetic_dataset(SyntheticSpec(num_volumes=3, shape=(16, 16, 16), num_classes=1,
                                                 radius_range=(2, 3), center_jitter=1), tmp_path)
    pair = sample_training_pair(m, np.random.default_rng(0))
    assert pair.bundle.foreground_channels.shape == (1, 16, 16, 16)


def test_steps_per_epoch():
    assert steps_per_epoch(82, 2) == 41
    assert steps_per_epoch(5, 2) == 3
    assert steps_per_epoch(0, 2) == 1
