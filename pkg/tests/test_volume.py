import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from priornet.errors import DegenerateInputError, InvalidLabelMapError, InvalidRangeError, ShapeError
from priornet.volume import (
    LabelMap,
    Volume,
    center_crop,
    crop_offsets,
    extract_foreground_regions,
    normalize_zscore,
    one_hot_encode,
    truncate_intensity,
)


def test_truncate_hounsfield_window():
    v = Volume(np.array([[-500.0, 0.0, 300.0]]))
    np.testing.assert_array_equal(truncate_intensity(v, -200, 250).data, [[-200.0, 0.0, 250.0]])


def test_truncate_identity_and_saturation():
    v = Volume(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(truncate_intensity(v, 0, 10).data, v.data)
    const = Volume(np.full((3, 3, 3), 1000.0))
    np.testing.assert_array_equal(truncate_intensity(const, -200, 250).data, 250.0)


@pytest.mark.parametrize("lo, hi", [(1, 1), (5, -5)])
def test_truncate_rejects_bad_range(lo, hi):
    with pytest.raises(InvalidRangeError):
        truncate_intensity(Volume(np.zeros((2, 2))), lo, hi)


@given(hnp.arrays(np.float64, (4, 5), elements=st.floats(-1e4, 1e4)))
def test_truncate_idempotent(data):
    once = truncate_intensity(Volume(data), -200, 250)
    np.testing.assert_array_equal(truncate_intensity(once, -200, 250).data, once.data)


def test_zscore_two_points():
    np.testing.assert_allclose(normalize_zscore(Volume(np.array([[0.0, 2.0]]))).data, [[-1.0, 1.0]])


def test_zscore_moments_by_direct_summation(rng):
    v = normalize_zscore(Volume(rng.normal(5.0, 3.0, size=(8, 8, 8))))
    values = v.data.ravel().tolist()
    n = len(values)
    mean = sum(values) / n
    var = sum((x - mean) ** 2 for x in values) / n
    assert abs(mean) < 1e-6
    assert abs(var ** 0.5 - 1.0) < 1e-6


def test_zscore_idempotent(rng):
    once = normalize_zscore(Volume(rng.uniform(-3, 9, size=(6, 7, 5))))
    np.testing.assert_allclose(normalize_zscore(once).data, once.data, atol=1e-6)


def test_zscore_rejects_constant_and_tiny():
    with pytest.raises(DegenerateInputError):
        normalize_zscore(Volume(np.full((4, 4), 3.0)))
    with pytest.raises(DegenerateInputError):
        normalize_zscore(Volume(np.array([[1.0]])))


def test_center_crop_candi_size():
    data = np.arange(200 * 200 * 150, dtype=np.float32).reshape(200, 200, 150)
    out = center_crop(Volume(data), (160, 160, 128))
    assert out.shape == (160, 160, 128)
    assert crop_offsets((200, 200, 150), (160, 160, 128)) == (20, 20, 11)
    np.testing.assert_array_equal(out.data, data[20:180, 20:180, 11:139])


def test_center_crop_identity(rng):
    v = Volume(rng.normal(size=(5, 6, 7)))
    np.testing.assert_array_equal(center_crop(v, v.shape).data, v.data)


def test_center_crop_single_voxel_is_center():
    shape = (7, 5, 9)
    data = np.arange(np.prod(shape), dtype=np.float64).reshape(shape)
    out = center_crop(Volume(data), (1, 1, 1))
    # brute force: the voxel minimising the worst per-axis distance to the geometric centre
    best = min(np.ndindex(shape), key=lambda idx: max(abs(i - (n - 1) / 2) for i, n in zip(idx, shape)))
    assert out.data.item() == data[best]


def test_center_crop_out_of_bounds():
    with pytest.raises(ShapeError):
        center_crop(Volume(np.zeros((4, 4, 4))), (5, 4, 4))


def test_extract_foreground_small_example():
    img = Volume(np.array([[1.0, 2.0], [3.0, 4.0]]))
    labels = LabelMap(np.array([[1, 0], [0, 2]]), 2)
    bundle = extract_foreground_regions(img, labels)
    np.testing.assert_array_equal(bundle.foreground_channels[0], [[1, 0], [0, 0]])
    np.testing.assert_array_equal(bundle.foreground_channels[1], [[0, 0], [0, 4]])
    assert bundle.stacked().shape == (3, 2, 2)


def test_extract_foreground_all_background(rng):
    bundle = extract_foreground_regions(Volume(rng.normal(size=(4, 4, 4))),
                                        LabelMap(np.zeros((4, 4, 4), int), 3))
    assert bundle.foreground_channels.shape == (3, 4, 4, 4)
    assert not bundle.foreground_channels.any()


def test_extract_foreground_reconstructs_image(rng):
    img = Volume(rng.normal(size=(8, 8, 8)))
    labels = LabelMap(rng.integers(0, 4, size=(8, 8, 8)), 3)
    bundle = extract_foreground_regions(img, labels)
    support = bundle.foreground_channels != 0
    assert not (support.sum(axis=0) > 1).any()
    background = np.where(labels.data == 0, img.data, 0.0)
    np.testing.assert_array_equal(bundle.foreground_channels.sum(axis=0) + background, img.data)
    for c in range(3):
        np.testing.assert_array_equal(bundle.foreground_channels[c][labels.data != c + 1], 0.0)
        np.testing.assert_array_equal(bundle.foreground_channels[c][labels.data == c + 1],
                                      img.data[labels.data == c + 1])


def test_extract_foreground_shape_mismatch():
    with pytest.raises(ShapeError):
        extract_foreground_regions(Volume(np.zeros((4, 4))), LabelMap(np.zeros((4, 5), int), 1))


def test_labelmap_validation():
    with pytest.raises(InvalidLabelMapError):
        LabelMap(np.array([[0, 3]]), 2)
    with pytest.raises(InvalidLabelMapError):
        LabelMap(np.array([[0, 1]]), 0)


def test_one_hot_examples():
    assert one_hot_encode(LabelMap(np.zeros((1, 1), int), 2))[:, 0, 0].tolist() == [1, 0, 0]
    oh = one_hot_encode(LabelMap(np.array([[1], [2]]), 2))
    assert oh[:, 0, 0].tolist() == [0, 1, 0]
    assert oh[:, 1, 0].tolist() == [0, 0, 1]


@settings(max_examples=30)
@given(hnp.arrays(np.int64, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
                  elements=st.integers(0, 4)))
def test_one_hot_round_trip(labels):
    oh = one_hot_encode(LabelMap(labels, 4))
    np.testing.assert_array_equal(oh.sum(axis=0), 1.0)
    np.testing.assert_array_equal(oh.argmax(axis=0), labels)


def test_volume_rejects_non_finite():
    with pytest.raises(ValueError):
        Volume(np.array([[np.nan, 1.0]]))
