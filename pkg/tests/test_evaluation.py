import json

import numpy as np
import pytest

from conftest import small_dataset
from priornet.errors import CompatibilityError, DataError, ShapeError
from priornet.evaluation import (
    REFERENCE_ABLATION,
    choose_templates,
    evaluate_dataset,
    format_ablation_table,
    predict_segmentation,
    template_robustness_study,
)
from priornet.network import NetworkConfig
from priornet.objectives import hard_dice_score
from priornet.training import TrainConfig, train_loop
from priornet.volume import Volume

NET = NetworkConfig(num_classes=2, base_channels=4, num_levels=3)


@pytest.fixture(scope="module")
def data():
    return small_dataset()


@pytest.fixture(scope="module")
def ckpt(data):
    return train_loop(data, TrainConfig(epochs=2, batch_size=2), NET)


def test_prediction_contract(data, ckpt):
    pred = predict_segmentation(Volume(data.images[4]), data.bundle((0, None)), ckpt)
    assert pred.data.shape == data.images[4].shape
    assert pred.num_classes == 2
    assert pred.data.max() <= 2


def test_prediction_requires_compatible_bundle(data, ckpt):
    with pytest.raises(CompatibilityError):
        predict_segmentation(Volume(data.images[4]), None, ckpt)
    other = small_dataset(k=3, shape=(24, 24, 24))
    with pytest.raises(CompatibilityError):
        predict_segmentation(Volume(data.images[4]), other.bundle((0, None)), ckpt)
    with pytest.raises(ShapeError):
        big = small_dataset(shape=(24, 24, 24))
        predict_segmentation(Volume(data.images[4]), big.bundle((0, None)), ckpt)


def test_prediction_rejects_bad_dimensionality(data, ckpt):
    with pytest.raises(CompatibilityError):
        predict_segmentation(Volume(data.images[4][..., 0]), data.bundle((0, None)), ckpt)


def test_slicewise_prediction_for_2d_network():
    data = small_dataset(dimensionality=2)
    net = NetworkConfig(dimensionality=2, num_classes=2, base_channels=4, num_levels=3)
    ckpt = train_loop(data, TrainConfig(epochs=1, batch_size=2), net)
    key = data.samples("train")[0]
    pred = predict_segmentation(Volume(data.images[4]), data.bundle(key), ckpt)
    assert pred.data.shape == data.images[4].shape


def test_evaluate_aggregation_order(data, ckpt):
    result = evaluate_dataset(data, ckpt, template_seed=0)
    assert result.names == [data.names[i] for i in data.volumes("test")]
    rows = np.array(result.per_volume)
    np.testing.assert_allclose(result.report.per_class_dice, rows.mean(axis=0))
    assert result.report.mean_foreground_dice == pytest.approx(rows.mean())
    # recompute one row independently
    i = data.volumes("test")[0]
    pred = predict_segmentation(Volume(data.images[i]), data.bundle(result.template), ckpt)
    assert rows[0].tolist() == hard_dice_score(pred.data, data.labels[i], 2).per_class_dice
    payload = json.loads(result.to_json())
    assert payload["mean_foreground_dice"] == result.report.mean_foreground_dice
    assert "mean" in result.to_table()


def test_evaluate_rejects_test_template(data, ckpt):
    with pytest.raises(DataError):
        evaluate_dataset(data, ckpt, template=(data.volumes("test")[0], None))


def test_choose_templates(data):
    picks = choose_templates(data, 3, seed=1)
    assert len(set(picks)) == 3
    assert all(data.splits[k[0]] == "train" for k in picks)
    assert picks == choose_templates(data, 3, seed=1)
    with pytest.raises(DataError):
        choose_templates(data, 5, seed=1)


def test_robustness_study(data, ckpt):
    result = template_robustness_study(data, ckpt, 3, seed=0)
    assert len(result.means) == 3
    assert result.spread == pytest.approx(max(result.means) - min(result.means))
    assert "spread" in result.to_table()
    assert json.loads(result.to_json())["spread"] == result.spread


def test_ablation_table_reference_numbers():
    table = format_ablation_table(REFERENCE_ABLATION)
    lines = table.splitlines()
    assert lines[1].split()[0] == "Method"
    for text in ("Baseline", "Single encoder", "Dual encoder", "Prior-Net"):
        assert text in lines[1]
    row = lines[4]
    assert row.split()[2:] == ["83.10", "85.48", "86.58", "89.07"]
    # columns are ordered baseline, single, dual, Prior-Net
    assert row.index("83.10") < row.index("85.48") < row.index("86.58") < row.index("89.07")
