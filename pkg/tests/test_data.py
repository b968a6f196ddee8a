import struct

import numpy as np
import pytest

from conftest import requires_mnist
from trgl.data import (
    IDX_IMAGES,
    IDX_LABELS,
    Dataset,
    IdxHeader,
    gen_gaussian_mixture,
    gen_two_moons,
    load_mnist,
    parse_idx,
    prepare_splits,
    save_points,
    serialize_idx,
    split_validation,
    subset,
)
from trgl.engine import TauSchedule, TrainPlan, train
from trgl.errors import DataError, FormatError
from trgl.netblocks import PartitionSpec, build_partition
from trgl.ot import fit_linear, load_cloud

FIXTURE = struct.pack(">IIII", IDX_IMAGES, 1, 2, 2) + bytes([0, 128, 255, 64])


def test_noiseless_moons_on_arcs():
    ds = gen_two_moons(200, 0.0, 3)
    upper, lower = ds.X[ds.y == 0], ds.X[ds.y == 1]
    assert np.allclose(np.hypot(*upper.T), 1.0, atol=1e-12) and np.all(upper[:, 1] >= 0)
    assert np.allclose(np.hypot(lower[:, 0] - 1.0, lower[:, 1] - 0.5), 1.0, atol=1e-12)
    assert np.all(lower[:, 1] <= 0.5)


def test_moons_deterministic_and_balanced():
    a, b = gen_two_moons(101, 0.2, 5), gen_two_moons(101, 0.2, 5)
    assert a.X.tobytes() == b.X.tobytes() and np.array_equal(a.y, b.y)
    assert sorted(np.bincount(a.y).tolist()) == [50, 51]
    assert not np.array_equal(a.X, gen_two_moons(101, 0.2, 6).X)


@pytest.mark.parametrize("n", [0, 1, -3])
def test_moons_rejects_tiny_n(n):
    with pytest.raises(DataError):
        gen_two_moons(n)


def test_gaussian_mixture():
    ds = gen_gaussian_mixture(300, [[0, 0], [5, 5], [-5, 5]], 0.1, 0)
    assert ds.n_classes == 3 and np.bincount(ds.y).tolist() == [100, 100, 100]
    for c, center in enumerate([[0, 0], [5, 5], [-5, 5]]):
        assert np.allclose(ds.X[ds.y == c].mean(axis=0), center, atol=0.05)
    with pytest.raises(DataError):
        gen_gaussian_mixture(2, [[0, 0], [1, 1], [2, 2]])


def test_moons_need_a_nonlinear_model():
    train_set, test_set = gen_two_moons(1000, 0.1, 0), gen_two_moons(1000, 0.1, 1)
    clf, _ = fit_linear(train_set.X, train_set.y, 2, 5000)
    linear_acc = np.mean(np.argmax(test_set.X @ clf.W + clf.b, axis=1) == test_set.y)
    data = prepare_splits(train_set, test_set, 0.1, None, 0)
    part = build_partition(PartitionSpec(1, 4, 32, 2, 2, 0.5, 0))
    net_acc = train(part, TrainPlan("sequential", 60, batch_size=32, lr=0.05, tau=TauSchedule("off")),
                    data).final("test_acc")[0]
    assert linear_acc < 0.95 < 0.97 < net_acc


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), [0, 1])
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), [0, 1], ["train", "dev"])
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), [0, 2], None, 2)


def test_idx_fixture():
    header, images = parse_idx(FIXTURE)
    assert header == IdxHeader(IDX_IMAGES, (1, 2, 2))
    assert np.array_equal(images[0], np.array([[0.0, 128 / 255], [1.0, 64 / 255]]))
    assert serialize_idx(header, images) == FIXTURE


def test_idx_labels():
    header, labels = parse_idx(struct.pack(">II", IDX_LABELS, 3) + bytes([5, 0, 9]))
    assert header.dims == (3,) and labels.tolist() == [5, 0, 9]


def test_idx_bad_magic_is_named():
    with pytest.raises(FormatError, match="0x00000802"):
        parse_idx(struct.pack(">IIII", 0x00000802, 1, 2, 2) + bytes(4))


def test_idx_truncated_payload_reports_counts():
    with pytest.raises(FormatError, match="expected 4 bytes, got 3"):
        parse_idx(FIXTURE[:-1])
    with pytest.raises(FormatError):
        parse_idx(FIXTURE[:6])


@requires_mnist
@pytest.mark.mnist
def test_real_mnist():
    train_set, test_set = load_mnist()
    assert train_set.X.shape == (60000, 784) and len(test_set) == 10000
    assert train_set.y[0] == 5
    assert 0.0 <= train_set.X.min() and train_set.X.max() <= 1.0


def labelled(counts, seed=0):
    y = np.repeat(np.arange(len(counts)), counts)
    y = np.random.default_rng(seed).permutation(y)
    return Dataset(np.arange(len(y), dtype=float)[:, None], y, None, len(counts))


def test_subset_full_size_is_identity():
    ds = labelled([30, 20, 10])
    out = subset(ds, 60)
    assert np.array_equal(out.X, ds.X) and np.array_equal(out.y, ds.y)


def test_subset_proportional_and_ordered():
    ds = labelled([5421, 6742, 5958, 6131, 5842, 5918, 5923, 6265, 5851, 5949])
    out = subset(ds, 600, seed=1)
    exact = np.bincount(ds.y) * 600 / len(ds)
    assert len(out) == 600 and np.all(np.abs(np.bincount(out.y) - exact) < 1)
    assert np.all(np.diff(out.X[:, 0]) > 0)


def test_subset_balanced():
    ds = labelled([5421, 6742, 5958, 6131, 5842, 5918, 5923, 6265, 5851, 5949])
    assert np.bincount(subset(ds, 600, balanced=True).y).tolist() == [60] * 10
    assert set(np.bincount(subset(ds, 605, balanced=True).y).tolist()) == {60, 61}


def test_subset_deterministic():
    ds = labelled([100, 80])
    assert np.array_equal(subset(ds, 50, seed=3).X, subset(ds, 50, seed=3).X)
    assert not np.array_equal(subset(ds, 50, seed=3).X, subset(ds, 50, seed=4).X)


def test_subset_errors():
    ds = labelled([10, 10, 10])
    with pytest.raises(DataError):
        subset(ds, 2)
    with pytest.raises(DataError):
        subset(ds, 31)
    with pytest.raises(DataError):
        subset(labelled([2, 40]), 20, balanced=True)


def test_validation_split():
    ds = gen_two_moons(200, 0.1, 0)
    tagged = split_validation(ds, 0.1, 0)
    assert (tagged.split == "val").sum() == 20
    assert np.array_equal(tagged.split, split_validation(ds, 0.1, 0).split)


def test_prepare_splits_carves_validation_before_subsetting():
    data = prepare_splits(gen_two_moons(500, 0.2, 0), gen_two_moons(100, 0.2, 1), 0.1, 120, 0)
    counts = {tag: int((data.split == tag).sum()) for tag in ("train", "val", "test")}
    assert counts == {"train": 120, "val": 50, "test": 100}


def test_points_export_reads_back_as_cloud(tmp_path):
    data = prepare_splits(gen_two_moons(60, 0.2, 0), gen_two_moons(20, 0.2, 1), 0.1)
    path = tmp_path / "train.csv"
    save_points(data, path, "train")
    back = load_cloud(path)
    X, y = data.xy("train")
    assert np.array_equal(back.points, X) and np.array_equal(back.labels, y)
