import numpy as np
import pytest

from stprune.data import (DataError, Dataset, gen_gaussian_clusters,
                          iter_batches, load_csv, save_csv)


def test_shapes_and_split():
    train, test = gen_gaussian_clusters(10, 2000, (1, 8, 8), spread=1.0, seed=0)
    assert train.features.shape == (1600, 1, 8, 8)
    assert test.features.shape == (400, 1, 8, 8)
    assert train.labels.shape == (1600,)
    assert set(np.unique(train.labels)) == set(range(10))


def test_zero_spread_is_linearly_separable():
    train, test = gen_gaussian_clusters(4, 400, (1, 4, 4), spread=0.0, seed=1)
    xt = train.features.reshape(len(train), -1)
    # nearest-centroid is a linear classifier; zero spread makes it exact
    cents = np.stack([xt[train.labels == k].mean(axis=0) for k in range(4)])
    xe = test.features.reshape(len(test), -1)
    pred = np.argmin(((xe[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == test.labels) == 1.0


def test_same_seed_same_bytes():
    a_tr, a_te = gen_gaussian_clusters(3, 300, (1, 4, 4), 0.5, seed=7)
    b_tr, b_te = gen_gaussian_clusters(3, 300, (1, 4, 4), 0.5, seed=7)
    assert np.array_equal(a_tr.features, b_tr.features)
    assert np.array_equal(a_te.labels, b_te.labels)


def test_different_seed_differs():
    a_tr, _ = gen_gaussian_clusters(3, 300, (1, 4, 4), 0.5, seed=7)
    b_tr, _ = gen_gaussian_clusters(3, 300, (1, 4, 4), 0.5, seed=8)
    assert not np.array_equal(a_tr.features, b_tr.features)


def test_label_out_of_range_rejected():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 3)), np.array([0, 5]), num_classes=3)


def test_csv_round_trip(tmp_path):
    train, _ = gen_gaussian_clusters(3, 60, (1, 2, 2), 0.5, seed=2)
    p = tmp_path / "d.csv"
    save_csv(train, str(p))
    back = load_csv(str(p), (1, 2, 2), num_classes=3)
    assert np.array_equal(back.features, train.features)
    assert np.array_equal(back.labels, train.labels)


def test_csv_three_rows(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("0,1.0,2.0\n1,3.0,4.0\n0,5.0,6.0\n")
    ds = load_csv(str(p), (2,))
    assert len(ds) == 3


def test_csv_bad_field_count_names_line(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("0,1.0,2.0\n1,3.0\n")
    with pytest.raises(DataError, match=":2:"):
        load_csv(str(p), (2,))


def test_iter_batches_covers_all_rows_once():
    train, _ = gen_gaussian_clusters(2, 100, (1, 2, 2), 0.5, seed=3)
    seen = 0
    for xb, yb in iter_batches(train, 16, np.random.default_rng(0)):
        assert len(xb) == len(yb) <= 16
        seen += len(yb)
    assert seen == len(train)


def test_iter_batches_shuffles():
    train, _ = gen_gaussian_clusters(2, 100, (1, 2, 2), 0.5, seed=3)
    order_a = np.concatenate([y for _, y in
                              iter_batches(train, 16, np.random.default_rng(1))])
    order_b = np.concatenate([y for _, y in
                              iter_batches(train, 16, np.random.default_rng(2))])
    assert not np.array_equal(order_a, order_b)
