"""Deterministic synthetic classification data and CSV ingestion."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class DataError(Exception):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.features.shape[0] != n:
            raise DataError("features and labels disagree on sample count")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label out of range")

    def __len__(self):
        return len(self.labels)


def gen_gaussian_clusters(num_classes, total, shape, spread, seed):
    """Seeded Gaussian class clusters with a deterministic 80/20 split.

    shape may be a feature dimension (int) or an image shape tuple like
    (1, 8, 8). Returns (train, test).
    """
    if num_classes < 2:
        raise DataError("need at least 2 classes")
    if total < 2 * num_classes:
        raise DataError("need at least 2 samples per class")
    if isinstance(shape, int):
        fshape = (shape,)
    else:
        fshape = tuple(int(d) for d in shape)
    if any(d < 1 for d in fshape):
        raise DataError(f"invalid feature shape {fshape}")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 1.0, size=(num_classes,) + fshape)
    labels = np.arange(total) % num_classes
    noise = rng.normal(0.0, 1.0, size=(total,) + fshape)
    features = means[labels] + spread * noise
    order = rng.permutation(total)
    features, labels = features[order], labels[order]
    cut = int(total * 0.8)
    train = Dataset(features[:cut], labels[:cut], num_classes, "train")
    test = Dataset(features[cut:], labels[cut:], num_classes, "test")
    return train, test


def load_csv(path, shape, num_classes=None):
    """Rows are: label, then row-major feature values matching shape."""
    fshape = (shape,) if isinstance(shape, int) else tuple(shape)
    want = int(np.prod(fshape))
    feats, labels = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != want + 1:
                raise DataError(
                    f"{path}:{lineno}: expected {want + 1} fields, got {len(row)}")
            try:
                labels.append(int(row[0]))
                feats.append([float(v) for v in row[1:]])
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}")
    if not labels:
        raise DataError(f"{path}: empty dataset")
    k = num_classes if num_classes is not None else max(labels) + 1
    try:
        return Dataset(np.asarray(feats).reshape((-1,) + fshape),
                       np.asarray(labels), k)
    except DataError as e:
        raise DataError(f"{path}: {e}")


def save_csv(dataset: Dataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([int(y)] + [repr(float(v)) for v in x.ravel()])


def iter_batches(dataset: Dataset, batch_size, rng):
    """One seed-shuffled epoch of fixed-size batches; last partial kept."""
    order = rng.permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.features[idx], dataset.labels[idx]
