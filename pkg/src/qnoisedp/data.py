"""Iris loading and the two-feature setosa/versicolour binary task."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

COLUMNS = ("sepal_length", "sepal_width", "petal_length", "petal_width", "species")
SPECIES = {
    "iris-setosa": "setosa",
    "setosa": "setosa",
    "iris-versicolor": "versicolor",
    "iris-versicolour": "versicolor",
    "versicolor": "versicolor",
    "versicolour": "versicolor",
    "iris-virginica": "virginica",
    "virginica": "virginica",
}
LABELS = {"setosa": -1, "versicolor": 1}
TRAIN_FRACTION = 0.8


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class IrisRecord:
    sepal_length: float
    sepal_width: float
    petal_length: float
    petal_width: float
    species: str


def bundled_iris_path() -> Path:
    return Path(str(resources.files("qnoisedp") / "data" / "iris.csv"))


def load_iris(path: str | Path | None = None) -> list[IrisRecord]:
    """Parse an Iris CSV with a header row; malformed rows raise with their line number."""
    path = Path(path) if path is not None else bundled_iris_path()
    if not path.is_file():
        raise DataError(f"no such data file: {path}")
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip().lower() for h in header]
        if tuple(header) != COLUMNS:
            raise DataError(f"{path}:1: expected columns {','.join(COLUMNS)}, got {','.join(header)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(COLUMNS):
                raise DataError(f"{path}:{line}: expected {len(COLUMNS)} fields, got {len(row)}")
            try:
                values = [float(v) for v in row[:4]]
            except ValueError:
                raise DataError(f"{path}:{line}: non-numeric feature in {row[:4]}") from None
            if not np.all(np.isfinite(values)):
                raise DataError(f"{path}:{line}: non-finite feature")
            species = SPECIES.get(row[4].strip().lower())
            if species is None:
                raise DataError(f"{path}:{line}: unknown species {row[4]!r}")
            records.append(IrisRecord(*values, species))
    if not records:
        raise DataError(f"{path}: no records")
    return records


@dataclass(frozen=True, eq=False)
class Dataset:
    """Two-feature binary dataset with labels in {-1, +1} and an optional train/test split."""

    X: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.y)

    @property
    def X_train(self) -> np.ndarray:
        return self.X[self.train_idx]

    @property
    def y_train(self) -> np.ndarray:
        return self.y[self.train_idx]

    @property
    def X_test(self) -> np.ndarray:
        return self.X[self.test_idx]

    @property
    def y_test(self) -> np.ndarray:
        return self.y[self.test_idx]


def select_binary(records) -> Dataset:
    """Keep setosa (-1) and versicolour (+1), projected on petal length and width."""
    X, y = [], []
    for r in records:
        label = LABELS.get(r.species)
        if label is None:
            continue
        X.append((r.petal_length, r.petal_width))
        y.append(label)
    y = np.array(y, dtype=int)
    for label, name in ((-1, "setosa"), (1, "versicolor")):
        if np.sum(y == label) < 2:
            raise DataError(f"need at least 2 {name} examples, found {int(np.sum(y == label))}")
    return Dataset(np.array(X, dtype=float), y)


def minmax_scale(X: np.ndarray) -> np.ndarray:
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = hi - lo
    if np.any(span == 0):
        raise DataError(f"constant feature(s) at column(s) {np.flatnonzero(span == 0).tolist()}")
    return (X - lo) / span


def scale_and_split(d: Dataset, seed: int = 0, train_fraction: float = TRAIN_FRACTION) -> Dataset:
    """Min-max scale each feature over the whole set, then a seeded shuffle split."""
    if len(d) == 0:
        raise DataError("empty dataset")
    X = minmax_scale(d.X)
    perm = np.random.default_rng(seed).permutation(len(d))
    n_train = int(round(train_fraction * len(d)))
    return Dataset(X, d.y.copy(), np.sort(perm[:n_train]), np.sort(perm[n_train:]), seed)


def iris_binary(path=None, seed: int = 0) -> Dataset:
    return scale_and_split(select_binary(load_iris(path)), seed)
