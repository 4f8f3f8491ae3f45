"""Dataset ingestion, unit-cube scaling, and deterministic splitting.

Input files are header-bearing delimited text.  Features are min-max scaled
per column using training-split statistics only; values outside the training
range clamp into [0, 1] because the model is undefined outside the hypercube.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ScalerParams

__all__ = [
    "RawTable",
    "Dataset",
    "Manifest",
    "load_csv",
    "split",
    "fit_scaler",
    "apply_scaler",
    "load_manifest",
]

TASKS = ("regression", "classification")


@dataclass
class RawTable:
    """Parsed delimited file: features, targets, and column names."""

    features: np.ndarray
    targets: np.ndarray
    feature_names: list[str]
    target_name: str
    task: str

    @property
    def num_rows(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]


@dataclass
class Dataset:
    """A table with disjoint train/val/test index sets and a train-fitted scaler."""

    features: np.ndarray
    targets: np.ndarray
    task: str
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    scaler: ScalerParams | None = None
    feature_names: list[str] = field(default_factory=list)

    def indices(self, which: str) -> np.ndarray:
        try:
            return {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[which]
        except KeyError:
            raise ValueError(f"unknown split {which!r}") from None

    def scaled(self, which: str) -> np.ndarray:
        """Features of a split mapped into [0, 1]^N (clamped)."""
        return self.scaler.transform(self.features[self.indices(which)])

    def split_targets(self, which: str) -> np.ndarray:
        return self.targets[self.indices(which)]

    def train_means_scaled(self) -> np.ndarray:
        """Per-feature empirical means of the scaled training split."""
        return self.scaled("train").mean(axis=0)


def _parse_cell(text: str, row: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValueError(
            f"row {row}, column {column!r}: non-numeric cell {text!r}"
        ) from None


def load_csv(path: str | Path, target_column: str, task: str = "regression") -> RawTable:
    """Parse a header-bearing delimited file into features and targets.

    The delimiter is sniffed from the header (comma, semicolon, tab, or
    whitespace).  Every non-target column becomes a feature, in header order.

    Raises:
        ValueError: ragged rows or non-numeric cells (with row/column
            coordinates), a missing target column, or an unknown task.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    path = Path(path)
    with open(path, newline="") as handle:
        sample = handle.readline()
        handle.seek(0)
        if "," in sample:
            rows = list(csv.reader(handle))
        elif ";" in sample:
            rows = list(csv.reader(handle, delimiter=";"))
        elif "\t" in sample:
            rows = list(csv.reader(handle, delimiter="\t"))
        else:
            rows = [line.split() for line in handle if line.strip()]
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [cell.strip() for cell in rows[0]]
    if target_column not in header:
        raise ValueError(f"{path}: target column {target_column!r} not in header {header}")
    target_pos = header.index(target_column)
    width = len(header)
    features = []
    targets = []
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != width:
            raise ValueError(f"{path}: row {i} has {len(row)} cells, expected {width}")
        values = [
            _parse_cell(cell.strip(), i, header[j]) for j, cell in enumerate(row)
        ]
        targets.append(values.pop(target_pos))
        features.append(values)
    feature_names = [h for j, h in enumerate(header) if j != target_pos]
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if task == "classification":
        targets = _coerce_binary(targets)
    return RawTable(
        features=features,
        targets=targets,
        feature_names=feature_names,
        target_name=target_column,
        task=task,
    )


def _coerce_binary(targets: np.ndarray) -> np.ndarray:
    classes = np.unique(targets)
    if len(classes) != 2:
        raise ValueError(f"classification targets must have 2 classes, found {len(classes)}")
    return (targets == classes[1]).astype(float)


def fit_scaler(features: np.ndarray, eps: float = 1e-6) -> ScalerParams:
    """Per-feature min-max parameters; constant features are widened by eps
    (so they map to 0.5) with a warning."""
    features = np.asarray(features, dtype=float)
    mins = features.min(axis=0)
    maxs = features.max(axis=0)
    constant = maxs <= mins
    if constant.any():
        warnings.warn(
            f"constant feature(s) at columns {np.flatnonzero(constant).tolist()}; "
            f"widening range by {eps}",
            stacklevel=2,
        )
        mins = np.where(constant, mins - eps, mins)
        maxs = np.where(constant, maxs + eps, maxs)
    return ScalerParams(mins=mins, maxs=maxs, eps=eps)


def apply_scaler(scaler: ScalerParams, features: np.ndarray) -> np.ndarray:
    return scaler.transform(features)


def split(table: RawTable, counts: tuple[int, int, int], seed: int) -> Dataset:
    """Seeded shuffle then partition into train/val/test of exact sizes.

    The scaler is fitted on the training split only.

    Raises:
        ValueError: if the counts sum past the number of rows.
    """
    n_train, n_val, n_test = counts
    total = n_train + n_val + n_test
    if total > table.num_rows:
        raise ValueError(
            f"split counts {counts} sum to {total} > {table.num_rows} rows"
        )
    if n_train < 1:
        raise ValueError("training split must be nonempty")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(table.num_rows)
    train_idx = np.sort(perm[:n_train])
    val_idx = np.sort(perm[n_train : n_train + n_val])
    test_idx = np.sort(perm[n_train + n_val : total])
    scaler = fit_scaler(table.features[train_idx])
    return Dataset(
        features=table.features,
        targets=table.targets,
        task=table.task,
        train_idx=train_idx,
        val_idx=val_idx,
        test_idx=test_idx,
        scaler=scaler,
        feature_names=table.feature_names,
    )


@dataclass
class Manifest:
    """One experiment's pinned configuration: file, counts, seeds."""

    csv_path: str
    target_column: str
    task: str
    counts: tuple[int, int, int]
    seeds: list[int]
    name: str = ""

    def load(self, base_dir: str | Path = ".") -> RawTable:
        path = Path(self.csv_path)
        if not path.is_absolute():
            path = Path(base_dir) / path
        return load_csv(path, self.target_column, self.task)


def load_manifest(path: str | Path) -> Manifest:
    """Read a JSON manifest file."""
    path = Path(path)
    with open(path) as handle:
        raw = json.load(handle)
    try:
        return Manifest(
            csv_path=raw["csv_path"],
            target_column=raw["target_column"],
            task=raw["task"],
            counts=tuple(raw["counts"]),
            seeds=list(raw["seeds"]),
            name=raw.get("name", path.stem),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: manifest missing field {exc}") from None
