"""
UCI wine quality data: ingestion, z-score normalization and seeded splits.
"""

import logging
import pathlib
from dataclasses import dataclass

import numpy as np
import pandas as pd

from ..errors import ConfigError, DatasetError

logger = logging.getLogger(__name__)

FEATURE_COUNT = 11
TARGET_COLUMN = "quality"
# Columns whose std is below this fraction of their magnitude count as constant.
CONSTANT_TOL = 1e-9
VARIANTS = ("red", "white")


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    # Per-column statistics of the raw data, features then target.
    means: np.ndarray
    stds: np.ndarray
    path: str
    variant: str

    @property
    def rows(self) -> int:
        return self.targets.size

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, indices: np.ndarray) -> "Dataset":
        return Dataset(
            self.features[indices], self.targets[indices], self.means, self.stds, self.path, self.variant
        )


def load_wine(path: str | pathlib.Path, variant: str = "red") -> Dataset:
    """
    Read a semicolon-delimited winequality CSV and z-score every column.

    Args:
        path: CSV with a header row, 11 feature columns and `quality`.
        variant: "red" or "white", recorded with the data.

    Returns:
        The normalized dataset with its normalization record.

    Raises:
        DatasetError: Missing file, wrong column count or target name, a
            non-numeric cell (with its line number) or a nearly constant
            column.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"wine variant must be one of {VARIANTS}, got {variant!r}")
    path = pathlib.Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset file {path} does not exist", path=str(path))
    try:
        frame = pd.read_csv(path, sep=";")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DatasetError(f"cannot parse {path}: {e}", path=str(path)) from e

    if frame.shape[1] != FEATURE_COUNT + 1:
        raise DatasetError(
            f"{path} has {frame.shape[1]} columns, expected {FEATURE_COUNT} features and {TARGET_COLUMN}",
            path=str(path),
        )
    target = str(frame.columns[-1]).strip()
    if target != TARGET_COLUMN:
        raise DatasetError(f"{path}: last column is {target!r}, expected {TARGET_COLUMN!r}", path=str(path))
    numeric =frame.apply(pd.to_numeric, errors="coerce")
    # Short rows come back as NaN as well.
    bad = numeric.isna()
    if bad.to_numpy().any():
        row = int(np.flatnonzero(bad.to_numpy().any(axis=1))[0])
        column = frame.columns[bad.iloc[row].to_numpy()][0]
        # Line 1 is the header.
        line = row + 2
        raise DatasetError(
            f"{path} line {line}: column {column!r} is not numeric", path=str(path), line=line
        )

    values = numeric.to_numpy(dtype=float)
    means = values.mean(axis=0)
    stds = values.std(axis=0)
    constant = np.flatnonzero(stds <= CONSTANT_TOL * np.maximum(1.0, np.abs(means)))
    if constant.size:
        raise DatasetError(
            f"{path}: column {frame.columns[constant[0]]!r} is constant and cannot be normalized",
            path=str(path),
        )
    normalized = (values - means) / stds
    logger.info(f"loaded {variant} wine data from {path}: {normalized.shape[0]} rows, {FEATURE_COUNT} features")
    return Dataset(normalized[:, :FEATURE_COUNT], normalized[:, FEATURE_COUNT], means, stds, str(path), variant)


def split(dataset: Dataset, m: int, n: int, seed: int) -> tuple[Dataset, Dataset]:
    """
    Draw disjoint training (n rows) and validation (m rows) sets uniformly
    without replacement.

    Returns:
        (train, val)
    """
    if m < 1 or n < 1:
        raise ConfigError(f"split sizes must be positive, got m={m}, n={n}")
    if m + n > dataset.rows:
        raise DatasetError(
            f"{dataset.path} has {dataset.rows} rows, cannot draw {n} training and {m} validation rows",
            path=dataset.path,
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(dataset.rows, size=m + n, replace=False)
    return dataset.take(chosen[:n]), dataset.take(chosen[n:])
