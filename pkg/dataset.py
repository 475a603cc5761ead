"""
Dataset Module (dataset.py)

Desk-scale categorical CTR data: every sample holds one category index per
feature field plus a binary click label. Synthetic datasets draw field values
from a Zipf law (exponent 0 is uniform) and labels from a logistic ground truth
over the informative fields only, so the "true" importance of every field is
known. CSV files carry a JSON meta sidecar with the field cardinalities.
"""

import json
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import ConfigurationError, DataIOError, ParseError, ValidationError

# Configure logging
logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(module)s - %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(os.environ.get("LOG_LEVEL", "INFO").upper())
    logger.propagate = False

LABEL_COLUMN = "label"


def field_column(i: int) -> str:
    return f"field_{i}"


@dataclass(frozen=True)
class Sample:
    field_values: List[int]
    label: int


@dataclass(frozen=True)
class DatasetMeta:
    n_fields: int
    cardinalities: Tuple[int, ...]
    informative_fields: Tuple[int, ...] = ()
    zipf_exponent: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))
        object.__setattr__(self, "informative_fields", tuple(sorted({int(i) for i in self.informative_fields})))

    @classmethod
    def uniform(cls, n_fields: int, cardinality: int, n_informative: int,
                zipf_exponent: float = 1.0, seed: int = 0) -> "DatasetMeta":
        """Same cardinality everywhere; the first `n_informative` fields drive the label."""
        return cls(n_fields, (cardinality,) * n_fields, tuple(range(n_informative)), zipf_exponent, seed)

    @property
    def noise_fields(self) -> Tuple[int, ...]:
        return tuple(i for i in range(self.n_fields) if i not in self.informative_fields)

    def validate(self) -> "DatasetMeta":
        if self.n_fields < 1:
            raise ConfigurationError(f"n_fields must be >= 1, got {self.n_fields}")
        if len(self.cardinalities) != self.n_fields:
            raise ConfigurationError(
                f"{len(self.cardinalities)} cardinalities given for {self.n_fields} fields")
        if any(c < 2 for c in self.cardinalities):
            raise ConfigurationError("every cardinality must be >= 2")
        if any(not 0 <= i < self.n_fields for i in self.informative_fields):
            raise ConfigurationError("informative_fields must be field indices in [0, n_fields)")
        if not np.isfinite(self.zipf_exponent) or self.zipf_exponent < 0:
            raise ConfigurationError(f"zipf_exponent must be >= 0, got {self.zipf_exponent}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_fields": self.n_fields,
            "cardinalities": list(self.cardinalities),
            "informative_fields": list(self.informative_fields),
            "zipf_exponent": self.zipf_exponent,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetMeta":
        try:
            meta = cls(int(data["n_fields"]), tuple(data["cardinalities"]),
                       tuple(data.get("informative_fields", ())),
                       float(data.get("zipf_exponent", 0.0)), int(data.get("seed", 0)))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"Invalid dataset meta: {e}") from e
        return meta.validate()

    def save(self, path: str) -> None:
        try:
            with open(path, "w") as f:
                json.dump(self.to_dict(), f, indent=4)
        except OSError as e:
            raise DataIOError(f"Could not write meta file '{path}': {e}") from e

    @classmethod
    def load(cls, path: str) -> "DatasetMeta":
        try:
            with open(path, "r") as f:
                return cls.from_dict(json.load(f))
        except OSError as e:
            raise DataIOError(f"Could not read meta file '{path}': {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Meta file '{path}' is not valid JSON: {e}") from e


@dataclass
class EmpiricalDistribution:
    """p(v) per field: one probability vector over the field's categories."""
    probabilities: List[np.ndarray]

    def __getitem__(self, field_id: int) -> np.ndarray:
        return self.probabilities[field_id]


@dataclass
class Batch:
    indices: np.ndarray
    field_values: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


class Dataset:
    """Immutable samples: an (n_samples, n_fields) index matrix and a label vector."""

    def __init__(self, field_values: np.ndarray, labels: np.ndarray, meta: DatasetMeta):
        field_values = np.array(field_values, dtype=np.int64).reshape(-1, meta.n_fields)
        labels = np.array(labels, dtype=np.int8).reshape(-1)
        if len(labels) != len(field_values):
            raise ValidationError(f"{len(field_values)} samples but {len(labels)} labels")
        if len(labels) and not np.isin(labels, (0, 1)).all():
            raise ValidationError("labels must be 0 or 1")
        for i, card in enumerate(meta.cardinalities):
            column = field_values[:, i]
            if len(column) and (column.min() < 0 or column.max() >= card):
                raise ValidationError(f"field {i} has an index outside [0, {card})")
        field_values.setflags(write=False)
        labels.setflags(write=False)
        self.field_values = field_values
        self.labels = labels
        self.meta = meta

    def __len__(self) -> int:
        return len(self.labels)

    def __repr__(self) -> str:
        return f"Dataset(samples={len(self)}, fields={self.meta.n_fields}, positives={int(self.labels.sum())})"

    @property
    def n_fields(self) -> int:
        return self.meta.n_fields

    def sample(self, i: int) -> Sample:
        return Sample([int(v) for v in self.field_values[i]], int(self.labels[i]))

    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.field_values[indices], self.labels[indices], self.meta)

    def with_field_values(self, field_values: np.ndarray) -> "Dataset":
        return Dataset(field_values, self.labels, self.meta)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.field_values, columns=[field_column(i) for i in range(self.n_fields)])
        frame[LABEL_COLUMN] = self.labels.astype(np.int64)
        return frame


# --- Generation ---
def zipf_probabilities(cardinality: int, exponent: float) -> np.ndarray:
    """p(k) proportional to 1 / (k + 1)^exponent; category 0 is the most frequent."""
    weights = 1.0 / np.arange(1, cardinality + 1, dtype=np.float64) ** exponent
    return weights / weights.sum()


def generate_synthetic(meta: DatasetMeta, n_samples: int) -> Dataset:
    meta.validate()
    if n_samples < 1:
        raise ConfigurationError(f"n_samples must be >= 1, got {n_samples}")
    rng = np.random.default_rng(meta.seed)

    field_values = np.empty((n_samples, meta.n_fields), dtype=np.int64)
    for i, card in enumerate(meta.cardinalities):
        field_values[:, i] = rng.choice(card, size=n_samples, p=zipf_probabilities(card, meta.zipf_exponent))

    # fixed logistic ground truth: one N(0, 1) weight per category of every informative field
    logits = np.zeros(n_samples)
    for i in meta.informative_fields:
        weights = rng.standard_normal(meta.cardinalities[i])
        logits += weights[field_values[:, i]]
    labels = (rng.random(n_samples) < 1.0 / (1.0 + np.exp(-logits))).astype(np.int8)

    logger.info(f"Generated {n_samples} samples over {meta.n_fields} fields "
                f"({len(meta.informative_fields)} informative), positive rate {labels.mean():.3f}")
    return Dataset(field_values, labels, meta)


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ConfigurationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_test = int(round(len(dataset) * test_fraction))
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))


# --- CSV I/O ---
def save_csv(dataset: Dataset, path: str, meta_path: str) -> None:
    try:
        dataset.to_frame().to_csv(path, index=False)
    except OSError as e:
        raise DataIOError(f"Could not write dataset '{path}': {e}") from e
    dataset.meta.save(meta_path)
    logger.info(f"Wrote {len(dataset)} samples to {path} (meta: {meta_path})")


def load_csv(path: str, meta_path: str) -> Dataset:
    meta = DatasetMeta.load(meta_path)
    expected_columns = [field_column(i) for i in range(meta.n_fields)] + [LABEL_COLUMN]
    try:
        # blank lines stay in the frame so that row i is always file line i + 2
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except FileNotFoundError as e:
        raise DataIOError(f"Dataset file '{path}' not found") from e
    except pd.errors.EmptyDataError as e:
        raise ParseError("file has no header", line_number=1) from e
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise ParseError(f"malformed row: {e}", line_number=int(match.group(1)) if match else None) from e
    except OSError as e:
        raise DataIOError(f"Could not read dataset '{path}': {e}") from e

    if list(frame.columns) != expected_columns:
        raise ParseError(f"header must be {','.join(expected_columns)}", line_number=1)

    blank = (frame.isna() | (frame == "")).all(axis=1).to_numpy()
    n_rows = len(frame) - int(np.argmax(~blank[::-1])) if (~blank).any() else 0
    frame = frame.iloc[:n_rows]
    if blank[:n_rows].any():
        raise ParseError("blank line inside the data", line_number=int(np.flatnonzero(blank[:n_rows])[0]) + 2)

    values = np.empty(frame.shape, dtype=np.int64)
    for col_idx, column in enumerate(expected_columns):
        parsed = pd.to_numeric(frame[column].str.strip(), errors="coerce")
        bad = parsed.isna() | (parsed != np.floor(parsed))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise ParseError(f"column '{column}' holds non-integer value '{frame[column].iloc[row]}'",
                             line_number=row + 2)
        values[:, col_idx] = parsed.to_numpy(dtype=np.int64)

    labels = values[:, -1]
    bad_labels = np.flatnonzero((labels != 0) & (labels != 1))
    if len(bad_labels):
        raise ValidationError(f"line {bad_labels[0] + 2}: label must be 0 or 1")
    for i, card in enumerate(meta.cardinalities):
        bad_rows = np.flatnonzero((values[:, i] < 0) | (values[:, i] >= card))
        if len(bad_rows):
            row = int(bad_rows[0])
            raise ValidationError(f"line {row + 2}: {field_column(i)}={values[row, i]} outside cardinality {card}")

    logger.info(f"Loaded {len(values)} samples from {path}")
    return Dataset(values[:, :-1], labels, meta)


# --- Statistics and batching ---
def empirical_distribution(dataset: Dataset) -> EmpiricalDistribution:
    if len(dataset) == 0:
        raise ValidationError("Cannot estimate a distribution from an empty dataset")
    n = len(dataset)
    return EmpiricalDistribution([
        np.bincount(dataset.field_values[:, i], minlength=card) / n
        for i, card in enumerate(dataset.meta.cardinalities)
    ])


def batches(dataset: Dataset, batch_size: int, seed: int) -> Iterator[Batch]:
    """One epoch in a seeded random order; the last batch may be short."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(idx, dataset.field_values[idx], dataset.labels[idx])
