"""
Priority Module (priority.py)

Frequency-based priority scores for embedding rows. Every batch, each row that
the batch touched is updated as

    w <- (1 - beta) * w + beta * (c_pos * alpha + c_neg)

where c_pos / c_neg count the positive / negative samples that looked the row
up. Positive samples weigh alpha times more. Scores decide which precision tier
a row is stored at: below t8 -> INT8, between t8 and t16 -> FP16, from t16 up -> FP32.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Union

import numpy as np

from errors import ConfigurationError, RowLookupError, ValidationError
from quantizer import PrecisionTier

# Configure logging
logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(module)s - %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(os.environ.get("LOG_LEVEL", "INFO").upper())
    logger.propagate = False

DEFAULT_ALPHA = 2.0
DEFAULT_BETA = 0.99


@dataclass
class TableAccess:
    """Rows one table served in a batch, with their positive / negative hit counts."""
    rows: np.ndarray
    positive: np.ndarray
    negative: np.ndarray


BatchAccess = Dict[int, TableAccess]


def count_batch_access(field_values: np.ndarray, labels: np.ndarray,
                       table_ids: Optional[Iterable[int]] = None) -> BatchAccess:
    """Count c+ and c- per accessed row for every field column of a batch."""
    field_values = np.asarray(field_values)
    labels = np.asarray(labels, dtype=np.float64)
    columns = range(field_values.shape[1]) if table_ids is None else table_ids
    access: BatchAccess = {}
    for table_id in columns:
        rows, inverse = np.unique(field_values[:, table_id], return_inverse=True)
        total = np.bincount(inverse, minlength=len(rows))
        positive = np.bincount(inverse, weights=labels, minlength=len(rows)).astype(np.int64)
        access[table_id] = TableAccess(rows=rows.astype(np.int64), positive=positive,
                                       negative=(total - positive).astype(np.int64))
    return access


def assign_tiers(scores: np.ndarray, t8: float, t16: float) -> np.ndarray:
    """Bucket scores into tier tags (uint8 PrecisionTier values)."""
    if t8 > t16:
        raise ConfigurationError(f"t8 ({t8}) must not exceed t16 ({t16})")
    scores = np.asarray(scores, dtype=np.float64)
    tiers = np.full(scores.shape, PrecisionTier.FP16, dtype=np.uint8)
    tiers[scores < t8] = PrecisionTier.INT8
    tiers[scores >= t16] = PrecisionTier.FP32
    return tiers


def histogram_of_tiers(tiers: np.ndarray) -> Dict[str, int]:
    tiers = np.asarray(tiers)
    return {tier.name: int(np.count_nonzero(tiers == tier)) for tier in PrecisionTier}


class PriorityTracker:
    """Per-table, per-row priority scores (full float64 precision regardless of row tier)."""

    def __init__(self, table_sizes: Union[Mapping[int, int], List[int]],
                 alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
                 decay_untouched: bool = False, initial_value: float = 0.0):
        if alpha <= 0:
            raise ConfigurationError(f"alpha must be > 0, got {alpha}")
        if not 0 < beta < 1:
            raise ConfigurationError(f"beta must lie in (0, 1), got {beta}")
        if initial_value < 0:
            raise ConfigurationError("initial priority must be non-negative")
        if not isinstance(table_sizes, Mapping):
            table_sizes = dict(enumerate(table_sizes))
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.decay_untouched = decay_untouched
        self.initial_value = float(initial_value)
        self.scores: Dict[int, np.ndarray] = {
            int(t): np.full(int(n), self.initial_value, dtype=np.float64) for t, n in table_sizes.items()
        }
        self.batches_seen = 0

    @property
    def table_ids(self) -> List[int]:
        return sorted(self.scores)

    def _table(self, table_id: int) -> np.ndarray:
        if table_id not in self.scores:
            raise RowLookupError(f"No priority scores for table {table_id}")
        return self.scores[table_id]

    def update_batch(self, batch_access: BatchAccess) -> "PriorityTracker":
        for table_id, access in batch_access.items():
            if np.any(access.positive < 0) or np.any(access.negative < 0):
                raise ValidationError(f"Negative access count for table {table_id}")
            w = self._table(table_id)
            if len(access.rows) and (access.rows.min() < 0 or access.rows.max() >= len(w)):
                raise RowLookupError(f"Accessed row out of range for table {table_id}")

        for table_id, w in self.scores.items():
            access = batch_access.get(table_id)
            if access is None:
                if self.decay_untouched:
                    w *= (1.0 - self.beta)
                continue
            if self.decay_untouched:
                untouched = np.ones(len(w), dtype=bool)
                untouched[access.rows] = False
                w[untouched] *= (1.0 - self.beta)
            hits = access.positive * self.alpha + access.negative
            w[access.rows] = (1.0 - self.beta) * w[access.rows] + self.beta * hits
        self.batches_seen += 1
        return self

    def score(self, table_id: int, row_id: int) -> float:
        w = self._table(table_id)
        if not 0 <= row_id < len(w):
            raise RowLookupError(f"Row {row_id} out of range for table {table_id} ({len(w)} rows)")
        return float(w[row_id])

    def table_scores(self, table_id: int) -> np.ndarray:
        return self._table(table_id)

    def set_scores(self, table_id: int, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self._table(table_id).shape:
            raise ValidationError(f"Score vector for table {table_id} has the wrong length")
        if np.any(values < 0):
            raise ValidationError("Priority scores must be non-negative")
        self.scores[table_id] = values.copy()

    def drop_table(self, table_id: int) -> None:
        self.scores.pop(table_id, None)

    def tier_histogram(self, t8: float, t16: float) -> Dict[str, int]:
        if t8 > t16:
            raise ConfigurationError(f"t8 ({t8}) must not exceed t16 ({t16})")
        counts = {tier.name: 0 for tier in PrecisionTier}
        for w in self.scores.values():
            for name, n in histogram_of_tiers(assign_tiers(w, t8, t16)).items():
                counts[name] += n
        return counts


def update_batch(tracker: PriorityTracker, batch_access: BatchAccess) -> PriorityTracker:
    return tracker.update_batch(batch_access)


def score(tracker: PriorityTracker, table_id: int, row_id: int) -> float:
    return tracker.score(table_id, row_id)


def tier_histogram(tracker: PriorityTracker, thresholds: Mapping[str, float]) -> Dict[str, int]:
    return tracker.tier_histogram(thresholds["t8"], thresholds["t16"])
