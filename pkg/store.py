"""
Embedding Store Module (store.py)

Mixed-precision embedding tables. Every row is held at one of three tiers
(FP32, FP16, INT8) chosen from its priority score and the table's thresholds
(t8, t16). Reads dequantize, writes re-quantize at the row's current tier with
a freshly computed per-row scale, and `retier` migrates rows whose score moved
into another bucket.

Store files ("SHRK" format, little-endian throughout):

    file header   <4sHBI   magic "SHRK", version u16, flags u8, table count u32
    per table     <IIHdd   table id u32, n_rows u32, dim u16, t8 f64, t16 f64
    per row       <BHf     extra word: precision tag u8, dimension u16, scale f32
                  payload  dim x int8 | dim x float16 | dim x float32
    flags & 0x01  scores   n_rows x f64 per table, tables in file order
    flags & 0x02  dropped  <I count, then <IIH (table id, n_rows, dim) per pruned table

Extra words are written for every row, FP32 included. Pruned tables hold no
rows; their shapes are kept so memory reports stay measured against the
unpruned FP32 baseline.

In memory each tier has its own payload array holding only that tier's rows.
"""

import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import ConfigurationError, DataIOError, FormatError, RowLookupError, ShapeError
from priority import DEFAULT_ALPHA, DEFAULT_BETA, PriorityTracker, assign_tiers, histogram_of_tiers
from quantizer import (PrecisionTier, RoundingMode, ScalePolicy, compute_scales,
                       dequantize_rows, payload_nbytes, quantize_rows)

# Configure logging
logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(module)s - %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(os.environ.get("LOG_LEVEL", "INFO").upper())
    logger.propagate = False

# --- Format Constants ---
MAGIC = b"SHRK"
FORMAT_VERSION = 1
FLAG_SCORES = 0x01
FLAG_DROPPED = 0x02
FILE_HEADER = struct.Struct("<4sHBI")
TABLE_HEADER = struct.Struct("<IIHdd")
EXTRA_WORD = struct.Struct("<BHf")
EXTRA_WORD_BYTES = EXTRA_WORD.size  # 7
DROPPED_COUNT = struct.Struct("<I")
DROPPED_TABLE = struct.Struct("<IIH")
SCORE_BYTES = 8
MAX_DIM = 65535

DEFAULT_T8 = 1e3
DEFAULT_T16 = 1e5

_LE_DTYPES = {
    PrecisionTier.FP32: np.dtype("<f4"),
    PrecisionTier.FP16: np.dtype("<f2"),
    PrecisionTier.INT8: np.dtype("i1"),
}


class MixedTable:
    """One embedding table whose rows each live at their own precision tier."""

    def __init__(self, table_id: int, n_rows: int, dim: int,
                 t8: float = DEFAULT_T8, t16: float = DEFAULT_T16,
                 policy: ScalePolicy = ScalePolicy.SYMMETRIC,
                 rounding: Optional[RoundingMode] = None):
        if not 1 <= dim <= MAX_DIM:
            raise ConfigurationError(f"Embedding dimension must be in [1, {MAX_DIM}], got {dim}")
        if n_rows < 0:
            raise ConfigurationError(f"Table {table_id} has a negative row count")
        if t8 > t16:
            raise ConfigurationError(f"t8 ({t8}) must not exceed t16 ({t16})")
        self.table_id = int(table_id)
        self.n_rows = int(n_rows)
        self.dim = int(dim)
        self.t8 = float(t8)
        self.t16 = float(t16)
        self.policy = ScalePolicy(policy)
        self.rounding = rounding or RoundingMode.nearest()
        self.scales = np.zeros(self.n_rows, dtype=np.float32)
        # fresh rows carry score 0
        self._allocate(assign_tiers(np.zeros(self.n_rows), self.t8, self.t16))

    def __repr__(self) -> str:
        return f"MixedTable(id={self.table_id}, rows={self.n_rows}, dim={self.dim}, tiers={self.tier_histogram()})"

    def _allocate(self, tiers: np.ndarray) -> None:
        """Size one zeroed payload array per tier; `slots[row]` indexes the row inside its tier's array."""
        self.tiers = np.asarray(tiers, dtype=np.uint8).copy()
        self.slots = np.zeros(self.n_rows, dtype=np.int64)
        self._payloads: Dict[PrecisionTier, np.ndarray] = {}
        for tier in PrecisionTier:
            rows = np.flatnonzero(self.tiers == tier)
            self.slots[rows] = np.arange(len(rows))
            self._payloads[tier] = np.zeros((len(rows), self.dim), dtype=tier.dtype)

    def _check_rows(self, row_ids: np.ndarray) -> np.ndarray:
        row_ids = np.asarray(row_ids, dtype=np.int64).reshape(-1)
        if len(row_ids) and (row_ids.min() < 0 or row_ids.max() >= self.n_rows):
            raise RowLookupError(f"Row index out of range for table {self.table_id} ({self.n_rows} rows)")
        return row_ids

    # --- Row access ---
    def lookup_rows(self, row_ids: Sequence[int]) -> np.ndarray:
        row_ids = self._check_rows(row_ids)
        out = np.empty((len(row_ids), self.dim), dtype=np.float64)
        row_tiers = self.tiers[row_ids]
        for tier in PrecisionTier:
            mask = row_tiers == tier
            if not mask.any():
                continue
            rows = row_ids[mask]
            out[mask] = dequantize_rows(self._payloads[tier][self.slots[rows]], tier, self.scales[rows])
        return out

    def lookup(self, row_id: int) -> np.ndarray:
        return self.lookup_rows([row_id])[0]

    def write_rows(self, row_ids: Sequence[int], values: np.ndarray,
                   rounding: Optional[RoundingMode] = None) -> None:
        """Quantize values at each row's current tier. Row ids are expected to be unique."""
        row_ids = self._check_rows(row_ids)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[None, :]
        if values.shape != (len(row_ids), self.dim):
            raise ShapeError(f"Expected values of shape ({len(row_ids)}, {self.dim}), got {values.shape}")
        rounding = rounding or self.rounding
        row_tiers = self.tiers[row_ids]
        for tier in PrecisionTier:
            mask = row_tiers == tier
            if not mask.any():
                continue
            rows = row_ids[mask]
            # the stored float32 scale is the one the payload is quantized against
            scales = compute_scales(values[mask], tier, self.policy).astype(np.float32)
            self._payloads[tier][self.slots[rows]] = quantize_rows(values[mask], tier, scales.astype(np.float64),
                                                                   rounding)
            self.scales[rows] = scales

    def write(self, row_id: int, new_values: np.ndarray) -> None:
        new_values = np.asarray(new_values, dtype=np.float64)
        if new_values.shape != (self.dim,):
            raise ShapeError(f"Expected a vector of length {self.dim}, got shape {new_values.shape}")
        self.write_rows([row_id], new_values[None, :])

    def payload(self, row_id: int) -> np.ndarray:
        row_id = int(self._check_rows([row_id])[0])
        return self._payloads[PrecisionTier(self.tiers[row_id])][self.slots[row_id]].copy()

    def tier_of(self, row_id: int) -> PrecisionTier:
        row_id = int(self._check_rows([row_id])[0])
        return PrecisionTier(int(self.tiers[row_id]))

    # --- Tiering ---
    def set_thresholds(self, t8: float, t16: float) -> None:
        if t8 > t16:
            raise ConfigurationError(f"t8 ({t8}) must not exceed t16 ({t16})")
        self.t8, self.t16 = float(t8), float(t16)

    def retier(self, scores: np.ndarray) -> int:
        """Move every row into the bucket its score selects. Returns the number of migrated rows."""
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (self.n_rows,):
            raise ShapeError(f"Table {self.table_id} needs {self.n_rows} scores, got {scores.shape}")
        target = assign_tiers(scores, self.t8, self.t16)
        moved = np.flatnonzero(target != self.tiers)
        if len(moved) == 0:
            return 0
        # promotions re-store the dequantized value, demotions quantize it
        values = self.lookup_rows(moved)
        staying = np.ones(self.n_rows, dtype=bool)
        staying[moved] = False
        old_payloads, old_slots = self._payloads, self.slots
        tiers = self.tiers.copy()
        tiers[moved] = target[moved]
        self._allocate(tiers)
        for tier in PrecisionTier:
            rows = np.flatnonzero(staying & (self.tiers == tier))
            self._payloads[tier][self.slots[rows]] = old_payloads[tier][old_slots[rows]]
        self.write_rows(moved, values)
        logger.debug(f"Table {self.table_id}: migrated {len(moved)} rows")
        return int(len(moved))

    def tier_histogram(self) -> Dict[str, int]:
        return histogram_of_tiers(self.tiers)

    # --- Accounting ---
    def payload_bytes(self) -> int:
        return sum(count * payload_nbytes(PrecisionTier[name], self.dim)
                   for name, count in self.tier_histogram().items())

    def baseline_bytes(self) -> int:
        return 4 * self.dim * self.n_rows

    def resident_payload_bytes(self) -> int:
        """Bytes actually held by the payload arrays."""
        return sum(int(p.nbytes) for p in self._payloads.values())

    # --- Serialization ---
    def to_bytes(self) -> bytes:
        parts = [TABLE_HEADER.pack(self.table_id, self.n_rows, self.dim, self.t8, self.t16)]
        for row_id in range(self.n_rows):
            tier = PrecisionTier(int(self.tiers[row_id]))
            parts.append(EXTRA_WORD.pack(int(tier), self.dim, float(self.scales[row_id])))
            parts.append(self._payloads[tier][self.slots[row_id]].astype(_LE_DTYPES[tier]).tobytes())
        return b"".join(parts)


@dataclass
class TableMemory:
    table_id: int
    n_rows: int
    dim: int
    payload_bytes: int
    extra_word_bytes: int
    score_bytes: int
    baseline_bytes: int
    dropped: bool = False
    tiers: Dict[str, int] = field(default_factory=dict)


@dataclass
class MemoryReport:
    tables: List[TableMemory]

    @property
    def payload_bytes(self) -> int:
        return sum(t.payload_bytes for t in self.tables)

    @property
    def extra_word_bytes(self) -> int:
        return sum(t.extra_word_bytes for t in self.tables)

    @property
    def score_bytes(self) -> int:
        return sum(t.score_bytes for t in self.tables)

    @property
    def total_bytes(self) -> int:
        """Payload plus extra words; score bytes are itemised separately."""
        return self.payload_bytes + self.extra_word_bytes

    @property
    def baseline_bytes(self) -> int:
        return sum(t.baseline_bytes for t in self.tables)

    @property
    def ratio(self) -> float:
        return self.total_bytes / self.baseline_bytes if self.baseline_bytes else 0.0

    @property
    def payload_ratio(self) -> float:
        return self.payload_bytes / self.baseline_bytes if self.baseline_bytes else 0.0

    def to_dict(self) -> Dict:
        return {
            "payload_bytes": self.payload_bytes,
            "extra_word_bytes": self.extra_word_bytes,
            "score_bytes": self.score_bytes,
            "total_bytes": self.total_bytes,
            "baseline_bytes": self.baseline_bytes,
            "ratio": self.ratio,
            "payload_ratio": self.payload_ratio,
            "tables": [asdict(t) for t in self.tables],
        }

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for t in self.tables:
            row = {k: v for k, v in asdict(t).items() if k != "tiers"}
            row.update({f"rows_{name.lower()}": n for name, n in t.tiers.items()})
            rows.append(row)
        return pd.DataFrame(rows)


class EmbeddingStore:
    """All embedding tables of a model plus the priority tracker that drives their tiers."""

    def __init__(self, tables: Optional[Iterable[MixedTable]] = None,
                 tracker: Optional[PriorityTracker] = None,
                 policy: ScalePolicy = ScalePolicy.SYMMETRIC,
                 rounding: Optional[RoundingMode] = None):
        self.tables: Dict[int, MixedTable] = {t.table_id: t for t in (tables or [])}
        self.policy = ScalePolicy(policy)
        self.rounding = rounding or RoundingMode.nearest()
        for table in self.tables.values():
            table.policy, table.rounding = self.policy, self.rounding
        self.tracker = tracker or PriorityTracker({t.table_id: t.n_rows for t in self.tables.values()})
        self.dropped_shapes: Dict[int, Tuple[int, int]] = {}

    @classmethod
    def create(cls, cardinalities: Sequence[int], dim: int,
               t8: float = DEFAULT_T8, t16: float = DEFAULT_T16,
               policy: ScalePolicy = ScalePolicy.SYMMETRIC,
               rounding: Optional[RoundingMode] = None,
               init_scale: Optional[float] = None, seed: int = 0,
               alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
               decay_untouched: bool = False) -> "EmbeddingStore":
        """Random-initialised store, rows drawn U(-init_scale, init_scale) and written at their initial tier."""
        init_scale = 1.0 / np.sqrt(dim) if init_scale is None else init_scale
        rng = np.random.default_rng(seed)
        tables = [MixedTable(i, n, dim, t8, t16, policy, rounding) for i, n in enumerate(cardinalities)]
        tracker = PriorityTracker({t.table_id: t.n_rows for t in tables}, alpha, beta, decay_untouched)
        store = cls(tables, tracker, policy, rounding)
        for table in tables:
            if table.n_rows:
                values = rng.uniform(-init_scale, init_scale, size=(table.n_rows, dim))
                table.write_rows(np.arange(table.n_rows), values, RoundingMode.nearest())
        logger.info(f"Created embedding store: {len(tables)} tables, dim {dim}, t8={t8}, t16={t16}")
        return store

    # --- Tables ---
    def table(self, table_id: int) -> MixedTable:
        if table_id not in self.tables:
            raise RowLookupError(f"No embedding table {table_id} in the store")
        return self.tables[table_id]

    @property
    def dim(self) -> int:
        dims = {t.dim for t in self.tables.values()} | {d for _, d in self.dropped_shapes.values()}
        return dims.pop() if len(dims) == 1 else 0

    def drop_table(self, table_id: int) -> None:
        table = self.table(table_id)
        self.dropped_shapes[table_id] = (table.n_rows, table.dim)
        del self.tables[table_id]
        self.tracker.drop_table(table_id)
        logger.info(f"Dropped embedding table {table_id} ({table.n_rows} rows)")

    def set_rounding(self, rounding: RoundingMode) -> None:
        self.rounding = rounding
        for table in self.tables.values():
            table.rounding = rounding

    def set_thresholds(self, t8: float, t16: float) -> None:
        for table in self.tables.values():
            table.set_thresholds(t8, t16)

    def configure_priority(self, alpha: float, beta: float, decay_untouched: bool = False) -> None:
        scores = {t: self.tracker.table_scores(t) for t in self.tracker.table_ids}
        self.tracker = PriorityTracker({t: len(w) for t, w in scores.items()}, alpha, beta, decay_untouched)
        for table_id, w in scores.items():
            self.tracker.set_scores(table_id, w)

    # --- Batched access used by the model ---
    def lookup_fields(self, field_values: np.ndarray, field_ids: Sequence[int]) -> np.ndarray:
        """(batch, fields) category indices -> (batch, fields, dim); dropped fields read as zeros."""
        field_values = np.asarray(field_values)
        out = np.zeros((field_values.shape[0], len(field_ids), self.dim), dtype=np.float64)
        for col, field_id in enumerate(field_ids):
            if field_id in self.tables:
                out[:, col] = self.tables[field_id].lookup_rows(field_values[:, col])
        return out

    def apply_gradients(self, field_values: np.ndarray, grads: np.ndarray, learning_rate: float,
                        field_ids: Sequence[int]) -> None:
        """Dequantize, apply the summed SGD delta in full precision, re-quantize on write."""
        if learning_rate == 0:
            return
        field_values = np.asarray(field_values)
        for col, field_id in enumerate(field_ids):
            table = self.tables.get(field_id)
            if table is None:
                continue
            rows, inverse = np.unique(field_values[:, col], return_inverse=True)
            summed = np.zeros((len(rows), table.dim), dtype=np.float64)
            np.add.at(summed, inverse, grads[:, col])
            table.write_rows(rows, table.lookup_rows(rows) - learning_rate * summed)

    def retier_all(self) -> int:
        migrated = 0
        for table in self.tables.values():
            migrated += table.retier(self.tracker.table_scores(table.table_id))
        if migrated:
            logger.info(f"Re-tiered store: {migrated} rows migrated, histogram {self.tier_histogram()}")
        return migrated

    def tier_histogram(self) -> Dict[str, int]:
        counts = {tier.name: 0 for tier in PrecisionTier}
        for table in self.tables.values():
            for name, n in table.tier_histogram().items():
                counts[name] += n
        return counts

    # --- Accounting ---
    def memory_report(self, include_scores: bool = False) -> MemoryReport:
        entries = []
        for table_id in sorted(self.tables):
            t = self.tables[table_id]
            entries.append(TableMemory(
                table_id=t.table_id, n_rows=t.n_rows, dim=t.dim,
                payload_bytes=t.payload_bytes(),
                extra_word_bytes=EXTRA_WORD_BYTES * t.n_rows,
                score_bytes=SCORE_BYTES * t.n_rows if include_scores else 0,
                baseline_bytes=t.baseline_bytes(),
                tiers=t.tier_histogram(),
            ))
        for table_id, (n_rows, dim) in sorted(self.dropped_shapes.items()):
            entries.append(TableMemory(table_id, n_rows, dim, 0, 0, 0, 4 * dim * n_rows, dropped=True))
        return MemoryReport(sorted(entries, key=lambda e: e.table_id))

    # --- Serialization ---
    def to_bytes(self, include_scores: bool = True) -> bytes:
        flags = (FLAG_SCORES if include_scores else 0) | (FLAG_DROPPED if self.dropped_shapes else 0)
        table_ids = sorted(self.tables)
        parts = [FILE_HEADER.pack(MAGIC, FORMAT_VERSION, flags, len(table_ids))]
        parts.extend(self.tables[t].to_bytes() for t in table_ids)
        if include_scores:
            for t in table_ids:
                parts.append(self.tracker.table_scores(t).astype("<f8").tobytes())
        if self.dropped_shapes:
            parts.append(DROPPED_COUNT.pack(len(self.dropped_shapes)))
            for table_id, (n_rows, dim) in sorted(self.dropped_shapes.items()):
                parts.append(DROPPED_TABLE.pack(table_id, n_rows, dim))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbeddingStore":
        reader = _Reader(data)
        magic, version, flags, n_tables = reader.unpack(FILE_HEADER, "file header")
        if magic != MAGIC:
            raise FormatError(f"Bad magic {magic!r}, expected {MAGIC!r}", offset=0)
        if version != FORMAT_VERSION:
            raise FormatError(f"Unsupported format version {version}", offset=4)
        if flags & ~(FLAG_SCORES | FLAG_DROPPED):
            raise FormatError(f"Unknown flag bits 0x{flags:02x}", offset=6)

        tables: List[MixedTable] = []
        for _ in range(n_tables):
            header_offset = reader.offset
            table_id, n_rows, dim, t8, t16 = reader.unpack(TABLE_HEADER, "table header")
            if dim == 0 or not t8 <= t16:
                raise FormatError(f"Invalid header for table {table_id}", offset=header_offset)
            if any(t.table_id == table_id for t in tables):
                raise FormatError(f"Duplicate table id {table_id}", offset=header_offset)
            table = MixedTable(table_id, n_rows, dim, t8, t16)
            tiers = np.zeros(n_rows, dtype=np.uint8)
            payloads: List[np.ndarray] = []
            for row_id in range(n_rows):
                word_offset = reader.offset
                tag, row_dim, scale = reader.unpack(EXTRA_WORD, "extra word")
                if tag not in PrecisionTier._value2member_map_:
                    raise FormatError(f"Invalid precision tag {tag}", offset=word_offset)
                if row_dim != dim:
                    raise FormatError(f"Row dimension {row_dim} does not match table dimension {dim}",
                                      offset=word_offset + 1)
                if not np.isfinite(scale) or scale < 0:
                    raise FormatError(f"Invalid scale {scale}", offset=word_offset + 3)
                tier = PrecisionTier(tag)
                payload = np.frombuffer(reader.take(payload_nbytes(tier, dim), "row payload"),
                                        dtype=_LE_DTYPES[tier])
                tiers[row_id] = tier
                table.scales[row_id] = scale
                payloads.append(payload)
            table._allocate(tiers)
            for row_id, payload in enumerate(payloads):
                table._payloads[PrecisionTier(int(tiers[row_id]))][table.slots[row_id]] = payload
            tables.append(table)

        tracker = PriorityTracker({t.table_id: t.n_rows for t in tables})
        if flags & FLAG_SCORES:
            for table in tables:
                score_offset = reader.offset
                scores = np.frombuffer(reader.take(SCORE_BYTES * table.n_rows, "score section"), dtype="<f8")
                if np.any(~np.isfinite(scores)) or np.any(scores < 0):
                    raise FormatError(f"Invalid priority scores for table {table.table_id}", offset=score_offset)
                tracker.set_scores(table.table_id, scores.astype(np.float64))
        dropped: Dict[int, Tuple[int, int]] = {}
        if flags & FLAG_DROPPED:
            (n_dropped,) = reader.unpack(DROPPED_COUNT, "dropped table count")
            for _ in range(n_dropped):
                record_offset = reader.offset
                table_id, n_rows, dim = reader.unpack(DROPPED_TABLE, "dropped table record")
                if dim == 0 or table_id in dropped or any(t.table_id == table_id for t in tables):
                    raise FormatError(f"Invalid dropped table record {table_id}", offset=record_offset)
                dropped[table_id] = (n_rows, dim)
        if reader.offset != len(data):
            raise FormatError(f"{len(data) - reader.offset} trailing bytes", offset=reader.offset)
        store = cls(tables, tracker)
        store.dropped_shapes = dropped
        return store

    def save(self, path: str, include_scores: bool = True) -> None:
        try:
            with open(path, "wb") as f:
                f.write(self.to_bytes(include_scores))
        except OSError as e:
            raise DataIOError(f"Could not write store file '{path}': {e}") from e
        logger.info(f"Saved embedding store to {path} ({len(self.tables)} tables)")

    @classmethod
    def load(cls, path: str) -> "EmbeddingStore":
        try:
            with open(path, "rb") as f:
                data = f.read()
        except OSError as e:
            raise DataIOError(f"Could not read store file '{path}': {e}") from e
        return cls.from_bytes(data)


class _Reader:
    """Sequential reader over a byte string that reports truncation with the offending offset."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"Truncated {what}: need {n} bytes, {len(self.data) - self.offset} left",
                              offset=self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, layout: struct.Struct, what: str) -> tuple:
        return layout.unpack(self.take(layout.size, what))


# --- Module-level operations ---
def lookup(table: MixedTable, row_id: int) -> np.ndarray:
    return table.lookup(row_id)


def write(table: MixedTable, row_id: int, new_values: np.ndarray) -> MixedTable:
    table.write(row_id, new_values)
    return table


def retier(table: MixedTable, tracker: PriorityTracker) -> int:
    return table.retier(tracker.table_scores(table.table_id))


def memory_report(store: EmbeddingStore, include_scores: bool = False) -> MemoryReport:
    return store.memory_report(include_scores)


def save(store: EmbeddingStore, path: str, include_scores: bool = True) -> None:
    store.save(path, include_scores)


def load(path: str) -> EmbeddingStore:
    return EmbeddingStore.load(path)
