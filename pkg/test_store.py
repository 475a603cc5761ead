import os
import struct
import sys

import numpy as np
import pytest

from console import run_test_module
from errors import ConfigurationError, DataIOError, FormatError, RowLookupError, ShapeError
from priority import PriorityTracker, count_batch_access
from quantizer import PrecisionTier, RoundingMode
from store import (DROPPED_TABLE, EXTRA_WORD_BYTES, FILE_HEADER, TABLE_HEADER, EmbeddingStore, MixedTable, load,
                   lookup, memory_report, retier, save, write)

# one table: id 0, 2 rows, dim 2, t8=1.0, t16=2.0, no score section
# row 0 FP32 [1.0, -2.0]; row 1 INT8 written from [127.0, -63.0] (scale 1.0)
GOLDEN_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures", "golden.shrk")
with open(GOLDEN_PATH, "rb") as _f:
    GOLDEN = _f.read()
ROW0_TAG_OFFSET = 37
ROW1_TAG_OFFSET = 52


def _golden_store() -> EmbeddingStore:
    table = MixedTable(0, 2, 2, t8=1.0, t16=2.0)
    table.retier(np.array([5.0, 0.0]))
    table.write(0, np.array([1.0, -2.0]))
    table.write(1, np.array([127.0, -63.0]))
    return EmbeddingStore([table], PriorityTracker({0: 2}))


def _table_with_tier(tier: PrecisionTier, n_rows: int = 10, dim: int = 4) -> MixedTable:
    table = MixedTable(0, n_rows, dim, t8=1.0, t16=2.0)
    score = {PrecisionTier.FP32: 3.0, PrecisionTier.FP16: 1.5, PrecisionTier.INT8: 0.0}[tier]
    table.retier(np.full(n_rows, score))
    return table


def test_golden_fixture_bytes():
    data = _golden_store().to_bytes(include_scores=False)
    assert len(data) == FILE_HEADER.size + TABLE_HEADER.size + (EXTRA_WORD_BYTES + 8) + (EXTRA_WORD_BYTES + 2)
    assert len(data) == 61
    assert data == GOLDEN
    assert data[ROW0_TAG_OFFSET] == PrecisionTier.FP32
    assert data[ROW1_TAG_OFFSET] == PrecisionTier.INT8


def test_golden_fixture_loads():
    store = EmbeddingStore.from_bytes(GOLDEN)
    table = store.table(0)
    assert (table.t8, table.t16) == (1.0, 2.0)
    assert table.tier_of(0) == PrecisionTier.FP32
    assert table.tier_of(1) == PrecisionTier.INT8
    assert lookup(table, 0).tolist() == [1.0, -2.0]
    assert lookup(table, 1).tolist() == [127.0, -63.0]
    assert table.payload(1).tolist() == [127, -63]
    assert store.tier_histogram() == {"FP32": 1, "FP16": 0, "INT8": 1}
    assert store.to_bytes(include_scores=False) == GOLDEN


def test_corrupted_tag_is_rejected_with_offset():
    corrupted = bytearray(GOLDEN)
    corrupted[ROW0_TAG_OFFSET] = 3
    with pytest.raises(FormatError) as excinfo:
        EmbeddingStore.from_bytes(bytes(corrupted))
    assert excinfo.value.offset == ROW0_TAG_OFFSET


def test_header_corruption_offsets():
    bad_magic = b"SHRX" + GOLDEN[4:]
    with pytest.raises(FormatError) as excinfo:
        EmbeddingStore.from_bytes(bad_magic)
    assert excinfo.value.offset == 0

    bad_version = GOLDEN[:4] + struct.pack("<H", 2) + GOLDEN[6:]
    with pytest.raises(FormatError) as excinfo:
        EmbeddingStore.from_bytes(bad_version)
    assert excinfo.value.offset == 4

    bad_dim = bytearray(GOLDEN)
    bad_dim[ROW1_TAG_OFFSET + 1] = 3
    with pytest.raises(FormatError) as excinfo:
        EmbeddingStore.from_bytes(bytes(bad_dim))
    assert excinfo.value.offset == ROW1_TAG_OFFSET + 1


def test_truncated_and_trailing_bytes():
    with pytest.raises(FormatError) as excinfo:
        EmbeddingStore.from_bytes(GOLDEN[:-1])
    assert excinfo.value.offset == len(GOLDEN) - 2
    with pytest.raises(FormatError) as excinfo:
        EmbeddingStore.from_bytes(GOLDEN[:5])
    assert excinfo.value.offset == 0
    with pytest.raises(FormatError) as excinfo:
        EmbeddingStore.from_bytes(GOLDEN + b"\x00")
    assert excinfo.value.offset == len(GOLDEN)


def test_save_load_save_is_byte_identical(tmp_path):
    store = EmbeddingStore.create([30, 5, 12], 8, t8=2.0, t16=10.0, rounding=RoundingMode.stochastic(seed=1), seed=4)
    rng = np.random.default_rng(0)
    for _ in range(20):
        values = rng.integers(0, [30, 5, 12], size=(64, 3))
        store.tracker.update_batch(count_batch_access(values, rng.integers(0, 2, size=64)))
    assert store.retier_all() > 0

    first = os.path.join(tmp_path, "a.shrk")
    second = os.path.join(tmp_path, "b.shrk")
    save(store, first)
    loaded = load(first)
    save(loaded, second)
    with open(first, "rb") as f_a, open(second, "rb") as f_b:
        assert f_a.read() == f_b.read()
    assert np.array_equal(loaded.tracker.table_scores(1), store.tracker.table_scores(1))
    for table_id in (0, 1, 2):
        rows = np.arange(store.table(table_id).n_rows)
        assert np.array_equal(loaded.table(table_id).lookup_rows(rows), store.table(table_id).lookup_rows(rows))


def test_load_missing_file_is_io_error(tmp_path):
    with pytest.raises(DataIOError):
        load(os.path.join(tmp_path, "missing.shrk"))


def test_fp32_lookup_is_exact():
    table = _table_with_tier(PrecisionTier.FP32)
    values = np.array([0.1, -0.7, 3.3, 1e-3], dtype=np.float32)
    write(table, 2, values)
    assert lookup(table, 2).tobytes() == values.astype(np.float64).tobytes()


def test_int8_write_within_half_scale():
    table = _table_with_tier(PrecisionTier.INT8, dim=3)
    write(table, 0, np.array([1.0, -2.0, 0.5]))
    scale = float(table.scales[0])
    assert scale == pytest.approx(2.0 / 127, rel=1e-6)
    assert np.all(np.abs(lookup(table, 0) - [1.0, -2.0, 0.5]) <= scale / 2 + 1e-9)


def test_fresh_rows_start_at_int8():
    table = MixedTable(0, 5, 4, t8=1e3, t16=1e5)
    assert all(table.tier_of(r) == PrecisionTier.INT8 for r in range(5))


def test_zero_vector_reads_back_as_zeros():
    for tier in PrecisionTier:
        table = _table_with_tier(tier, dim=3)
        write(table, 4, np.zeros(3))
        assert table.scales[4] == 0.0
        assert np.all(lookup(table, 4) == 0.0)


def test_random_int8_write_lookup_cycles():
    table = _table_with_tier(PrecisionTier.INT8, n_rows=50, dim=16)
    rng = np.random.default_rng(7)
    for _ in range(1000):
        row = int(rng.integers(0, 50))
        values = rng.uniform(-1, 1, size=16)
        write(table, row, values)
        assert np.all(np.abs(lookup(table, row) - values) <= float(table.scales[row]) / 2 + 1e-9)


def test_write_and_lookup_errors():
    table = MixedTable(0, 3, 4)
    with pytest.raises(ShapeError):
        write(table, 0, np.zeros(5))
    with pytest.raises(RowLookupError):
        lookup(table, 3)
    with pytest.raises(RowLookupError):
        table.lookup_rows([-1])


def test_retier_is_idempotent():
    table = MixedTable(0, 20, 4, t8=1.0, t16=2.0)
    tracker = PriorityTracker({0: 20})
    assert retier(table, tracker) == 0
    assert table.tier_histogram() == {"FP32": 0, "FP16": 0, "INT8": 20}
    scores = np.zeros(20)
    scores[3] = 2.5
    tracker.set_scores(0, scores)
    assert retier(table, tracker) == 1
    assert table.tier_of(3) == PrecisionTier.FP32
    assert retier(table, tracker) == 0


def test_promotion_conserves_value():
    table = _table_with_tier(PrecisionTier.INT8, n_rows=8, dim=6)
    rng = np.random.default_rng(3)
    original = rng.uniform(-1, 1, size=(8, 6))
    table.write_rows(np.arange(8), original)
    before = table.lookup_rows(np.arange(8))
    assert table.retier(np.array([1.5] * 4 + [3.0] * 4)) == 8
    after = table.lookup_rows(np.arange(8))
    # FP32 keeps the dequantized value, FP16 adds at most half an fp16 ulp
    assert np.all(np.abs(after[4:] - before[4:]) <= 1e-6)
    assert np.all(np.abs(after[4:] - original[4:]) <= np.abs(before[4:] - original[4:]) + 1e-6)
    half_ulp = np.spacing(np.abs(before[:4]).astype(np.float16)).astype(np.float64) / 2
    assert np.all(np.abs(after[:4] - before[:4]) <= half_ulp + 1e-12)


def test_tier_histogram_matches_priority_after_zipf_trace():
    cardinality = 400
    store = EmbeddingStore.create([cardinality, cardinality], 4, t8=50.0, t16=500.0, seed=0)
    rng = np.random.default_rng(1)
    p = 1.0 / np.arange(1, cardinality + 1) ** 1.1
    p /= p.sum()
    for _ in range(30):
        values = rng.choice(cardinality, size=(2048, 2), p=p)
        store.tracker.update_batch(count_batch_access(values, rng.integers(0, 2, size=2048)))
    store.retier_all()
    assert store.tier_histogram() == store.tracker.tier_histogram(50.0, 500.0)
    for table in store.tables.values():
        expected = {name: 0 for name in ("FP32", "FP16", "INT8")}
        for s in store.tracker.table_scores(table.table_id):
            expected["INT8" if s < 50.0 else "FP16" if s < 500.0 else "FP32"] += 1
        assert table.tier_histogram() == expected


def test_memory_report_arithmetic():
    fp32 = EmbeddingStore.create([100], 16, t8=0.0, t16=0.0)
    report = memory_report(fp32)
    assert report.payload_bytes == 6400
    assert report.extra_word_bytes == 700
    assert report.baseline_bytes == 6400
    assert report.ratio == pytest.approx(7100 / 6400)
    assert round(report.ratio * 100, 1) == 110.9
    assert report.payload_ratio == 1.0

    int8 = EmbeddingStore.create([100], 16)
    report = memory_report(int8)
    assert report.total_bytes == 2300
    assert report.ratio == pytest.approx(2300 / 6400)

    empty = EmbeddingStore([MixedTable(0, 0, 16)])
    report = memory_report(empty)
    assert report.total_bytes == 0
    assert report.ratio == 0.0


def test_memory_report_matches_the_serialized_file():
    store = EmbeddingStore.create([40, 9], 8, t8=0.5, t16=1.5, seed=2)
    store.tracker.set_scores(0, np.linspace(0, 2, 40))
    store.retier_all()
    data = store.to_bytes(include_scores=True)
    report = memory_report(store, include_scores=True)
    headers = FILE_HEADER.size + TABLE_HEADER.size * len(store.tables)
    assert len(data) == headers + report.total_bytes + report.score_bytes
    assert report.score_bytes == 8 * 49
    frame = report.to_frame()
    assert list(frame["table_id"]) == [0, 1]
    assert frame["payload_bytes"].sum() == report.payload_bytes


def test_raising_t8_never_increases_memory():
    store = EmbeddingStore.create([300], 8, t8=0.0, t16=100.0, seed=5)
    store.tracker.set_scores(0, np.random.default_rng(0).exponential(50.0, size=300))
    previous = None
    for t8 in (0.0, 10.0, 25.0, 50.0, 100.0):
        store.set_thresholds(t8, 100.0)
        store.retier_all()
        total = memory_report(store).total_bytes
        assert previous is None or total <= previous
        previous = total


def test_thresholds_must_be_ordered():
    with pytest.raises(ConfigurationError):
        MixedTable(0, 2, 2, t8=5.0, t16=1.0)
    table = MixedTable(0, 2, 2)
    with pytest.raises(ConfigurationError):
        table.set_thresholds(3.0, 2.0)


def test_dropped_table_keeps_baseline():
    store = EmbeddingStore.create([10, 20], 4, t8=0.0, t16=0.0)
    store.drop_table(1)
    report = memory_report(store)
    assert report.baseline_bytes == 4 * 4 * 30
    assert report.payload_bytes == 4 * 4 * 10
    assert report.payload_ratio == pytest.approx(1 / 3)
    assert store.lookup_fields(np.array([[1, 2]]), [0, 1])[0, 1].tolist() == [0.0] * 4


def test_pruned_store_file_keeps_the_dropped_baseline():
    store = EmbeddingStore.create([50, 50], 4, t8=0.0, t16=0.0)
    store.drop_table(1)
    data = store.to_bytes()
    assert data[6] == 0x03

    reloaded = EmbeddingStore.from_bytes(data)
    assert reloaded.dropped_shapes == {1: (50, 4)}
    assert sorted(reloaded.tables) == [0]
    assert memory_report(reloaded).payload_ratio == memory_report(store).payload_ratio == 0.5
    assert memory_report(reloaded).baseline_bytes == 4 * 4 * 100
    assert reloaded.to_bytes() == data

    # a dropped record may not reuse the id of a live table
    clashing = data[:-DROPPED_TABLE.size] + DROPPED_TABLE.pack(0, 50, 4)
    with pytest.raises(FormatError) as excinfo:
        EmbeddingStore.from_bytes(clashing)
    assert excinfo.value.offset == len(data) - DROPPED_TABLE.size


def test_unpruned_store_file_has_no_dropped_section():
    data = EmbeddingStore.create([5], 2).to_bytes(include_scores=False)
    assert data[6] == 0x00
    assert EmbeddingStore.from_bytes(data).dropped_shapes == {}


def test_tier_arrays_hold_only_their_rows():
    table = MixedTable(0, 1000, 16, t8=1.0, t16=2.0)
    assert table.tier_histogram() == {"FP32": 0, "FP16": 0, "INT8": 1000}
    assert table.resident_payload_bytes() == table.payload_bytes() == 16000
    assert table.resident_payload_bytes() < table.baseline_bytes()

    rng = np.random.default_rng(3)
    table.write_rows(np.arange(1000), rng.uniform(-1, 1, size=(1000, 16)))
    before = table.lookup_rows(np.arange(1000))
    scores = np.where(np.arange(1000) < 300, 3.0, 0.0)
    scores[300:400] = 1.5
    assert table.retier(scores) == 400
    assert table.tier_histogram() == {"FP32": 300, "FP16": 100, "INT8": 600}
    assert table.resident_payload_bytes() == table.payload_bytes() == 300 * 64 + 100 * 32 + 600 * 16

    after = table.lookup_rows(np.arange(1000))
    # rows that stayed INT8 keep their payload untouched
    assert np.array_equal(after[400:], before[400:])
    assert after[:300] == pytest.approx(before[:300], rel=1e-6, abs=1e-7)

    # demoting everything back shrinks the arrays again
    table.retier(np.zeros(1000))
    assert table.resident_payload_bytes() == 16000


def test_apply_gradients_sums_duplicate_rows():
    store = EmbeddingStore.create([3], 2, t8=0.0, t16=0.0, seed=1)
    before = store.table(0).lookup_rows([0, 1])
    grads = np.array([[[1.0, 0.0]], [[1.0, 0.0]], [[0.0, 2.0]]])
    store.apply_gradients(np.array([[0], [0], [1]]), grads, 0.5, [0])
    after = store.table(0).lookup_rows([0, 1])
    assert after[0] == pytest.approx(before[0] - [1.0, 0.0], abs=1e-6)
    assert after[1] == pytest.approx(before[1] - [0.0, 1.0], abs=1e-6)


if __name__ == "__main__":
    sys.exit(run_test_module(globals(), "Embedding Store Tests"))
