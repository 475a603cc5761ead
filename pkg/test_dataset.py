import os
import sys

import numpy as np
import pytest

from console import run_test_module
from dataset import (Dataset, DatasetMeta, Sample, batches, empirical_distribution, generate_synthetic, load_csv,
                     save_csv, train_test_split)
from errors import ConfigurationError, DataIOError, ParseError, ValidationError


def _write(tmp_path, csv_text, cardinalities):
    csv_path = os.path.join(tmp_path, "data.csv")
    meta_path = os.path.join(tmp_path, "meta.json")
    with open(csv_path, "w") as f:
        f.write(csv_text)
    DatasetMeta(len(cardinalities), tuple(cardinalities)).save(meta_path)
    return csv_path, meta_path


def test_load_csv_parses_rows(tmp_path):
    csv_path, meta_path = _write(tmp_path, "field_0,field_1,label\n3,1,0\n0,0,1\n", [5, 2])
    dataset = load_csv(csv_path, meta_path)
    assert len(dataset) == 2
    assert dataset.sample(0) == Sample([3, 1], 0)
    assert dataset.sample(1) == Sample([0, 0], 1)


def test_load_csv_rejects_out_of_range_index(tmp_path):
    csv_path, meta_path = _write(tmp_path, "field_0,field_1,label\n9,1,0\n", [5, 2])
    with pytest.raises(ValidationError) as excinfo:
        load_csv(csv_path, meta_path)
    assert not isinstance(excinfo.value, ParseError)
    assert "line 2" in str(excinfo.value)


def test_load_csv_header_only_is_empty(tmp_path):
    csv_path, meta_path = _write(tmp_path, "field_0,field_1,label\n", [5, 2])
    dataset = load_csv(csv_path, meta_path)
    assert len(dataset) == 0
    assert dataset.field_values.shape == (0, 2)


def test_load_csv_reports_line_of_malformed_row(tmp_path):
    csv_path, meta_path = _write(tmp_path, "field_0,field_1,label\n1,1,0\n2,x,1\n", [5, 2])
    with pytest.raises(ParseError) as excinfo:
        load_csv(csv_path, meta_path)
    assert excinfo.value.line_number == 3


def test_load_csv_line_numbers_count_blank_lines(tmp_path):
    csv_path, meta_path = _write(tmp_path, "field_0,field_1,label\n3,1,0\n\n1,1,1\n9,1,0\n", [5, 2])
    with pytest.raises(ParseError) as excinfo:
        load_csv(csv_path, meta_path)
    assert excinfo.value.line_number == 3

    # trailing blank lines are tolerated and do not shift reported lines
    csv_path, meta_path = _write(tmp_path, "field_0,field_1,label\n3,1,0\n1,1,1\n9,1,0\n\n\n", [5, 2])
    with pytest.raises(ValidationError) as excinfo:
        load_csv(csv_path, meta_path)
    assert "line 4" in str(excinfo.value)

    csv_path, meta_path = _write(tmp_path, "field_0,field_1,label\n3,1,0\n1,1,1\n\n", [5, 2])
    assert load_csv(csv_path, meta_path).labels.tolist() == [0, 1]


def test_load_csv_rejects_bad_header_and_labels(tmp_path):
    csv_path, meta_path = _write(tmp_path, "a,b,label\n1,1,0\n", [5, 2])
    with pytest.raises(ParseError) as excinfo:
        load_csv(csv_path, meta_path)
    assert excinfo.value.line_number == 1

    csv_path, meta_path = _write(tmp_path, "field_0,field_1,label\n1,1,2\n", [5, 2])
    with pytest.raises(ValidationError):
        load_csv(csv_path, meta_path)


def test_missing_files_are_io_errors(tmp_path):
    with pytest.raises(DataIOError):
        load_csv(os.path.join(tmp_path, "nope.csv"), os.path.join(tmp_path, "nope.json"))


def test_save_then_load_round_trip(tmp_path):
    meta = DatasetMeta.uniform(4, 7, 2, zipf_exponent=1.1, seed=3)
    dataset = generate_synthetic(meta, 500)
    csv_path = os.path.join(tmp_path, "d.csv")
    meta_path = os.path.join(tmp_path, "d.json")
    save_csv(dataset, csv_path, meta_path)
    loaded = load_csv(csv_path, meta_path)
    assert loaded.meta == meta
    assert np.array_equal(loaded.field_values, dataset.field_values)
    assert np.array_equal(loaded.labels, dataset.labels)


def test_generation_is_deterministic():
    meta = DatasetMeta.uniform(5, 20, 2, seed=7)
    a = generate_synthetic(meta, 1000)
    b = generate_synthetic(meta, 1000)
    assert a.field_values.tobytes() == b.field_values.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_zipf_exponent_zero_is_uniform():
    cardinality, n = 10, 50_000
    dataset = generate_synthetic(DatasetMeta.uniform(3, cardinality, 1, zipf_exponent=0.0, seed=1), n)
    p = 1.0 / cardinality
    sigma = np.sqrt(n * p * (1 - p))
    for i in range(3):
        counts = np.bincount(dataset.field_values[:, i], minlength=cardinality)
        assert np.all(np.abs(counts - n * p) <= 4 * sigma)


def test_zipf_skews_towards_low_indices():
    dataset = generate_synthetic(DatasetMeta.uniform(1, 50, 1, zipf_exponent=1.2, seed=2), 20_000)
    counts = np.bincount(dataset.field_values[:, 0], minlength=50)
    assert counts[0] > counts[10] > counts[49]


def test_noise_fields_do_not_drive_labels():
    meta = DatasetMeta.uniform(4, 8, 2, zipf_exponent=0.0, seed=4)
    dataset = generate_synthetic(meta, 40_000)
    base = dataset.labels.mean()

    def spread(field_id):
        rates = [dataset.labels[dataset.field_values[:, field_id] == v].mean() for v in range(8)]
        return max(rates) - min(rates)

    assert meta.noise_fields == (2, 3)
    assert min(spread(0), spread(1)) > max(spread(2), spread(3))
    assert 0.05 < base < 0.95


def test_invalid_meta():
    with pytest.raises(ConfigurationError):
        generate_synthetic(DatasetMeta(2, (5, 1)), 10)
    with pytest.raises(ConfigurationError):
        generate_synthetic(DatasetMeta(2, (5, 5), informative_fields=(3,)), 10)
    with pytest.raises(ConfigurationError):
        generate_synthetic(DatasetMeta.uniform(2, 5, 1), 0)


def test_empirical_distribution():
    meta = DatasetMeta(1, (2,))
    dataset = Dataset(np.array([[0], [0], [1]]), np.array([0, 1, 0]), meta)
    p = empirical_distribution(dataset)[0]
    assert p == pytest.approx([2 / 3, 1 / 3])

    single = Dataset(np.array([[1]]), np.array([1]), meta)
    assert empirical_distribution(single)[0].tolist() == [0.0, 1.0]

    with pytest.raises(ValidationError):
        empirical_distribution(Dataset(np.empty((0, 1)), np.empty(0), meta))


def test_empirical_distribution_sums_to_one_and_concentrates():
    dataset = generate_synthetic(DatasetMeta.uniform(3, 20, 1, zipf_exponent=0.0, seed=5), 100_000)
    dist = empirical_distribution(dataset)
    for i in range(3):
        assert abs(dist[i].sum() - 1.0) <= 1e-9
        assert np.max(np.abs(dist[i] - 1 / 20)) <= 0.02


def test_batches_partition_the_dataset():
    meta = DatasetMeta(1, (10,))
    dataset = Dataset(np.arange(10).reshape(-1, 1), np.zeros(10), meta)
    sizes = [len(b) for b in batches(dataset, 4, seed=0)]
    assert sizes == [4, 4, 2]
    seen = np.concatenate([b.field_values[:, 0] for b in batches(dataset, 4, seed=0)])
    assert sorted(seen.tolist()) == list(range(10))
    first = [b.indices.tolist() for b in batches(dataset, 4, seed=1)]
    second = [b.indices.tolist() for b in batches(dataset, 4, seed=1)]
    assert first == second
    with pytest.raises(ConfigurationError):
        next(batches(dataset, 0, seed=0))


def test_train_test_split_is_a_partition():
    dataset = generate_synthetic(DatasetMeta.uniform(2, 5, 1, seed=0), 1000)
    train, test = train_test_split(dataset, 0.2, seed=0)
    assert len(train) == 800 and len(test) == 200
    merged = np.concatenate([train.field_values, test.field_values])
    assert sorted(map(tuple, merged.tolist())) == sorted(map(tuple, dataset.field_values.tolist()))


def test_datasets_are_immutable():
    dataset = generate_synthetic(DatasetMeta.uniform(2, 5, 1, seed=0), 10)
    with pytest.raises(ValueError):
        dataset.field_values[0, 0] = 1


def test_subset_and_with_field_values_build_new_datasets():
    meta = DatasetMeta(2, (4, 3))
    dataset = Dataset([[0, 0], [1, 2], [3, 1]], [0, 1, 1], meta)

    picked = dataset.subset([2, 0])
    assert [s.field_values for s in picked.samples()] == [[3, 1], [0, 0]]
    assert picked.labels.tolist() == [1, 0]
    assert picked.meta is meta

    swapped = dataset.with_field_values(np.array([[2, 0], [2, 0], [2, 0]]))
    assert swapped.labels.tolist() == dataset.labels.tolist()
    assert swapped.field_values[:, 0].tolist() == [2, 2, 2]
    assert dataset.field_values[1].tolist() == [1, 2]
    with pytest.raises(ValidationError):
        dataset.with_field_values(np.array([[0, 3], [0, 0], [0, 0]]))


if __name__ == "__main__":
    sys.exit(run_test_module(globals(), "Dataset Tests"))
