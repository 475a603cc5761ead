import json
import os
import sys

import numpy as np
import pandas as pd

import db_fallback
from cli import main, sweep_points
from console import run_test_module
from dataset import DatasetMeta
from errors import (EXIT_CONFIG, EXIT_FORMAT, EXIT_IO, EXIT_METRIC, EXIT_OK, EXIT_ORACLE, EXIT_VALIDATION)

SMALL_MODEL = ["--set", "model.hidden_dims=[8]", "--set", "model.embedding_dim=4", "--set", "train.batch_size=64"]

# one FP32 row [1, -2] and one INT8 row [127, -63] in a single table with t8=1, t16=2
GOLDEN_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures", "golden.shrk")
with open(GOLDEN_PATH, "rb") as _f:
    GOLDEN = _f.read()


def _gen_data(out_dir, cardinality=6):
    argv = ["gen-data", "--out-dir", out_dir, "--n-samples", "600", "--n-fields", "4", "--informative", "2",
            "--cardinality", str(cardinality), "--seed", "3"]
    assert main(argv) == EXIT_OK
    return out_dir


def _read_report(path):
    with open(path) as f:
        return json.load(f)


def test_gen_data_is_deterministic(tmp_path):
    a = _gen_data(os.path.join(tmp_path, "a"))
    b = _gen_data(os.path.join(tmp_path, "b"))
    for name in ("train.csv", "test.csv", "meta.json"):
        with open(os.path.join(a, name), "rb") as f_a, open(os.path.join(b, name), "rb") as f_b:
            assert f_a.read() == f_b.read()
    report = _read_report(os.path.join(a, "gen-data.report.json"))
    assert report["details"]["train_samples"] == 480
    assert report["details"]["test_samples"] == 120
    meta = DatasetMeta.load(os.path.join(a, "meta.json"))
    assert meta.cardinalities == (6, 6, 6, 6)
    assert meta.informative_fields == (0, 1)
    assert list(pd.read_csv(os.path.join(a, "train.csv")).columns) == ["field_0", "field_1", "field_2", "field_3",
                                                                      "label"]


def test_train_score_prune_eval_pipeline(tmp_path):
    data = _gen_data(os.path.join(tmp_path, "data"))
    fp32 = os.path.join(tmp_path, "runs", "fp32.npz")
    assert main(["train", "--data", data, "--mode", "fp32", "--out", fp32, "--epochs", "2"] + SMALL_MODEL) == EXIT_OK
    report = _read_report(os.path.join(tmp_path, "runs", "fp32.train.report.json"))
    assert 0.0 <= report["metrics"]["auc"] <= 1.0
    assert report["details"]["tiers"] == {"FP32": 24, "FP16": 0, "INT8": 0}
    assert report["memory"]["payload_ratio"] == 1.0
    assert os.path.exists(os.path.join(tmp_path, "runs", "fp32.shrk"))

    score_report = os.path.join(tmp_path, "score.json")
    assert main(["score", "--checkpoint", fp32, "--data", data, "--oracle", "exact",
                 "--report", score_report]) == EXIT_OK
    score = _read_report(score_report)
    assert score["passes"]["sample_visits"] == 3 * 120
    assert sorted(score["details"]["taylor"]["ranked"]) == [0, 1, 2, 3]
    assert set(score["details"]["oracle"]["scores"]) == {"0", "1", "2", "3"}

    noop = os.path.join(tmp_path, "runs", "noop.npz")
    assert main(["prune", "--checkpoint", fp32, "--data", data, "--out", noop, "--rate-c", "1.0"]) == EXIT_OK
    prune = _read_report(os.path.join(tmp_path, "runs", "noop.prune.report.json"))
    assert prune["status"] == "TARGET_REACHED"
    assert prune["iterations"] == []

    pruned = os.path.join(tmp_path, "runs", "pruned.npz")
    charts = os.path.join(tmp_path, "charts")
    assert main(["prune", "--checkpoint", fp32, "--data", data, "--out", pruned, "--rate-c", "0.5",
                 "--t-accuracy", "0.5", "--save-iterations", os.path.join(tmp_path, "iters"),
                 "--charts", charts]) == EXIT_OK
    prune = _read_report(os.path.join(tmp_path, "runs", "pruned.prune.report.json"))
    assert prune["status"] == "TARGET_REACHED"
    assert len(prune["iterations"]) == 2
    assert len(prune["details"]["deleted_fields"]) == 2
    assert prune["memory"]["payload_ratio"] == 0.5
    assert len(prune["artifacts"]["iterations"]) == 2
    assert os.path.exists(os.path.join(charts, "prune_progress.html"))
    pruned_inspect = os.path.join(tmp_path, "pruned-inspect.json")
    assert main(["inspect", os.path.join(tmp_path, "runs", "pruned.shrk"), "--report", pruned_inspect]) == EXIT_OK
    inspected = _read_report(pruned_inspect)["memory"]
    assert inspected["payload_ratio"] == prune["memory"]["payload_ratio"]
    assert inspected["baseline_bytes"] == prune["memory"]["baseline_bytes"]

    combined = os.path.join(tmp_path, "runs", "combined.npz")
    assert main(["train", "--data", data, "--mode", "mixed", "--init", pruned, "--out", combined,
                 "--epochs", "1", "--t8", "20", "--t16", "60"] + SMALL_MODEL) == EXIT_OK
    report = _read_report(os.path.join(tmp_path, "runs", "combined.train.report.json"))
    assert report["details"]["active_fields"] == [f for f in range(4) if f not in prune["details"]["deleted_fields"]]
    assert sum(report["details"]["tiers"].values()) == 12
    assert report["memory"]["payload_ratio"] <= 0.5

    eval_report = os.path.join(tmp_path, "eval.json")
    assert main(["eval", "--checkpoint", combined, "--data", data, "--report", eval_report]) == EXIT_OK
    assert _read_report(eval_report)["metrics"]["auc"] == report["metrics"]["auc"]
    again = os.path.join(tmp_path, "eval-again.json")
    assert main(["eval", "--checkpoint", combined, "--data", data, "--report", again]) == EXIT_OK
    assert _read_report(again)["metrics"] == _read_report(eval_report)["metrics"]

    inspect_report = os.path.join(tmp_path, "inspect.json")
    assert main(["inspect", os.path.join(tmp_path, "runs", "combined.shrk"), "--report", inspect_report]) == EXIT_OK
    assert _read_report(inspect_report)["details"]["tiers"] == report["details"]["tiers"]

    assert main(["runs", "--limit", "3"]) == EXIT_OK


def test_inspect_golden_store(tmp_path):
    path = os.path.join(tmp_path, "golden.shrk")
    with open(path, "wb") as f:
        f.write(GOLDEN)
    report_path = os.path.join(tmp_path, "inspect.json")
    assert main(["inspect", path, "--report", report_path]) == EXIT_OK
    report = _read_report(report_path)
    assert report["details"]["tiers"] == {"FP32": 1, "FP16": 0, "INT8": 1}
    assert report["memory"]["payload_bytes"] == 10
    assert report["memory"]["extra_word_bytes"] == 14
    assert report["memory"]["baseline_bytes"] == 16

    run = db_fallback.get_run_report(report["run_id"]) if report["run_id"] else None
    assert run is None or run["command"] == "inspect"


def test_exit_codes(tmp_path):
    corrupted = bytearray(GOLDEN)
    corrupted[37] = 3
    bad_store = os.path.join(tmp_path, "bad.shrk")
    with open(bad_store, "wb") as f:
        f.write(bytes(corrupted))
    assert main(["inspect", bad_store]) == EXIT_FORMAT
    truncated = os.path.join(tmp_path, "short.shrk")
    with open(truncated, "wb") as f:
        f.write(GOLDEN[:-1])
    assert main(["inspect", truncated]) == EXIT_FORMAT
    assert main(["inspect", os.path.join(tmp_path, "missing.shrk")]) == EXIT_IO
    assert main(["eval", "--checkpoint", os.path.join(tmp_path, "x.npz"), "--data", str(tmp_path)]) == EXIT_IO
    assert main(["gen-data", "--out-dir", os.path.join(tmp_path, "d"), "--set", "store.t8=oops"]) == EXIT_CONFIG
    assert main(["gen-data", "--out-dir", os.path.join(tmp_path, "d"), "--set", "nosuch.field=1"]) == EXIT_CONFIG

    data = os.path.join(tmp_path, "bad-data")
    os.makedirs(data)
    DatasetMeta(2, (3, 3)).save(os.path.join(data, "meta.json"))
    for name in ("train.csv", "test.csv"):
        with open(os.path.join(data, name), "w") as f:
            f.write("field_0,field_1,label\n1,7,0\n")
    out = os.path.join(tmp_path, "m.npz")
    assert main(["train", "--data", data, "--out", out] + SMALL_MODEL) == EXIT_VALIDATION


def test_single_class_eval_and_oracle_refusal(tmp_path):
    data = _gen_data(os.path.join(tmp_path, "data"), cardinality=300)
    checkpoint = os.path.join(tmp_path, "m.npz")
    assert main(["train", "--data", data, "--out", checkpoint, "--epochs", "0"] + SMALL_MODEL) == EXIT_OK
    assert main(["score", "--checkpoint", checkpoint, "--data", data, "--oracle", "exact"]) == EXIT_ORACLE
    assert main(["score", "--checkpoint", checkpoint, "--data", data, "--oracle", "shuffle", "--T", "2"]) == EXIT_OK

    one_class = os.path.join(tmp_path, "one-class")
    os.makedirs(one_class)
    test = pd.read_csv(os.path.join(data, "test.csv"))
    test["label"] = np.ones(len(test), dtype=int)
    test.to_csv(os.path.join(one_class, "test.csv"), index=False)
    test.to_csv(os.path.join(one_class, "train.csv"), index=False)
    DatasetMeta.load(os.path.join(data, "meta.json")).save(os.path.join(one_class, "meta.json"))
    assert main(["eval", "--checkpoint", checkpoint, "--data", one_class]) == EXIT_METRIC


def test_sweep_points():
    points = sweep_points([0.0, 100.0], [1000.0])
    assert points == [
        {"sweep": "t8", "t8": 0.0, "t16": 0.0},
        {"sweep": "t8", "t8": 100.0, "t16": 100.0},
        {"sweep": "t16", "t8": 0.0, "t16": 1000.0},
    ]


def test_sweep_command(tmp_path):
    data = _gen_data(os.path.join(tmp_path, "data"))
    report_path = os.path.join(tmp_path, "sweep.json")
    assert main(["sweep", "--data", data, "--t8", "0", "1000000", "--t16", "1000000", "--epochs", "1",
                 "--report", report_path] + SMALL_MODEL) == EXIT_OK
    points = _read_report(report_path)["details"]["points"]
    assert len(points) == 3
    # t8 = t16 = 0 keeps everything at FP32, a huge t8 pushes everything to INT8
    assert points[0]["tiers"]["FP32"] == 24
    assert points[1]["tiers"]["INT8"] == 24
    assert points[1]["payload_ratio"] == 0.25
    assert points[2]["tiers"]["FP16"] == 24
    assert points[2]["payload_ratio"] == 0.5


if __name__ == "__main__":
    sys.exit(run_test_module(globals(), "Command Line Tests"))
