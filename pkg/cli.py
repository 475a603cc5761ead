"""
SHARK Command Line (cli.py)

    python cli.py gen-data --out-dir data/
    python cli.py train    --data data/ --mode fp32  --out runs/fp32.npz
    python cli.py score    --checkpoint runs/fp32.npz --data data/ --oracle shuffle --T 5
    python cli.py prune    --checkpoint runs/fp32.npz --data data/ --out runs/pruned.npz
    python cli.py train    --data data/ --mode mixed --init runs/pruned.npz --out runs/combined.npz
    python cli.py eval     --checkpoint runs/combined.npz --data data/
    python cli.py inspect  runs/combined.shrk
    python cli.py sweep    --data data/ --t8 0 100 1000 --t16 1000 100000
    python cli.py runs

Every command prints a human summary, writes a JSON run report (--report,
default next to the main artifact) and records it in the run registry.
Settings come from --config FILE, SHARK_<SECTION>__<FIELD> environment
variables and --set section.field=value, in increasing precedence.

--single-thread (or SHARK_SINGLE_THREAD=1) pins the BLAS thread pools to one
thread; floating-point results are only bit-reproducible in that mode.
"""

import os
import sys

if "--single-thread" in sys.argv or os.environ.get("SHARK_SINGLE_THREAD", "").lower() in ("1", "true", "yes"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = "1"

import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import database
import report_charts
from config import RunConfig, load_config
from console import print_error, print_header, print_info, print_stat, print_success, print_warning
from dataset import Dataset, DatasetMeta, generate_synthetic, load_csv, save_csv, train_test_split
from errors import EXIT_OK, EXIT_UNEXPECTED, ConfigurationError, DataIOError, SharkError
from model import ModelState, evaluate, fit, load_checkpoint, save_checkpoint, store_path_for
from quantizer import RoundingMode
from selection import (PassCounter, PruneIteration, permutation_error_exact, permutation_error_shuffle,
                       prune_loop, spearman, taylor_scores)
from store import EmbeddingStore

# Configure logging
logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(module)s - %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(os.environ.get("LOG_LEVEL", "INFO").upper())
    logger.propagate = False

TRAIN_CSV = "train.csv"
TEST_CSV = "test.csv"
META_JSON = "meta.json"
MODES = ("fp32", "mixed")
ORACLES = ("none", "exact", "shuffle")


@dataclass
class RunReport:
    command: str
    config: Dict[str, Any]
    status: str = "OK"
    metrics: Dict[str, float] = field(default_factory=dict)
    memory: Dict[str, Any] = field(default_factory=dict)
    iterations: List[Dict[str, Any]] = field(default_factory=list)
    passes: Dict[str, int] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)
    details: Dict[str, Any] = field(default_factory=dict)
    wall_time_s: float = 0.0
    run_id: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _to_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def write_report(report: RunReport, path: str) -> str:
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w") as f:
            json.dump(_to_jsonable(report.to_dict()), f, indent=2)
    except OSError as e:
        raise DataIOError(f"Could not write report '{path}': {e}") from e
    return path


# --- Data helpers ---
def load_splits(data_dir: str) -> Tuple[Dataset, Dataset]:
    meta_path = os.path.join(data_dir, META_JSON)
    train = load_csv(os.path.join(data_dir, TRAIN_CSV), meta_path)
    test = load_csv(os.path.join(data_dir, TEST_CSV), meta_path)
    return train, test


def _ensure_parent(path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        try:
            os.makedirs(directory, exist_ok=True)
        except OSError as e:
            raise DataIOError(f"Could not create directory '{directory}': {e}") from e


def _memory(state: ModelState, config: RunConfig) -> Dict[str, Any]:
    return state.store.memory_report(include_scores=config.store.include_scores).to_dict()


# --- Commands ---
def cmd_gen_data(config: RunConfig, out_dir: str) -> RunReport:
    d = config.dataset
    meta = DatasetMeta(d.n_fields, tuple(d.resolved_cardinalities()), tuple(range(d.n_informative)),
                       d.zipf_exponent, config.seed)
    dataset = generate_synthetic(meta, d.n_samples)
    train, test = train_test_split(dataset, d.test_fraction, config.seed)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"Could not create '{out_dir}': {e}") from e
    meta_path = os.path.join(out_dir, META_JSON)
    save_csv(train, os.path.join(out_dir, TRAIN_CSV), meta_path)
    save_csv(test, os.path.join(out_dir, TEST_CSV), meta_path)
    return RunReport(
        "gen-data", config.to_dict(),
        artifacts={"train": os.path.join(out_dir, TRAIN_CSV), "test": os.path.join(out_dir, TEST_CSV),
                   "meta": meta_path},
        details={"train_samples": len(train), "test_samples": len(test),
                 "positive_rate": float(dataset.labels.mean()), "meta": meta.to_dict()},
    )


def _prepare_state(config: RunConfig, mode: str, cardinalities: Sequence[int],
                   init_checkpoint: Optional[str]) -> ModelState:
    mixed = mode == "mixed"
    t8, t16 = (config.store.t8, config.store.t16) if mixed else (0.0, 0.0)
    rounding = config.rounding_mode(offset=1) if mixed else RoundingMode.nearest()
    if init_checkpoint is None:
        return ModelState.initialize(config.model, cardinalities, t8, t16, config.scale_policy(), rounding,
                                     config.priority.alpha, config.priority.beta, config.priority.decay_untouched)
    state = load_checkpoint(init_checkpoint)
    if list(state.cardinalities) != list(cardinalities):
        raise ConfigurationError("Checkpoint cardinalities do not match the dataset meta")
    state.store.set_thresholds(t8, t16)
    state.store.set_rounding(rounding)
    state.store.configure_priority(config.priority.alpha, config.priority.beta, config.priority.decay_untouched)
    # rows follow the new thresholds right away
    state.store.retier_all()
    return state


def cmd_train(config: RunConfig, data_dir: str, mode: str, out: str,
              init_checkpoint: Optional[str] = None) -> RunReport:
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got '{mode}'")
    train, test = load_splits(data_dir)
    state = _prepare_state(config, mode, train.meta.cardinalities, init_checkpoint)
    t = config.train
    log = fit(state, train, epochs=t.epochs, batch_size=t.batch_size, seed=config.seed,
              track_priority=mode == "mixed", retier_every=t.retier_every)
    metrics = evaluate(state, test)
    _ensure_parent(out)
    store_file = save_checkpoint(state, out)
    return RunReport(
        "train", config.to_dict(),
        metrics=metrics, memory=_memory(state, config),
        artifacts={"checkpoint": out, "store": store_file},
        details={"mode": mode, "init_checkpoint": init_checkpoint, "train_log": log.to_dict(),
                 "tiers": state.store.tier_histogram(), "active_fields": state.active_fields},
    )


def cmd_score(config: RunConfig, checkpoint: str, data_dir: str, oracle: str = "none", T: int = 10,
              source: Optional[str] = None) -> RunReport:
    if oracle not in ORACLES:
        raise ConfigurationError(f"oracle must be one of {ORACLES}, got '{oracle}'")
    state = load_checkpoint(checkpoint)
    train, test = load_splits(data_dir)
    source = source or config.selection.expectation_source
    dataset = test if source == "test" else train

    counter = PassCounter()
    scores = taylor_scores(state, dataset, counter=counter)
    details: Dict[str, Any] = {"source": source, "taylor": scores.to_dict()}
    if oracle != "none":
        oracle_scores = {}
        for field_id, _ in scores.scores:
            if oracle == "exact":
                oracle_scores[field_id] = permutation_error_exact(state, dataset, field_id)
            else:
                oracle_scores[field_id] = permutation_error_shuffle(state, dataset, field_id, T, config.seed)
        fields = [f for f, _ in scores.scores]
        details["oracle"] = {"kind": oracle, "T": T if oracle == "shuffle" else None,
                             "scores": {str(f): s for f, s in oracle_scores.items()}}
        details["spearman"] = spearman([scores.score_of(f) for f in fields], [oracle_scores[f] for f in fields])
    return RunReport("score", config.to_dict(), passes=counter.to_dict(),
                     artifacts={"checkpoint": checkpoint}, details=details)


def cmd_prune(config: RunConfig, checkpoint: str, data_dir: str, out: str,
              save_iterations: Optional[str] = None) -> RunReport:
    state = load_checkpoint(checkpoint)
    train, test = load_splits(data_dir)
    counter = PassCounter()
    saved: List[str] = []

    def keep_iteration(iteration: PruneIteration, current: ModelState) -> None:
        if save_iterations:
            path = os.path.join(save_iterations, f"iteration_{iteration.iteration:03d}.npz")
            _ensure_parent(path)
            save_checkpoint(current, path)
            saved.append(path)

    result = prune_loop(state, train, test, config.selection, counter=counter, on_iteration=keep_iteration)
    metrics = evaluate(result.state, test)
    _ensure_parent(out)
    store_file = save_checkpoint(result.state, out)
    prune = result.to_dict()
    return RunReport(
        "prune", config.to_dict(), status=result.status,
        metrics=metrics, memory=_memory(result.state, config),
        iterations=prune.pop("iterations"), passes=counter.to_dict(),
        artifacts={"checkpoint": out, "store": store_file, "iterations": saved},
        details=prune,
    )


def cmd_eval(config: RunConfig, checkpoint: str, data_dir: str, split: str = "test") -> RunReport:
    state = load_checkpoint(checkpoint)
    train, test = load_splits(data_dir)
    metrics = evaluate(state, test if split == "test" else train)
    return RunReport("eval", config.to_dict(), metrics=metrics, memory=_memory(state, config),
                     artifacts={"checkpoint": checkpoint}, details={"split": split})


def cmd_inspect(config: RunConfig, store_file: str) -> RunReport:
    store = EmbeddingStore.load(store_file)
    memory = store.memory_report(include_scores=False).to_dict()
    return RunReport("inspect", config.to_dict(), memory=memory, artifacts={"store": store_file},
                     details={"tiers": store.tier_histogram(), "tables": len(store.tables)})


def sweep_points(t8_values: Sequence[float], t16_values: Sequence[float]) -> List[Dict[str, Any]]:
    """t8 sweep runs with t16 = t8 (rows are INT8 or FP32); t16 sweep runs with t8 = 0 (FP16 or FP32)."""
    points = [{"sweep": "t8", "t8": float(v), "t16": float(v)} for v in t8_values]
    points += [{"sweep": "t16", "t8": 0.0, "t16": float(v)} for v in t16_values]
    return points


def cmd_sweep(config: RunConfig, data_dir: str, t8_values: Sequence[float],
              t16_values: Sequence[float]) -> RunReport:
    train, test = load_splits(data_dir)
    t = config.train
    results = []
    reference = ModelState.initialize(config.model, train.meta.cardinalities)
    fit(reference, train, epochs=t.epochs, batch_size=t.batch_size, seed=config.seed)
    fp32 = evaluate(reference, test)

    for point in sweep_points(t8_values, t16_values):
        state = ModelState.initialize(config.model, train.meta.cardinalities, point["t8"], point["t16"],
                                      config.scale_policy(), config.rounding_mode(offset=1),
                                      config.priority.alpha, config.priority.beta,
                                      config.priority.decay_untouched)
        fit(state, train, epochs=t.epochs, batch_size=t.batch_size, seed=config.seed,
            track_priority=True, retier_every=t.retier_every)
        metrics = evaluate(state, test)
        memory = state.store.memory_report()
        point.update(auc=metrics["auc"], logloss=metrics["logloss"],
                     memory_ratio=memory.ratio, payload_ratio=memory.payload_ratio,
                     tiers=state.store.tier_histogram())
        results.append(point)
        logger.info(f"Sweep {point['sweep']} t8={point['t8']:g} t16={point['t16']:g}: "
                    f"AUC {metrics['auc']:.5f}, memory {memory.ratio:.3f}")
    return RunReport("sweep", config.to_dict(), metrics=fp32, details={"fp32": fp32, "points": results})


def cmd_runs(limit: int = 10, command: Optional[str] = None, run_id: Optional[str] = None) -> List[Dict[str, Any]]:
    if run_id:
        report = database.get_run_report(run_id)
        return [report] if report else []
    return database.get_recent_runs(limit, command)


# --- Output ---
def _summarize(report: RunReport) -> None:
    print_header(f"shark {report.command}")
    for key, value in report.metrics.items():
        print_stat(key, f"{value:.6f}")
    if report.memory:
        print_stat("memory ratio", f"{report.memory['ratio']:.4f}")
        print_stat("payload ratio", f"{report.memory['payload_ratio']:.4f}")
        print_stat("payload bytes", f"{report.memory['payload_bytes']:,}")
        print_stat("extra-word bytes", f"{report.memory['extra_word_bytes']:,}")
    if "tiers" in report.details:
        print_stat("tiers", report.details["tiers"])
    if report.command == "score":
        ranked = report.details["taylor"]["ranked"]
        scores = report.details["taylor"]["scores"]
        for field_id in ranked:
            line = f"{scores[str(field_id)]:+.6e}"
            if "oracle" in report.details:
                line += f"   oracle {report.details['oracle']['scores'][str(field_id)]:+.6e}"
            print_stat(f"field {field_id}", line)
        if "spearman" in report.details:
            print_stat("spearman", f"{report.details['spearman']:.4f}")
        print_stat("passes", report.passes)
    if report.command == "prune":
        for it in report.iterations:
            marker = "" if it["above_floor"] else "  (rolled back)"
            print_stat(f"iteration {it['iteration']}",
                       f"deleted {it['deleted_fields']}  auc {it['auc']:.5f}  memory {it['memory_ratio']:.3f}{marker}")
        print_stat("status", report.status)
    if report.command == "sweep":
        table = report_charts.create_sweep_table(report.details["points"])
        if table is not None:
            print(table.to_string(index=False))
    if report.command == "gen-data":
        for key, value in report.details.items():
            if key != "meta":
                print_stat(key, value)
    for key, value in report.artifacts.items():
        if value:
            print_stat(key, value)


def _write_charts(report: RunReport, directory: str) -> List[str]:
    figures = []
    if "tiers" in report.details:
        figures.append(("tiers", report_charts.create_tier_histogram(report.details["tiers"])))
    if report.command == "prune":
        prune = dict(report.details, iterations=report.iterations)
        figures.append(("prune_progress", report_charts.create_prune_progress_chart(prune)))
    if report.command == "sweep":
        figures.append(("threshold_sweep", report_charts.create_sweep_chart(report.details["points"])))
    return [report_charts.write_figure(fig, directory, name) for name, fig in figures if fig is not None]


def _default_report_path(args: argparse.Namespace) -> str:
    base = getattr(args, "out", None) or getattr(args, "checkpoint", None) or getattr(args, "store_file", None)
    if base:
        return os.path.splitext(base)[0] + f".{args.command}.report.json"
    directory = getattr(args, "out_dir", None) or getattr(args, "data", None) or "."
    return os.path.join(directory, f"{args.command}.report.json")


# --- Argument parsing ---
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (also seeds the model and the prune loop)")
    common.add_argument("--report", help="where to write the JSON run report")
    common.add_argument("--charts", metavar="DIR", help="write plotly HTML charts to DIR")
    common.add_argument("--single-thread", action="store_true", help="single-threaded BLAS for bit-exact reruns")

    parser = argparse.ArgumentParser(prog="shark", description="Embedding table pruning and mixed-precision toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic categorical CTR dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--n-fields", type=int)
    p.add_argument("--informative", type=int)
    p.add_argument("--cardinality", type=int)
    p.add_argument("--zipf", type=float)

    p = sub.add_parser("train", parents=[common], help="train a model (fp32 or mixed precision)")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=MODES, default="fp32")
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="continue from this checkpoint (e.g. a pruned model)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--t8", type=float)
    p.add_argument("--t16", type=float)

    p = sub.add_parser("score", parents=[common], help="Taylor field scores, optionally against an oracle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--oracle", choices=ORACLES, default="none")
    p.add_argument("--T", type=int, default=10, help="shuffle rounds for --oracle shuffle")
    p.add_argument("--source", choices=("test", "train"))

    p = sub.add_parser("prune", parents=[common], help="iteratively delete the least important fields")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--f", type=int)
    p.add_argument("--rate-c", type=float)
    p.add_argument("--t-accuracy", type=float)
    p.add_argument("--save-iterations", metavar="DIR")

    p = sub.add_parser("eval", parents=[common], help="AUC and logloss of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")

    p = sub.add_parser("inspect", parents=[common], help="tier histogram and memory report of a store file")
    p.add_argument("store_file")

    p = sub.add_parser("sweep", parents=[common], help="threshold ablation in mixed mode")
    p.add_argument("--data", required=True)
    p.add_argument("--t8", type=float, nargs="*", default=[0.0, 100.0, 1000.0, 10000.0])
    p.add_argument("--t16", type=float, nargs="*", default=[1000.0, 100000.0])
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("runs", help="list recorded runs")
    p.add_argument("--limit", type=int, default=10)
    p.add_argument("--filter", dest="filter_command")
    p.add_argument("--show", metavar="RUN_ID")
    return parser


FLAG_SETTINGS = {
    "n_samples": "dataset.n_samples",
    "n_fields": "dataset.n_fields",
    "informative": "dataset.n_informative",
    "cardinality": "dataset.cardinality",
    "zipf": "dataset.zipf_exponent",
    "epochs": "train.epochs",
    "t8": "store.t8",
    "t16": "store.t16",
    "f": "selection.f",
    "rate_c": "selection.rate_c",
    "t_accuracy": "selection.t_accuracy",
}


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"seed={args.seed}", f"model.seed={args.seed}", f"selection.seed={args.seed}"]
    if args.single_thread:
        overrides.append("single_thread=true")
    for flag, setting in FLAG_SETTINGS.items():
        value = getattr(args, flag, None)
        # sweep takes lists for --t8/--t16; those are not single settings
        if value is not None and not isinstance(value, list):
            overrides.append(f"{setting}={value}")
    return load_config(args.config, overrides)


def run(args: argparse.Namespace) -> int:
    if args.command == "runs":
        rows = cmd_runs(args.limit, args.filter_command, args.show)
        if args.show:
            if not rows:
                print_warning(f"No run with id {args.show}")
                return EXIT_OK
            print(json.dumps(rows[0], indent=2, default=str))
        elif rows:
            print(pd.DataFrame(rows).to_string(index=False))
        else:
            print_info("No runs recorded yet.")
        return EXIT_OK

    config = config_from_args(args)
    started = time.time()
    if args.command == "gen-data":
        report = cmd_gen_data(config, args.out_dir)
    elif args.command == "train":
        report = cmd_train(config, args.data, args.mode, args.out, args.init)
    elif args.command == "score":
        report = cmd_score(config, args.checkpoint, args.data, args.oracle, args.T, args.source)
    elif args.command == "prune":
        report = cmd_prune(config, args.checkpoint, args.data, args.out, args.save_iterations)
    elif args.command == "eval":
        report = cmd_eval(config, args.checkpoint, args.data, args.split)
    elif args.command == "inspect":
        report = cmd_inspect(config, args.store_file)
    else:
        report = cmd_sweep(config, args.data, args.t8, args.t16)
    report.wall_time_s = time.time() - started

    report.run_id = database.save_run_report(_to_jsonable(report.to_dict()))
    if args.charts:
        report.artifacts["charts"] = ", ".join(_write_charts(report, args.charts))
    report_path = write_report(report, args.report or _default_report_path(args))
    _summarize(report)
    print_success(f"Report written to {report_path} (run {report.run_id})")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except SharkError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print_error(str(e))
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        print_error(f"Unexpected error: {e}")
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
