"""
Database Fallback Module (db_fallback.py)

In-process run registry used when no database URL is configured or the
database is unreachable. Reports live only as long as the process does.
"""

import copy
import datetime
import logging
import os
from typing import Any, Dict, List, Optional

# Configure logging for this module
logger = logging.getLogger("db_fallback")
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(os.environ.get("LOG_LEVEL", "WARNING").upper())
    logger.propagate = False

_RUNS: List[Dict[str, Any]] = []


def save_run_report(report: Dict[str, Any]) -> str:
    """
    Keep a run report in memory.

    Args:
        report (dict): Run report; must carry a "run_id".

    Returns:
        str: The run id.
    """
    entry = copy.deepcopy(report)
    entry.setdefault("timestamp", datetime.datetime.utcnow().isoformat())
    _RUNS.append(entry)
    logger.debug(f"Stored run {report['run_id']} in the in-process registry ({len(_RUNS)} runs).")
    return report["run_id"]


def get_recent_runs(limit: int = 10, command: Optional[str] = None) -> List[Dict[str, Any]]:
    runs = [r for r in _RUNS if command is None or r.get("command") == command]
    out = []
    for report in reversed(runs[-limit:] if limit else []):
        metrics = report.get("metrics") or {}
        out.append({
            "run_id": report["run_id"],
            "command": report.get("command"),
            "timestamp": report.get("timestamp"),
            "status": report.get("status"),
            "auc": metrics.get("auc"),
            "logloss": metrics.get("logloss"),
            "memory_ratio": (report.get("memory") or {}).get("ratio"),
            "wall_time_s": report.get("wall_time_s"),
        })
    return out


def get_run_report(run_id: str) -> Optional[Dict[str, Any]]:
    for report in _RUNS:
        if report["run_id"] == run_id:
            return copy.deepcopy(report)
    return None


def clear() -> None:
    _RUNS.clear()
