"""
Console Output Helpers (console.py)

ANSI-coloured status lines shared by the command line and by the test files
when they run as plain scripts.
"""

import inspect
import logging
import sys
import tempfile
import traceback
from typing import Any, Callable, Dict, List, Tuple


class Colors:
    HEADER = '\033[95m'
    OKBLUE = '\033[94m'
    OKCYAN = '\033[96m'
    OKGREEN = '\033[92m'
    WARNING = '\033[93m'
    FAIL = '\033[91m'
    ENDC = '\033[0m'
    BOLD = '\033[1m'


def print_header(message: str):
    print(f"\n{Colors.HEADER}{Colors.BOLD}===== {message} ====={Colors.ENDC}")


def print_success(message: str):
    print(f"{Colors.OKGREEN}[SUCCESS] {message}{Colors.ENDC}")


def print_failure(message: str):
    print(f"{Colors.FAIL}[FAILURE] {message}{Colors.ENDC}")


def print_error(message: str):
    print(f"{Colors.FAIL}[ERROR] {message}{Colors.ENDC}", file=sys.stderr)


def print_warning(message: str):
    print(f"{Colors.WARNING}[WARNING] {message}{Colors.ENDC}")


def print_info(message: str):
    print(f"{Colors.OKBLUE}[INFO] {message}{Colors.ENDC}")


def print_stat(label: str, value: Any):
    print(f"  {Colors.OKCYAN}{label:<24}{Colors.ENDC} {value}")


def run_test_module(namespace: Dict[str, Any], title: str) -> int:
    """Run every `test_*` function of a test file outside pytest and print a summary.

    Functions taking a `tmp_path` argument get a fresh temporary directory; functions
    carrying a true `skipif` mark are skipped.
    Returns a process exit code.
    """
    from pathlib import Path

    logging.getLogger().setLevel(logging.WARNING)
    tests: List[Tuple[str, Callable]] = [
        (name, fn) for name, fn in namespace.items() if name.startswith("test_") and callable(fn)
    ]
    print_header(title)
    results: Dict[str, bool] = {}
    for name, fn in tests:
        skip = [m for m in getattr(fn, "pytestmark", []) if m.name == "skipif" and m.args and m.args[0]]
        if skip:
            print_warning(f"{name} skipped: {skip[0].kwargs.get('reason', '')}")
            continue
        try:
            if "tmp_path" in inspect.signature(fn).parameters:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(Path(tmp))
            else:
                fn()
            results[name] = True
        except Exception:
            results[name] = False
            print_failure(f"{name}\n{traceback.format_exc()}")

    print_header("Test Summary")
    for name, passed in results.items():
        label = name.replace('_', ' ').title()
        if passed:
            print_success(f"{label}: PASSED")
        else:
            print_failure(f"{label}: FAILED")
    if all(results.values()):
        print_success(f"{Colors.BOLD}All {len(results)} tests passed successfully!{Colors.ENDC}")
        return 0
    print_failure(f"{Colors.BOLD}{sum(not ok for ok in results.values())} of {len(results)} tests failed.{Colors.ENDC}")
    return 1
