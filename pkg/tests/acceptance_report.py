"""Collects one verdict line per acceptance criterion during a test session."""
import sys

_results: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    _results[number] = (passed, detail)
    # also visible with -s or when run as a script
    print(format_line(number), file=sys.stderr)


def format_line(number: int) -> str:
    passed, detail = _results[number]
    return f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"


def lines() -> list[str]:
    return [format_line(n) for n in sorted(_results)]
