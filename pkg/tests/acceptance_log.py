"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

LINES = []


def record(number: int, passed: bool, detail: str) -> bool:
    LINES.append((number, f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"))
    return passed
