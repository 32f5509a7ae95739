"""Collects one verdict line per acceptance criterion for the terminal summary."""

LINES: list[str] = []


def report(name: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    LINES.append(line)
    print(line)
