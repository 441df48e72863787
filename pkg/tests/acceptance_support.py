"""Verdict collection for the acceptance suite.

Each acceptance test records exactly one line; the conftest terminal-summary
hook replays them at the end of the run so the verdicts stay visible even
when stdout capture is on.
"""

LINES = []


def record(number: int, name: str, passed: bool, detail: str) -> str:
    verdict = "PASS" if passed else "FAIL"
    line = f"criterion {number:2d} {name:<22} {verdict}  {detail}"
    LINES.append(line)
    print(line, flush=True)
    return line
