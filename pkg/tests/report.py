"""Collects one verdict line per acceptance criterion for the end-of-session summary."""

LINES: list[str] = []


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line, flush=True)
