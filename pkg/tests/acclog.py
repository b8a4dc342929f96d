"""Collects one verdict line per acceptance criterion for the terminal summary."""

LINES: dict[int, str] = {}


def record(number: int, title: str, checks: dict, seconds: float) -> bool:
    ok = all(bool(v) for v in checks.values())
    failed = [k for k, v in checks.items() if not v]
    detail = "all checks hold" if ok else "failed: " + "; ".join(failed)
    LINES[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title} ({seconds:.1f}s) {detail}"
    print(LINES[number])
    return ok
