"""Collects one verdict per acceptance criterion for the terminal summary."""

RESULTS: dict = {}


def record(number, title: str, ok: bool, detail: str = "") -> bool:
    key = str(number)
    prev = RESULTS.get(key)
    if prev is not None:
        ok = ok and prev[1]
        detail = f"{prev[2]}; {detail}" if detail else prev[2]
    RESULTS[key] = (title, bool(ok), detail)
    return ok
