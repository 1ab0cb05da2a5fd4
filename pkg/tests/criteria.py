"""Pass/fail registry for the acceptance criteria, printed at the end of the run."""

RESULTS: dict[str, tuple[bool, str]] = {}


def record(name: str, ok: bool, detail: str) -> bool:
    RESULTS[name] = (bool(ok), detail)
    return bool(ok)
