"""Shared record of acceptance outcomes, printed at the end of the session."""

RESULTS: dict = {}


def record(cid: int, ok: bool, detail: str, part: str | None = None) -> None:
    """Store one criterion outcome; criteria checked in parts are merged by :func:`lines`."""
    RESULTS.setdefault(cid, {})[part] = (bool(ok), detail)
    label = f"{cid}" if part is None else f"{cid} [{part}]"
    print(f"criterion {label}: {'PASS' if ok else 'FAIL'}  {detail}")


def lines() -> list[str]:
    out = []
    for cid in sorted(RESULTS):
        parts = RESULTS[cid]
        ok = all(p[0] for p in parts.values())
        detail = "; ".join(d if name is None else f"{name}: {d}" for name, (_, d) in parts.items())
        out.append(f"criterion {cid:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    return out
