"""Collects one pass/fail line per acceptance criterion for the end-of-session summary."""

TITLES = {
    1: "KL closed form vs Monte Carlo",
    2: "telescoping identity",
    3: "DDIM oracle round trip",
    4: "empirical reconstruction bound",
    5: "fake-cue lower bound",
    6: "zero-init invariance",
    7: "gradient checks",
    8: "metric oracles",
    9: "cue-guided vs baseline HTER",
    10: "time-step ablation shape",
    11: "data-fraction trend",
    12: "unknown-attack generalisation",
}

RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, passed: bool, detail: str) -> str:
    RESULTS[n] = (bool(passed), detail)
    line = format_line(n)
    print(line)
    return line


def format_line(n: int) -> str:
    if n not in RESULTS:
        return f"criterion {n:2d} [FAIL] {TITLES[n]}: not evaluated (test errored or was deselected)"
    ok, detail = RESULTS[n]
    return f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {TITLES[n]}: {detail}"
