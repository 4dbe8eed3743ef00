"""Collects one verdict per acceptance criterion and prints them at the end."""

VERDICTS: dict[int, tuple[str, bool, str]] = {}
NAMES = {
    1: "gradient fidelity",
    2: "norm contracts",
    3: "span restriction",
    4: "adversarial dominance",
    5: "k-NN exactness",
    6: "KL properties",
    7: "regularization effect",
    8: "attack effectiveness",
    9: "metric correctness",
    10: "determinism and serialization",
}


def record(n: int, ok: bool, detail: str = "") -> bool:
    VERDICTS[n] = (NAMES[n], bool(ok), detail)
    print(f"criterion {n} ({NAMES[n]}): {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(NAMES):
        if n in VERDICTS:
            name, ok, detail = VERDICTS[n]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {name}: {detail}")
        else:
            terminalreporter.write_line(f"[FAIL] {n:2d}. {NAMES[n]}: no verdict (test errored or was not run)")
