import pytest

CRITERIA = {
    1: "codec round-trip",
    2: "bin geometry",
    3: "gradient correctness",
    4: "kernel equivalences",
    5: "graph oracle",
    6: "IoU oracle",
    7: "evaluator oracle",
    8: "overfit experiment",
    9: "ablation reachability",
    10: "format fidelity",
}
_results: dict[int, tuple[bool, str]] = {}
_collected: set[int] = set()


def pytest_collection_finish(session):
    for item in session.items:
        name = item.name
        if name.startswith("test_criterion_"):
            _collected.add(int(name.split("_")[2]))


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and fails the test when ``ok`` is false."""

    def record(n: int, ok: bool, detail: str) -> None:
        _results[n] = (bool(ok), detail)
        line = f"criterion {n:2d} {CRITERIA[n]}: {'PASS' if ok else 'FAIL'} ({detail})"
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _collected:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n, name in CRITERIA.items():
        if n not in _collected:
            continue
        if n in _results:
            ok, detail = _results[n]
            terminalreporter.write_line(f"criterion {n:2d} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
        else:
            terminalreporter.write_line(f"criterion {n:2d} {name}: FAIL (did not run to completion)")
