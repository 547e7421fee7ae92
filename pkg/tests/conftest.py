import pytest

CRITERIA = {
    1: "gradient check of every loss term and their sum",
    2: "baseline step loss equals the reference implementation",
    3: "memory bank equals the brute-force top-k replay",
    4: "hardness weight stays inside its envelope",
    5: "full method beats the baseline on the reversed benchmark",
    6: "no single-component ablation beats the full method",
    7: "mask diagnostics are bounded and monotone in the threshold",
    8: "training is bitwise reproducible",
}
_outcomes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        outcome = "passed" if call.excinfo is None else (
            "skipped" if call.excinfo.errisinstance(pytest.skip.Exception) else "failed")
        _outcomes.setdefault(mark.args[0], []).append(outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        results = _outcomes[n]
        if "failed" in results:
            status = "FAIL"
        elif all(r == "passed" for r in results):
            status = "PASS"
        else:
            status = "SKIP"
        terminalreporter.write_line(f"[{status}] criterion {n}: {CRITERIA[n]} ({len(results)} checks)")
