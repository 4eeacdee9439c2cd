import pytest

CRITERIA = {
    1: "exact accounting identity on a fuzzed 1e5-message log, < 10 s",
    2: "byte-identical artifacts across two identical runs",
    3: "oracle equivalence of eight computational kernels",
    4: "MLP gradient check on 20 batches, rel. err <= 1e-4",
    5: "detector recall >= 0.5 at IoU 0.3 and LOB-only invariance",
    6: "baseline AUC ordering MLP > RFF > binary, margin >= 0.10, < 10 min",
    7: "AUC ordering in bull, bear and high_vol",
    8: "temporal features help under Hawkes; inter-switch CV > 1",
    9: "gate dominance in every scores.csv",
}

_outcomes: dict = {}
_notes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.addinivalue_line("markers", "slow: long-running simulation test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        ok = rep.outcome == "passed"
        _outcomes.setdefault(n, []).append(ok)


@pytest.fixture
def note():
    """Attach a short measurement to the criterion summary line."""
    def add(n, text):
        _notes.setdefault(n, []).append(text)
    return add


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n not in _outcomes:
            continue
        status = "PASS" if all(_outcomes[n]) else "FAIL"
        extra = "; ".join(_notes.get(n, []))
        tr.write_line(f"criterion {n}: {status} - {CRITERIA[n]}" + (f" [{extra}]" if extra else ""))
