"""Shared test plumbing: the acceptance-criteria verdict registry.

Acceptance tests call ``record_criterion`` with their verdict; the
terminal summary then prints one line per criterion so a full run ends
with an at-a-glance scoreboard.
"""

CRITERIA_TITLES = {
    1: "gradient fidelity",
    2: "mask semantics",
    3: "refinement invariants",
    4: "metric oracle equivalence",
    5: "end-to-end learning",
    6: "ablation direction",
    7: "determinism",
}

_results: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str = "") -> None:
    _results[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA_TITLES):
        title = CRITERIA_TITLES[number]
        if number in _results:
            passed, detail = _results[number]
            verdict = "PASS" if passed else "FAIL"
            suffix = f" [{detail}]" if detail else ""
        else:
            verdict, suffix = "NOT RUN", ""
        terminalreporter.write_line(f"criterion {number} ({title}): {verdict}{suffix}")
