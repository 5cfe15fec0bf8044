import pytest

_acceptance_lines: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """Collect one human-readable line per acceptance criterion.

    Lines are echoed in a terminal section after the run so a plain pytest
    invocation shows each criterion's verdict even with capture enabled.
    """

    def record(num: int, ok: bool, detail: str) -> None:
        _acceptance_lines.append(
            f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}"
        )

    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines):
            terminalreporter.line(line)
