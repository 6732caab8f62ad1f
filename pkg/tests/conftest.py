import pytest

VERDICTS = []


@pytest.fixture()
def verdict():
    """Record and print one ``PASS``/``FAIL`` line; returns the boolean for the assert."""

    def record(label, ok, detail):
        line = f"{label} {'PASS' if ok else 'FAIL'}: {detail}"
        VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
