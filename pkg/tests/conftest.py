import pytest


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def verdict(request):
    """Record a criterion outcome; printed in the terminal summary."""

    def record(key, ok: bool, detail: str = ""):
        request.config.acceptance_lines[key] = f"{'PASS' if ok else 'FAIL'}  {key}  {detail}".rstrip()
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
