import pytest


@pytest.fixture(scope="session")
def criteria(request):
    """Collector for acceptance verdict lines, echoed in the terminal summary."""
    if not hasattr(request.config, "_criteria"):
        request.config._criteria = []
    return request.config._criteria


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_criteria", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
