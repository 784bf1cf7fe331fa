import pytest

_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: call ``criterion(n, ok, detail)`` before asserting."""

    def record(number, ok, detail=""):
        _CRITERIA[number] = (bool(ok), detail)

    yield record
    # a test that raised before recording still gets a line
    if request.node.name.startswith("test_criterion_"):
        number = int(request.node.name.split("_")[2])
        _CRITERIA.setdefault(number, (False, "test errored before reaching its check"))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
