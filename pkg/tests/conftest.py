import pytest
import torch

_acceptance_lines: dict[int, str] = {}


@pytest.fixture
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion; a test that errors out is logged as FAIL."""
    state = {}

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        _acceptance_lines[number] = line
        state["done"] = True
        print(line)
        return passed

    yield record
    if not state:
        number = getattr(request.function, "criterion_number", 0)
        _acceptance_lines[number] = f"criterion {number:>2}: FAIL  {request.node.name} raised before reporting"


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_acceptance_lines):
            terminalreporter.write_line(_acceptance_lines[number])
