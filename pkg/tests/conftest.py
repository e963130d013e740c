import pytest

from deposition.rates import builtin


@pytest.fixture(scope="session")
def builtins():
    """One representative of every built-in model, with a density grid for each."""
    return {
        "asep": (builtin("asep", p=0.8), [0.1, 0.3, 0.5, 0.7, 0.9]),
        "pap-exclusion": (builtin("pap-exclusion", p=1.0, c=0.3, a=1.0), [-0.8, -0.4, 0.0, 0.4, 0.8]),
        "zrp": (builtin("zrp", f="geom-exp", beta=1.0), [0.25, 0.5, 1.0, 2.0, 3.0]),
        "zrp-const": (builtin("zrp-const"), [0.25, 0.5, 1.0, 2.0, 3.0]),
        "bricklayers": (builtin("bricklayers", beta=1.0, rate_upper_bound=1e3),
                        [-1.5, -0.5, 0.0, 0.5, 1.5]),
    }


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; the lines are
    printed immediately and repeated in the terminal summary."""

    def report(number: int, title: str, passed: bool, detail: str = ""):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {title}" + (f" [{detail}]" if detail else "")
        _ACCEPTANCE_LINES.append((number, line))
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
