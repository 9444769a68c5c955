import pytest

from chartshape.viewgen import GenConfig, build_dataset


@pytest.fixture(scope="session")
def small_corpus():
    return build_dataset(GenConfig(target=120), 3)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    ran = test_acceptance.RESULTS
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        terminalreporter.write_line(ran.get(n, f"criterion {n}: not run or errored before reporting"))
