import pytest

from splashlab.data import mnist_like


@pytest.fixture(scope="session")
def small_train():
    return mnist_like(2000, seed=0, split="train")


@pytest.fixture(scope="session")
def small_test():
    return mnist_like(300, seed=0, split="test")


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    def log(criterion: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
    return log


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
