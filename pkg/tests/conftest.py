import pytest

from replaycask.cli import main

W1_ARGS = ["--spec", "@w1", "--seed", "42", "--policy", "on_action", "--count", "20"]

# (criterion number, description, passed, detail) filled in by test_acceptance
ACCEPTANCE_RESULTS = []


@pytest.fixture(scope="session")
def w1_corpus(tmp_path_factory):
    """The pinned W1 x20 container (seed 42, observations on action steps)."""
    path = tmp_path_factory.mktemp("w1") / "w1x20.terc"
    assert main(["convert", *W1_ARGS, "--out", str(path)]) == 0
    return path


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:2d}. {title}: {detail}")
