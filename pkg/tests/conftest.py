import pytest

from ward.segmenter import segment
from ward.stub import StubOptions, StubServer
from ward.synthetic import generate_synthetic_corpus


@pytest.fixture(scope="session")
def synth50():
    return generate_synthetic_corpus(7, 50)


@pytest.fixture(scope="session")
def letters50(synth50):
    return {r.hadm_id: segment(r.text) for r in synth50.corpus}


@pytest.fixture(scope="session")
def twins200():
    return generate_synthetic_corpus(11, 200, twins=True)


@pytest.fixture
def stub():
    with StubServer(options=StubOptions()) as s:
        yield s


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for the acceptance summary, then assert."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def check(name: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'} {name}" + (f" ({detail})" if detail else "")
        lines.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
