import pytest

from outagecast.pipeline import prepare
from outagecast.synthetic import GenConfig, generate_synthetic


@pytest.fixture(scope="session")
def small_corpus():
    corpus, truth = generate_synthetic(GenConfig(n_outages=300), seed=3)
    return corpus, truth


@pytest.fixture(scope="session")
def small_prep(small_corpus):
    return prepare(small_corpus[0])


ACCEPTANCE_TITLES = {
    1: "gradient fidelity of the full real-time loss",
    2: "gamma machinery round trips",
    3: "MLE recovery without features",
    4: "feature-group NLL ordering",
    5: "per-report NLL/RMSE trend",
    6: "attention on the planted keyword",
    7: "gamma mean vs OLS baseline RMSE",
    8: "bitwise determinism of every stage",
    9: "end-to-end CLI smoke",
}
_acceptance = {}


@pytest.fixture
def acceptance():
    """``record(n, ok, detail)`` stores a criterion result and returns ``ok``."""
    def record(n, ok, detail):
        _acceptance[n] = (bool(ok), detail)
        print(_line(n))
        return ok
    return record


def _line(n):
    if n not in _acceptance:
        return f"criterion {n}: FAIL  {ACCEPTANCE_TITLES[n]}  (no result: not run or errored)"
    ok, detail = _acceptance[n]
    return f"criterion {n}: {'PASS' if ok else 'FAIL'}  {ACCEPTANCE_TITLES[n]}  ({detail})"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in ACCEPTANCE_TITLES:
        terminalreporter.write_line(_line(n))
