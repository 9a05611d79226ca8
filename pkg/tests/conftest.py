import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mailscan.detector import TrainingConfig, analyze_file, train  # noqa: E402
from mailscan.synth import write_corpus  # noqa: E402

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def record():
    """Record an acceptance outcome; printed once in the terminal summary."""

    def _record(n: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[n] = (bool(ok), detail)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    mal, ben = write_corpus(root, n_malware=30, n_benign=20, seed=0)
    return root, mal, ben


@pytest.fixture(scope="session")
def analyses(corpus):
    _, mal, ben = corpus
    return [analyze_file(p) for p in mal], [analyze_file(p) for p in ben]


@pytest.fixture(scope="session")
def db(analyses):
    mal, ben = analyses
    return train(mal, ben, TrainingConfig(calibrate=False))
