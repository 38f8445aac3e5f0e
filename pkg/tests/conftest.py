import numpy as np
import pytest

from murax.synth import SynthSpec, generate


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A 24-study synthetic dataset shared by the ingestion and CLI tests."""
    root = tmp_path_factory.mktemp("synth") / "MURA-synth"
    spec = SynthSpec(n_studies=24, seed=3, valid_fraction=0.25)
    manifest = generate(spec, root)
    return root, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_RESULTS = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
