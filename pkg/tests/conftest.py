import numpy as np
import pytest

from cribdiar.synth import SynthSpec, synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    """A corpus small enough to write and read in about a second."""
    return SynthSpec(seed=7, num_train=3, num_val=2, num_test=1, num_pretrain=4, clip_len_s=8.0)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory, small_spec):
    return synth_generate(small_spec, tmp_path_factory.mktemp("corpus"))


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def report():
    """Record one acceptance line: report(criterion, passed, detail)."""

    def _report(n: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(passed), detail)
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
