import numpy as np
import pytest
from hypothesis import settings

from selfscore.backend.toy import ToyVLM, ToyWeights, make_toy_task
from selfscore.codec import fit_binning
from selfscore.ingest import split_filter

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def toy_task():
    return make_toy_task(n=200, seed=0)


@pytest.fixture(scope="session")
def toy_scheme(toy_task):
    manifest, _ = toy_task
    return fit_binning([r.raw_score for r in split_filter(manifest, "train")])


@pytest.fixture
def toy_handle(toy_task):
    _, task = toy_task
    return ToyVLM(ToyWeights.random(0, task.direction), task.features)


@pytest.fixture
def oracle_handle(toy_task, toy_scheme):
    _, task = toy_task
    w = ToyWeights.oracle(task.direction, task.offset, task.scale, toy_scheme.cuts)
    return ToyVLM(w, task.features)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance reporting -------------------------------------------------------------

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


class Criterion:
    """Context manager that records one PASS/FAIL line for an acceptance criterion.

    Any exception inside the block (a failed assert included) marks the criterion
    as FAIL and is re-raised so pytest reports it too.
    """

    def __init__(self, sink, number, title):
        self.sink, self.number, self.title = sink, number, title
        self.details = []

    def note(self, text):
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc_type is not None:
            detail = (detail + "; " if detail else "") + f"{exc_type.__name__}: {exc}".splitlines()[0]
        line = f"{status} [{self.number:>2}] {self.title}: {detail}"
        self.sink.append((self.number, line))
        print(line)
        return False


@pytest.fixture
def criterion(request):
    sink = request.config.stash[ACCEPTANCE]
    return lambda number, title: Criterion(sink, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
