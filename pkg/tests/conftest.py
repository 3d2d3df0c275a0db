import numpy as np
import pytest

from bayescal.data import SampleSet


def make_samples(score, matched, cx=None, cy=None, w=None, h=None):
    """SampleSet with box columns defaulting to 0.5."""
    score = np.asarray(score, dtype=np.float64)
    n = len(score)
    fill = lambda v: np.full(n, 0.5) if v is None else np.asarray(v, dtype=np.float64)  # noqa: E731
    return SampleSet(score, fill(cx), fill(cy), fill(w), fill(h), np.asarray(matched))


def random_samples(n, seed=0):
    rng = np.random.default_rng(seed)
    cols = rng.random((5, n))
    cols[3:] = np.clip(cols[3:], 1e-3, None)
    return SampleSet(*cols, (rng.random(n) < cols[0]).astype(int), image_ids=[f"img{i}" for i in range(n)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
