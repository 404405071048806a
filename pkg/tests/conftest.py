import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ffda.data import Benchmark, DomainSplit, make_eval_suite  # noqa: E402
from ffda.model import ArchConfig, build_model  # noqa: E402

# Acceptance outcomes, printed as one line per criterion at the end of the run.
CRITERIA: dict = {}

TINY = ArchConfig(hidden=8, classifier_hidden=16, heads=2, ratio=2, context_hidden=4)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA):
        ok, detail = CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_bench():
    """Twelve domains (8/2/2) with small pools; cheap enough for unit tests."""
    return Benchmark(seed=3, pool_per_class=8, split=DomainSplit.by_ratio(12))


@pytest.fixture(scope="session")
def small_suite(small_bench):
    return make_eval_suite(small_bench, small_bench.split.meta_test, 10, seed=0, n_domains=2,
                           per_domain=10, n_query=10)


@pytest.fixture
def tiny_models():
    return {m: build_model(m, TINY, seed=5) for m in ("erm", "cxda", "cml")}
