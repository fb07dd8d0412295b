import numpy as np
import pytest
from hypothesis import settings

from uqstp import dataset, graph

settings.register_profile("uqstp", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("uqstp")


@pytest.fixture(scope="session")
def small_graph():
    c = dataset.random_centroids(6, seed=1, extent=4.0)
    return graph.build_adjacency(graph.pairwise_distances(c), sigma2=4.0, r=0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
