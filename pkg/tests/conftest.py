from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rgnn import autodiff as ad
from rgnn.graph import CsrGraph

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"

# acceptance results collected by test_acceptance.py, printed at session end
ACCEPTANCE: dict[str, tuple[bool | None, str]] = {}  # None marks a skipped criterion


def random_graph(rng: np.random.Generator, n: int, p: float) -> CsrGraph:
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    return CsrGraph.from_edges(n, np.stack([iu[keep], ju[keep]], axis=1))


def param(rng: np.random.Generator, shape, name: str, lo: float = -1.0, hi: float = 1.0) -> ad.Tensor:
    return ad.Tensor(rng.uniform(lo, hi, shape), requires_grad=True, name=name)


@pytest.fixture(autouse=True)
def _clean_tape():
    ad.tape().clear()
    yield
    ad.tape().clear()


@pytest.fixture
def tiny_dir() -> Path:
    return FIXTURES / "tiny"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[name]
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {name}: {detail}")
