import numpy as np
import pytest
from hypothesis import settings

from ftgmm.manifold import random_orthogonal
from ftgmm.model import GmmParams, PluParams

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_params(mode, n, K, rng, spread=0.3):
    """Random valid parameters in ``mode`` (U near identity when unconstrained)."""
    if mode == "orthogonal":
        U = random_orthogonal(n, int(rng.integers(1 << 30)))
    else:
        U = np.eye(n) + spread * rng.standard_normal((n, n))
    plu = None
    if mode == "plu":
        s = rng.choice([-1.0, 1.0], n) * rng.uniform(0.5, 1.5, n)
        plu = PluParams(spread * rng.standard_normal((n, n)), spread * rng.standard_normal((n, n)), s)
    return GmmParams(
        mode,
        None if mode == "plu" else U,
        rng.standard_normal((K, n)),
        rng.standard_normal(K),
        rng.standard_normal((K, n)),
        rng.standard_normal(K - 1),
        plu,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
