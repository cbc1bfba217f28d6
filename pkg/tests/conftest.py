import os

# single-threaded BLAS so that repeated runs are bitwise comparable
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import settings  # noqa: E402

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

AC_IDS = tuple(f"AC-{i}" for i in range(1, 11))
_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def verdict(request):
    """Record one acceptance line; returns ``ok`` so tests can ``assert verdict(...)``."""
    table = request.config.stash.setdefault(_VERDICTS, {})

    def record(ac: str, ok: bool, detail: str) -> bool:
        ok = bool(ok)
        table[ac] = f"{ac:<6s} {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_VERDICTS, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for ac in AC_IDS:
        terminalreporter.write_line(table.get(ac, f"{ac:<6s} NOT RUN  (deselected, or its test errored before reporting)"))
