import os
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from marketrl import kernels  # noqa: E402

BACKENDS = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])


@pytest.fixture(params=BACKENDS, scope="session")
def backend(request):
    return kernels.get_backend(request.param)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.NAMES):
        line = acceptance.RESULTS.get(n)
        if line is None:
            line = f"criterion {n} [FAIL] {acceptance.NAMES[n]}: not run or errored before reporting"
        terminalreporter.write_line(line)
