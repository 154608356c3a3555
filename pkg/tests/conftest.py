import os
import sys

# single-threaded BLAS keeps float reductions in a fixed order across runs
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

sys.path.insert(0, os.path.dirname(__file__))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

_criteria = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_criteria, key=lambda n: int(n.split("test_criterion_")[1].split("_")[0])):
        name = nodeid.split("::")[-1][len("test_criterion_"):]
        number, _, label = name.partition("_")
        status = "PASS" if _criteria[nodeid] == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {number}: {label.replace('_', ' ')}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

