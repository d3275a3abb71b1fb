import re

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")
_criteria: dict[int, list] = {}


def pytest_runtest_logreport(report):
    m = _ACCEPTANCE.search(report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    entry = _criteria.setdefault(int(m.group(1)), [True, []])
    if not report.passed:
        entry[0] = False
    entry[1].extend(v for k, v in report.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok, details = _criteria[n]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}"
        if details:
            line += " - " + " | ".join(details)
        terminalreporter.write_line(line)
