import functools

import numpy as np
import pytest

from uvavatar.synth import HumanoidSpec, make_humanoid
from uvavatar.uv_atlas import build_texel_table


@functools.lru_cache(maxsize=None)
def humanoid():
    return make_humanoid()


@functools.lru_cache(maxsize=None)
def texel_table(resolution: int):
    template, atlas = humanoid()
    return build_texel_table(atlas, template, resolution)


@functools.lru_cache(maxsize=None)
def chain():
    return make_humanoid(HumanoidSpec(joint_count=2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.failed or report.skipped:
        ok = report.passed and report.when == "call"
        _CRITERIA[name] = _CRITERIA.get(name, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        label = name[len("test_criterion_"):].replace("_", " ")
        terminalreporter.write_line(f"criterion {label}: {'PASS' if _CRITERIA[name] else 'FAIL'}")
