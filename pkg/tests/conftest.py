import numpy as np
import pytest

from gcts.caseio import bundled_config, parse_bids, parse_stitch, stitch
from gcts.netmodel import build_susceptance


class Config:
    def __init__(self, stitch_name, bids_name, w=1.0):
        self.config = parse_stitch(bundled_config(stitch_name))
        self.net, self.part = stitch(self.config, w)
        self.blocks = build_susceptance(self.net, self.part)
        self.book = parse_bids(bundled_config(bids_name), self.part)


@pytest.fixture(scope="session")
def two_area():
    return Config("two_area.toml", "table1_bids.toml")


@pytest.fixture(scope="session")
def two_area_uniform():
    return Config("two_area.toml", "uniform_bids.toml")


@pytest.fixture(scope="session")
def three_area():
    return Config("three_area.toml", "three_area_bids.toml")


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(20240))


_acceptance: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    n = mark.args[0]
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        if hasattr(rep, "wasxfail"):
            verdict = "FAIL (expected)"
        else:
            verdict = "PASS" if rep.passed else "FAIL"
        _acceptance[n] = (verdict, detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        verdict, detail = _acceptance[n]
        terminalreporter.write_line(f"criterion {n:2d}: {verdict:<15} {detail}".rstrip())
