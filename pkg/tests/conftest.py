import os
import pathlib

import pytest

from splicemon import checksum

DATA = pathlib.Path(__file__).parent / "data"

# 60-byte SYN written by the host kernel into a TUN device during a connect()
# to 10.79.0.2:80 (Linux 6.x, MSS 1460, timestamps, wscale 10).
KERNEL_SYN = bytes.fromhex(
    "4500003ce743400040063ed80a4f00010a4f0002ccda005091d467b400000000"
    "a002faf0fff30000020405b40402080a30ea40da000000000103030a"
)


@pytest.fixture(params=sorted(checksum.backends()))
def ck_backend(request):
    return checksum.backends()[request.param]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call" or (rep.when == "setup" and rep.skipped):
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
