import os
import sys

import pytest

sys.path.append(os.path.abspath(os.path.dirname(__file__)))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running learning and latency checks (set RANGESEG_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.getenv("RANGESEG_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow test; set RANGESEG_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
