from __future__ import annotations

import pytest

from simpool.config import config_from_dict
from simpool.lib.kernel import HOUR


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption("--runslow", action="store_true", default=False, help="run slow scenarios")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="slow; use --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def small_doc(**overrides):
    """A few hundred slots and jobs: runs in well under a second."""
    doc = {
        "name": "small",
        "horizon_ms": 2 * HOUR,
        "seed": 7,
        "schedds": [{"name": "schedd", "count": 2, "memory_capacity_mb": 60}],
        "providers": [
            {
                "id": "grid",
                "kind": "GridSite",
                "pledged_cores": 160,
                "glidein": {"startd_count": 1, "slots_per_startd": 4, "slot_cores": 1},
            }
        ],
        "streams": [
            {
                "id": "production",
                "targets": ["schedd"],
                "arrival": {"mode": "backlog", "depth": 40},
                "shape": {"duration_ms": {"kind": "exponential", "mean": 1800000}},
            }
        ],
        "check_invariants": True,
    }
    doc.update(overrides)
    return doc


@pytest.fixture
def small_config():
    return config_from_dict(small_doc())
