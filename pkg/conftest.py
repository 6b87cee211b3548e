"""
Shared pytest fixtures
Slow experiments (multi-seed training echoes, timing ratios) only run with
HARMNET_SLOW_TESTS=1.
"""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project directory to Python path
sys.path.append(str(Path(__file__).parent))

from config import get_settings


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: multi-seed training or timing experiment (HARMNET_SLOW_TESTS=1)')


def pytest_collection_modifyitems(config, items):
    if get_settings().slow_tests:
        return
    skip = pytest.mark.skip(reason="set HARMNET_SLOW_TESTS=1 to run")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def settings():
    return get_settings()
