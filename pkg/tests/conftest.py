import copy
import json
import sys

import numpy as np
import pytest
from hypothesis import settings

from patchforge.config import default_config
from patchforge.scene import distributions_from_dict, scene_from_dict

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def small_cfg(resolution=(32, 32)):
    cfg = default_config()
    cfg["scene"]["camera"]["resolution"] = list(resolution)
    return cfg


@pytest.fixture(scope="session")
def cfg():
    return default_config()


@pytest.fixture(scope="session")
def scene(cfg):
    return scene_from_dict(cfg["scene"])


@pytest.fixture(scope="session")
def small_scene():
    return scene_from_dict(small_cfg()["scene"])


@pytest.fixture(scope="session")
def dists(cfg):
    return distributions_from_dict(cfg["distributions"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def pytest_terminal_summary(terminalreporter):
    # one PASS/FAIL line per acceptance criterion, outside output capture
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
