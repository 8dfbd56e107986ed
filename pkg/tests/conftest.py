import sys

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "camoseg", derandomize=True, deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("camoseg")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(root) -> "Config":
    """Small enough that a few training steps take about a second."""
    from camoseg.config import Config

    cfg = Config.desk()
    cfg.data.root = str(root)
    cfg.data.image_size = 64
    cfg.synth.image_size = 64
    cfg.synth.num_train = 3
    cfg.synth.num_val = 2
    cfg.maskgen.num_queries = 4
    cfg.maskgen.layers = 2
    cfg.train.iterations = 3
    cfg.train.batch_size = 2
    return cfg.validate()


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    from camoseg.data.synth import synth_generate

    root = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config(root)
    synth_generate(cfg.synth, 0, root)
    return root


@pytest.fixture
def tiny_cfg(tiny_data):
    return tiny_config(tiny_data)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = acceptance.summary_lines() if acceptance is not None else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
