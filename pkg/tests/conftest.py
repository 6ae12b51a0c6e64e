import sys

import numpy as np
import pytest

from pegcascade.data import load_dataset
from pegcascade.synth import SynthConfig, generate
from pegcascade.training import TrainConfig

TINY_SYNTH = SynthConfig(n_users=40, mean_degree=3, n_cascades=30, history_length=(3, 6), vocab_size=60,
                         words_per_topic=12, p0=0.1, seed=11)

# small widths keep CPU training tests to a few seconds
TINY_TRAIN = dict(d_phi=4, topic_hidden=8, d_long=4, d_short=4, d_g=6, n_topics=3, tau=3, batch_size=8,
                  epochs=2, neighbor_cap=1000, min_count=1)


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    generate(TINY_SYNTH, out)
    return out


@pytest.fixture(scope="session")
def tiny_data(tiny_dir):
    return load_dataset(tiny_dir, min_count=1)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(**TINY_TRAIN)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
