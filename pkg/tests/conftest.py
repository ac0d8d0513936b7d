import numpy as np
import pytest

from genrec.data import make_splits
from genrec.model import Model, ModelConfig
from genrec.synth import SynthConfig, generate_dataset

TINY_SYNTH = dict(num_items=200, num_genres=6, num_languages=3, num_users=40, num_requests=8,
                  items_per_request=4, seed=3)


def tiny_model_config(**kw):
    base = dict(d=16, num_heads=2, num_branches=2, num_genres=6, num_languages=3, num_conditions=6,
                hash_buckets=256, max_seq_len=12)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_data():
    items, catalog, logs = generate_dataset(SynthConfig(**TINY_SYNTH))
    return items, catalog, logs, make_splits(logs)


@pytest.fixture
def tiny_model(tiny_data):
    return Model(tiny_model_config(), tiny_data[1], seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
