import pytest

from dirprune.cli import shipped_config
from dirprune.config import parse_config

SMALL = """
[meta]
schema_version = 1
name = small

[network]
layer_widths = 8, 1
activation = identity
init_scale = 0.5

[data]
kind = rank_deficient_regression
n_train = 40
n_test = 20
dims = 8
rank = 3
seed = 2

[optimizer]
kind = grda
c = 0.2
mu = 0.55

[schedule]
gamma = 0.02
epochs = 5
batch_size = 2

[seeds]
init = 1
batch = 4

[logging]
cadence = 7
"""


@pytest.fixture
def small_cfg():
    return parse_config(SMALL, source="small")


@pytest.fixture
def builtin():
    return lambda name: parse_config(shipped_config(name), source=name)


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if not test_acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(test_acceptance.RESULTS):
        terminalreporter.write_line(test_acceptance.RESULTS[number])
