import numpy as np
import pytest

from groupfl.core import ClientRecord
from groupfl.engine import Population

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def scalar_population(groups: dict[str, list[list[float]]]) -> Population:
    """Population of Gaussian-mean clients: ``{group: [client train data, ...]}``."""
    records = []
    for gid, clients in groups.items():
        for i, data in enumerate(clients):
            records.append(ClientRecord(f"{gid}-{i:03d}", gid, tuple(data), tuple(data)))
    return Population.from_clients(records)
