import dataclasses

import numpy as np
import pytest

from smartsched.config import EnvConfig, derive_int
from smartsched.trace import record_trace

# 3 UEs, 5 TTIs, small buffers so queues empty out and refill within the horizon
TOY_PARETO_ENV = EnvConfig(num_ues=3, duration=5, arrival_rate=1000.0, packet_bits=1500,
                           buffer_bits=6000, max_delay=3)


def toy_trace(i: int, cfg: EnvConfig = TOY_PARETO_ENV):
    return record_trace(cfg, derive_int(7, "toy", i))


@pytest.fixture(scope="session")
def toy_traces():
    return [toy_trace(i) for i in range(10)]


@pytest.fixture
def small_env_cfg():
    return EnvConfig(num_ues=4, duration=60, arrival_rate=400.0, buffer_bits=40_000, max_delay=30)


def with_(cfg, **kw):
    return dataclasses.replace(cfg, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
