"""Shared fixtures for the varprop test suite."""
import numpy as np
import pytest

from varprop import rng
from varprop.models import get_session, init_db
from varprop.network import NetworkSpec, kaiming_init


@pytest.fixture
def small_spec():
    """Three-layer spec narrow enough for coordinate-wise finite differences."""
    def make(batchnorm=False, seed=7, widths=(6, 8, 5, 4), **kwargs):
        return NetworkSpec(widths=widths, batchnorm=batchnorm, seed=seed, **kwargs)
    return make


@pytest.fixture
def small_net(small_spec):
    return kaiming_init(small_spec())


@pytest.fixture
def batch():
    def make(samples, features, seed=11):
        return rng.gaussian_batch(seed, (samples, features))
    return make


@pytest.fixture
def numpy_rng():
    return np.random.default_rng(2024)


@pytest.fixture
def db_session(tmp_path):
    """Session on a throwaway SQLite ledger."""
    engine = init_db(f"sqlite:///{tmp_path / 'runs.db'}")
    session = get_session(engine)
    try:
        yield session
    finally:
        session.close()
        engine.dispose()
