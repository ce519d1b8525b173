import numpy as np
import pytest

from app.config import get_settings
from app.models.lab_models import DisorderLaw, DisorderSpec
from app.services.disorder import SymmetricCoupling, sample_coupling
from app.services.gapped import enumerate_local_maxima


@pytest.fixture(autouse=True)
def fresh_settings():
    """Settings are re-read for every test so monkeypatched SKLAB_ variables apply"""
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def make_coupling():
    def _make(n: int, seed: int = 7, instance: int = 0, law: DisorderLaw = DisorderLaw.GAUSSIAN) -> SymmetricCoupling:
        return sample_coupling(DisorderSpec(law=law, n=n, master_seed=seed, instance_index=instance))

    return _make


@pytest.fixture
def coupling8(make_coupling) -> SymmetricCoupling:
    return make_coupling(8)


@pytest.fixture
def coupling10(make_coupling) -> SymmetricCoupling:
    return make_coupling(10)


@pytest.fixture
def deepest10(coupling10):
    return enumerate_local_maxima(coupling10).deepest()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
