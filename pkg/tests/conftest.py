import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from gmrfscan.gmrf import PhiField
from gmrfscan.lattice import neighborhood_offsets

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_phi(rng: np.random.Generator, d: int, h: int, l1: float) -> PhiField:
    """Symmetric phi with random signs and magnitudes rescaled to the given l1 norm."""
    half = neighborhood_offsets(d, h).half()
    raw = rng.uniform(-1, 1, len(half))
    raw *= l1 / (2 * np.abs(raw).sum())
    return PhiField.from_offsets(d, h, dict(zip(half, raw)))


@st.composite
def phis(draw, max_l1=0.9, dims=(1, 2), radii=(1, 2)):
    d = draw(st.sampled_from(dims))
    h = draw(st.sampled_from(radii))
    l1 = draw(st.floats(0.0, max_l1))
    seed = draw(st.integers(0, 2**31))
    return random_phi(np.random.default_rng(seed), d, h, l1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
