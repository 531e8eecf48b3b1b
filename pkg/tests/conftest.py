import pathlib

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sere import moe, similarity

settings.register_profile(
    "repo",
    derandomize=True,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")

FIXTURES = pathlib.Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> pathlib.Path:
    return FIXTURES


@pytest.fixture(scope="session")
def small_model() -> moe.MoEModel:
    """2 layers, 4 experts, top-2, d_h=8: big enough to route interestingly."""
    return moe.gen_model(seed=0, n_layers=2, n_experts=4, top_k=2, d_h=8, d_m=16)


@pytest.fixture(scope="session")
def small_sims(small_model) -> list[similarity.SimilarityMatrix]:
    batches = similarity.gaussian_batches(0, 2, 12, small_model.d_h)
    return similarity.estimate_similarity(small_model, batches, "frobenius")


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(42)
