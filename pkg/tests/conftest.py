import os

import pytest


@pytest.fixture(scope="session", autouse=True)
def _shared_cache():
    """Persist surrogate/table caches across test runs; fits are deterministic."""
    os.environ.setdefault("MAPA_LAB_CACHE",
                          os.path.join(os.path.dirname(__file__), ".cache"))
