from __future__ import annotations

import pytest

from cascadesearch.synthgen import REFERENCE_CONFIG, generate


@pytest.fixture(scope="session")
def reference_dataset():
    """The frozen reference dataset, generated once per test session."""
    return generate(REFERENCE_CONFIG)
