import pytest

from mtvit import tensor as T


@pytest.fixture
def float64():
    """Run a test at verification precision."""
    with T.using_dtype("float64"):
        yield
