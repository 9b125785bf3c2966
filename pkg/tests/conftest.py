import pytest

from qsat import tensor


@pytest.fixture(autouse=True)
def fresh_tape():
    """Forward-only tests leave recorded nodes behind; isolate them."""
    tensor._tape.clear()
    yield
    tensor._tape.clear()
