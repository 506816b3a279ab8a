import gc

import pytest

from vbtensor.runtime import reset_runtime


@pytest.fixture()
def fresh_runtime():
    """Fresh devices/allocators; collects stragglers from earlier tests first."""
    gc.collect()
    rt = reset_runtime()
    yield rt
    gc.collect()


@pytest.fixture()
def small_runtime():
    """Runtime with tiny per-device capacity so OOM paths are reachable."""
    gc.collect()
    rt = reset_runtime(capacity_bytes=8 << 20)
    yield rt
    gc.collect()
    reset_runtime()
