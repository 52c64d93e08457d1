import numpy as np
import pytest

from windlass.collectives import CollectiveContext
from windlass.fabric import Fabric, FabricConfig
from windlass.window import WindowConfig, win_allocate, win_create, win_create_dynamic


def make_fabric(p=2, **kw) -> Fabric:
    return Fabric(FabricConfig(p=p, **kw))


def world(fabric, r):
    return CollectiveContext.world(fabric, r)


def allocated(fabric, size, disp_unit=1, config=None):
    return fabric.run(lambda r: win_allocate(world(fabric, r), size, disp_unit, config))


def traditional(fabric, size, disp_unit=1, config=None):
    def body(r):
        base = fabric.alloc(r, max(size, 8))
        return win_create(world(fabric, r), base, size, disp_unit, config)

    return fabric.run(body)


def dynamic(fabric, config=None):
    return fabric.run(lambda r: win_create_dynamic(world(fabric, r), config))


@pytest.fixture
def fab2():
    return make_fabric(2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


__all__ = ["make_fabric", "world", "allocated", "traditional", "dynamic", "WindowConfig", "ACCEPTANCE"]


# acceptance lines, printed once at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
