import numpy as np
import pytest

from ewc_lab.model import Architecture, Batch, init_params


@pytest.fixture
def small_mlp():
    arch = Architecture((3, 5, 2), seed=1)
    rng = np.random.default_rng(0)
    batch = Batch(rng.normal(size=(12, 3)), rng.integers(0, 2, 12))
    return init_params(arch), batch


def pytest_terminal_summary(terminalreporter):
    lines = [v for key in ("passed", "failed") for rep in terminalreporter.stats.get(key, [])
             if rep.when == "call" for k, v in rep.user_properties if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split("criterion ")[1]):
            terminalreporter.write_line(line)
