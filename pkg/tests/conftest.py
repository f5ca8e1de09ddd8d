import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """The bundled 5k MNIST subset exported as IDX files (needs mlxtend)."""
    pytest.importorskip("mlxtend")
    from maser.data import export_bundled_mnist

    directory = tmp_path_factory.mktemp("mnist")
    export_bundled_mnist(directory)
    return directory


@pytest.fixture(scope="session")
def ref1024():
    from maser import mkhe

    return mkhe.setup(1024, seed=7)


@pytest.fixture(scope="session")
def ref16():
    from maser import mkhe

    return mkhe.setup(16, seed=3)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number, title: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} [{detail}]"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
