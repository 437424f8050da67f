import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from funcent.data import MNIST_DIR_ENV, MNIST_FILES, stratified_split, write_mnist_dir  # noqa: E402

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=60
)
settings.load_profile("default")


def _has_mnist(directory: Path) -> bool:
    names = [n for pair in MNIST_FILES.values() for n in pair]
    return all((directory / n).exists() or (directory / (n + ".gz")).exists() for n in names)


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """Full MNIST from the env var when present, else the mlxtend 5 000-image subset."""
    env = os.environ.get(MNIST_DIR_ENV)
    if env and _has_mnist(Path(env)):
        return Path(env), "full"
    try:
        from mlxtend.data import mnist_data
    except ImportError:
        pytest.skip(f"no MNIST: set {MNIST_DIR_ENV} or install mlxtend")
    X, y = mnist_data()
    train, test = stratified_split(X, y, train_per_class=400, seed=0)
    return write_mnist_dir(train, test, tmp_path_factory.mktemp("mnist")), "subset"


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
