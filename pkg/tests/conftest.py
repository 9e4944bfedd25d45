import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oen.data import binary_profile, generate, multiclass_profile  # noqa: E402
from oen.model import ArchConfig  # noqa: E402
from oen.training import TrainConfig  # noqa: E402


@pytest.fixture(scope="session")
def small_binary():
    return generate(binary_profile(n_images=10, image_size=32, seed=3))


@pytest.fixture(scope="session")
def small_multiclass():
    return generate(multiclass_profile(n_images=10, image_size=32, seed=3))


@pytest.fixture
def tiny_cfg():
    return TrainConfig(mode="inter_orth", arch=ArchConfig(width=4, depth=1), epochs=2, steps_per_epoch=3,
                       batch_size=4, patch_size=16, seed=5)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
    rows = getattr(mod, "EXPERIMENT_ROWS", [])
    if rows:
        terminalreporter.section("repeated comparison, per repeat")
        for row in rows:
            terminalreporter.write_line(row)
