import shutil
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ensembles import three_trees as _three_trees  # noqa: E402


def pytest_collection_modifyitems(config, items):
    if shutil.which("z3") is None:
        skip = pytest.mark.skip(reason="z3 executable not on PATH")
        for item in items:
            if "solver" in item.keywords:
                item.add_marker(skip)


@pytest.fixture(scope="session")
def three_trees():
    return _three_trees()
