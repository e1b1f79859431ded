import sys

import pytest

from bevfuse.config import parse_config
from bevfuse.data.dataset import Dataset, write_dataset

TINY = """
[data]
image_width = 176
image_height = 64
seed = 5
[radar]
channels = 8
max_cells = 200
[model]
bev_channels = 16
head_hidden = 16
[camera]
stem = 8
width = 8
context = 16
[train]
epochs = 2
batch = 2
[bench]
frames = 4
warmup = 1
"""


@pytest.fixture(scope="session")
def tiny_cfg():
    return parse_config(TINY)


@pytest.fixture(scope="session")
def tiny_ds(tmp_path_factory, tiny_cfg):
    root = tmp_path_factory.mktemp("tiny_ds")
    write_dataset(tiny_cfg.data, root, 6)
    return Dataset(root)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        terminalreporter.write_line(results[num])
