import copy

import pytest
import torch

from edistill.data import synthetic_blobs

ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


TINY_CONFIG = {
    "dataset": {
        "name": "synthetic",
        "params": {"num_classes": 9, "train_per_class": 12, "test_per_class": 8, "noise": 0.7, "seed": 0},
    },
    "student": {"arch": "cnn3_toy"},
    "teacher": {"arch": "cnn3_toy", "epochs": 3, "lr_milestones": []},
    "schedule": {"total_epochs": 6, "advance_epochs": [2, 4]},
    "optimizer": {"init_lr": 0.01, "lr_milestones": [5]},
    "output": {"run_id": "tiny"},
}


@pytest.fixture
def tiny_config(tmp_path):
    """Config dict for a seconds-long 3-stage run under tmp_path."""
    d = copy.deepcopy(TINY_CONFIG)
    d["output"]["out_dir"] = str(tmp_path / "runs")
    return d


@pytest.fixture(scope="session")
def blobs():
    return synthetic_blobs(num_classes=9, train_per_class=12, test_per_class=8, noise=0.7, seed=0)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
