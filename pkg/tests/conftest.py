import numpy as np
import pytest
import torch

from hcpercept.config import TaskDescriptor, toy_preset

torch.set_num_threads(1)


@pytest.fixture
def toy_cfg():
    return toy_preset()


@pytest.fixture
def five_tasks():
    return [TaskDescriptor("reid", "reid", 2), TaskDescriptor("par", "par", 6), TaskDescriptor("seg", "seg", 6),
            TaskDescriptor("pose", "pose", 8), TaskDescriptor("det", "peddet", 10)]


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))
