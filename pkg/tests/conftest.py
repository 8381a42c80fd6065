import numpy as np
import pytest
import torch

from pointnu.config import desk_config
from pointnu.data import InstanceAnnotation, SyntheticConfig, generate_synthetic


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_dataset():
    return generate_synthetic(SyntheticConfig(image_size=64, n_images=4, count_range=(3, 5), seed=3))


@pytest.fixture
def tiny_run_config():
    """Smallest model that still exercises every branch; trains in seconds."""
    return desk_config(epochs=1, lr_drops=[], batch_size=2, crop_size=64, tile=64, overlap=16,
                       jpfm_branch_channels=16, jpfm_out_channels=32, head_channels=32, feature_channels=16,
                       kernel_dim=16, gn_groups=8, head_depth=2, val_every=1)


def square_annotation(shape, boxes, classes, num_classes=2):
    """Instances as filled boxes ``(y0, x0, y1, x1)``; later boxes overwrite earlier ones."""
    inst = np.zeros(shape, dtype=np.int32)
    for k, (y0, x0, y1, x1) in enumerate(boxes, start=1):
        inst[y0:y1, x0:x1] = k
    return InstanceAnnotation(inst, {k: c for k, c in enumerate(classes, start=1)}, num_classes)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """``acceptance(n, ok, detail)`` records a pass/fail line that is printed in the run summary."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
