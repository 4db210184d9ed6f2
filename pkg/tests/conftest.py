import time

import pytest

from featdistill.data import TEST, export_mnist_subset, load_idx
from featdistill.nn import ModelSpec
from featdistill.train import TrainConfig, train_teacher

# desk-scale MNIST teacher: two simple blocks per group, pad-2 shifts (no flips on digits)
TEACHER_SPEC = dict(groups=(16, 32, 64), blocks_per_group=2)
TEACHER_TRAIN = TrainConfig(
    epochs=12,
    base_lr=0.1,
    lr_decay_epochs=(6, 9),
    batch_size=64,
    augment=True,
    augment_pad=2,
    augment_flip=False,
    seed=0,
)

_ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    _ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(_ACCEPTANCE_LINES[number])


@pytest.fixture(scope="session")
def mnist_files(tmp_path_factory):
    return export_mnist_subset(tmp_path_factory.mktemp("mnist"))


@pytest.fixture(scope="session")
def mnist(mnist_files):
    train = load_idx(mnist_files["train_images"], mnist_files["train_labels"])
    test = load_idx(mnist_files["test_images"], mnist_files["test_labels"], split=TEST)
    return train, test


@pytest.fixture(scope="session")
def mnist_teacher(mnist):
    """Teacher trained once per session; returns ``(result, cpu_seconds, wall_seconds)``."""
    train, test = mnist
    spec = ModelSpec(input_shape=train.shape[1:], **TEACHER_SPEC)
    cpu, wall = time.process_time(), time.perf_counter()
    res = train_teacher(spec, train, test, TEACHER_TRAIN)
    return res, time.process_time() - cpu, time.perf_counter() - wall
