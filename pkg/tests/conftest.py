import time

import numpy as np
import pytest

from camlab import _backend
from camlab.network import reference_cnn
from camlab.training import TrainConfig, dataset_mean, generate_shapes_dataset, train

# desk-scale experiment: shapes 3x400 train / 3x100 test at 32x32
DESK = {
    "train_seed": 1,
    "test_seed": 2,
    "n_train": 400,
    "n_test": 100,
    "image_size": 32,
    "init_seed": 0,
    "config": TrainConfig(learning_rate=0.5, epochs=30, batch_size=16, seed=0),
}


@pytest.fixture(scope="session")
def desk():
    """Trained reference CNN plus its data, built once per session."""
    t0 = time.perf_counter()
    tr = generate_shapes_dataset(DESK["train_seed"], DESK["n_train"], DESK["image_size"])
    te = generate_shapes_dataset(DESK["test_seed"], DESK["n_test"], DESK["image_size"])
    net, history = train(reference_cnn(DESK["init_seed"], image_size=DESK["image_size"]), tr, DESK["config"])
    return {
        "net": net,
        "train": tr,
        "test": te,
        "history": history,
        "baseline": dataset_mean(tr),
        "train_seconds": time.perf_counter() - t0,
    }


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_report_header(config):
    return f"camlab kernel backend: {_backend.NAME}"


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict line; ``ok=None`` marks a report-only line."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(name: str, ok, detail: str):
        tag = "INFO" if ok is None else "PASS" if ok else "FAIL"
        line = f"{tag}  {name}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
