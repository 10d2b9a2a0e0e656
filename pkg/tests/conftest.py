import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from anchor_points.corr import CorrelationModel  # noqa: E402
from anchor_points.tensor_io import PredictionTensor  # noqa: E402


def make_tensor(probs, labels, model_ids=None, example_ids=None):
    probs = np.asarray(probs, dtype=np.float64)
    n, d, y = probs.shape
    return PredictionTensor(
        tuple(model_ids or (f"m{i}" for i in range(n))),
        tuple(example_ids or (f"e{j}" for j in range(d))),
        y,
        probs,
        np.asarray(labels, dtype=np.int64),
    )


def binary_tensor(conf, labels=None):
    """Binary tensor whose gold-class confidence matrix is ``conf``."""
    conf = np.asarray(conf, dtype=np.float64)
    labels = np.zeros(conf.shape[1], dtype=np.int64) if labels is None else np.asarray(labels)
    probs = np.empty(conf.shape + (2,))
    probs[:, np.arange(conf.shape[1]), labels] = conf
    probs[:, np.arange(conf.shape[1]), 1 - labels] = 1.0 - conf
    return make_tensor(probs, labels)


def two_block_dist():
    d = np.full((6, 6), 1.5)
    d[:3, :3] = 0.1
    d[3:, 3:] = 0.1
    np.fill_diagonal(d, 0.0)
    return d


def random_corr_dist(rng, d, n_models=8):
    """Distance matrix derived from the correlation of random confidences."""
    x = rng.normal(size=(n_models, d))
    c = np.corrcoef(x, rowvar=False)
    c = np.clip(0.5 * (c + c.T), -1, 1)
    np.fill_diagonal(c, 1.0)
    return 1.0 - c


@pytest.fixture
def small_tensor():
    probs = [
        [[0.3, 0.7], [0.6, 0.4], [0.5, 0.5]],
        [[0.8, 0.2], [0.1, 0.9], [0.25, 0.75]],
    ]
    return make_tensor(probs, [1, 0, 1])


@pytest.fixture
def two_block():
    return CorrelationModel.from_distance(two_block_dist())


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_line():
    """Record one PASS/FAIL line for the acceptance summary."""

    def record(number, ok, detail, status=None):
        status = status or ("PASS" if ok else "FAIL")
        line = f"[{status}] criterion {number}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
