import numpy as np
import pytest
import torch
import torch.nn as nn

from wmbench.data import LabeledImageSet, Provenance
from wmbench.models import Classifier


def make_set(n=40, shape=(28, 28, 1), k=10, seed=0, provenance=Provenance.RAW_TEST, name="toy"):
    rng = np.random.default_rng(seed)
    x = rng.random((n, *shape), dtype=np.float32)
    y = rng.integers(0, k, n)
    return LabeledImageSet(x, y, provenance, k, name)


class TinyNet(Classifier):
    """Two dense layers on flattened 6x6x1 images; small enough for brute-force oracles."""

    arch_id = "tiny"

    def __init__(self, k=3, shape=(6, 6, 1), hidden=5, seed=0):
        super().__init__(k, shape)
        torch.manual_seed(seed)
        d = int(np.prod(shape))
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, k)

    def forward(self, x):
        return self.fc2(torch.tanh(self.fc1(x.flatten(1))))


@pytest.fixture
def toy_set():
    return make_set()


@pytest.fixture
def tiny_net():
    return TinyNet()


_CRITERIA = []


@pytest.fixture
def criterion_line():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""
    def add(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append(line)
        print(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
