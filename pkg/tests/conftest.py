import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from evbp import cli
from evbp.model import MtlNetwork, Topology

settings.register_profile("evbp", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("evbp")

FD_STEP = 1e-5


def numeric_grad(f, arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every element of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # central differences carry ~1e-10 of round-off, so tinier gradients compare absolutely
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


TOY = Topology(input_dim=2, n_classes=2, aux_widths=(2,), trunk=(4,))


@pytest.fixture
def toy_net():
    return MtlNetwork(TOY, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@dataclass
class Run:
    cfg: object
    test: object
    mtl: object
    solo: object
    train_seconds: float


def trained(name: str) -> Run:
    cfg = cli.load_config(CONFIGS / name)
    train_set, test_examples = cli.generate(cfg)
    t0 = time.perf_counter()
    mtl, solo = cli.train_networks(cfg, train_set)
    return Run(cfg, cli.test_set(test_examples), mtl, solo, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def grid_run() -> Run:
    """The default grid benchmark, trained once per session."""
    return trained("grid_seg.yaml")


def set_iou_oracle(preds, targets, n_classes):
    """mIoU and per-class IoU from explicit sets of (image, cell) positions."""
    preds, targets = np.atleast_2d(preds), np.atleast_2d(targets)
    per_class = {}
    for k in range(n_classes):
        p = {(i, j) for i, row in enumerate(preds) for j, v in enumerate(row) if v == k}
        t = {(i, j) for i, row in enumerate(targets) for j, v in enumerate(row) if v == k}
        if p | t:
            per_class[k] = len(p & t) / len(p | t)
    return sum(per_class.values()) / len(per_class), per_class


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
