import numpy as np
import pytest

from prospect_lab import nn, shipped
from prospect_lab.diffusion import DiffusionModel, make_schedule
from prospect_lab.numerics import RngStream


def perturbed_params(cfg, seed=1, scale=0.3, dtype=np.float64):
    """Random params with every tensor nonzero (zero-init layers would hide gradient bugs)."""
    rng = RngStream(seed)
    p = nn.init_params(cfg, rng, out_scale=1.0)
    return {k: (v.astype(np.float64) + scale * rng.child(100 + i).gaussian(v.shape)).astype(dtype)
            for i, (k, v) in enumerate(p.items())}


@pytest.fixture(scope="session")
def sched():
    return make_schedule()


@pytest.fixture(scope="session")
def tiny_model(sched):
    """Untrained reduced-size model with nonzero output layer."""
    m = DiffusionModel.init(nn.REDUCED, sched, RngStream(5))
    m.params = perturbed_params(nn.REDUCED, seed=5, scale=0.1, dtype=np.float32)
    return m


@pytest.fixture(scope="session")
def trained_model():
    path = shipped.model_path()
    if not path.is_file():
        pytest.skip("shipped checkpoint not present")
    return DiffusionModel.load(path)


ACCEPTANCE_LINES = []


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {criterion:>2}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
