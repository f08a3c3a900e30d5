import numpy as np
import pytest

from ehdr.model import ModelConfig

ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(base_channels=4, embed_dim=8, num_blocks=1, heads=2)


def randomize_zero_heads(ws, seed=7, scale=0.2):
    """Give the zero-initialised merge/output convs non-zero values."""
    g = np.random.default_rng(seed)
    for name, arr in ws.items():
        if name.startswith("recon.conv1") or ".emsdc.merge." in name:
            ws[name] = g.uniform(-scale, scale, arr.shape).astype(np.float32)
    return ws
