import numpy as np
import pytest
import torch

from fimpute import fim_gap as fg
from fimpute import fim_local as fl
from fimpute.recnet import NetConfig
from fimpute.synthgen import GenerationConfig, generate_dataset

torch.set_num_threads(1)

TINY = NetConfig(embed_dim=8, ffn_layers=1, ffn_width=16, seq_hidden=8, attn_layers=1,
                 attn_heads=2, attn_dim=8, dropout=0.1)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def local32():
    torch.manual_seed(0)
    return fl.FIMLocal(TINY).eval()


@pytest.fixture
def local64():
    torch.manual_seed(0)
    return fl.FIMLocal(TINY).double().eval()


@pytest.fixture
def gap32():
    torch.manual_seed(1)
    return fg.FIMGap(TINY).eval()


@pytest.fixture(scope="session")
def pointwise_records():
    return list(generate_dataset(GenerationConfig(n_records=24, base_seed=3)))


@pytest.fixture(scope="session")
def temporal_records():
    return list(generate_dataset(GenerationConfig(dataset_kind="temporal", n_records=12, base_seed=4)))


@pytest.fixture
def sine_series():
    t = np.linspace(0.0, 2.0, 60)
    return t, np.sin(3 * t) + 0.5 * t


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
