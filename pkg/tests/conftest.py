import numpy as np
import pytest
import torch

from textssl.backbone import HeadSpec, ModelConfig, build_model
from textssl.dataset import synth_corpus

torch.set_num_threads(1)

TINY = dict(dim=16, layers=1, heads=2, mlp_ratio=2, conv_channels=(4, 4, 8, 8))


def tiny_model(backbone="vit", head=None, seed=0, **kw):
    cfg = ModelConfig(backbone=backbone, head=head or HeadSpec.linear(8), **{**TINY, **kw})
    return build_model(cfg, seed=seed)


@pytest.fixture(scope="session")
def printed():
    return synth_corpus(12, "printed", seed=3, name="p")


@pytest.fixture(scope="session")
def cursive():
    return synth_corpus(6, "cursive", seed=4, name="c")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


@pytest.fixture
def verdict(capsys):
    """Print and record one PASS/FAIL line, then fail the test if needed."""
    def report(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
