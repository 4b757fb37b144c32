import numpy as np
import pytest

from swankv.calibration import calibrate
from swankv.config import ModelConfig
from swankv.corpus import calibration_tokens
from swankv.model import build_toy_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig.from_heads(d_head=8, num_layers=2, n_q_heads=4, n_kv_heads=4)


@pytest.fixture(scope="session")
def tiny_gqa_config():
    return ModelConfig.from_heads(d_head=8, num_layers=2, n_q_heads=4, n_kv_heads=2)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return build_toy_model(tiny_config, seed=3, fit_readout=False)


@pytest.fixture(scope="session")
def tiny_gqa_model(tiny_gqa_config):
    return build_toy_model(tiny_gqa_config, seed=4, fit_readout=False)


@pytest.fixture(scope="session")
def tiny_projections(tiny_model):
    return calibrate(tiny_model, calibration_tokens(512), seed=3, corpus_id="test")


@pytest.fixture(scope="session")
def tiny_gqa_projections(tiny_gqa_model):
    return calibrate(tiny_gqa_model, calibration_tokens(512), seed=4, corpus_id="test")


# --- acceptance verdicts --------------------------------------------------------
# Each acceptance test records exactly one PASS/FAIL line; a test that errors
# before recording gets a FAIL line from the finalizer. All lines are echoed
# live and repeated, in criterion order, in the terminal summary.

VERDICTS = {}


@pytest.fixture
def verdict(request, capsys):
    criterion = int(request.node.originalname.split("_")[2])

    def record(ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion:2d}: {detail}"
        VERDICTS[criterion] = line
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    yield record
    if criterion not in VERDICTS:
        VERDICTS[criterion] = f"FAIL criterion {criterion:2d}: did not complete"


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for criterion in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[criterion])
