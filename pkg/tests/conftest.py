"""Session fixtures: the seeded 4-class dataset and its trained models.

Training at the calibrated step budget dominates suite runtime, so the
floating-point baseline and the two quantization-aware models are
trained once per session and shared by every test that needs a
converged network. Wall time per training run is recorded so budget
checks can see it.
"""

import time

import pytest

from fxpkws.features import build_synth_dataset
from fxpkws.model import desk_spec
from fxpkws.quantizers import FakeQuantConfig
from fxpkws.trainer import TrainConfig, train

PARITY_STEPS = 5000


@pytest.fixture(scope="session")
def parity_dataset():
    return build_synth_dataset(4, 60, 15, 25, seed=0)


@pytest.fixture(scope="session")
def train_minutes():
    """method name -> wall minutes spent in train()."""
    return {}


def _train_parity(ds, method, times):
    if method == "flp":
        fq = FakeQuantConfig(enabled=False)
    else:
        fq = FakeQuantConfig(method=method, b_w=8, b_a=8, b_in=8, c_a=8.0)
    cfg = TrainConfig(total_steps=PARITY_STEPS, batch_size=32, seed=11, fq=fq)
    started = time.time()
    tm = train(desk_spec(4), ds, cfg)
    times[method] = (time.time() - started) / 60.0
    return tm


@pytest.fixture(scope="session")
def flp_parity_model(parity_dataset, train_minutes):
    return _train_parity(parity_dataset, "flp", train_minutes)


@pytest.fixture(scope="session")
def sqwd_parity_model(parity_dataset, train_minutes):
    return _train_parity(parity_dataset, "sqwd", train_minutes)


@pytest.fixture(scope="session")
def acr_parity_model(parity_dataset, train_minutes):
    return _train_parity(parity_dataset, "acr", train_minutes)
