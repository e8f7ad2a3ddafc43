"""Shared fixtures: small seeded datasets and a quickly trained model."""

import numpy as np
import pytest
from loguru import logger

from silentwear.config import RunConfig, SynthSpec, TrainConfig
from silentwear.emgio import (
    BatchEntry,
    Condition,
    DatasetManifest,
    SessionEntry,
    SubjectEntry,
    balance_rest,
    stack_windows,
)
from silentwear.evalharness import WindowSource, train_on_pool
from silentwear.synth import batch_path, synth_dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run slow end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def caplog_loguru(caplog):
    """Route loguru records into pytest's caplog."""
    handler_id = logger.add(caplog.handler, format="{message}", level="DEBUG")
    yield caplog
    logger.remove(handler_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_manifest():
    """Factory for manifests without files, for fold-structure checks."""

    def make(n_sessions=3, n_batches=5, subject="S01", condition=Condition.VOCALIZED):
        return DatasetManifest(subjects=[SubjectEntry(id=subject, sessions=[
            SessionEntry(session=s, batches=[
                BatchEntry(batch=b, condition=condition,
                           path=batch_path(subject, s, condition, b))
                for b in range(1, n_batches + 1)
            ])
            for s in range(1, n_sessions + 1)
        ])])

    return make


@pytest.fixture
def tiny_spec():
    return SynthSpec(n_subjects=1, n_sessions=3, n_batches=5, reps_per_command=2,
                     conditions=[Condition.VOCALIZED])


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    """One subject, 3 sessions x 5 batches, 2 repetitions per command."""
    spec = SynthSpec(n_subjects=1, n_sessions=3, n_batches=5, reps_per_command=2,
                     conditions=[Condition.VOCALIZED])
    out = tmp_path_factory.mktemp("synth")
    return synth_dataset(spec, seed=7, out_dir=out)


@pytest.fixture(scope="module")
def tiny_windows(tiny_dataset):
    """Balanced preprocessed 800 ms windows of session 1."""
    source = WindowSource(tiny_dataset)
    refs = [r for r in tiny_dataset.refs("S01", Condition.VOCALIZED) if r.session == 1]
    return stack_windows(balance_rest(source.pool(refs, 800), seed=0))


@pytest.fixture(scope="module")
def trained_model(tiny_windows):
    x, y = tiny_windows
    cfg = TrainConfig(max_epochs=3, batch_size=16)
    model, _ = train_on_pool(x, y, RunConfig().model, cfg, 0, "fixture")
    return model


@pytest.fixture(scope="module")
def quantized_model(trained_model, tiny_windows):
    from silentwear.config import QuantConfig
    from silentwear.quantize import calibrate_and_quantize

    x, _ = tiny_windows
    return calibrate_and_quantize(trained_model, x, QuantConfig(min_calibration=16))
