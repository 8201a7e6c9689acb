import numpy as np
import pytest

from knnsets.datamodel import RunConfig
from knnsets.pipeline import Pipeline
from knnsets.synth import SynthSpec, generate

from helpers import CRITERION_LINES


@pytest.fixture(autouse=True)
def _no_disk_cache(monkeypatch):
    monkeypatch.delenv("KNNSETS_CACHE_DIR", raising=False)


@pytest.fixture(scope="session")
def small_bundle():
    return generate(SynthSpec(n_train=400, n_cal=600, n_test=300, dim=8, scales=(1.0, 1.5), seed=3))


@pytest.fixture(scope="session")
def fitted(small_bundle):
    cfg = RunConfig(kappa=50, k_sample=10, resample=True, knn_epochs=100, seed=1)
    return Pipeline(small_bundle, cfg, use_cache=False).fit()


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
