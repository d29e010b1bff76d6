import numpy as np
import pytest

from deskvla.backbone import BackboneConfig, VLAModel
from deskvla.scenario import IntentVocabulary, KinematicParams, generate_dataset
from deskvla.train import DataContext

TINY = dict(hidden=16, layers=2, heads=2, ffn=32, n_mem=2, head_hidden=16, intent_dim=8, mem_heads=2,
            action_heads=1, action_ffn=16)


def tiny_model(seed=0, **over):
    return VLAModel(BackboneConfig(**{**TINY, **over}), seed=seed)


@pytest.fixture(scope="session")
def ctx():
    return DataContext.for_vocab(IntentVocabulary())


@pytest.fixture(scope="session")
def frames():
    scen = generate_dataset(4, 3, KinematicParams(accel_max=1.0), IntentVocabulary())
    return [s.frames[-1] for s in scen]


@pytest.fixture(scope="session")
def batch(ctx, frames):
    return ctx.batch(frames)


@pytest.fixture
def noise():
    rng = np.random.default_rng(0)
    return rng.uniform(0.1, 0.9, 4), rng.standard_normal((4, 20, 6))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        for title, ok in RESULTS[n]:
            terminalreporter.write_line(f"criterion {n:2d}  {'PASS' if ok else 'FAIL'}  {title}")
