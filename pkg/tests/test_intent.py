import numpy as np
import pytest

from deskvla.intent import (
    GuidanceConfig,
    IntentEmbedder,
    cfg_velocity,
    drop_intents,
    select_intent,
    trajectory_intent,
)
from deskvla.rng import make_rng
from deskvla.scenario import IntentVocabulary, KinematicParams, generate_scenario


def test_cfg_velocity_examples():
    rng = np.random.default_rng(0)
    vc, vu = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    assert np.array_equal(cfg_velocity(vc, vu, 1.0), vc)
    assert np.array_equal(cfg_velocity(vc, vu, 0.0), vu)
    assert cfg_velocity(1.0, 0.0, 2.0) == 2.0
    # same value as v_u + s (v_c - v_u)
    assert np.allclose(cfg_velocity(vc, vu, 1.5), vu + 1.5 * (vc - vu), atol=1e-14)


def test_guidance_config_validation():
    GuidanceConfig(0.0, 0.0)
    with pytest.raises(ValueError):
        GuidanceConfig(scale=-1)
    with pytest.raises(ValueError):
        GuidanceConfig(p_drop=1.0)


def test_null_row_zero_and_range_checks():
    emb = IntentEmbedder(make_rng(0), 3, 8, 16)
    assert emb.null_id == 3
    assert np.all(emb(np.array([3])).data == 0)
    assert not np.allclose(emb(np.array([0])).data, emb(np.array([1])).data)
    with pytest.raises(ValueError):
        emb(np.array([4]))
    with pytest.raises(ValueError):
        emb(np.array([-1]))


def test_drop_rate():
    ids = drop_intents(make_rng(0, "drop"), np.zeros(10_000, dtype=int), 0.15, 3)
    assert 0.13 <= np.mean(ids == 3) <= 0.17
    assert set(np.unique(ids)) <= {0, 3}


def test_select_intent_tie_breaks_low():
    logits = np.zeros((2, 10))
    logits[1, 7] = 1.0
    assert select_intent(logits, [4, 5, 7]).tolist() == [0, 2]


@pytest.mark.parametrize("name", ["left", "right", "straight"])
def test_trajectory_intent_recovers_basic_labels(name):
    v = IntentVocabulary()
    s = generate_scenario(11, v.index(name), KinematicParams(onset_after_last=(0.5, 0.5)), v)
    assert trajectory_intent(s.frames[-1].gt_future, v) == v.index(name)


def test_trajectory_intent_needs_three_class_vocab():
    with pytest.raises(ValueError):
        trajectory_intent(np.zeros((20, 6)), IntentVocabulary.named("20"))
