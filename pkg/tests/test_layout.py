import numpy as np
import pytest

from deskvla.autodiff import Tensor
from deskvla.layout import FAST, MODES, LayoutError, R, build_mask, build_sequence, layout

LENGTHS = {R.MEMORY: 2, R.VISION: 3, R.STATE: 1, R.QUESTION: 2, R.ANSWER: 1, R.ACTION: 3}


def lengths_for(mode):
    return {r: n for r, n in LENGTHS.items() if r in MODES[mode]}


def rule_oracle(roles):
    """Visibility written straight from the rules, one (query, key) pair at a time."""
    t = len(roles)
    act = [i for i in range(t) if roles[i] == R.ACTION]
    out = np.zeros((t, t), dtype=bool)
    for q in range(t):
        for k in range(t):
            if roles[q] == R.ACTION:
                out[q, k] = roles[k] == R.ACTION or k < act[0]
            else:
                out[q, k] = k <= q
    return out


@pytest.mark.parametrize("mode", sorted(MODES))
def test_mask_matches_rule_oracle(mode):
    seq = layout(mode, lengths_for(mode))
    mask = build_mask(seq.roles)
    assert np.array_equal(mask, rule_oracle(list(seq.roles)))
    assert np.all(np.diag(mask))
    act = seq.positions(R.ACTION)
    if len(act):
        assert np.all(mask[np.ix_(act, act)])
        assert all(np.array_equal(mask[act[0]], mask[a]) for a in act)


def test_action_only_example():
    seq = layout("action_only", {R.MEMORY: 2, R.VISION: 4, R.STATE: 1, R.ACTION: 3})
    assert len(seq) == 10
    assert [R(r).name[0] for r in seq.roles] == list("MMVVVVSAAA")
    assert np.array_equal(seq.position_ids, np.arange(10))


def test_vqa_first_visibility_examples():
    seq = layout("vqa_first", {R.MEMORY: 1, R.VISION: 2, R.STATE: 1, R.QUESTION: 2, R.ANSWER: 2, R.ACTION: 3})
    mask = build_mask(seq.roles)
    a2 = seq.positions(R.ANSWER)[1]
    assert mask[a2, : a2 + 1].all() and not mask[a2, seq.positions(R.ACTION)].any()
    for a in seq.positions(R.ACTION):
        assert mask[a].all()


def test_answer_span_grows_during_decoding():
    sizes = []
    for n in range(3):
        seq = layout("vqa_first", {**LENGTHS, R.ANSWER: n})
        sizes.append(len(seq.positions(R.ANSWER)))
    assert sizes == [0, 1, 2]


def test_action_first_truncation_is_action_only():
    full = layout("action_first", LENGTHS)
    short = layout("action_only", lengths_for("action_only"))
    n = full.spans[R.ACTION][1]
    assert np.array_equal(full.roles[:n], short.roles)
    assert np.array_equal(build_mask(full.roles)[:n, :n], build_mask(short.roles))
    fast = layout("action_first", {**LENGTHS, R.ANSWER: 0}, order=FAST)
    assert np.array_equal(fast.roles[:n], short.roles)


def test_missing_or_extra_span_errors():
    with pytest.raises(LayoutError, match="ACTION"):
        layout("action_only", {R.MEMORY: 1, R.VISION: 1, R.STATE: 1})
    with pytest.raises(LayoutError, match="QUESTION"):
        layout("action_only", {R.MEMORY: 1, R.VISION: 1, R.STATE: 1, R.ACTION: 2, R.QUESTION: 1})
    with pytest.raises(LayoutError):
        layout("sideways", LENGTHS)


def test_build_sequence_concatenates_in_mode_order():
    spans = {r: Tensor(np.full((1, n, 2), float(r))) for r, n in lengths_for("action_first").items()}
    seq = build_sequence(spans, "action_first")
    assert np.array_equal(seq.embeddings.data[0, :, 0], seq.roles.astype(float))
