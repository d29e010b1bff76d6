import numpy as np
import pytest
from conftest import tiny_model

from deskvla.evaluate import (
    StreamTrace,
    frame_report,
    late_frame_accuracy,
    resolve_intents,
    stitched_ground_truth,
    stream_sequence_ade,
)
from deskvla.scenario import KinematicParams, generate_dataset


@pytest.fixture(scope="module")
def streams(ctx):
    return generate_dataset(3, 5, KinematicParams(family="cued", n_frames=12, n_agents=1), ctx.vocab)


def _oracle_trace(streams):
    trace = StreamTrace()
    for k in range(len(streams[0].frames)):
        trace.predictions.append(np.stack([s.frames[k].gt_future for s in streams]))
        trace.intents.append(np.array([s.frames[k].intent for s in streams]))
    return trace


def test_stitched_ground_truth_is_consistent(streams):
    pts, poses = stitched_ground_truth(streams[0])
    f1 = streams[0].frames[1]  # 0.5 s after frame 0, two waypoints in
    np.testing.assert_allclose(poses[1].apply(f1.gt_future[:, :2]), pts[2:2 + len(f1.gt_future)], atol=1e-9)


@pytest.mark.parametrize("stride", [1, 2])
def test_oracle_sequence_ade_is_zero(streams, stride):
    seq = stream_sequence_ade(_oracle_trace(streams), streams, stride, (3.0, 5.0))
    assert all(v < 1e-9 for v in seq.values())


def test_sequence_ade_needs_predictions_on_stride(streams):
    trace = _oracle_trace(streams)
    trace.predictions[2] = None
    with pytest.raises(ValueError, match="frame 2"):
        stream_sequence_ade(trace, streams, 1, (3.0,))


def test_late_accuracy_skips_cue_frames(streams):
    trace = _oracle_trace(streams)
    assert late_frame_accuracy(trace, streams, 4, 1) == 1.0
    for k in range(len(trace.intents)):
        if k % 4 == 0:
            trace.intents[k] = trace.intents[k] + 1  # wrong only where the cue is visible
    assert late_frame_accuracy(trace, streams, 4, 1) == 1.0


def test_resolve_intents(ctx, frames):
    m = tiny_model()
    np.testing.assert_array_equal(resolve_intents(m, ctx, frames, "gt"), [f.intent for f in frames])
    assert resolve_intents(m, ctx, frames, "none") is None
    ntp = resolve_intents(m, ctx, frames, "ntp")
    assert ntp.shape == (len(frames),) and ((0 <= ntp) & (ntp < len(ctx.vocab))).all()
    with pytest.raises(ValueError):
        resolve_intents(m, ctx, frames, "oracle")


def test_frame_report_on_ground_truth(ctx, frames):
    preds = np.stack([f.gt_future for f in frames])
    rep = frame_report(preds, frames, ctx.vocab.names)
    assert rep["ade"]["rfs_gt_5s"] == 0.0
    assert rep["frames"] == len(frames)
