"""Inference-side evaluation: framewise metrics, controllability and streaming runs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import no_grad
from .backbone import VLAModel
from .intent import select_intent, trajectory_intent
from .layout import TokenRole as R
from .metrics import (
    SEQUENCE_HORIZONS,
    RfsParams,
    ade,
    intent_histogram,
    rfs,
    rfs_matched_ade,
    sequence_ade,
    trust_region_rate,
)
from .rng import make_rng
from .scenario import Frame, Scenario
from .se2 import stitch_chain
from .train import DataContext


def resolve_intents(model: VLAModel, ctx: DataContext, frames: Sequence[Frame], source: str, memory=None):
    """Intent ids from one of the three pluggable sources."""
    if source == "gt":
        return np.array([f.intent for f in frames], dtype=np.int64)
    if source == "trajectory":
        return np.array([trajectory_intent(f.gt_future, ctx.vocab) for f in frames], dtype=np.int64)
    if source == "ntp":
        batch = ctx.batch(frames)
        return model.predict_intent(batch, ctx.tokens.intent_token_ids, memory=memory)
    if source == "none":
        return None
    raise ValueError(f"unknown intent source {source!r}")


def predict_frames(model: VLAModel, ctx: DataContext, frames: Sequence[Frame], mode: str = "action_only",
                   intents=None, scale: float | None = 1.5, steps: int = 2, seed: int = 0, batch_size: int = 32):
    """Decoded ego-frame trajectories (N, L_f, 6) for independent frames."""
    out = []
    for a in range(0, len(frames), batch_size):
        chunk = list(frames[a : a + batch_size])
        batch = ctx.batch(chunk)
        ids = None if intents is None else np.asarray(intents)[a : a + batch_size]
        res = model.sample(batch, mode, ids, scale if ids is not None else None, steps, seed=seed + a)
        out.append(ctx.codec.decode(res.x))
    return np.concatenate(out)


def frame_report(preds, frames: Sequence[Frame], names, intents=None, params: RfsParams = RfsParams()) -> dict:
    """RFS, ADE table, trust-region rate and per-intent histogram for predictions."""
    scores, gt3, gt5, m3, m5 = [], [], [], [], []
    for p, f in zip(preds, frames):
        rs = f.raters
        scores.append(rfs(p, rs, f.speed, params))
        gt3.append(ade(p, f.gt_future, 3.0))
        gt5.append(ade(p, f.gt_future, 5.0))
        m3.append(rfs_matched_ade(p, rs, f.speed, 3.0, params))
        m5.append(rfs_matched_ade(p, rs, f.speed, 5.0, params))
    gt_intents = [f.intent for f in frames]
    return {
        "frames": len(frames),
        "rfs_mean": float(np.mean(scores)),
        "ade": {
            "rfs_gt_3s": float(np.mean(gt3)),
            "rfs_gt_5s": float(np.mean(gt5)),
            "rfs_matched_3s": float(np.mean(m3)),
            "rfs_matched_5s": float(np.mean(m5)),
        },
        "trust_region_rate": trust_region_rate(preds, [f.raters for f in frames], [f.speed for f in frames], params),
        "per_intent": intent_histogram(gt_intents, names, scores),
        "predicted_intents": intent_histogram(intents, names) if intents is not None else None,
    }


def controllability(model: VLAModel, ctx: DataContext, frames: Sequence[Frame], scale: float = 1.5,
                    steps: int = 2, seed: int = 0) -> dict:
    """Fraction of frames where left vs right conditioning flips the final lateral offset sign."""
    left, right = ctx.vocab.index("left"), ctx.vocab.index("right")
    n = len(frames)
    yl = predict_frames(model, ctx, frames, "action_only", np.full(n, left), scale, steps, seed)[:, -1, 1]
    yr = predict_frames(model, ctx, frames, "action_only", np.full(n, right), scale, steps, seed)[:, -1, 1]
    flipped = (yl > 0) & (yr < 0)
    return {"flip_rate": float(flipped.mean()), "left_y": yl.tolist(), "right_y": yr.tolist()}


def fan_out(model: VLAModel, ctx: DataContext, frame: Frame, scale: float = 1.5, steps: int = 2, seed: int = 0):
    """One trajectory per vocabulary member for a single frame."""
    n = len(ctx.vocab)
    return predict_frames(model, ctx, [frame] * n, "action_only", np.arange(n), scale, steps, seed)


# -- streaming ----------------------------------------------------------------

@dataclass
class StreamTrace:
    predictions: list[np.ndarray] = field(default_factory=list)  # per frame (B, L_f, 6) ego frame
    intents: list[np.ndarray] = field(default_factory=list)  # per frame (B,)
    channel_len: list[int] = field(default_factory=list)


def run_streams(model: VLAModel, ctx: DataContext, streams: Sequence[Scenario], use_memory: bool = True,
                scale: float = 1.5, steps: int = 2, seed: int = 0, every: int = 1) -> StreamTrace:
    """Read-forward-write inference over equally long streams, all frames batched.

    Intents come from next-token prediction on the language path; actions are
    sampled with guidance toward that intent. Predictions are produced on
    frames 0, every, 2*every, ... (others get None).
    """
    n = len(streams[0].frames)
    channel = model.memory.new_channel()
    trace = StreamTrace()
    rng = make_rng(seed, "stream-eval")
    with no_grad():
        for k in range(n):
            frames = [s.frames[k] for s in streams]
            batch = ctx.batch(frames)
            ch = channel if use_memory else model.memory.new_channel()
            memory = model.memory.read(ch, batch.stamps, batch.times)
            seq = model.embed(batch, "vqa_only", memory=memory, answer=np.zeros((len(batch), 0)))
            hidden = model.forward(seq)
            logits = model.lm_logits(hidden, seq.positions(R.QUESTION)[-1:]).data[:, 0]
            intents = select_intent(logits, ctx.tokens.intent_token_ids)
            trace.intents.append(intents)
            if k % every == 0:
                eps = rng.standard_normal((len(batch), model.cfg.horizon, model.cfg.action_dim))
                res = model.sample(batch, "action_only", intents, scale, steps, eps=eps, memory=memory)
                trace.predictions.append(ctx.codec.decode(res.x))
            else:
                trace.predictions.append(None)
            if use_memory:
                model.memory.write(channel, hidden[:, : seq.spans[R.STATE][1]], batch.stamps, batch.times)
            trace.channel_len.append(len(channel))
    return trace


def stitched_ground_truth(scenario: Scenario, frame_stride: int = 1):
    """Global (frame-0) GT built by chaining the per-frame futures with rigid alignment.

    Returns the stitched points (one per waypoint time after frame 0) and the
    recovered frame-0-relative pose of every frame.
    """
    frames = scenario.frames
    dt = frames[1].timestamp - frames[0].timestamp
    shift = int(round(dt / 0.25))
    horizon = len(frames[0].gt_future)
    clips = [np.vstack([[0.0, 0.0], f.gt_future[:, :2]]) for f in frames]
    overlaps = [horizon + 1 - shift] * (len(clips) - 1)
    res = stitch_chain(clips, overlaps)
    return res.points[1:], res.poses


def stream_sequence_ade(trace: StreamTrace, streams: Sequence[Scenario], stride: int,
                        horizons=SEQUENCE_HORIZONS) -> dict:
    """Mean (over streams) global-frame ADE per horizon; None when the stream is too short."""
    per = {h: [] for h in horizons}
    for b, scen in enumerate(streams):
        gt_pts, poses = stitched_ground_truth(scen)
        used = list(range(0, len(scen.frames), stride))
        t0 = scen.frames[0].timestamp
        times, pts = [], []
        for n, i in enumerate(used):
            pred = trace.predictions[i]
            if pred is None:
                raise ValueError(f"no prediction at frame {i}; run the stream with every dividing {stride}")
            local = pred[b, :, :2]
            tw = scen.frames[i].timestamp - t0 + 0.25 * np.arange(1, len(local) + 1)
            keep = tw <= (scen.frames[used[n + 1]].timestamp - t0 + 1e-9) if n + 1 < len(used) else slice(None)
            times.append(tw[keep])
            pts.append(poses[i].apply(local[keep]))
        times, pts = np.concatenate(times), np.concatenate(pts)

        def gt_fn(tq):
            return gt_pts[np.rint(np.asarray(tq) / 0.25).astype(int) - 1]

        for h, v in sequence_ade(times, pts, gt_fn, horizons).items():
            per[h].append(v)
    return {h: (None if any(v is None for v in vals) else float(np.mean(vals))) for h, vals in per.items()}


def late_frame_accuracy(trace: StreamTrace, streams: Sequence[Scenario], episode_frames: int, cue_frames: int):
    """Intent accuracy on frames whose episode cue is no longer visible."""
    hits, total = 0, 0
    for k, pred in enumerate(trace.intents):
        if k % episode_frames < cue_frames:
            continue
        gt = np.array([s.frames[k].intent for s in streams])
        hits += int((pred == gt).sum())
        total += len(gt)
    return hits / max(total, 1)
