"""Rater-feedback score, displacement errors and report helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

WAYPOINT_DT = 0.25


@dataclass
class RaterSet:
    """1-3 reference trajectories (L_f, 2) with scores in [0, 10]."""

    trajectories: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=float)
        self.scores = np.asarray(self.scores, dtype=float)
        if len(self.scores) == 0:
            raise ValueError("rater set is empty")
        if len(self.scores) > 3:
            raise ValueError(f"at most 3 raters supported, got {len(self.scores)}")
        if self.trajectories.shape[0] != len(self.scores) or self.trajectories.shape[-1] != 2:
            raise ValueError(f"rater trajectories {self.trajectories.shape} do not match {len(self.scores)} scores")
        if np.any(self.scores < 0) or np.any(self.scores > 10):
            raise ValueError("rater scores must lie in [0, 10]")


@dataclass(frozen=True)
class RfsParams:
    base_radius: float = 1.0
    speed_gain: float = 0.2
    decay: float = 0.5
    floor: float = 4.0
    checkpoints: tuple[float, ...] = (3.0, 5.0)
    waypoint_dt: float = WAYPOINT_DT

    def __post_init__(self):
        if self.base_radius <= 0 or self.speed_gain < 0 or self.decay <= 0:
            raise ValueError("RFS params need base_radius > 0, speed_gain >= 0, decay > 0")

    def radius(self, speed: float) -> float:
        return self.base_radius + self.speed_gain * speed

    def checkpoint_indices(self) -> list[int]:
        return [int(round(c / self.waypoint_dt)) - 1 for c in self.checkpoints]


def rater_deviations(pred, raters: RaterSet, params: RfsParams = RfsParams()) -> np.ndarray:
    """Per-rater max deviation over the checkpoint waypoints."""
    pred = np.asarray(pred, dtype=float)[..., :2]
    idx = params.checkpoint_indices()
    if max(idx) >= len(pred) or raters.trajectories.shape[1] != len(pred):
        raise ValueError("prediction and references must share horizon and rate")
    diff = raters.trajectories[:, idx, :] - pred[idx][None]
    return np.sqrt((diff**2).sum(-1)).max(axis=1)


def rater_scores(pred, raters: RaterSet, speed: float, params: RfsParams = RfsParams()) -> np.ndarray:
    d = rater_deviations(pred, raters, params)
    r = params.radius(speed)
    s = raters.scores
    decayed = s * np.exp(-params.decay * (d - r))
    # a rater scored below the floor cannot be lifted by leaving its region
    outside = np.maximum(np.minimum(params.floor, s), decayed)
    return np.where(d <= r, s, outside)


def rfs(pred, raters: RaterSet, speed: float, params: RfsParams = RfsParams()) -> float:
    return float(rater_scores(pred, raters, speed, params).max())


def matched_rater(pred, raters: RaterSet, speed: float, params: RfsParams = RfsParams()) -> int:
    """Index of the rater achieving the RFS maximum (lowest index on ties)."""
    return int(np.argmax(rater_scores(pred, raters, speed, params)))


def ade(pred, reference, horizon: float, waypoint_dt: float = WAYPOINT_DT) -> float:
    pred = np.asarray(pred, dtype=float)[..., :2]
    reference = np.asarray(reference, dtype=float)[..., :2]
    n = int(round(horizon / waypoint_dt))
    if n < 1 or n > len(pred) or n > len(reference):
        raise ValueError(f"horizon {horizon}s exceeds trajectory span of {len(pred) * waypoint_dt}s")
    return float(np.sqrt(((pred[:n] - reference[:n]) ** 2).sum(-1)).mean())


def rfs_matched_ade(pred, raters: RaterSet, speed: float, horizon: float, params: RfsParams = RfsParams()) -> float:
    k = matched_rater(pred, raters, speed, params)
    return ade(pred, raters.trajectories[k], horizon, params.waypoint_dt)


def trust_region_rate(preds, rater_sets: Sequence[RaterSet], speeds, params: RfsParams = RfsParams()) -> float:
    if len(preds) == 0:
        return 0.0
    inside = [
        rater_deviations(p, rs, params).min() <= params.radius(v) for p, rs, v in zip(preds, rater_sets, speeds)
    ]
    return float(np.mean(inside))


SEQUENCE_HORIZONS = (3.0, 5.0, 10.0, 15.0, 20.0, 25.0)


def stitch_predictions(local_preds, poses, frame_times, stride: int, waypoint_dt: float = WAYPOINT_DT):
    """Assemble per-frame local predictions into one global-frame trajectory.

    Frames ``0, stride, 2*stride, ...`` are used; each contributes waypoints up
    to the next used frame's timestamp and the last one its full horizon.
    Returns (times relative to the first frame, points (N, 2)).
    """
    used = list(range(0, len(local_preds), stride))
    times, pts = [], []
    t0 = frame_times[0]
    for n, i in enumerate(used):
        pred = np.asarray(local_preds[i], dtype=float)[:, :2]
        tw = frame_times[i] + waypoint_dt * np.arange(1, len(pred) + 1)
        if n + 1 < len(used):
            keep = tw <= frame_times[used[n + 1]] + 1e-9
        else:
            keep = np.ones(len(pred), dtype=bool)
        times.append(tw[keep] - t0)
        pts.append(poses[i].apply(pred[keep]))
    return np.concatenate(times), np.concatenate(pts)


def sequence_ade(pred_times, pred_points, gt_fn, horizons=SEQUENCE_HORIZONS) -> dict[float, float | None]:
    """Global-frame ADE per horizon; ``None`` when the stream is too short.

    ``gt_fn(times)`` returns ground-truth global positions at those times.
    """
    pred_times = np.asarray(pred_times, dtype=float)
    gt = np.asarray(gt_fn(pred_times), dtype=float)
    err = np.sqrt(((gt - pred_points) ** 2).sum(-1))
    out: dict[float, float | None] = {}
    span = pred_times.max() if len(pred_times) else 0.0
    for h in horizons:
        if span + 1e-9 < h:
            out[h] = None
        else:
            out[h] = float(err[pred_times <= h + 1e-9].mean())
    return out


def intent_histogram(intents: Sequence[int], names: Sequence[str], values: Sequence[float] | None = None) -> dict:
    """Per-intent counts (and mean of ``values`` per intent when given)."""
    intents = np.asarray(intents, dtype=int)
    out = {}
    for k, name in enumerate(names):
        sel = intents == k
        entry = {"count": int(sel.sum()), "share": float(sel.mean()) if len(intents) else 0.0}
        if values is not None:
            vals = np.asarray(values, dtype=float)[sel]
            entry["mean"] = float(vals.mean()) if len(vals) else None
        out[name] = entry
    return out


def final_heading_change(traj) -> float:
    """Heading (rad) of the final waypoint's velocity, in the trajectory's ego frame."""
    traj = np.asarray(traj, dtype=float)
    if traj.shape[-1] >= 4:
        vx, vy = traj[-1, 2], traj[-1, 3]
    else:
        vx, vy = traj[-1, 0] - traj[-2, 0], traj[-1, 1] - traj[-2, 1]
    return math.atan2(vy, vx)
