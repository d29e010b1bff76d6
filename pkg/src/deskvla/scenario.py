"""Synthetic 2D driving scenarios and their line-delimited JSON format.

The ego follows closed-form kinematics: piecewise-constant curvature in arc
length and piecewise-constant longitudinal acceleration in time (speed is
clipped to the configured bounds). Every quantity a frame stores is sampled
from that one path, so futures of consecutive frames agree exactly.

Two scenario families exist:

``basic``
    one intent per scenario; the maneuver starts after the last frame so the
    intent is only observable through its label.
``cued``
    a long stream split into episodes with their own intent. A signal agent
    announces the upcoming maneuver during the first frame(s) of an episode
    and then disappears, so later frames need temporal memory to recover it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .metrics import RaterSet
from .rng import make_rng
from .se2 import Pose2

INTENTS_3 = ("left", "right", "straight")
INTENTS_20 = (
    "accelerating", "cruising", "turning_right", "starting", "stopping",
    "avoiding_obstacle", "waiting", "turning_left", "decelerating", "following",
    "lane_change_right", "braking", "lane_change_left", "yielding", "u_turn",
    "reversing", "parking", "emergency_stop", "merging", "overtaking",
)  # fmt: skip
RESERVED = ("<none>", "∅")

AGENT_VEHICLE, AGENT_PEDESTRIAN, AGENT_SIGNAL = 0, 1, 2


class ScenarioError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class IntentVocabulary:
    names: tuple[str, ...] = INTENTS_3

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(set(names)) != len(names):
            raise ValueError("intent names must be unique")
        if any(n in RESERVED for n in names):
            raise ValueError("intent vocabulary may not contain the unconditional symbol")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def unconditional(self) -> int:
        """Index of the reserved unconditional row (one past the last class)."""
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @classmethod
    def named(cls, key: str) -> "IntentVocabulary":
        if key in ("3", "intent3", "basic"):
            return cls(INTENTS_3)
        if key in ("20", "intent20", "extended"):
            return cls(INTENTS_20)
        raise ValueError(f"unknown intent vocabulary {key!r}")


class TokenVocab:
    """Closed QA vocabulary (at most 64 tokens)."""

    SPECIAL = ("<pad>", "<bos>", "<eos>", "?", "intent", "side")
    SIDES = ("side_left", "side_right", "side_none")

    def __init__(self, intents: IntentVocabulary, size: int = 64):
        self.tokens = list(self.SPECIAL) + list(intents.names) + list(self.SIDES)
        if len(self.tokens) > size:
            raise ValueError(f"QA vocabulary needs {len(self.tokens)} tokens > {size}")
        self.size = size
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        self.intent_token_ids = np.array([self.ids[n] for n in intents.names])
        self.bos, self.eos = self.ids["<bos>"], self.ids["<eos>"]

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.ids[w] for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] if i < len(self.tokens) else f"<unk{i}>" for i in ids]


QUESTION_LEN = 3
ANSWER_LEN = 2


@dataclass(frozen=True)
class KinematicParams:
    family: str = "basic"
    n_frames: int = 4
    frame_rate: float = 2.0
    frame_times: tuple[float, ...] | None = None
    horizon: int = 20
    waypoint_dt: float = 0.25
    history: int = 16
    speed_min: float = 5.0
    speed_max: float = 10.0
    accel_max: float = 0.0
    turn_angle: float = math.pi / 2
    turn_duration: tuple[float, float] = (2.0, 3.0)
    onset_after_last: tuple[float, float] = (0.5, 1.5)
    n_agents: int = 3
    episode_frames: int = 4
    cue_frames: int = 1
    episode_onset: float = 1.75
    episode_turn_angle: float = math.pi / 4
    episode_turn_duration: float = 1.0

    def validate(self) -> None:
        if self.family not in ("basic", "cued"):
            raise ScenarioError(f"unknown scenario family {self.family!r}")
        if not (0 < self.speed_min <= self.speed_max):
            raise ScenarioError("speed bounds must satisfy 0 < speed_min <= speed_max")
        if self.horizon <= 0 or self.waypoint_dt <= 0:
            raise ScenarioError("horizon and waypoint_dt must be positive")
        if self.history < 1 or self.frame_rate <= 0:
            raise ScenarioError("history and frame_rate must be positive")
        times = self.timestamps()
        if len(times) < 2:
            raise ScenarioError("a scenario needs at least 2 frames")
        if np.any(np.diff(times) <= 0):
            raise ScenarioError("frame timestamps must be strictly increasing")
        if self.accel_max < 0 or self.n_agents < 0:
            raise ScenarioError("accel_max and n_agents must be non-negative")

    def timestamps(self) -> np.ndarray:
        if self.frame_times is not None:
            return np.asarray(self.frame_times, dtype=float)
        return np.arange(self.n_frames) / self.frame_rate


# -- closed-form kinematics --------------------------------------------------

class SpeedProfile:
    """Piecewise-constant acceleration in time with speed clipped to bounds.

    ``knots`` are (time, acceleration from that time on). Arc length is
    measured from t = 0.
    """

    def __init__(self, t_start: float, v0: float, knots, vmin: float, vmax: float):
        knots = sorted(knots)
        a_start = 0.0
        for tk, ak in knots:
            if tk <= t_start:
                a_start = ak
        pieces = [(t_start, a_start)] + [k for k in knots if k[0] > t_start]
        ends = [p[0] for p in pieces[1:]] + [math.inf]
        segs = []  # rows: start time, start speed, accel, start arc length
        t, v, s = t_start, v0, 0.0
        for (_, a), t_end in zip(pieces, ends):
            while True:
                saturated = a == 0 or (a > 0 and v >= vmax) or (a < 0 and v <= vmin)
                if saturated:
                    segs.append((t, v, 0.0, s))
                    if not math.isinf(t_end):
                        s += v * (t_end - t)
                        t = t_end
                    break
                target = vmax if a > 0 else vmin
                t_hit = t + (target - v) / a
                t_next = min(t_hit, t_end)
                segs.append((t, v, a, s))
                dt = t_next - t
                s += v * dt + 0.5 * a * dt * dt
                v = target if t_hit <= t_end else v + a * dt
                t = t_next
                if t_hit > t_end:
                    break
        self._segs = np.array(segs)
        self._offset = 0.0
        self._offset = float(self.s(0.0))

    def _eval(self, t):
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self._segs[:, 0], t, side="right") - 1, 0, len(self._segs) - 1)
        t0, v0, a, s0 = (self._segs[k, i] for i in range(4))
        dt = t - t0
        return s0 + v0 * dt + 0.5 * a * dt * dt, v0 + a * dt, a

    def s(self, t):
        return self._eval(t)[0] - self._offset

    def v(self, t):
        return self._eval(t)[1]

    def a(self, t):
        return self._eval(t)[2]


class CurvaturePath:
    """Planar path with piecewise-constant curvature in arc length.

    ``knots`` are (arc length >= 0, curvature from there on); the path is
    straight before the first knot and passes through the origin with
    heading 0 at arc length 0.
    """

    def __init__(self, knots):
        knots = sorted(knots)
        if knots and knots[0][0] < 0:
            raise ScenarioError("curvature knots must start at non-negative arc length")
        self._start = np.array([-math.inf] + [k[0] for k in knots])
        self._kappa = np.array([0.0] + [k[1] for k in knots])
        anchor = [0.0] + [k[0] for k in knots]
        poses = [(0.0, 0.0, 0.0)]
        for i in range(1, len(anchor)):
            poses.append(self._advance(poses[-1], self._kappa[i - 1], anchor[i] - anchor[i - 1]))
        self._anchor = np.array(anchor)
        self._poses = np.array(poses)

    @staticmethod
    def _advance(pose, kappa, ds):
        x, y, th = pose
        if kappa == 0.0:
            return (x + ds * math.cos(th), y + ds * math.sin(th), th)
        th1 = th + kappa * ds
        return (x + (math.sin(th1) - math.sin(th)) / kappa, y - (math.cos(th1) - math.cos(th)) / kappa, th1)

    def state(self, s):
        """Position (.., 2), heading (..), curvature (..) at arc lengths ``s``."""
        s = np.asarray(s, dtype=float)
        k = np.searchsorted(self._start, s, side="right") - 1
        kappa = self._kappa[k]
        base = self._poses[k]
        ds = s - self._anchor[k]
        th0 = base[..., 2]
        th = th0 + kappa * ds
        straight = kappa == 0.0
        safe = np.where(straight, 1.0, kappa)
        x = np.where(straight, base[..., 0] + ds * np.cos(th0), base[..., 0] + (np.sin(th) - np.sin(th0)) / safe)
        y = np.where(straight, base[..., 1] + ds * np.sin(th0), base[..., 1] - (np.cos(th) - np.cos(th0)) / safe)
        return np.stack([x, y], axis=-1), th, kappa


@dataclass
class EgoMotion:
    speed: SpeedProfile
    path: CurvaturePath

    def world_states(self, t) -> np.ndarray:
        """(.., 7): x, y, vx, vy, ax, ay, heading in the world frame."""
        t = np.asarray(t, dtype=float)
        s = self.speed.s(t)
        v = self.speed.v(t)
        a = self.speed.a(t)
        pos, th, kappa = self.path.state(s)
        c, sn = np.cos(th), np.sin(th)
        vel = np.stack([v * c, v * sn], -1)
        lat = v * v * kappa
        acc = np.stack([a * c - lat * sn, a * sn + lat * c], -1)
        return np.concatenate([pos, vel, acc, th[..., None]], -1)


def to_ego(states: np.ndarray, pose: Pose2) -> np.ndarray:
    """Re-express world states (.., >=6) in the ego frame of ``pose``."""
    inv = pose.inverse()
    out = np.array(states[..., :6], dtype=float)
    out[..., 0:2] = inv.apply(states[..., 0:2])
    out[..., 2:4] = inv.rotate(states[..., 2:4])
    out[..., 4:6] = inv.rotate(states[..., 4:6])
    return out


# -- maneuver templates ----------------------------------------------------

# lateral: list of (heading change [rad], fraction of the maneuver duration)
# longitudinal: accel applied from onset (m/s^2)
_TEMPLATES: dict[str, tuple[list[tuple[float, float]], float]] = {
    "left": ([(1.0, 1.0)], 0.0),
    "right": ([(-1.0, 1.0)], 0.0),
    "straight": ([], 0.0),
    "turning_left": ([(1.0, 1.0)], 0.0),
    "turning_right": ([(-1.0, 1.0)], 0.0),
    "lane_change_left": ([(0.25, 0.5), (-0.25, 0.5)], 0.0),
    "lane_change_right": ([(-0.25, 0.5), (0.25, 0.5)], 0.0),
    "overtaking": ([(0.25, 0.5), (-0.25, 0.5)], 1.0),
    "merging": ([(-0.25, 0.5), (0.25, 0.5)], 0.0),
    "avoiding_obstacle": ([(0.15, 0.25), (-0.3, 0.5), (0.15, 0.25)], 0.0),
    "u_turn": ([(2.0, 1.0)], -1.0),
    "parking": ([(-0.5, 1.0)], -1.5),
    "cruising": ([], 0.0),
    "following": ([], -0.3),
    "accelerating": ([], 1.5),
    "starting": ([], 2.0),
    "decelerating": ([], -1.5),
    "braking": ([], -3.0),
    "stopping": ([], -2.0),
    "waiting": ([], -2.5),
    "yielding": ([], -1.0),
    "reversing": ([], -3.5),
    "emergency_stop": ([], -6.0),
}


def _maneuver_knots(name: str, onset_t: float, duration: float, angle: float, speed: SpeedProfile):
    """Curvature knots (arc length, kappa) for one maneuver starting at ``onset_t``."""
    if name not in _TEMPLATES:
        raise ScenarioError(f"no kinematic template for intent {name!r}")
    lateral, _ = _TEMPLATES[name]
    knots = []
    t = onset_t
    for turn, frac in lateral:
        t_end = t + frac * duration
        s0, s1 = float(speed.s(t)), float(speed.s(t_end))
        knots.append((s0, turn * angle / (s1 - s0)))
        t = t_end
    if lateral:
        knots.append((float(speed.s(t)), 0.0))
    return knots


# -- scenario types --------------------------------------------------------

@dataclass(eq=False)
class Frame:
    timestamp: float
    ego_pose: Pose2
    ego_history: np.ndarray  # (history, 6) world frame, oldest first
    agents: np.ndarray  # (n, 7) ego frame: x, y, vx, vy, length, width, class
    gt_future: np.ndarray  # (L_f, 6) ego frame
    intent: int
    speed: float
    rater_trajectories: np.ndarray  # (R, L_f, 2)
    rater_scores: np.ndarray  # (R,)

    @property
    def raters(self) -> RaterSet:
        return RaterSet(self.rater_trajectories, self.rater_scores)


@dataclass(eq=False)
class Scenario:
    id: str
    family: str
    intent_label: int
    intent_names: tuple[str, ...]
    frames: list[Frame]
    qa_pairs: list[tuple[list[int], list[int]]]
    motion: EgoMotion | None = field(default=None, repr=False)

    def __eq__(self, other) -> bool:
        return isinstance(other, Scenario) and to_record(self) == to_record(other)

    def validate(self) -> None:
        if len(self.frames) < 2:
            raise ScenarioError("a scenario needs at least 2 frames")
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ScenarioError("frame timestamps must be strictly increasing")
        if not (0 <= self.intent_label < len(self.intent_names)):
            raise ScenarioError("intent label outside vocabulary")


def _sample_agents(rng, n):
    """Static-lane traffic: agents drive parallel to the initial ego heading."""
    agents = []
    for _ in range(n):
        cls = AGENT_VEHICLE if rng.random() < 0.75 else AGENT_PEDESTRIAN
        x0 = rng.uniform(-10.0, 40.0)
        y0 = rng.choice([-1.0, 1.0]) * rng.uniform(3.0, 12.0)
        speed = rng.uniform(0.0, 6.0) if cls == AGENT_VEHICLE else rng.uniform(0.0, 1.5)
        heading = rng.uniform(-0.2, 0.2)
        ext = (4.5, 1.9) if cls == AGENT_VEHICLE else (0.6, 0.6)
        agents.append((x0, y0, speed * math.cos(heading), speed * math.sin(heading), ext[0], ext[1], cls))
    return np.array(agents, dtype=float).reshape(-1, 7)


_CUE_OFFSETS = {"left": (4.0, 12.0), "right": (4.0, -12.0), "straight": (12.0, 4.0)}


def _cue_agent(intent_name: str) -> np.ndarray:
    if intent_name in _CUE_OFFSETS:
        x, y = _CUE_OFFSETS[intent_name]
    else:
        # extended vocabularies: spread cues over the forward half of the grid
        k = INTENTS_20.index(intent_name) if intent_name in INTENTS_20 else 0
        x, y = 4.0 + 8.0 * (k % 2), -12.0 + 8.0 * (k % 4)
    return np.array([[x, y, 0.0, 0.0, 0.5, 0.5, AGENT_SIGNAL]])


def generate_scenario(
    seed: int,
    intent: int,
    params: KinematicParams = KinematicParams(),
    vocab: IntentVocabulary = IntentVocabulary(),
    scenario_id: str | None = None,
) -> Scenario:
    """Deterministic synthetic scenario for ``seed``.

    All random draws happen before the intent is used, so scenarios that
    differ only in intent share speeds, timings and traffic.
    """
    params.validate()
    if not (0 <= intent < len(vocab)):
        raise ScenarioError(f"intent {intent} not in vocabulary of size {len(vocab)}")
    rng = make_rng(seed, "scenario")
    times = params.timestamps()
    dt_frame = 1.0 / params.frame_rate
    pre = times[0] - dt_frame * np.arange(params.history - 1, 0, -1)
    timeline = np.concatenate([pre, times])
    times[-1] + params.horizon * params.waypoint_dt

    v0 = rng.uniform(params.speed_min, params.speed_max)
    a0 = rng.uniform(-params.accel_max, params.accel_max) if params.accel_max > 0 else 0.0
    duration = rng.uniform(*params.turn_duration)
    onset = times[-1] + rng.uniform(*params.onset_after_last)
    n_episodes = int(math.ceil(len(times) / params.episode_frames)) + 3
    episode_intents = rng.integers(0, len(vocab), size=n_episodes)
    agent_rng = make_rng(seed, "agents")
    rater_rng = make_rng(seed, "raters")

    name = vocab.names[intent]
    if params.family == "basic":
        speed_knots = [(0.0, a0)]
        _, acc = _TEMPLATES.get(name, ([], 0.0))
        if acc:
            speed_knots.append((onset, a0 + acc))
        speed = SpeedProfile(timeline[0] - 1.0, v0, speed_knots, params.speed_min, params.speed_max)
        knots = _maneuver_knots(name, onset, duration, params.turn_angle, speed)
        frame_intents = np.full(len(times), intent)
        cue_frames: dict[int, str] = {}
    else:
        speed = SpeedProfile(timeline[0] - 1.0, v0, [(0.0, a0)], params.speed_min, params.speed_max)
        episode_intents[0] = intent
        knots = []
        frame_intents = np.zeros(len(times), dtype=int)
        cue_frames = {}
        ep_len = params.episode_frames
        for e in range(n_episodes):
            first = e * ep_len
            start_t = times[0] + first * dt_frame
            z = vocab.names[int(episode_intents[e])]
            knots += _maneuver_knots(z, start_t + params.episode_onset, params.episode_turn_duration,
                                     params.episode_turn_angle, speed)
            frame_intents[first : first + ep_len] = episode_intents[e]
            for i in range(first, min(first + params.cue_frames, len(times))):
                cue_frames[i] = z
    motion = EgoMotion(speed, CurvaturePath(knots))

    traffic = _sample_agents(agent_rng, params.n_agents)
    frames = []
    k = np.arange(1, params.horizon + 1) * params.waypoint_dt
    for i, t in enumerate(times):
        st = motion.world_states(t)
        pose = Pose2(st[0], st[1], st[6])
        hist = motion.world_states(timeline[i : i + params.history])[:, :6]
        fut = to_ego(motion.world_states(t + k), pose)
        agents = traffic.copy()
        if len(agents):
            world_xy = agents[:, 0:2] + agents[:, 2:4] * t
            agents[:, 0:2] = pose.inverse().apply(world_xy)
            agents[:, 2:4] = pose.inverse().rotate(agents[:, 2:4])
        if i in cue_frames:
            agents = np.concatenate([agents, _cue_agent(cue_frames[i])])
        traj, scores = _rater_set(rater_rng, fut)
        frames.append(
            Frame(float(t), pose, hist, agents, fut, int(frame_intents[i]), float(speed.v(t)), traj, scores)
        )
    tv = TokenVocab(vocab)
    scen = Scenario(
        scenario_id or f"{params.family}-{seed:06d}",
        params.family,
        int(intent),
        vocab.names,
        frames,
        [qa_for_frame(frames[0], tv, vocab, "intent"), qa_for_frame(frames[0], tv, vocab, "side")],
        motion,
    )
    scen.validate()
    return scen


def _rater_set(rng, fut: np.ndarray):
    """GT plus a slower and a drifting alternative, with descending scores."""
    pos = fut[:, :2]
    n = len(pos)
    t = np.arange(1, n + 1, dtype=float)
    path = np.concatenate([[[0.0, 0.0]], pos])
    slow_t = 0.9 * t
    slow = np.stack([np.interp(slow_t, np.arange(n + 1), path[:, d]) for d in (0, 1)], -1)
    side = 1.0 if rng.random() < 0.5 else -1.0
    drift = pos + np.stack([np.zeros(n), side * 0.12 * t], -1)
    scores = np.array([rng.uniform(8.5, 10.0), rng.uniform(6.0, 8.0), rng.uniform(3.0, 5.0)])
    return np.stack([pos, slow, drift]), np.round(scores, 3)


def qa_for_frame(frame: Frame, tv: TokenVocab, vocab: IntentVocabulary, topic: str):
    """Templated (question ids, answer ids) for ``topic`` in {"intent", "side"}."""
    q = [tv.bos, tv.ids[topic], tv.ids["?"]]
    if topic == "intent":
        a = [tv.ids[vocab.names[frame.intent]], tv.eos]
    elif topic == "side":
        a = [tv.ids[nearest_side(frame.agents)], tv.eos]
    else:
        raise ValueError(f"unknown QA topic {topic!r}")
    return q, a


def nearest_side(agents: np.ndarray, max_range: float = 30.0) -> str:
    traffic = agents[agents[:, 6] != AGENT_SIGNAL] if len(agents) else agents
    if len(traffic) == 0:
        return "side_none"
    d = np.hypot(traffic[:, 0], traffic[:, 1])
    j = int(np.argmin(d))
    if d[j] > max_range:
        return "side_none"
    return "side_left" if traffic[j, 1] >= 0 else "side_right"


# -- BEV "vision" tokens ------------------------------------------------------

@dataclass(frozen=True)
class GridConfig:
    extent: float = 32.0
    cells: int = 4

    @property
    def n_tokens(self) -> int:
        return self.cells * self.cells

    @property
    def cell(self) -> float:
        return self.extent / self.cells


CONTENT_DIM = 8
POSITION_DIM = 2
VISION_DIM = CONTENT_DIM + POSITION_DIM
EMPTY_CELL = np.array([1.0, 0, 0, 0, 0, 0, 0, 0])


def encode_scene_tokens(agents: np.ndarray, grid: GridConfig = GridConfig()) -> np.ndarray:
    """(cells*cells, VISION_DIM) patch tokens, row-major over (x cell, y cell).

    Columns: [empty flag, vehicle/pedestrian/signal counts (halved), mean
    velocity / 10, mean extent / 5 | patch centre / half-extent]. Agents
    outside the grid are dropped.
    """
    n = grid.cells
    half = grid.extent / 2
    content = np.tile(EMPTY_CELL, (n, n, 1))
    sums = np.zeros((n, n, 8))
    agents = np.asarray(agents, dtype=float).reshape(-1, 7)
    for a in agents:
        ix = int(math.floor((a[0] + half) / grid.cell))
        iy = int(math.floor((a[1] + half) / grid.cell))
        if not (0 <= ix < n and 0 <= iy < n):
            continue
        c = int(a[6])
        sums[ix, iy, 0] += 1
        sums[ix, iy, 1 + c] += 1
        sums[ix, iy, 4:6] += a[2:4]
        sums[ix, iy, 6:8] += a[4:6]
    occ = sums[..., 0] > 0
    cnt = np.maximum(sums[..., 0:1], 1)
    filled = np.concatenate([np.zeros((n, n, 1)), sums[..., 1:4] / 2.0, sums[..., 4:6] / cnt / 10.0,
                             sums[..., 6:8] / cnt / 5.0], -1)
    content = np.where(occ[..., None], filled, content)
    centres = (np.arange(n) + 0.5) * grid.cell - half
    pos = np.stack(np.meshgrid(centres, centres, indexing="ij"), -1) / half
    return np.concatenate([content, pos], -1).reshape(n * n, VISION_DIM)


# -- ego-state features ---------------------------------------------------------

POS_SCALE, VEL_SCALE, ACC_SCALE = 20.0, 10.0, 3.0


def ego_features(frame: Frame) -> np.ndarray:
    """(3, 2*history): position / velocity / acceleration histories in the current ego frame."""
    h = to_ego(frame.ego_history, frame.ego_pose)
    return np.stack([
        (h[:, 0:2] / POS_SCALE).reshape(-1),
        (h[:, 2:4] / VEL_SCALE).reshape(-1),
        (h[:, 4:6] / ACC_SCALE).reshape(-1),
    ])  # fmt: skip


# -- datasets ------------------------------------------------------------------

def generate_dataset(n: int, seed: int, params: KinematicParams, vocab: IntentVocabulary, offset: int = 0):
    """``n`` scenarios with intents cycling through the vocabulary."""
    out = []
    for k in range(n):
        s = seed * 100003 + offset + k
        out.append(generate_scenario(s, (offset + k) % len(vocab), params, vocab, f"{params.family}-{offset + k:05d}"))
    return out


# -- serialisation -------------------------------------------------------------

def _arr(x: np.ndarray) -> list:
    return np.asarray(x, dtype=float).tolist()


def to_record(s: Scenario) -> dict:
    return {
        "id": s.id,
        "family": s.family,
        "intent_label": s.intent_names[s.intent_label],
        "intent_names": list(s.intent_names),
        "qa_pairs": [{"question": list(q), "answer": list(a)} for q, a in s.qa_pairs],
        "frames": [
            {
                "timestamp": f.timestamp,
                "ego_pose": [f.ego_pose.x, f.ego_pose.y, f.ego_pose.heading],
                "ego_history": _arr(f.ego_history),
                "agents": _arr(f.agents),
                "gt_future": _arr(f.gt_future),
                "intent": s.intent_names[f.intent],
                "speed": f.speed,
                "raters": {"trajectories": _arr(f.rater_trajectories), "scores": _arr(f.rater_scores)},
            }
            for f in s.frames
        ],
    }


def serialize(s: Scenario) -> str:
    return json.dumps(to_record(s), separators=(",", ":"))


def _get(rec: dict, key: str, path: str):
    if not isinstance(rec, dict) or key not in rec:
        raise KeyError(f"{path}{key}")
    return rec[key]


def _array(value, shape_tail: tuple[int, ...], path: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ValueError(f"{path}: not a numeric array") from None
    if arr.size == 0 and shape_tail:
        arr = arr.reshape((0,) + shape_tail)
    if shape_tail and arr.shape[arr.ndim - len(shape_tail) :] != shape_tail:
        raise ValueError(f"{path}: expected trailing shape {shape_tail}, got {arr.shape}")
    return arr


def from_record(rec: dict) -> Scenario:
    names = tuple(_get(rec, "intent_names", ""))
    label = _get(rec, "intent_label", "")
    if label not in names:
        raise ValueError(f"intent_label: {label!r} not in intent_names")
    frames = []
    for i, fr in enumerate(_get(rec, "frames", "")):
        p = f"frames[{i}]."
        pose = _get(fr, "ego_pose", p)
        raters = _get(fr, "raters", p)
        fi = _get(fr, "intent", p)
        if fi not in names:
            raise ValueError(f"{p}intent: {fi!r} not in intent_names")
        frames.append(
            Frame(
                float(_get(fr, "timestamp", p)),
                Pose2(*[float(v) for v in pose]),
                _array(_get(fr, "ego_history", p), (6,), p + "ego_history"),
                _array(_get(fr, "agents", p), (7,), p + "agents"),
                _array(_get(fr, "gt_future", p), (6,), p + "gt_future"),
                names.index(fi),
                float(_get(fr, "speed", p)),
                _array(_get(raters, "trajectories", p + "raters."), (2,), p + "raters.trajectories"),
                _array(_get(raters, "scores", p + "raters."), (), p + "raters.scores"),
            )
        )
    qa = [(list(map(int, _get(q, "question", "qa_pairs."))), list(map(int, _get(q, "answer", "qa_pairs."))))
          for q in _get(rec, "qa_pairs", "")]
    s = Scenario(str(_get(rec, "id", "")), str(_get(rec, "family", "")), names.index(label), names, frames, qa)
    s.validate()
    return s


def parse_line(line: str, lineno: int = 1) -> Scenario:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"line {lineno}: malformed JSON ({exc.msg})") from None
    try:
        return from_record(rec)
    except KeyError as exc:
        raise DatasetError(f"line {lineno}: missing field {exc.args[0]!r}") from None
    except (ValueError, TypeError) as exc:
        raise DatasetError(f"line {lineno}: {exc}") from None


def parse(text: str) -> Scenario:
    return parse_line(text.strip(), 1)


def write_jsonl(path: str | Path, scenarios: Iterable[Scenario]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenarios:
            fh.write(serialize(s) + "\n")


def read_jsonl(path: str | Path) -> Iterator[Scenario]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield parse_line(line, lineno)
