"""Linear-path flow matching: noising, time sampling, Euler integration, action codec."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

# per-channel loss weights over (dx, dy, vx, vy, ax, ay)
FM_WEIGHTS = np.array([1.0, 1.0, 0.5, 0.5, 0.5, 0.5])
BETA_ALPHA = 1.5


class FlowError(ValueError):
    pass


def sample_t(rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw t ~ Beta(1.5, 1) by inverting its CDF t^1.5."""
    return rng.random(n) ** (1.0 / BETA_ALPHA)


def check_t(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise FlowError(f"flow time must lie in [0, 1], got {t}")
    return t


def noise_sample(x0: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    """x_t = t * eps + (1 - t) * x0; ``t`` is a scalar or one value per leading item."""
    x0, eps = np.asarray(x0, dtype=float), np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise FlowError(f"noise_sample: x0 {x0.shape} and eps {eps.shape} differ")
    t = check_t(t)
    t = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    return t * eps + (1.0 - t) * x0


def velocity_target(x0: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return np.asarray(eps, dtype=float) - np.asarray(x0, dtype=float)


@dataclass
class FlowResult:
    x: np.ndarray
    times: list[float]
    snapshots: list[np.ndarray]


def euler_integrate(v_fn: Callable[[np.ndarray, float], np.ndarray], eps: np.ndarray, steps: int = 2) -> FlowResult:
    """Integrate dx/dt = v from t=1 (noise) to t=0 (data) with uniform steps.

    Returns the final sample and the state after every step.
    """
    if steps < 1:
        raise FlowError(f"need at least one Euler step, got {steps}")
    x = np.array(eps, dtype=float)
    dt = 1.0 / steps
    times, snaps = [], []
    for k in range(steps):
        t = 1.0 - k * dt
        v = np.asarray(v_fn(x, t), dtype=float)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"velocity field returned non-finite values at Euler step {k}")
        x = x - dt * v
        times.append(1.0 - (k + 1) * dt)
        snaps.append(x.copy())
    return FlowResult(x, times, snaps)


@dataclass(frozen=True)
class ActionCodec:
    """Maps ego-frame trajectories (.., L, 6) to the normalised training space.

    Positions become per-waypoint displacements; all channels are divided
    by fixed scales. Decoding cumulatively sums the displacements back.
    """

    delta_scale: float = 2.0
    vel_scale: float = 10.0
    acc_scale: float = 3.0

    @property
    def scales(self) -> np.ndarray:
        s = self.delta_scale, self.vel_scale, self.acc_scale
        return np.repeat(np.array(s), 2)

    def encode(self, traj) -> np.ndarray:
        traj = np.asarray(traj, dtype=float)
        out = traj.copy()
        pos = traj[..., 0:2]
        out[..., 0:2] = np.diff(pos, axis=-2, prepend=np.zeros_like(pos[..., :1, :]))
        return out / self.scales

    def decode(self, x) -> np.ndarray:
        out = np.asarray(x, dtype=float) * self.scales
        out[..., 0:2] = np.cumsum(out[..., 0:2], axis=-2)
        return out
