"""Group-relative policy optimisation of the flow action policy with an RFS reward.

The deterministic Euler sampler is turned into a stochastic policy by adding
N(0, σ²) noise after every step; the Gaussian density of each realised step
under the current mean gives the per-step log-probability.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .backbone import FrameBatch, VLAModel
from .metrics import RfsParams, rater_deviations, rfs
from .nn import AdamW, clip_grad_norm
from .rng import make_rng
from .scenario import Frame
from .train import DataContext

log = logging.getLogger(__name__)


@dataclass
class GrpoConfig:
    group: int = 8
    clip: float = 0.2
    beta_kl: float = 0.008
    lr: float = 5e-7
    grad_clip: float = 0.3
    sigma: float = 0.05
    steps: int = 2
    epochs: int = 1
    iterations: int = 200
    frames_per_iter: int = 4
    fixed_noise: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.group < 2:
            raise ValueError("GRPO needs at least 2 rollouts per group")
        if self.clip <= 0 or self.beta_kl < 0:
            raise ValueError("clip must be > 0 and beta_kl >= 0")
        if self.sigma <= 0:
            raise ValueError("the stochastic policy needs sigma > 0")


def kl_k3(r, c, beta: float = 1.0):
    """beta * (exp(r - c) - (r - c) - 1): non-negative, zero iff r == c.

    Works on numpy values and on Tensors (gradient flows through either).
    """
    d = r - c
    if isinstance(d, Tensor):
        return (ad.exp(d) - d - 1.0) * beta
    d = np.asarray(d, dtype=float)
    return beta * (np.expm1(d) - d)


def group_advantages(rewards) -> np.ndarray:
    """(r - mean) / (std + 1e-8) over the last axis; identical rewards give zeros."""
    r = np.asarray(rewards, dtype=float)
    mean = r.mean(axis=-1, keepdims=True)
    std = r.std(axis=-1, keepdims=True)
    adv = (r - mean) / (std + 1e-8)
    flat = np.ptp(r, axis=-1, keepdims=True) == 0
    return np.where(flat, 0.0, adv)


def clipped_surrogate(ratio: Tensor, adv: np.ndarray, clip: float):
    """PPO objective min(ρA, clip(ρ)A) per element, plus the active-clip mask.

    Where the clipped branch is the minimum the element is a constant, so
    it contributes no gradient.
    """
    rho = ratio.data
    clipped = np.clip(rho, 1 - clip, 1 + clip)
    use_clip = clipped * adv < rho * adv
    surr = ad.masked_fill(ratio * adv, use_clip, 0.0) + Tensor(np.where(use_clip, clipped * adv, 0.0))
    return surr, use_clip


def _gauss_logp(x_next, mean: Tensor | np.ndarray, sigma: float):
    """Sum over (L_f, 6) of log N(x_next; mean, σ²) per batch row."""
    d = x_next.shape[-1] * x_next.shape[-2]
    const = -d * (math.log(sigma) + 0.5 * math.log(2 * math.pi))
    if isinstance(mean, Tensor):
        diff = mean - Tensor(x_next)
        return (diff * diff).sum(axis=(1, 2)) * (-0.5 / sigma**2) + const
    diff = np.asarray(mean) - x_next
    return -0.5 * (diff * diff).sum(axis=(1, 2)) / sigma**2 + const


@dataclass
class Rollouts:
    frames: list[Frame]  # one per group member, group-major
    batch: FrameBatch
    intents: np.ndarray
    states: list[np.ndarray]  # x before each step
    next_states: list[np.ndarray]
    times: list[float]
    logp: np.ndarray  # (steps, N)
    rewards: np.ndarray  # (n_groups, G)
    trajectories: np.ndarray  # decoded (N, L_f, 6)


def _policy_mean(model: VLAModel, batch: FrameBatch, x, t, intents, dt):
    seq = model.embed(batch, "action_only", x, t)
    # rollouts, updates and the reference all take this same path, so BLAS attention is safe here
    v = model.velocity(model.forward(seq, exact=False), seq, t, intents)
    return Tensor(x) - v * dt


def rollout_group(model: VLAModel, ctx: DataContext, frames: Sequence[Frame], cfg: GrpoConfig, rng,
                  params: RfsParams = RfsParams()) -> Rollouts:
    """``cfg.group`` stochastic rollouts for each frame, with RFS rewards."""
    if cfg.sigma <= 0:
        raise ValueError("stochastic rollouts need sigma > 0")
    members = [f for f in frames for _ in range(cfg.group)]
    batch = ctx.batch(members)
    intents = batch.intent
    n = len(members)
    shape = (n, model.cfg.horizon, model.cfg.action_dim)
    # one starting noise per frame: group members differ only through the per-step noise
    x = np.repeat(rng.standard_normal((len(frames),) + shape[1:]), cfg.group, axis=0)
    dt = 1.0 / cfg.steps
    states, nxt, times, logps = [], [], [], []
    with no_grad():
        for k in range(cfg.steps):
            t = 1.0 - k * dt
            mean = _policy_mean(model, batch, x, t, intents, dt).data
            x_new = mean + cfg.sigma * rng.standard_normal(shape)
            states.append(x)
            nxt.append(x_new)
            times.append(t)
            logps.append(_gauss_logp(x_new, mean, cfg.sigma))
            x = x_new
    traj = ctx.codec.decode(x)
    rewards = np.array([rfs(p, f.raters, f.speed, params) for p, f in zip(traj, members)])
    return Rollouts(members, batch, intents, states, nxt, times, np.array(logps),
                    rewards.reshape(len(frames), cfg.group), traj)


@dataclass
class GrpoStats:
    iteration: int
    mean_reward: float
    kl: float
    clip_fraction: float
    trust_region_rate: float
    skipped: int = 0


class GrpoTrainer:
    def __init__(self, model: VLAModel, reference: VLAModel, ctx: DataContext, frames: Sequence[Frame],
                 cfg: GrpoConfig = GrpoConfig(), params: RfsParams = RfsParams(), log_path=None):
        self.model, self.reference, self.ctx, self.frames, self.cfg, self.params = (
            model, reference, ctx, list(frames), cfg, params)
        self.opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.0)
        self.history: list[GrpoStats] = []
        self.log_path = Path(log_path) if log_path else None
        self._rng = make_rng(cfg.seed, "grpo")

    def _frames_for(self, it: int) -> list[Frame]:
        k = self.cfg.frames_per_iter
        start = (it * k) % len(self.frames)
        return [self.frames[(start + j) % len(self.frames)] for j in range(k)]

    def _rng_for(self, it: int):
        if self.cfg.fixed_noise:
            # same noise whenever the same frames come round again
            return make_rng(self.cfg.seed, "grpo-noise", (it * self.cfg.frames_per_iter) % len(self.frames))
        return self._rng

    def update(self, ro: Rollouts) -> tuple[float, float, int]:
        """One clipped-surrogate + k3 step; returns (kl, clip fraction, skipped samples)."""
        cfg = self.cfg
        adv = group_advantages(ro.rewards).reshape(-1)
        dt = 1.0 / cfg.steps
        with no_grad():
            ref_logp = np.array([
                _gauss_logp(xn, _policy_mean(self.reference, ro.batch, x, t, ro.intents, dt).data, cfg.sigma)
                for x, xn, t in zip(ro.states, ro.next_states, ro.times)
            ])  # fmt: skip
        kl_val, clip_frac, skipped = 0.0, 0.0, 0
        for _ in range(cfg.epochs):
            terms, kls, clips = [], [], []
            for k, (x, xn, t) in enumerate(zip(ro.states, ro.next_states, ro.times)):
                logp = _gauss_logp(xn, _policy_mean(self.model, ro.batch, x, t, ro.intents, dt), cfg.sigma)
                log_ratio = logp - Tensor(ro.logp[k])
                bad = ~np.isfinite(log_ratio.data) | (np.abs(log_ratio.data) > 50)
                if bad.any():
                    skipped += int(bad.sum())
                    log.warning("skipping %d samples with non-finite ratio", int(bad.sum()))
                ratio = ad.exp(ad.masked_fill(log_ratio, bad, 0.0))
                surr, use_clip = clipped_surrogate(ratio, np.where(bad, 0.0, adv), cfg.clip)
                penalty = kl_k3(Tensor(ref_logp[k]), ad.masked_fill(logp, bad, 0.0) +
                                Tensor(np.where(bad, ref_logp[k], 0.0)), cfg.beta_kl)
                terms.append(penalty.mean() - surr.mean())
                kls.append(float(kl_k3(ref_logp[k], logp.data).mean()))
                clips.append(use_clip.mean())
            loss = terms[0]
            for extra in terms[1:]:
                loss = loss + extra
            loss = loss * (1.0 / len(terms))
            ad.backward(loss)
            clip_grad_norm(self.opt.params, cfg.grad_clip)
            self.opt.step()
            self.opt.zero_grad()
            kl_val, clip_frac = float(np.mean(kls)), float(np.mean(clips))
        return kl_val, clip_frac, skipped

    def iterate(self, it: int) -> GrpoStats:
        frames = self._frames_for(it)
        ro = rollout_group(self.model, self.ctx, frames, self.cfg, self._rng_for(it), self.params)
        kl, clip_frac, skipped = self.update(ro)
        inside = [
            rater_deviations(p, f.raters, self.params).min() <= self.params.radius(f.speed)
            for p, f in zip(ro.trajectories, ro.frames)
        ]
        stats = GrpoStats(it, float(ro.rewards.mean()), kl, clip_frac, float(np.mean(inside)), skipped)
        self.history.append(stats)
        return stats

    def run(self, iterations: int | None = None) -> list[GrpoStats]:
        for it in range(self.cfg.iterations if iterations is None else iterations):
            s = self.iterate(it)
            if it % 20 == 0:
                log.info("grpo iter %d  reward %.4f  kl %.2e", it, s.mean_reward, s.kl)
        self.write_log()
        return self.history

    def write_log(self, path=None) -> None:
        path = Path(path) if path else self.log_path
        if path is None:
            return
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "mean_reward", "kl", "clip_fraction", "trust_region_rate"])
            for s in self.history:
                w.writerow([s.iteration, s.mean_reward, s.kl, s.clip_fraction, s.trust_region_rate])


def moving_average(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window
