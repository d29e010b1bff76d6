"""Supervised training (framewise and streaming) and evaluation loops."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import FrameBatch, VLAModel, collate
from .flow import ActionCodec, sample_t
from .intent import GuidanceConfig, drop_intents
from .layout import MODES, TokenRole as R
from .memory import MemoryChannel
from .nn import AdamW, clip_grad_norm, warmup_cosine
from .rng import make_rng
from .scenario import Frame, IntentVocabulary, Scenario, TokenVocab

log = logging.getLogger(__name__)

TEMPORAL = ("chunk", "stream", "stream+memory")


@dataclass
class TrainConfig:
    steps: int = 400
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    warmup: int = 100
    grad_clip: float = 1.0
    mode_weights: dict[str, float] = field(default_factory=lambda: {m: 1.0 for m in MODES})
    topics: tuple[str, ...] = ("intent", "side")
    seed: int = 0
    # streaming
    temporal: str = "stream+memory"
    window: int = 4
    detach_memory: bool = False

    def __post_init__(self):
        if self.temporal not in TEMPORAL:
            raise ValueError(f"temporal must be one of {TEMPORAL}, got {self.temporal!r}")
        unknown = set(self.mode_weights) - set(MODES)
        if unknown:
            raise ValueError(f"unknown modes in mode_weights: {sorted(unknown)}")
        if self.window < 1:
            raise ValueError("window must be >= 1")


@dataclass
class DataContext:
    vocab: IntentVocabulary
    tokens: TokenVocab
    codec: ActionCodec = field(default_factory=ActionCodec)

    @classmethod
    def for_vocab(cls, vocab: IntentVocabulary) -> "DataContext":
        return cls(vocab, TokenVocab(vocab))

    def batch(self, frames: Sequence[Frame], topics=None) -> FrameBatch:
        return collate(frames, self.tokens, self.vocab, self.codec, topics)


class TrainingError(FloatingPointError):
    pass


class _Optim:
    """AdamW with warmup + cosine schedule, gradient clipping and a CSV log."""

    def __init__(self, model: VLAModel, cfg: TrainConfig, total: int, log_path=None):
        self.model = model
        self.cfg = cfg
        self.total = total
        self.opt = AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
        self.step_idx = 0
        self.log_rows: list[dict] = []
        self.log_path = Path(log_path) if log_path else None

    def apply(self, loss: Tensor, report: dict) -> dict:
        if not np.isfinite(loss.item()):
            raise TrainingError(f"non-finite loss at step {self.step_idx}: {report}")
        ad.backward(loss)
        gnorm = clip_grad_norm(self.opt.params, self.cfg.grad_clip)
        lr = warmup_cosine(self.step_idx, self.total, self.cfg.lr, self.cfg.warmup)
        self.opt.step(lr)
        self.opt.zero_grad()
        row = {"step": self.step_idx, **report, "lr": lr, "grad_norm": gnorm}
        self.log_rows.append(row)
        self.step_idx += 1
        return row

    def write_log(self, path=None) -> None:
        path = Path(path) if path else self.log_path
        if path is None or not self.log_rows:
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "L_AR", "L_FM", "lr", "grad_norm"], extrasaction="ignore")
            w.writeheader()
            w.writerows(self.log_rows)


def _combine(parts: list[tuple[Tensor, int]]) -> Tensor | None:
    """Count-weighted mean of per-group mean losses."""
    if not parts:
        return None
    n = sum(c for _, c in parts)
    total = parts[0][0] * (parts[0][1] / n)
    for loss, c in parts[1:]:
        total = total + loss * (c / n)
    return total


def joint_loss(model: VLAModel, ctx: DataContext, frames: Sequence[Frame], modes: Sequence[str], rng,
               guidance: GuidanceConfig, topics=None, memory=None):
    """L_AR + L_FM for frames whose modes may differ; returns (total, ar, fm, hidden by mode)."""
    b = len(frames)
    t = sample_t(rng, b)
    eps = rng.standard_normal((b, model.cfg.horizon, model.cfg.action_dim))
    batch = ctx.batch(frames, topics)
    intents = drop_intents(rng, batch.intent, guidance.p_drop, model.null_intent)
    ar_parts, fm_parts, hidden = [], [], {}
    for mode in MODES:
        idx = np.array([i for i, m in enumerate(modes) if m == mode], dtype=np.int64)
        if not len(idx):
            continue
        sub = _subset(batch, idx)
        mem = memory[idx] if memory is not None else None
        out = model.losses(sub, mode, t[idx], eps[idx], intents[idx], mem)
        hidden[mode] = (idx, out["hidden"], out["seq"])
        if "ar" in out:
            ar_parts.append((out["ar"], len(idx) * sub.answer.shape[1]))
        if "fm" in out:
            fm_parts.append((out["fm"], len(idx)))
    ar, fm = _combine(ar_parts), _combine(fm_parts)
    total = ar if fm is None else fm if ar is None else ar + fm
    return total, ar, fm, hidden


def _subset(batch: FrameBatch, idx) -> FrameBatch:
    return FrameBatch(
        batch.vision[idx], batch.ego[idx], batch.question[idx], batch.answer[idx], batch.x0[idx],
        batch.intent[idx], [batch.stamps[i] for i in idx], batch.times[idx], [batch.frames[i] for i in idx],
    )


def _sample_modes(rng, cfg: TrainConfig, n: int) -> list[str]:
    names = list(cfg.mode_weights)
    w = np.array([cfg.mode_weights[m] for m in names], dtype=float)
    return [names[i] for i in rng.choice(len(names), size=n, p=w / w.sum())]


def _report(ar, fm) -> dict:
    return {"L_AR": ar.item() if ar is not None else 0.0, "L_FM": fm.item() if fm is not None else 0.0}


class SFTTrainer:
    """Framewise supervised training on independent frames (empty memory channel)."""

    def __init__(self, model: VLAModel, frames: Sequence[Frame], ctx: DataContext, cfg: TrainConfig = TrainConfig(),
                 guidance: GuidanceConfig = GuidanceConfig(), log_path=None):
        self.model, self.frames, self.ctx, self.cfg, self.guidance = model, list(frames), ctx, cfg, guidance
        self.rng = make_rng(cfg.seed, "sft")
        self.optim = _Optim(model, cfg, cfg.steps, log_path)

    def step(self, frames: Sequence[Frame] | None = None, modes: Sequence[str] | None = None) -> dict:
        if frames is None:
            idx = self.rng.choice(len(self.frames), size=min(self.cfg.batch_size, len(self.frames)), replace=False)
            frames = [self.frames[i] for i in idx]
        modes = _sample_modes(self.rng, self.cfg, len(frames)) if modes is None else modes
        topics = [self.cfg.topics[i] for i in self.rng.integers(0, len(self.cfg.topics), len(frames))]
        total, ar, fm, _ = joint_loss(self.model, self.ctx, frames, modes, self.rng, self.guidance, topics)
        return self.optim.apply(total, {**_report(ar, fm), "total": total.item()})

    def run(self, steps: int | None = None) -> list[dict]:
        for _ in range(self.cfg.steps if steps is None else steps):
            row = self.step()
            if row["step"] % 50 == 0:
                log.info("sft step %d  L_AR %.4f  L_FM %.4f", row["step"], row["L_AR"], row["L_FM"])
        self.optim.write_log()
        return self.optim.log_rows


class StreamTrainer:
    """Read-forward-write training over frame streams.

    ``temporal`` selects the regime: ``stream+memory`` reads the channel and
    backpropagates through ``window`` frames; ``stream`` walks the same streams
    but always reads an empty channel; ``chunk`` trains on shuffled single
    frames with the channel cleared every frame.
    """

    def __init__(self, model: VLAModel, streams: Sequence[Scenario], ctx: DataContext, cfg: TrainConfig,
                 guidance: GuidanceConfig = GuidanceConfig(), log_path=None):
        self.model, self.streams, self.ctx, self.cfg, self.guidance = model, list(streams), ctx, cfg, guidance
        self.rng = make_rng(cfg.seed, "stream", cfg.temporal)
        lengths = {len(s.frames) for s in self.streams}
        if len(lengths) != 1:
            raise ValueError("streams in one trainer must have equal length")
        self.n_frames = lengths.pop()
        self.optim = _Optim(model, cfg, cfg.steps, log_path)

    def _frame_losses(self, frames, channel: MemoryChannel | None, use_memory: bool):
        model = self.model
        b = len(frames)
        stamps = [f.ego_pose.inverse() for f in frames]
        times = np.array([f.timestamp for f in frames])
        memory = model.memory.read(channel if use_memory else model.memory.new_channel(), stamps, times)
        modes = _sample_modes(self.rng, self.cfg, b)
        topics = [self.cfg.topics[i] for i in self.rng.integers(0, len(self.cfg.topics), b)]
        total, ar, fm, hidden = joint_loss(model, self.ctx, frames, modes, self.rng, self.guidance, topics, memory)
        if channel is not None:
            # memory, vision and state lead every layout and never see later tokens
            parts = [(idx, h[:, : seq.spans[R.STATE][1]]) for idx, h, seq in hidden.values()]
            order = np.argsort(np.concatenate([i for i, _ in parts]))
            prefix = ad.concat([h for _, h in parts], axis=0)[order]
            model.memory.write(channel, prefix, stamps, times)
        return total, ar, fm

    def step(self) -> list[dict]:
        """One pass over a batch of streams; one optimizer step per window of frames."""
        cfg = self.cfg
        idx = self.rng.choice(len(self.streams), size=min(cfg.batch_size, len(self.streams)), replace=False)
        streams = [self.streams[i] for i in idx]
        if cfg.temporal == "chunk":
            pairs = [(s, k) for s in streams for k in range(self.n_frames)]
            order = self.rng.permutation(len(pairs))
            groups = [
                [pairs[j][0].frames[pairs[j][1]] for j in order[a : a + len(streams)]]
                for a in range(0, len(pairs), len(streams))
            ]
        else:
            groups = [[s.frames[k] for s in streams] for k in range(self.n_frames)]
        use_memory = cfg.temporal == "stream+memory"
        channel = self.model.memory.new_channel() if use_memory else None
        rows = []
        for start in range(0, len(groups), cfg.window):
            totals, ars, fms = [], [], []
            for frames in groups[start : start + cfg.window]:
                if use_memory and cfg.detach_memory:
                    channel.detach()
                total, ar, fm = self._frame_losses(frames, channel, use_memory)
                totals.append(total)
                ars.append(ar.item() if ar is not None else 0.0)
                fms.append(fm.item() if fm is not None else 0.0)
            loss = totals[0]
            for extra in totals[1:]:
                loss = loss + extra
            loss = loss * (1.0 / len(totals))
            report = {"L_AR": float(np.mean(ars)), "L_FM": float(np.mean(fms)), "total": loss.item()}
            rows.append(self.optim.apply(loss, report))
            if channel is not None:
                channel.detach()
        return rows

    def run(self, iterations: int) -> list[dict]:
        for it in range(iterations):
            rows = self.step()
            if it % 10 == 0:
                log.info("%s iter %d  L_AR %.4f  L_FM %.4f", self.cfg.temporal, it, rows[-1]["L_AR"], rows[-1]["L_FM"])
        self.optim.write_log()
        return self.optim.log_rows

