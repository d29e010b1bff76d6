"""Bounded FIFO memory channel with pose-aware read and write.

A frame's memory tokens are produced by learnable queries cross-attending
to the (motion-modulated) stored entries, and the frame's hidden states are
compressed back into one entry by the same propagation transformer.

Pose stamps are world-to-ego transforms (the inverse of the ego pose), so
``P_i ∘ P_j⁻¹`` maps coordinates of frame j into frame i.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import CrossBlock
from .nn import MLP, Module, RMSNorm, normal_init
from .se2 import Pose2, relative_transform

TRANSLATION_SCALE = 0.1


@dataclass
class MemoryEntry:
    tokens: Tensor  # (B, N_m, H)
    stamps: list[Pose2]
    timestamps: np.ndarray  # (B,)


@dataclass
class MemoryChannel:
    capacity: int = 2
    entries: list[MemoryEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("memory capacity must be at least 1")

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, entry: MemoryEntry) -> MemoryEntry | None:
        """Append and return the evicted (oldest) entry, if any."""
        self.entries.append(entry)
        if len(self.entries) > self.capacity:
            return self.entries.pop(0)
        return None

    def clear(self) -> None:
        self.entries.clear()

    def detach(self) -> None:
        """Cut gradient flow into stored entries (truncated backprop)."""
        for e in self.entries:
            e.tokens = e.tokens.detach()


def stamp_of(ego_pose: Pose2) -> Pose2:
    return ego_pose.inverse()


def modulation_feature(stamp_j: Pose2, t_j: float, stamp_i: Pose2, t_i: float, window: float) -> np.ndarray:
    """(cos φ, sin φ, δx, δy, τ) of T_{j→i} = P_i ∘ P_j⁻¹, τ = clip((t_i - t_j) / window, 0, 1)."""
    rel = relative_transform(stamp_i, stamp_j)
    tau = min(max((t_i - t_j) / window, 0.0), 1.0)
    return np.array([math.cos(rel.heading), math.sin(rel.heading), rel.x, rel.y, tau])


class MemoryModule(Module):
    def __init__(self, rng, hidden: int, n_tokens: int = 8, slots: int = 2, layers: int = 2, heads: int = 4,
                 frame_rate: float = 2.0):
        self.queries = normal_init(rng, (n_tokens, hidden), 1.0)
        self.null = normal_init(rng, (1, hidden), 1.0)
        self.blocks = [CrossBlock(rng, hidden, heads, hidden) for _ in range(layers)]
        self.out_norm = RMSNorm(hidden)
        self.modulation = MLP(rng, 5, hidden, hidden, zero_out=True)
        self._n_tokens = n_tokens
        self._slots = slots
        self._window = slots / frame_rate

    def new_channel(self) -> MemoryChannel:
        return MemoryChannel(self._slots)

    def propagate(self, context: Tensor) -> Tensor:
        b = context.shape[0]
        q = self.queries + Tensor(np.zeros((b, 1, 1)))
        for blk in self.blocks:
            q = blk(q, context)
        return self.out_norm(q)

    def modulate(self, entry: MemoryEntry, stamps: Sequence[Pose2], times) -> Tensor:
        feats = np.stack([
            modulation_feature(sj, tj, si, ti, self._window)
            for sj, tj, si, ti in zip(entry.stamps, entry.timestamps, stamps, times)
        ])  # fmt: skip
        feats[:, 2:4] *= TRANSLATION_SCALE
        shift = self.modulation(Tensor(feats))  # (B, H)
        return entry.tokens + shift.reshape(shift.shape[0], 1, shift.shape[1])

    def read(self, channel: MemoryChannel, stamps: Sequence[Pose2], times) -> Tensor:
        b = len(stamps)
        if len(channel) == 0:
            ctx = self.null + Tensor(np.zeros((b, 1, 1)))
        else:
            ctx = ad.concat([self.modulate(e, stamps, times) for e in channel.entries], axis=1)
        return self.propagate(ctx)

    def write(self, channel: MemoryChannel, hidden: Tensor, stamps: Sequence[Pose2], times) -> MemoryEntry | None:
        entry = MemoryEntry(self.propagate(hidden), list(stamps), np.asarray(times, dtype=float))
        return channel.append(entry)
