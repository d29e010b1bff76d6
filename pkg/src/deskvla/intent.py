"""Intent conditioning for the action head and classifier-free guidance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import final_heading_change
from .nn import Linear, Module, normal_init, param
from .scenario import INTENTS_3, IntentVocabulary


class IntentEmbedder(Module):
    """(n_intents + 1) trainable rows; the last is the unconditional one (zero at init)."""

    def __init__(self, rng, n_intents: int, dim: int, out_dim: int, std: float = 0.5):
        table = normal_init(rng, (n_intents + 1, dim), std).data
        table[-1] = 0.0
        self.table = param(table)
        self.proj = Linear(rng, dim, out_dim, bias=False)
        self._n = n_intents

    @property
    def null_id(self) -> int:
        return self._n

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() > self._n):
            raise ValueError(f"intent ids must lie in [0, {self._n}] (last is unconditional), got {ids}")
        return self.proj(ad.embedding(self.table, ids))


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 1.5
    p_drop: float = 0.15

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if not (0 <= self.p_drop < 1):
            raise ValueError("p_drop must lie in [0, 1)")


def cfg_velocity(v_cond, v_uncond, s: float):
    """Guided field v_u + s (v_c - v_u), written as s v_c + (1 - s) v_u.

    The two forms are equal; this one returns v_c exactly at s=1 and v_u
    exactly at s=0.
    """
    return v_cond * s + v_uncond * (1.0 - s)


def drop_intents(rng: np.random.Generator, ids, p_drop: float, null_id: int) -> np.ndarray:
    ids = np.array(ids, dtype=np.int64)
    ids[rng.random(ids.shape) < p_drop] = null_id
    return ids


def trajectory_intent(traj, vocab: IntentVocabulary, threshold_deg: float = 15.0) -> int:
    """left / right / straight from the final heading of a ground-truth trajectory."""
    if set(vocab.names) != set(INTENTS_3):
        raise ValueError("trajectory-derived intent is defined for the left/right/straight vocabulary")
    dh = final_heading_change(traj)
    th = math.radians(threshold_deg)
    name = "left" if dh > th else "right" if dh < -th else "straight"
    return vocab.index(name)


def select_intent(logits: np.ndarray, intent_token_ids: Sequence[int]) -> np.ndarray:
    """Greedy class choice restricted to intent tokens; ties go to the lowest class."""
    logits = np.asarray(logits, dtype=float)
    return np.argmax(logits[..., np.asarray(intent_token_ids)], axis=-1)


INTENT_SOURCES = ("gt", "trajectory", "ntp")
