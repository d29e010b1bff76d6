"""Per-frame token layout and the mode-specific attention masks."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class TokenRole(enum.IntEnum):
    MEMORY = 0
    VISION = 1
    STATE = 2
    QUESTION = 3
    ANSWER = 4
    ACTION = 5


R = TokenRole
MODES: dict[str, tuple[TokenRole, ...]] = {
    "vqa_first": (R.MEMORY, R.VISION, R.STATE, R.QUESTION, R.ANSWER, R.ACTION),
    "vqa_only": (R.MEMORY, R.VISION, R.STATE, R.QUESTION, R.ANSWER),
    "action_first": (R.MEMORY, R.VISION, R.STATE, R.ACTION, R.QUESTION, R.ANSWER),
    "action_only": (R.MEMORY, R.VISION, R.STATE, R.ACTION),
}
# fast-mode subgraph: action_first with the answer span removed
FAST = (R.MEMORY, R.VISION, R.STATE, R.ACTION, R.QUESTION)
# spans that may be empty while decoding
_OPTIONAL = {R.ANSWER}


class LayoutError(ValueError):
    pass


def mode_roles(mode: str) -> tuple[TokenRole, ...]:
    if mode not in MODES:
        raise LayoutError(f"unknown mode {mode!r}; expected one of {sorted(MODES)}")
    return MODES[mode]


def has_language(mode: str) -> bool:
    return R.QUESTION in mode_roles(mode)


def has_action(mode: str) -> bool:
    return R.ACTION in mode_roles(mode)


@dataclass
class FrameTokenSequence:
    """Embeddings (.., T, H) with one role per position.

    ``spans`` maps each present role to its half-open [start, end) range.
    """

    embeddings: Tensor | None
    roles: np.ndarray
    position_ids: np.ndarray
    mode: str
    spans: dict[TokenRole, tuple[int, int]]

    def __len__(self) -> int:
        return len(self.roles)

    def positions(self, role: TokenRole) -> np.ndarray:
        a, b = self.spans.get(role, (0, 0))
        return np.arange(a, b)


def _assemble(order, lengths: dict[TokenRole, int], mode: str, allow_empty=_OPTIONAL):
    roles, spans, pos = [], {}, 0
    for role in order:
        n = lengths.get(role, 0)
        if n == 0 and role not in allow_empty:
            raise LayoutError(f"mode {mode}: required {role.name} span is missing")
        spans[role] = (pos, pos + n)
        roles += [int(role)] * n
        pos += n
    extra = {r for r, n in lengths.items() if n and r not in order}
    if extra:
        names = ", ".join(sorted(r.name for r in extra))
        raise LayoutError(f"mode {mode}: spans not used by this mode: {names}")
    return np.array(roles, dtype=np.int64), spans


def layout(mode: str, lengths: dict[TokenRole, int], order=None) -> FrameTokenSequence:
    """Role layout only (no embeddings); ``order`` overrides the mode's span order."""
    order = mode_roles(mode) if order is None else order
    roles, spans = _assemble(order, lengths, mode)
    return FrameTokenSequence(None, roles, np.arange(len(roles)), mode, spans)


def build_sequence(spans: dict[TokenRole, Tensor], mode: str, order=None) -> FrameTokenSequence:
    """Concatenate role spans of shape (.., n, H) in the order ``mode`` prescribes."""
    order = mode_roles(mode) if order is None else order
    lengths = {r: (t.shape[-2] if t is not None else 0) for r, t in spans.items()}
    seq = layout(mode, lengths, order)
    parts = [spans[r] for r in order if lengths.get(r, 0)]
    seq.embeddings = ad.concat(parts, axis=-2)
    return seq


def build_mask(roles) -> np.ndarray:
    """(T, T) visibility, True where query row may attend key column.

    Non-action tokens see every position up to and including their own.
    Action tokens see the non-action prefix before the action span and the
    whole action span.
    """
    roles = np.asarray(roles)
    t = len(roles)
    idx = np.arange(t)
    mask = idx[None, :] <= idx[:, None]
    act = np.flatnonzero(roles == R.ACTION)
    if len(act):
        end = act[-1] + 1
        mask[act, :] = idx[None, :] < end
    return mask


def visible_prefix(mask: np.ndarray) -> np.ndarray:
    """Length of the visible key prefix of every row (masks here are always prefixes)."""
    return mask.sum(axis=1)
