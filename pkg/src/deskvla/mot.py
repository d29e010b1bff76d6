"""Mixture-of-Transformers layers: role-routed experts over one attention pool."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Expert, apply_rope, attention, merge_heads, split_heads
from .layout import TokenRole as R
from .nn import Module


class GroupingError(ValueError):
    pass


@dataclass(frozen=True)
class GroupingConfig:
    """Role -> expert-group map. Group 0 is the full-width context group."""

    name: str
    groups: tuple[frozenset, ...]
    extensions: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        seen: set = set()
        for g in self.groups:
            if seen & g:
                raise GroupingError(f"grouping {self.name}: roles assigned to more than one group")
            seen |= g

    def group_of(self, roles: np.ndarray) -> np.ndarray:
        lookup = {int(r): i for i, g in enumerate(self.groups) for r in g}
        missing = sorted({int(r) for r in roles} - set(lookup))
        if missing:
            names = ", ".join(R(m).name for m in missing)
            raise GroupingError(f"grouping {self.name} does not route roles: {names}")
        return np.array([lookup[int(r)] for r in roles], dtype=np.int64)

    def register_extension(self, role_name: str, expert_name: str) -> None:
        """Reserve an extra role->expert binding; such experts are not built."""
        self.extensions[role_name] = expert_name


GROUPINGS = {
    "context-action": GroupingConfig(
        "context-action",
        (frozenset({R.VISION, R.QUESTION, R.ANSWER}), frozenset({R.MEMORY, R.STATE, R.ACTION})),
    ),
    "context-proprio-action": GroupingConfig(
        "context-proprio-action",
        (frozenset({R.VISION, R.QUESTION, R.ANSWER, R.MEMORY, R.STATE}), frozenset({R.ACTION})),
    ),
}


def grouping(name: str) -> GroupingConfig:
    if name not in GROUPINGS:
        raise GroupingError(f"unknown grouping {name!r}; expected one of {sorted(GROUPINGS)}")
    return GROUPINGS[name]


class MoTBlock(Module):
    """One transformer layer whose projections and FFN are chosen per token group.

    The action group uses ``action_heads`` query heads; its keys/values still
    cover all ``heads`` pool heads at the common head width, and its query
    head j reads pool head j.
    """

    def __init__(self, rng, hidden, heads, ffn, action_heads, action_ffn, grouping_cfg: GroupingConfig,
                 zero_residual=False):
        self.experts = [
            Expert(rng, hidden, heads, heads, ffn, zero_residual),
            Expert(rng, hidden, action_heads, heads, action_ffn, zero_residual),
        ]
        self._grouping = grouping_cfg

    def tie_from(self, dense_expert: Expert, groups=(0, 1)) -> None:
        """Copy a dense layer's weights into the selected experts (shapes must agree)."""
        src = dict(dense_expert.named_parameters())
        for g in groups:
            for name, p in self.experts[g].named_parameters():
                if p.shape != src[name].shape:
                    raise GroupingError(f"cannot tie {name}: {p.shape} vs {src[name].shape}")
                p.data = src[name].data.copy()

    def __call__(self, x: Tensor, roles, mask, positions, isolate_groups: bool = False, exact: bool = True) -> Tensor:
        group = self._grouping.group_of(roles)
        rows = [np.flatnonzero(group == g) for g in range(len(self.experts))]
        present = [g for g in range(len(self.experts)) if len(rows[g])]
        order = np.concatenate([rows[g] for g in present])
        inverse = np.argsort(order)

        xs, qs, ks, vs = {}, {}, {}, {}
        for g in present:
            xs[g] = x[:, rows[g]]
            qs[g], ks[g], vs[g] = self.experts[g].project(xs[g])
        heads = self.experts[0].kv_heads
        k = ad.concat([ks[g] for g in present], axis=1)[:, inverse]
        v = ad.concat([vs[g] for g in present], axis=1)[:, inverse]
        k = apply_rope(split_heads(k, heads), positions)
        v = split_heads(v, heads)
        if isolate_groups:
            mask = mask & (group[:, None] == group[None, :])

        outs = []
        for g in present:
            e = self.experts[g]
            q = apply_rope(split_heads(qs[g], e.q_heads), positions[rows[g]])
            kh, vh = k[:, : e.q_heads], v[:, : e.q_heads]
            a = attention(q, kh, vh, mask[rows[g]], ordered=exact)
            outs.append(e.finish(xs[g], merge_heads(a)))
        return ad.concat(outs, axis=1)[:, inverse]
