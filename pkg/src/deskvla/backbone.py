"""The shared transformer, its embeddings, the two heads and the joint loss."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .flow import FM_WEIGHTS, ActionCodec, FlowResult, check_t, euler_integrate
from .intent import IntentEmbedder, cfg_velocity, select_intent
from .layers import DenseBlock
from .layout import FAST, FrameTokenSequence, TokenRole as R, build_mask, build_sequence, has_language, mode_roles
from .memory import MemoryModule, stamp_of
from .mot import MoTBlock, grouping
from .nn import MLP, Linear, Module, RMSNorm, normal_init, sinusoidal_embedding
from .rng import make_rng
from .scenario import VISION_DIM, Frame, IntentVocabulary, TokenVocab, ego_features, encode_scene_tokens, qa_for_frame
from .se2 import Pose2


@dataclass
class BackboneConfig:
    hidden: int = 64
    layers: int = 4
    heads: int = 4
    ffn: int = 256
    vocab: int = 64
    n_mem: int = 8
    horizon: int = 20
    action_dim: int = 6
    history: int = 16
    vision_dim: int = VISION_DIM
    n_intents: int = 3
    intent_dim: int = 32
    head_hidden: int = 128
    backbone: str = "dense"
    grouping: str = "context-action"
    action_heads: int = 2
    action_ffn: int = 128
    mem_slots: int = 2
    mem_layers: int = 2
    mem_heads: int = 4
    frame_rate: float = 2.0
    zero_residual: bool = False

    def __post_init__(self):
        if self.hidden % self.heads or (self.hidden // self.heads) % 2:
            raise ValueError("hidden must split into an even head width")
        if self.hidden % self.mem_heads:
            raise ValueError("hidden must be divisible by mem_heads")
        if self.horizon <= 0 or self.layers <= 0:
            raise ValueError("horizon and layers must be positive")
        if self.backbone not in ("dense", "mot"):
            raise ValueError(f"backbone must be 'dense' or 'mot', got {self.backbone!r}")
        if not (0 < self.action_heads <= self.heads):
            raise ValueError("action_heads must lie in [1, heads]")

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown backbone keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FrameBatch:
    vision: np.ndarray  # (B, N_v, d_in)
    ego: np.ndarray  # (B, 3, 2 * history)
    question: np.ndarray  # (B, n_q)
    answer: np.ndarray  # (B, n_a)
    x0: np.ndarray  # (B, L_f, 6), normalised
    intent: np.ndarray  # (B,)
    stamps: list[Pose2]
    times: np.ndarray
    frames: list[Frame]

    def __len__(self) -> int:
        return len(self.frames)


def collate(frames: Sequence[Frame], tv: TokenVocab, vocab: IntentVocabulary, codec: ActionCodec,
            topics: Sequence[str] | None = None) -> FrameBatch:
    topics = ["intent"] * len(frames) if topics is None else topics
    qa = [qa_for_frame(f, tv, vocab, tp) for f, tp in zip(frames, topics)]
    return FrameBatch(
        vision=np.stack([encode_scene_tokens(f.agents) for f in frames]),
        ego=np.stack([ego_features(f) for f in frames]),
        question=np.array([q for q, _ in qa], dtype=np.int64),
        answer=np.array([a for _, a in qa], dtype=np.int64),
        x0=codec.encode(np.stack([f.gt_future for f in frames])),
        intent=np.array([f.intent for f in frames], dtype=np.int64),
        stamps=[stamp_of(f.ego_pose) for f in frames],
        times=np.array([f.timestamp for f in frames]),
        frames=list(frames),
    )


class ActionHead(Module):
    """Velocity field per action position: norm(h) + time/intent embedding -> SiLU MLP -> 6."""

    def __init__(self, rng, hidden: int, head_hidden: int, out: int, n_intents: int, intent_dim: int):
        self.norm = RMSNorm(hidden)
        self.time_mlp = MLP(rng, hidden, hidden, hidden)
        self.intent = IntentEmbedder(rng, n_intents, intent_dim, hidden)
        self.mlp = MLP(rng, hidden, head_hidden, out)

    def time_embedding(self, t, intents=None) -> Tensor:
        te = self.time_mlp(Tensor(sinusoidal_embedding(np.asarray(t, dtype=float), self.norm.weight.shape[0])))
        if intents is not None:
            te = te + self.intent(intents)
        return te

    def __call__(self, h_act: Tensor, t, intents=None) -> Tensor:
        te = self.time_embedding(t, intents)
        return self.mlp(self.norm(h_act) + te.reshape(te.shape[0], 1, te.shape[1]))


class VLAModel(Module):
    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        rng = make_rng(seed, "init")
        h = cfg.hidden
        self.role_emb = normal_init(rng, (len(R), h), 0.5)
        self.vision = Linear(rng, cfg.vision_dim, h)
        self.ego = [MLP(rng, 2 * cfg.history, h, h) for _ in range(3)]
        self.tokens = normal_init(rng, (cfg.vocab, h), 1.0)
        self.act_in = Linear(rng, cfg.action_dim, h)
        self.act_slot = normal_init(rng, (cfg.horizon, h), 0.5)
        if cfg.backbone == "dense":
            self.blocks = [DenseBlock(rng, h, cfg.heads, cfg.ffn, cfg.zero_residual) for _ in range(cfg.layers)]
        else:
            g = grouping(cfg.grouping)
            self.blocks = [
                MoTBlock(rng, h, cfg.heads, cfg.ffn, cfg.action_heads, cfg.action_ffn, g, cfg.zero_residual)
                for _ in range(cfg.layers)
            ]
        self.final_norm = RMSNorm(h)
        self.lm_head = Linear(rng, h, cfg.vocab)
        self.action_head = ActionHead(rng, h, cfg.head_hidden, cfg.action_dim, cfg.n_intents, cfg.intent_dim)
        self.memory = MemoryModule(rng, h, cfg.n_mem, cfg.mem_slots, cfg.mem_layers, cfg.mem_heads, cfg.frame_rate)

    @property
    def null_intent(self) -> int:
        return self.action_head.intent.null_id

    # -- embedding -------------------------------------------------------------
    def embed(self, batch: FrameBatch, mode: str, x_t=None, t=None, memory: Tensor | None = None,
              answer=None, order=None) -> FrameTokenSequence:
        """Role-tagged token sequence for ``batch`` in ``mode`` (or an explicit span order)."""
        order = mode_roles(mode) if order is None else order
        b = len(batch)
        spans: dict[R, Tensor] = {}
        if R.MEMORY in order:
            if memory is None:
                memory = self.memory.read(self.memory.new_channel(), batch.stamps, batch.times)
            spans[R.MEMORY] = memory
        if R.VISION in order:
            spans[R.VISION] = self.vision(Tensor(batch.vision))
        if R.STATE in order:
            pos_enc, vel_enc, acc_enc = self.ego
            st = pos_enc(Tensor(batch.ego[:, 0])) + vel_enc(Tensor(batch.ego[:, 1])) + acc_enc(Tensor(batch.ego[:, 2]))
            spans[R.STATE] = st.reshape(b, 1, st.shape[-1])
        if R.QUESTION in order:
            spans[R.QUESTION] = ad.embedding(self.tokens, batch.question)
        if R.ANSWER in order:
            ids = batch.answer if answer is None else np.asarray(answer, dtype=np.int64).reshape(b, -1)
            spans[R.ANSWER] = ad.embedding(self.tokens, ids) if ids.shape[1] else None
        if R.ACTION in order:
            if x_t is None or t is None:
                raise ValueError(f"mode {mode} needs noisy actions x_t and flow time t")
            t = np.broadcast_to(np.asarray(t, dtype=float), (b,))
            te = sinusoidal_embedding(t, self.cfg.hidden)[:, None, :]
            spans[R.ACTION] = self.act_in(Tensor(x_t)) + self.act_slot + Tensor(te)
        spans = {r: s for r, s in spans.items() if s is not None}
        seq = build_sequence(spans, mode, order)
        seq.embeddings = seq.embeddings + ad.embedding(self.role_emb, seq.roles)
        return seq

    # -- backbone ------------------------------------------------------------
    def forward(self, seq: FrameTokenSequence, isolate_groups: bool = False, upto: int | None = None,
                exact: bool = True) -> Tensor:
        """Residual stream after all (or the first ``upto``) layers, shape (B, T, H).

        ``exact=False`` uses BLAS products in attention: faster, but results at
        a position may then change in the last bits when unrelated tokens are
        added or removed.
        """
        mask = build_mask(seq.roles)
        x = seq.embeddings
        for i, blk in enumerate(self.blocks[:upto]):
            x = blk(x, seq.roles, mask, seq.position_ids, isolate_groups=isolate_groups, exact=exact)
            if not np.all(np.isfinite(x.data)):
                raise FloatingPointError(f"non-finite activations after layer {i}")
        return x

    def fast_forward(self, batch: FrameBatch, x_t, t, memory=None) -> tuple[FrameTokenSequence, Tensor]:
        """Reduced pass without the answer span; action outputs match action_first exactly."""
        seq = self.embed(batch, "action_first", x_t, t, memory, order=FAST)
        return seq, self.forward(seq)

    # -- heads -----------------------------------------------------------------
    def lm_logits(self, hidden: Tensor, positions) -> Tensor:
        return self.lm_head(self.final_norm(hidden[:, np.asarray(positions)]))

    def velocity(self, hidden: Tensor, seq: FrameTokenSequence, t, intents=None) -> Tensor:
        a, b = seq.spans[R.ACTION]
        return self.action_head(hidden[:, a:b], np.broadcast_to(np.asarray(t, dtype=float), (hidden.shape[0],)),
                                intents)

    # -- losses ---------------------------------------------------------------
    def ar_loss(self, hidden: Tensor, seq: FrameTokenSequence, answer) -> Tensor:
        """Mean NLL of answer tokens, each predicted from the position before it."""
        pos = seq.positions(R.ANSWER)
        if len(pos) == 0:
            raise ValueError(f"mode {seq.mode} has an empty answer span; no AR targets")
        return ad.cross_entropy(self.lm_logits(hidden, pos - 1), np.asarray(answer)[:, : len(pos)])

    def losses(self, batch: FrameBatch, mode: str, t, eps, intents, memory=None) -> dict[str, Tensor]:
        roles = mode_roles(mode)
        x_t = None
        if R.ACTION in roles:
            tt = check_t(t)[:, None, None]
            x_t = tt * eps + (1.0 - tt) * batch.x0
        seq = self.embed(batch, mode, x_t, t, memory)
        hidden = self.forward(seq)
        out = {"hidden": hidden, "seq": seq}
        if R.ANSWER in roles:
            out["ar"] = self.ar_loss(hidden, seq, batch.answer)
        if R.ACTION in roles:
            out["fm"] = fm_loss(self.velocity(hidden, seq, t, intents), batch.x0, eps, t)
        return out

    # -- inference -----------------------------------------------------------
    def intent_logits(self, batch: FrameBatch, memory=None) -> np.ndarray:
        with no_grad():
            seq = self.embed(batch, "vqa_only", memory=memory, answer=np.zeros((len(batch), 0)))
            hidden = self.forward(seq)
            return self.lm_logits(hidden, seq.positions(R.QUESTION)[-1:]).data[:, 0]

    def predict_intent(self, batch: FrameBatch, intent_token_ids, mode: str = "vqa_first", memory=None) -> np.ndarray:
        if not has_language(mode):
            raise ValueError(f"mode {mode} has no language path; supply a GT or trajectory-derived intent instead")
        return select_intent(self.intent_logits(batch, memory), intent_token_ids)

    def decode_answer(self, batch: FrameBatch, length: int, memory=None) -> np.ndarray:
        """Greedy answer decoding on the language-only layout."""
        ans = np.zeros((len(batch), 0), dtype=np.int64)
        with no_grad():
            for _ in range(length):
                seq = self.embed(batch, "vqa_only", memory=memory, answer=ans)
                hidden = self.forward(seq)
                last = seq.positions(R.QUESTION)[-1] + ans.shape[1]
                nxt = self.lm_logits(hidden, [last]).data[:, 0].argmax(-1)
                ans = np.concatenate([ans, nxt[:, None]], axis=1)
        return ans

    def velocity_fn(self, batch: FrameBatch, mode: str, intents=None, scale: float | None = None,
                    memory=None, answer=None, two_pass: bool = False, fast: bool = False):
        """Closure v(x, t) for the Euler sampler.

        With ``scale`` set, conditional and unconditional fields are mixed;
        the backbone pass is shared unless ``two_pass`` forces two passes.
        """
        b = len(batch)
        null = np.full(b, self.null_intent)

        def run(x, t):
            if fast:
                seq, hidden = self.fast_forward(batch, x, t, memory)
            else:
                seq = self.embed(batch, mode, x, t, memory, answer)
                hidden = self.forward(seq)
            return seq, hidden

        def v(x, t):
            with no_grad():
                seq, hidden = run(x, t)
                if intents is None:
                    return self.velocity(hidden, seq, t, null).data
                v_c = self.velocity(hidden, seq, t, intents).data
                if scale is None:
                    return v_c
                if two_pass:
                    seq, hidden = run(x, t)
                v_u = self.velocity(hidden, seq, t, null).data
                return cfg_velocity(v_c, v_u, scale)

        return v

    def sample(self, batch: FrameBatch, mode: str = "action_only", intents=None, scale: float | None = None,
               steps: int = 2, eps=None, seed: int = 0, memory=None, answer=None, two_pass: bool = False,
               fast: bool = False) -> FlowResult:
        if eps is None:
            eps = make_rng(seed, "sample").standard_normal((len(batch), self.cfg.horizon, self.cfg.action_dim))
        if has_language(mode) and answer is None:
            answer = self.decode_answer(batch, batch.answer.shape[1], memory)
        fn = self.velocity_fn(batch, mode, intents, scale, memory, answer, two_pass, fast)
        return euler_integrate(fn, eps, steps)

    def clone(self) -> "VLAModel":
        return copy.deepcopy(self)


def fm_loss(v: Tensor, x0, eps, t) -> Tensor:
    """Channel-weighted squared error between v and the target eps - x0."""
    check_t(t)
    target = np.asarray(eps, dtype=float) - np.asarray(x0, dtype=float)
    return ad.squared_error(v, target, FM_WEIGHTS)


def init_mot_from_dense(mot: VLAModel, dense: VLAModel, tie_action: bool = False) -> None:
    """Copy shared weights from a dense model; context experts clone the dense layers.

    With ``tie_action`` the action experts are cloned too (requires equal widths).
    """
    state = dense.state_dict()
    for name, p in mot.named_parameters():
        if not name.startswith("blocks.") and name in state:
            p.data = state[name].copy()
    for mb, db in zip(mot.blocks, dense.blocks):
        mb.tie_from(db.expert, (0, 1) if tie_action else (0,))
