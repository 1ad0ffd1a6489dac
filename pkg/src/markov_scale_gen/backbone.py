"""Transformer backbone over Markov states with block-restricted attention.

In markov mode each state's tokens attend only within their own block, so the
stack can run one state at a time; an equivalent concatenated-sequence path
applies the explicit block-diagonal mask and exists to make that restriction
inspectable. Full-context mode is the block-causal baseline over the whole
sequence. Blocks are pre-norm with gain-only layer norm, rotary positions,
no biases on attention or MLP projections, and a gated MLP, with a biased
linear head to codebook logits. Logits of state t predict scale t+1, so the
first grid of the schedule must be a single token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    concat,
    dropout,
    layer_norm,
    matmul,
    moveaxis,
    mul,
    narrow,
    neg,
    reshape,
    silu,
    softmax,
    sub,
    swap_last,
)
from .autodiff import embedding_lookup
from .states import CompensationParams, MarkovState, SlidingWindow, broadcast_rows
from .tokenizer import ScaleSchedule

ATTENTION_MODES = ("markov", "full-context")


@dataclass
class ModelConfig:
    schedule: ScaleSchedule
    depth: int = 2
    width: int = 128
    heads: int = 2
    dropout: float = 0.0
    vocab_size: int = 64
    window: int = 3
    attention_mode: str = "markov"
    code_dim: int = 32
    num_classes: int = 8
    mlp_ratio: float = 4.0
    rope_base: float = 10000.0
    paper_scaling: bool = False
    learned_kv: bool = False
    add_class_to_scales: bool = False
    use_history: bool = True
    dtype: str = "float64"

    @staticmethod
    def paper_scaled(schedule: ScaleSchedule, depth: int, **overrides) -> "ModelConfig":
        """Derive width, heads, and dropout from depth: w = 64d, h = d, dr = 0.1 d / 24."""
        cfg = ModelConfig(
            schedule=schedule,
            depth=depth,
            width=64 * depth,
            heads=depth,
            dropout=0.1 * depth / 24.0,
            paper_scaling=True,
        )
        return replace(cfg, **overrides)

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.width))

    def validate(self) -> list[str]:
        p = []
        if self.schedule.sizes[0] != 1:
            p.append(
                f"model.schedule must start at grid size 1 (the start state predicts the "
                f"first scale from a single token), got {self.schedule.sizes}"
            )
        if self.depth < 1:
            p.append(f"model.depth must be >= 1, got {self.depth}")
        if self.width < 2:
            p.append(f"model.width must be >= 2, got {self.width}")
        if self.heads < 1 or self.width % self.heads != 0:
            p.append(f"model.width ({self.width}) must be divisible by model.heads ({self.heads})")
        elif self.head_dim % 2 != 0:
            p.append(f"model head dim {self.head_dim} must be even for rotary positions")
        if not 0.0 <= self.dropout < 1.0:
            p.append(f"model.dropout must be in [0, 1), got {self.dropout}")
        if self.vocab_size < 2:
            p.append(f"model.vocab_size must be >= 2, got {self.vocab_size}")
        if self.window < 1:
            p.append(f"model.window must be >= 1, got {self.window}")
        if self.attention_mode not in ATTENTION_MODES:
            p.append(f"model.attention_mode must be one of {ATTENTION_MODES}, got {self.attention_mode!r}")
        if self.code_dim < 1:
            p.append(f"model.code_dim must be >= 1, got {self.code_dim}")
        if self.num_classes < 1:
            p.append(f"model.num_classes must be >= 1, got {self.num_classes}")
        if self.mlp_ratio <= 0:
            p.append(f"model.mlp_ratio must be > 0, got {self.mlp_ratio}")
        if self.dtype not in ("float32", "float64"):
            p.append(f"model.dtype must be float32 or float64, got {self.dtype}")
        if self.paper_scaling:
            if self.width != 64 * self.depth:
                p.append(f"paper_scaling: width must be 64*depth = {64 * self.depth}, got {self.width}")
            if self.heads != self.depth:
                p.append(f"paper_scaling: heads must equal depth = {self.depth}, got {self.heads}")
            if abs(self.dropout - 0.1 * self.depth / 24.0) > 1e-12:
                p.append(
                    f"paper_scaling: dropout must be 0.1*depth/24 = {0.1 * self.depth / 24.0}, "
                    f"got {self.dropout}"
                )
        return p

    def require_valid(self) -> "ModelConfig":
        p = self.validate()
        if p:
            raise ValueError("invalid model config: " + "; ".join(p))
        return self

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["schedule"] = list(self.schedule.sizes)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        sizes = d.pop("schedule")
        return ModelConfig(schedule=ScaleSchedule(tuple(sizes)), **d)


def state_block_sizes(schedule: ScaleSchedule) -> list[int]:
    """Token counts of [M_0, ..., M_{T-1}]: one start token, then S_{t+1}^2."""
    return [1] + [s * s for s in schedule.sizes[1:]]


@dataclass(frozen=True)
class AttentionMask:
    """Boolean allow matrix over the concatenated state sequence."""

    allowed: np.ndarray
    block_sizes: tuple[int, ...]

    def __post_init__(self):
        a = np.asarray(self.allowed, dtype=bool)
        n = sum(self.block_sizes)
        if a.shape != (n, n):
            raise ShapeError(f"AttentionMask: matrix {a.shape} vs {n} tokens")
        object.__setattr__(self, "allowed", a)

    @property
    def block_offsets(self) -> tuple[int, ...]:
        out, acc = [], 0
        for b in self.block_sizes:
            out.append(acc)
            acc += b
        return tuple(out)

    def additive(self, dtype=np.float64) -> np.ndarray:
        """0 where allowed, -inf where masked; for adding to attention scores."""
        out = np.zeros(self.allowed.shape, dtype=dtype)
        out[~self.allowed] = -np.inf
        return out


def markov_mask(schedule: ScaleSchedule) -> AttentionMask:
    """Each token attends exactly the tokens of its own state's block."""
    sizes = state_block_sizes(schedule)
    n = sum(sizes)
    allowed = np.zeros((n, n), dtype=bool)
    off = 0
    for b in sizes:
        allowed[off : off + b, off : off + b] = True
        off += b
    return AttentionMask(allowed, tuple(sizes))


def full_context_mask(schedule: ScaleSchedule) -> AttentionMask:
    """Block-causal: tokens of state t attend all tokens of states <= t."""
    sizes = state_block_sizes(schedule)
    n = sum(sizes)
    allowed = np.zeros((n, n), dtype=bool)
    off = 0
    for b in sizes:
        allowed[off : off + b, : off + b] = True
        off += b
    return AttentionMask(allowed, tuple(sizes))


def block_positions(schedule: ScaleSchedule, mode: str) -> np.ndarray:
    """Rotary position per token: per-block raster restart in markov mode,
    global sequence index in full-context mode."""
    sizes = state_block_sizes(schedule)
    if mode == "markov":
        return np.concatenate([np.arange(b) for b in sizes])
    if mode == "full-context":
        return np.arange(sum(sizes))
    raise ValueError(f"block_positions: unknown mode {mode!r}")


def _rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2 != 0:
        raise ShapeError(f"rotary positions need an even head dim, got {head_dim}")
    half = head_dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_apply(x, positions, base: float = 10000.0) -> Tensor:
    """Rotate feature pairs (i, i + D/2) of each token by position * base^(-2i/D)."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    head_dim = x.shape[-1]
    cos, sin = _rope_tables(positions, head_dim, base, x.data.dtype)
    if len(positions) != x.shape[-2]:
        raise ShapeError(f"rope_apply: {len(positions)} positions for {x.shape[-2]} tokens")
    half = head_dim // 2
    x1 = narrow(x, -1, 0, half)
    x2 = narrow(x, -1, half, half)
    rot1 = sub(mul(x1, cos), mul(x2, sin))
    rot2 = add(mul(x1, sin), mul(x2, cos))
    return concat([rot1, rot2], axis=-1)


class MarkovModel:
    """Backbone, output head, class-conditioned start token, and the history
    compensation parameters, owned together so one object trains and samples."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.require_valid()
        self.config = config
        self.dtype = np.float32 if config.dtype == "float32" else np.float64
        rng = np.random.default_rng(seed)
        w, v = config.width, config.vocab_size
        hid = config.mlp_hidden
        self.params: dict[str, Parameter] = {}

        def par(name, shape, scale=0.02):
            p = Parameter(rng.normal(0.0, scale, size=shape).astype(self.dtype), name)
            self.params[name] = p
            return p

        def gain(name, size):
            p = Parameter(np.ones(size, dtype=self.dtype), name)
            self.params[name] = p
            return p

        self.class_emb = par("class_emb", (config.num_classes, w))
        self.comp = CompensationParams.init(
            rng, config.code_dim, w, learned_kv=config.learned_kv, dtype=self.dtype
        )
        for p in self.comp.parameters():
            self.params[p.name] = p
        self.blocks = []
        for i in range(config.depth):
            self.blocks.append(
                {
                    "ln1": gain(f"blk{i}.ln1", w),
                    "wq": par(f"blk{i}.attn.wq", (w, w)),
                    "wk": par(f"blk{i}.attn.wk", (w, w)),
                    "wv": par(f"blk{i}.attn.wv", (w, w)),
                    "wo": par(f"blk{i}.attn.wo", (w, w)),
                    "ln2": gain(f"blk{i}.ln2", w),
                    "wg": par(f"blk{i}.mlp.wg", (w, hid)),
                    "wu": par(f"blk{i}.mlp.wu", (w, hid)),
                    "wd": par(f"blk{i}.mlp.wd", (hid, w)),
                }
            )
        self.ln_f = gain("ln_f", w)
        self.head_w = par("head.w", (w, v))
        self.head_b = Parameter(np.zeros(v, dtype=self.dtype), "head.b")
        self.params["head.b"] = self.head_b

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- state construction helpers -----------------------------------------

    def start_embedding(self, class_ids) -> Tensor:
        """The start token sequence E_0: (1, w) for a scalar id, (B, 1, w) batched."""
        ids = np.asarray(class_ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.num_classes):
            raise ValueError(
                f"class id outside [0, {self.config.num_classes}): {ids.min()}..{ids.max()}"
            )
        emb = embedding_lookup(self.class_emb, ids.reshape(ids.shape + (1,)))
        return emb  # (1, w) or (B, 1, w)

    def history_vector(self, window: SlidingWindow) -> Tensor:
        if not self.config.use_history:
            return Tensor(np.zeros(self.config.width, dtype=self.dtype))
        return self.comp.pool(window)

    def class_shift(self, embedded: Tensor, class_ids) -> Tensor:
        """Optionally add the class embedding to every position of an embedded scale."""
        if not self.config.add_class_to_scales:
            return embedded
        vec = embedding_lookup(self.class_emb, np.asarray(class_ids))
        return add(embedded, broadcast_rows(vec, embedded.shape))

    # -- transformer stack ---------------------------------------------------

    def _attention(self, x: Tensor, blk, positions, additive_mask, training, rng, collect):
        cfg = self.config
        h, hd = cfg.heads, cfg.head_dim
        lead = x.shape[:-2]
        n = x.shape[-2]

        def split_heads(t):
            return moveaxis(reshape(t, lead + (n, h, hd)), -2, -3)

        q = split_heads(matmul(x, blk["wq"]))
        k = split_heads(matmul(x, blk["wk"]))
        v = split_heads(matmul(x, blk["wv"]))
        q = rope_apply(q, positions, cfg.rope_base)
        k = rope_apply(k, positions, cfg.rope_base)
        scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(hd))
        if additive_mask is not None:
            scores = add(scores, Tensor(additive_mask))
        attn = softmax(scores)
        if collect is not None:
            collect.append(attn.data.copy())
        if training and cfg.dropout > 0.0:
            attn = dropout(attn, cfg.dropout, rng)
        out = moveaxis(matmul(attn, v), -3, -2)
        out = reshape(out, lead + (n, h * hd))
        return matmul(out, blk["wo"])

    def _mlp(self, x: Tensor, blk, training, rng):
        hidden = mul(silu(matmul(x, blk["wg"])), matmul(x, blk["wu"]))
        if training and self.config.dropout > 0.0:
            hidden = dropout(hidden, self.config.dropout, rng)
        return matmul(hidden, blk["wd"])

    def forward_tokens(
        self,
        x: Tensor,
        positions: np.ndarray,
        additive_mask: np.ndarray | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
        collect_attention: list | None = None,
        collect_hidden: list | None = None,
    ) -> Tensor:
        """Run the block stack and head over a token tensor (..., n, w)."""
        if training and self.config.dropout > 0.0 and rng is None:
            raise ValueError("training forward with dropout needs an rng")
        for blk in self.blocks:
            x = add(x, self._attention(layer_norm(x, blk["ln1"]), blk, positions, additive_mask, training, rng, collect_attention))
            x = add(x, self._mlp(layer_norm(x, blk["ln2"]), blk, training, rng))
            if collect_hidden is not None:
                collect_hidden.append(x.data.copy())
        x = layer_norm(x, self.ln_f)
        return add(matmul(x, self.head_w), self.head_b)

    def _check_states(self, states: list[MarkovState]) -> list[int]:
        sizes = state_block_sizes(self.config.schedule)
        if len(states) != len(sizes):
            raise ShapeError(f"forward: {len(states)} states vs {len(sizes)} schedule blocks")
        for s, b in zip(states, sizes):
            if s.tokens.shape[-2] != b:
                raise ShapeError(
                    f"forward: state {s.scale_index} has {s.tokens.shape[-2]} tokens, block needs {b}"
                )
            if s.tokens.shape[-1] != self.config.width:
                raise ShapeError(
                    f"forward: state width {s.tokens.shape[-1]} vs model width {self.config.width}"
                )
        return sizes

    def forward_states(
        self,
        states: list[MarkovState],
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> list[Tensor]:
        """Markov-mode forward, one state block at a time.

        Each block is a full self-attention over its own tokens only, which is
        exactly the block-diagonal mask without materializing it.
        """
        self._check_states(states)
        out = []
        for st in states:
            n = st.tokens.shape[-2]
            out.append(
                self.forward_tokens(st.tokens, np.arange(n), None, training, rng)
            )
        return out

    def forward_sequence(
        self,
        states: list[MarkovState],
        training: bool = False,
        rng: np.random.Generator | None = None,
        collect_attention: list | None = None,
    ) -> list[Tensor]:
        """Concatenated-sequence forward with the explicit mask for the
        configured attention mode; returns per-state logits."""
        sizes = self._check_states(states)
        x = concat([s.tokens for s in states], axis=-2)
        mode = self.config.attention_mode
        mask = markov_mask(self.config.schedule) if mode == "markov" else full_context_mask(self.config.schedule)
        positions = block_positions(self.config.schedule, mode)
        logits = self.forward_tokens(
            x, positions, mask.additive(self.dtype), training, rng, collect_attention
        )
        out, off = [], 0
        for b in sizes:
            out.append(narrow(logits, -2, off, b))
            off += b
        return out

    def forward_single(self, state: MarkovState, training: bool = False, rng=None) -> Tensor:
        """Logits for one state in isolation; in markov mode this is bitwise
        the same computation forward_states performs for that state."""
        state.validate(self.config.schedule)
        if state.tokens.shape[-1] != self.config.width:
            raise ShapeError(
                f"forward_single: state width {state.tokens.shape[-1]} vs model width {self.config.width}"
            )
        n = state.tokens.shape[-2]
        return self.forward_tokens(state.tokens, np.arange(n), None, training, rng)

    def forward_prefix(
        self, states: list[MarkovState], training: bool = False, rng=None
    ) -> Tensor:
        """Full-context logits for the newest state given the whole prefix
        [M_0 ... M_k]: block-causal attention over the concatenated tokens."""
        sizes = state_block_sizes(self.config.schedule)
        if not 1 <= len(states) <= len(sizes):
            raise ShapeError(f"forward_prefix: {len(states)} states vs schedule depth {len(sizes)}")
        part = sizes[: len(states)]
        for s, b in zip(states, part):
            if s.tokens.shape[-2] != b:
                raise ShapeError(
                    f"forward_prefix: state {s.scale_index} has {s.tokens.shape[-2]} tokens, block needs {b}"
                )
        n = sum(part)
        allowed = np.zeros((n, n), dtype=bool)
        off = 0
        for b in part:
            allowed[off : off + b, : off + b] = True
            off += b
        additive = np.zeros((n, n), dtype=self.dtype)
        additive[~allowed] = -np.inf
        x = states[0].tokens if len(states) == 1 else concat([s.tokens for s in states], axis=-2)
        logits = self.forward_tokens(x, np.arange(n), additive, training, rng)
        return narrow(logits, -2, n - part[-1], part[-1])

    def forward(self, states: list[MarkovState], training: bool = False, rng=None) -> list[Tensor]:
        """Per-state logits under the configured attention mode."""
        if self.config.attention_mode == "markov":
            return self.forward_states(states, training, rng)
        return self.forward_sequence(states, training, rng)
