"""History compensation: sliding window, pooled history, state assembly.

Each scale's state pairs the embedded current scale with a single history
vector pooled from a bounded window of earlier embedded scales. The pooled
vector is attention of a learnable query over the concatenated window tokens,
broadcast across positions, concatenated feature-wise, and projected back to
the model width. All operations run on autodiff tensors so gradients reach
the embedding, query, and projection parameters during training.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    concat,
    matmul,
    mul,
    reshape,
    resize_grid,
    softmax,
    swap_last,
)
from .tokenizer import ScaleSchedule


class SlidingWindow:
    """FIFO of embedded scale token matrices, capped at ``capacity`` items.

    Pushing onto a full window evicts the oldest item first. Items may be
    tensors (training) or plain arrays (sampling), unbatched (n, d) or
    batched (B, n, d); all must share the trailing column count, fixed by
    the first push.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"SlidingWindow: capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)
        self._width: int | None = None

    @property
    def items(self) -> list:
        """Current items, oldest first."""
        return list(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def token_count(self) -> int:
        return sum(x.shape[-2] for x in self._items)

    def push(self, item) -> "SlidingWindow":
        if getattr(item, "ndim", None) not in (2, 3):
            raise ShapeError(
                f"SlidingWindow.push: item must be 2-D or 3-D, got shape {getattr(item, 'shape', None)}"
            )
        if self._width is None:
            self._width = item.shape[-1]
        elif item.shape[-1] != self._width:
            raise ShapeError(
                f"SlidingWindow.push: item has {item.shape[-1]} columns, window holds {self._width}"
            )
        self._items.append(item)
        return self


def window_push(window: SlidingWindow, item) -> SlidingWindow:
    """Append ``item``, evicting the oldest entry when the window is full."""
    return window.push(item)


@dataclass
class HistoryQuery:
    """Learnable query vector that pools the window into one history vector."""

    q: Parameter

    def __post_init__(self):
        if self.q.data.ndim != 1:
            raise ShapeError(f"HistoryQuery: q must be 1-D, got shape {self.q.data.shape}")


@dataclass
class MarkovState:
    """Projected token matrix for one scale step.

    ``tokens`` is (n, d) or batched (B, n, d), one row per position of the
    grid this state predicts: a single row for the start state, S_{t+1}
    squared rows for t >= 1.
    """

    tokens: Tensor
    scale_index: int

    def validate(self, schedule: ScaleSchedule) -> None:
        t = self.scale_index
        if not 0 <= t < schedule.num_scales:
            raise ValueError(f"MarkovState: scale_index {t} outside [0, {schedule.num_scales})")
        expected = 1 if t == 0 else schedule.sizes[t] ** 2
        if self.tokens.shape[-2] != expected:
            raise ShapeError(
                f"MarkovState: {self.tokens.shape[-2]} tokens at scale_index {t}, expected {expected}"
            )


def embed_scale(
    fhat,
    next_size: int,
    weight: Tensor,
    bias: Tensor,
    schedule: ScaleSchedule,
    kernel: str = "bilinear",
) -> Tensor:
    """Downsample the accumulated map to ``next_size`` and embed per position.

    Accepts (S_T, S_T, d_code) or batched (B, S_T, S_T, d_code); returns the
    (next_size**2, d) token matrix in raster order, batched accordingly.
    """
    if next_size not in schedule.sizes:
        raise ValueError(f"embed_scale: size {next_size} not in schedule {schedule.sizes}")
    if not isinstance(fhat, Tensor):
        fhat = Tensor(np.asarray(fhat))
    s_final = schedule.final_size
    if fhat.data.ndim not in (3, 4) or fhat.shape[-3] != s_final or fhat.shape[-2] != s_final:
        raise ShapeError(
            f"embed_scale: accumulated map shape {fhat.shape}, expected trailing "
            f"({s_final}, {s_final}, d_code)"
        )
    down = resize_grid(fhat, next_size, kernel)
    flat = reshape(down, fhat.shape[:-3] + (next_size * next_size, fhat.shape[-1]))
    return add(matmul(flat, weight), bias)


def broadcast_rows(h: Tensor, like_shape: tuple[int, ...]) -> Tensor:
    """Repeat history vectors across the token axis of ``like_shape``.

    h is (d,) or (B, d); the result matches ``like_shape`` = (n, d) or (B, n, d).
    """
    d = h.shape[-1]
    if like_shape[-1] != d:
        raise ShapeError(f"broadcast_rows: width {d} vs target {like_shape}")
    if h.data.ndim == 1:
        spread = h
    elif h.data.ndim == 2 and len(like_shape) == 3 and h.shape[0] == like_shape[0]:
        spread = reshape(h, (h.shape[0], 1, d))
    else:
        raise ShapeError(f"broadcast_rows: history shape {h.shape} vs target {like_shape}")
    ones = Tensor(np.ones(like_shape[:-1] + (1,), dtype=h.data.dtype))
    return mul(ones, spread)


def pool_history(
    query: HistoryQuery,
    window: SlidingWindow,
    key_proj: Tensor | None = None,
    value_proj: Tensor | None = None,
) -> Tensor:
    """Attention of the query over all window tokens, concatenated oldest first.

    h = softmax(q . K^T / sqrt(d)) . V with K = V = the raw tokens unless
    projections are supplied. An empty window yields the zero vector. Batched
    (B, n, d) window items produce a (B, d) result.
    """
    d = query.q.shape[0]
    if len(window) == 0:
        return Tensor(np.zeros(d, dtype=query.q.data.dtype))
    items = [x if isinstance(x, Tensor) else Tensor(np.asarray(x)) for x in window.items]
    stacked = items[0] if len(items) == 1 else concat(items, axis=-2)
    if stacked.shape[-1] != d:
        raise ShapeError(
            f"pool_history: window tokens have width {stacked.shape[-1]}, query has {d}"
        )
    keys = stacked if key_proj is None else matmul(stacked, key_proj)
    values = stacked if value_proj is None else matmul(stacked, value_proj)
    scores = mul(matmul(reshape(query.q, (1, d)), swap_last(keys)), 1.0 / math.sqrt(d))
    weights = softmax(scores)
    pooled = matmul(weights, values)
    return reshape(pooled, values.shape[:-2] + (d,))


def assemble_state(embedded: Tensor, history: Tensor, proj: Tensor, scale_index: int) -> MarkovState:
    """Concatenate [embedded | broadcast history] and project 2d -> d.

    The projection has no bias, keeping the state linear in its two inputs.
    """
    if embedded.data.ndim not in (2, 3):
        raise ShapeError(f"assemble_state: embedded must be 2-D or 3-D, got shape {embedded.shape}")
    d = embedded.shape[-1]
    if history.shape[-1] != d:
        raise ShapeError(f"assemble_state: history width {history.shape[-1]}, embedded width {d}")
    if proj.shape != (2 * d, d):
        raise ShapeError(f"assemble_state: projection shape {proj.shape}, expected ({2 * d}, {d})")
    paired = concat([embedded, broadcast_rows(history, embedded.shape)], axis=-1)
    return MarkovState(tokens=matmul(paired, proj), scale_index=scale_index)


@dataclass
class CompensationParams:
    """Learnable pieces of the history mechanism, shared across scales."""

    embed_w: Parameter
    embed_b: Parameter
    query: HistoryQuery
    proj: Parameter
    key_proj: Parameter | None = None
    value_proj: Parameter | None = None

    @staticmethod
    def init(
        rng: np.random.Generator,
        code_dim: int,
        width: int,
        learned_kv: bool = False,
        dtype=np.float64,
    ) -> "CompensationParams":
        def normal(shape, scale, name):
            return Parameter(rng.normal(0.0, scale, size=shape).astype(dtype), name)

        kv_w = None
        kv_v = None
        if learned_kv:
            kv_w = normal((width, width), 1.0 / math.sqrt(width), "comp.key_proj")
            kv_v = normal((width, width), 1.0 / math.sqrt(width), "comp.value_proj")
        return CompensationParams(
            embed_w=normal((code_dim, width), 1.0 / math.sqrt(code_dim), "comp.embed_w"),
            embed_b=Parameter(np.zeros(width, dtype=dtype), "comp.embed_b"),
            query=HistoryQuery(normal((width,), 1.0 / math.sqrt(width), "comp.query")),
            proj=normal((2 * width, width), 1.0 / math.sqrt(2 * width), "comp.proj"),
            key_proj=kv_w,
            value_proj=kv_v,
        )

    def parameters(self) -> list[Parameter]:
        out = [self.embed_w, self.embed_b, self.query.q, self.proj]
        if self.key_proj is not None:
            out.extend([self.key_proj, self.value_proj])
        return out

    def pool(self, window: SlidingWindow) -> Tensor:
        return pool_history(self.query, window, self.key_proj, self.value_proj)

    def embed(self, fhat, next_size: int, schedule: ScaleSchedule, kernel: str = "bilinear") -> Tensor:
        return embed_scale(fhat, next_size, self.embed_w, self.embed_b, schedule, kernel)

    def assemble(self, embedded: Tensor, history: Tensor, scale_index: int) -> MarkovState:
        return assemble_state(embedded, history, self.proj, scale_index)
