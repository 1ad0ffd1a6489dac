"""Scale-by-scale generation from the previous dynamic state only.

The loop mirrors the teacher recurrence with predictions substituted for
ground truth: sample a grid from the current state's logits, fold it into
the accumulated map, embed the next grid size, pool history from the sliding
window, assemble the next state. Exactly one backbone invocation happens per
scale. An optional trace records every intermediate so a step can be replayed
from its stated inputs alone.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad, resize_array
from .backbone import MarkovModel
from .states import MarkovState, SlidingWindow
from .tokenizer import Codebook, ResidualPyramid

THREADS_ENV = "MARKOV_SCALE_GEN_THREADS"


def worker_count(n_items: int) -> int:
    """Worker cap for per-item parallel loops: env override, else 1."""
    raw = os.environ.get(THREADS_ENV, "")
    try:
        cap = int(raw) if raw else 1
    except ValueError as e:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from e
    return max(1, min(cap, n_items))


def sample_tokens(
    logits: np.ndarray, temperature: float, top_k: int | None, rng: np.random.Generator
) -> np.ndarray:
    """Categorical draw per row with top-k filtering and temperature.

    Temperature 0 is argmax (first maximum on ties). Top-k keeps the k
    largest logits per row, equal values resolved toward lower indices.
    """
    logits = np.asarray(logits)
    n, vocab = logits.shape
    if top_k is None:
        top_k = vocab
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        return np.argmax(logits, axis=-1)
    lg = logits.astype(np.float64, copy=True)
    if top_k < vocab:
        order = np.argsort(-lg, axis=-1, kind="stable")
        drop = np.ones_like(lg, dtype=bool)
        np.put_along_axis(drop, order[:, :top_k], False, axis=-1)
        lg[drop] = -np.inf
    lg /= temperature
    lg -= lg.max(axis=-1, keepdims=True)
    p = np.exp(lg)
    cum = np.cumsum(p, axis=-1)
    u = rng.random((n, 1)) * cum[:, -1:]
    return np.minimum((cum < u).sum(axis=-1), vocab - 1)


@dataclass
class GenerationTrace:
    """Everything the scale loop consumed and produced, per step."""

    embedded: list[np.ndarray] = field(default_factory=list)
    state_tokens: list[np.ndarray] = field(default_factory=list)
    fhat_steps: list[np.ndarray] = field(default_factory=list)
    logits: list[np.ndarray] = field(default_factory=list)
    rng_states: list[dict] = field(default_factory=list)
    forward_calls: int = 0


@dataclass
class SampleContext:
    """Mutable view handed to an intervention hook before each scale."""

    scale: int
    fhat: np.ndarray
    window: SlidingWindow
    embedded: list
    state: MarkovState


def generate(
    model: MarkovModel,
    codebook: Codebook,
    class_id: int,
    *,
    tokenizer=None,
    seed: int = 0,
    temperature: float = 1.0,
    top_k: int | None = None,
    kernel: str = "bilinear",
    record_trace: bool = False,
    intervene=None,
    embed_hook=None,
) -> tuple[np.ndarray, ResidualPyramid] | tuple[np.ndarray, ResidualPyramid, GenerationTrace]:
    """Generate one pyramid and its decoded image for a class id.

    Returns (image, pyramid), plus the trace when ``record_trace`` is set.
    Without a tokenizer the accumulated feature map stands in for the image.
    ``embed_hook(t, array)`` may replace the embedded tokens of scale t
    before state assembly; ``intervene(ctx)`` runs before each scale.
    """
    cfg = model.config
    sch = cfg.schedule
    num_scales = sch.num_scales
    rng = np.random.default_rng(seed)
    trace = GenerationTrace()
    with no_grad():
        e0 = model.start_embedding(class_id)
        window = SlidingWindow(cfg.window)
        state = model.comp.assemble(e0, model.history_vector(window), 0)
        window.push(e0)
        embedded = [e0]
        states = [state]
        fhat = np.zeros((sch.final_size, sch.final_size, cfg.code_dim), dtype=model.dtype)
        grids = []
        for t in range(1, num_scales + 1):
            if intervene is not None:
                ctx = SampleContext(t, fhat, window, embedded, state)
                intervene(ctx)
                fhat, state = ctx.fhat, ctx.state
            if record_trace:
                trace.state_tokens.append(state.tokens.data.copy())
                trace.rng_states.append(rng.bit_generator.state)
            if cfg.attention_mode == "markov":
                logits = model.forward_single(state).data
            else:
                logits = model.forward_prefix(states).data
            trace.forward_calls += 1
            side = sch.sizes[t - 1]
            grid = sample_tokens(logits, temperature, top_k, rng).reshape(side, side)
            grids.append(grid)
            fhat = fhat + resize_array(codebook.entries[grid], sch.final_size, kernel)
            if record_trace:
                trace.logits.append(np.asarray(logits).copy())
                trace.fhat_steps.append(fhat.copy())
            if t < num_scales:
                e = model.comp.embed(Tensor(fhat), sch.sizes[t], sch, kernel)
                e = model.class_shift(e, class_id)
                if embed_hook is not None:
                    e = Tensor(np.asarray(embed_hook(t, e.data.copy())))
                state = model.comp.assemble(e, model.history_vector(window), t)
                window.push(e)
                embedded.append(e)
                states.append(state)
    if record_trace:
        trace.embedded = [e.data.copy() for e in embedded]
    pyramid = ResidualPyramid(tuple(grids))
    image = tokenizer.decode_feature(fhat) if tokenizer is not None else fhat
    if record_trace:
        return image, pyramid, trace
    return image, pyramid


def replay_logits(
    model: MarkovModel,
    trace: GenerationTrace,
    step: int,
    override_embedded: dict[int, np.ndarray] | None = None,
) -> np.ndarray:
    """Recompute the logits of scale ``step`` from the traced embedded scales.

    States are rebuilt from exactly the inputs the configured attention mode
    grants them: in markov mode only M_{step-1} (its embedded scale and its
    window), in full-context mode the whole prefix. Overriding an embedded
    scale that the mode's dependency structure excludes leaves the result
    bitwise unchanged.
    """
    num = len(trace.embedded)
    if not 1 <= step <= num:
        raise ValueError(f"replay_logits: step {step} outside [1, {num}]")
    arrays = [e.copy() for e in trace.embedded]
    if override_embedded:
        for j, val in override_embedded.items():
            arrays[j] = np.asarray(val)

    def rebuild(k: int) -> MarkovState:
        window = SlidingWindow(model.config.window)
        for j in range(max(0, k - model.config.window), k):
            window.push(Tensor(arrays[j]))
        with no_grad():
            return model.comp.assemble(Tensor(arrays[k]), model.history_vector(window), k)

    with no_grad():
        if model.config.attention_mode == "markov":
            return model.forward_single(rebuild(step - 1)).data
        return model.forward_prefix([rebuild(k) for k in range(step)]).data


def generate_batch(
    model: MarkovModel,
    codebook: Codebook,
    class_ids,
    seeds,
    *,
    tokenizer=None,
    temperature: float = 1.0,
    top_k: int | None = None,
    kernel: str = "bilinear",
) -> list[tuple[np.ndarray, ResidualPyramid]]:
    """Per-item generation over classes and seeds; equals single calls item
    by item regardless of the worker count."""
    class_ids = list(class_ids)
    seeds = list(seeds)
    if len(class_ids) != len(seeds):
        raise ValueError(f"generate_batch: {len(class_ids)} classes vs {len(seeds)} seeds")

    def one(i: int):
        return generate(
            model,
            codebook,
            class_ids[i],
            tokenizer=tokenizer,
            seed=seeds[i],
            temperature=temperature,
            top_k=top_k,
            kernel=kernel,
        )

    workers = worker_count(len(class_ids))
    if workers == 1:
        return [one(i) for i in range(len(class_ids))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(len(class_ids))))
