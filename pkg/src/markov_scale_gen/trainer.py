"""Teacher-forced training over ground-truth residual pyramids.

Teacher inputs replay the generation recurrence exactly: the accumulated map
after each ground-truth scale is downsampled to the next grid and embedded,
the sliding window pools history from earlier embedded scales, and the
assembled states feed the backbone. The loss is the sum over scales of the
token-mean cross-entropy of each scale's logits against its index grid.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import (
    NumericError,
    ShapeError,
    Tensor,
    add,
    cross_entropy,
    no_grad,
    resize_array,
)
from .backbone import MarkovModel
from .optim import AdamW
from .states import MarkovState, SlidingWindow
from .tokenizer import Codebook, ResidualPyramid, ScaleSchedule


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    batch_size: int = 16
    steps: int = 200
    seed: int = 0
    log_every: int = 10
    kernel: str = "bilinear"

    @staticmethod
    def paper_preset(**overrides) -> "TrainConfig":
        """Base learning rate used at full scale; desk defaults are larger."""
        return replace(TrainConfig(lr=8e-5), **overrides)

    def validate(self) -> list[str]:
        p = []
        if not self.lr > 0:
            p.append(f"train.lr must be > 0, got {self.lr}")
        for name, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= b < 1.0:
                p.append(f"train.{name} must be in [0, 1), got {b}")
        if self.weight_decay < 0:
            p.append(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            p.append(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            p.append(f"train.steps must be >= 0, got {self.steps}")
        if self.log_every < 1:
            p.append(f"train.log_every must be >= 1, got {self.log_every}")
        if self.kernel not in ("bilinear", "nearest"):
            p.append(f"train.kernel must be bilinear or nearest, got {self.kernel}")
        return p


def accumulated_maps(
    grids: list[np.ndarray], codebook: Codebook, schedule: ScaleSchedule, kernel: str
) -> list[np.ndarray]:
    """Ground-truth accumulated map after each scale, for (S_t, S_t) or batched
    (B, S_t, S_t) index grids."""
    s_final = schedule.final_size
    fhat = None
    out = []
    for g, s in zip(grids, schedule.sizes):
        looked = codebook.entries[g]
        up = resize_array(looked, s_final, kernel)
        fhat = up if fhat is None else fhat + up
        out.append(fhat)
    return out


def _states_from_grids(
    grids: list[np.ndarray],
    codebook: Codebook,
    model: MarkovModel,
    class_ids,
    kernel: str,
) -> list[MarkovState]:
    sch = model.config.schedule
    maps = accumulated_maps(grids, codebook, sch, kernel)
    embedded = [model.start_embedding(class_ids)]
    for t in range(1, sch.num_scales):
        e = model.comp.embed(Tensor(maps[t - 1]), sch.sizes[t], sch, kernel)
        embedded.append(model.class_shift(e, class_ids))
    window = SlidingWindow(model.config.window)
    states = []
    for t, e in enumerate(embedded):
        history = model.history_vector(window)
        states.append(model.comp.assemble(e, history, t))
        window.push(e)
    return states


def build_teacher_inputs(
    pyramid: ResidualPyramid,
    codebook: Codebook,
    model: MarkovModel,
    class_id: int,
    kernel: str = "bilinear",
) -> list[MarkovState]:
    """States [M_0 ... M_{T-1}] for one ground-truth pyramid.

    M_0 pairs the class-conditioned start token with zero history; each later
    M_t pairs the embedded downsampled accumulation with history pooled over
    the most recent earlier embedded scales, the start token included.
    """
    pyramid.validate(model.config.schedule, codebook.size)
    return _states_from_grids(list(pyramid.grids), codebook, model, class_id, kernel)


def build_teacher_inputs_batch(
    pyramids: list[ResidualPyramid],
    codebook: Codebook,
    model: MarkovModel,
    class_ids,
    kernel: str = "bilinear",
) -> list[MarkovState]:
    """Batched teacher states; per item equal to build_teacher_inputs."""
    sch = model.config.schedule
    for p in pyramids:
        p.validate(sch, codebook.size)
    grids = [np.stack([p.grids[t] for p in pyramids]) for t in range(sch.num_scales)]
    return _states_from_grids(grids, codebook, model, np.asarray(class_ids), kernel)


def scale_cross_entropy(
    logits: list[Tensor], grids: list[np.ndarray]
) -> tuple[Tensor, list[float]]:
    """Sum over scales of the token-mean cross-entropy; also per-scale values.

    logits[t] carries state t's predictions for scale t+1, so entry t is
    scored against grid t of the pyramid.
    """
    if len(logits) != len(grids):
        raise ShapeError(f"loss: {len(logits)} logit blocks vs {len(grids)} grids")
    total = None
    per_scale = []
    for lg, g in zip(logits, grids):
        g = np.asarray(g)
        targets = g.reshape(g.shape[:-2] + (g.shape[-2] * g.shape[-1],))
        if lg.shape[:-1] != targets.shape:
            raise ShapeError(
                f"loss: logits {lg.shape} do not match grid {g.shape} flattened to {targets.shape}"
            )
        ce = cross_entropy(lg, targets)
        per_scale.append(float(ce.data))
        total = ce if total is None else add(total, ce)
    return total, per_scale


def train_step(
    model: MarkovModel,
    opt: AdamW,
    grids: list[np.ndarray],
    class_ids,
    codebook: Codebook,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[float, list[float]]:
    """One update on a batch given as per-scale stacked grids.

    A non-finite loss aborts before any parameter is touched.
    """
    states = _states_from_grids(grids, codebook, model, class_ids, cfg.kernel)
    logits = model.forward(states, training=True, rng=rng)
    loss, per_scale = scale_cross_entropy(logits, grids)
    if not np.isfinite(loss.data):
        worst = max((float(np.abs(p.data).max()) for p in model.parameters()), default=0.0)
        raise NumericError(
            f"non-finite loss {float(loss.data)}; per-scale terms {per_scale}; "
            f"largest parameter magnitude {worst:.3e}"
        )
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.data), per_scale


def make_optimizer(model: MarkovModel, cfg: TrainConfig) -> AdamW:
    return AdamW(
        model.parameters(),
        lr=cfg.lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        weight_decay=cfg.weight_decay,
    )


def evaluate(
    model: MarkovModel,
    pyramids: list[ResidualPyramid],
    class_ids,
    codebook: Codebook,
    kernel: str = "bilinear",
    batch_size: int = 32,
) -> float:
    """Teacher-forced loss over a whole dataset, no dropout, no updates."""
    class_ids = np.asarray(class_ids)
    sch = model.config.schedule
    grids_by_scale = [np.stack([p.grids[t] for p in pyramids]) for t in range(sch.num_scales)]
    n = len(pyramids)
    total = 0.0
    with no_grad():
        for start in range(0, n, batch_size):
            sel = slice(start, min(start + batch_size, n))
            grids = [g[sel] for g in grids_by_scale]
            states = _states_from_grids(grids, codebook, model, class_ids[sel], kernel)
            logits = model.forward(states)
            loss, _ = scale_cross_entropy(logits, grids)
            total += float(loss.data) * (sel.stop - sel.start)
    return total / n


def train(
    model: MarkovModel,
    pyramids: list[ResidualPyramid],
    class_ids,
    codebook: Codebook,
    cfg: TrainConfig,
    metrics_path=None,
    on_step=None,
    opt: AdamW | None = None,
    rng: np.random.Generator | None = None,
    start_step: int = 0,
) -> list[dict]:
    """Run the training loop; returns one record per logged step.

    Records carry step, loss, per-scale losses, and wall time, and stream to
    ``metrics_path`` as JSON lines when given. ``on_step(step, record)`` runs
    after every step for checkpoint hooks. Passing an optimizer and RNG whose
    states were captured at ``start_step`` continues a run exactly as if it
    had never stopped.
    """
    problems = cfg.validate()
    if problems:
        raise ValueError("invalid train config: " + "; ".join(problems))
    if len(pyramids) < 1:
        raise ValueError("train: need at least one pyramid")
    class_ids = np.asarray(class_ids)
    if class_ids.shape != (len(pyramids),):
        raise ShapeError(f"train: {len(pyramids)} pyramids vs class ids {class_ids.shape}")
    sch = model.config.schedule
    grids_by_scale = [np.stack([p.grids[t] for p in pyramids]) for t in range(sch.num_scales)]

    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if opt is None:
        opt = make_optimizer(model, cfg)
    n = len(pyramids)
    batch = min(cfg.batch_size, n)
    history: list[dict] = []
    sink = open(metrics_path, "a" if start_step else "w") if metrics_path else None
    t0 = time.monotonic()
    try:
        for step in range(start_step + 1, cfg.steps + 1):
            idx = rng.choice(n, size=batch, replace=n < batch)
            loss, per_scale = train_step(
                model,
                opt,
                [g[idx] for g in grids_by_scale],
                class_ids[idx],
                codebook,
                cfg,
                rng,
            )
            record = {
                "step": step,
                "loss": loss,
                "per_scale": per_scale,
                "wall_time": time.monotonic() - t0,
            }
            if step == 1 or step == cfg.steps or step % cfg.log_every == 0:
                history.append(record)
                if sink:
                    sink.write(json.dumps(record) + "\n")
                    sink.flush()
            if on_step:
                on_step(step, record)
    finally:
        if sink:
            sink.close()
    return history
