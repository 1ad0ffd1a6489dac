"""Analytic token, attention-pair, and memory accounting.

Closed-form counts contrast the two attention regimes. Full-context decoding
keys every scale against all earlier tokens and must hold their keys and
values; Markovian decoding attends within the current state's block plus a
single-query pool over the bounded window, so its key/value cache is zero
and its live token set stays bounded while the full-context set grows with
the whole pyramid. Byte figures are model quantities for trend comparison,
not measurements; time is reported only as a relative flop count.
"""

from __future__ import annotations

from dataclasses import dataclass

from .backbone import ModelConfig
from .tokenizer import ScaleSchedule, build_schedule

MODES = ("markov", "full-context")

# Latent grid and scale count used for the resolution presets: quadruple the
# pixel count maps to double the latent side, with a few extra scales.
RESOLUTION_PRESETS = {256: (16, 10), 512: (32, 13), 1024: (64, 16)}

# Activation bytes are modeled as one live residual-stream buffer of model
# width per layer per live token. Per-layer transients (norms, projections,
# gate products) are the same small multiple of that buffer in both modes,
# and attention scores are excluded, so a single shared constant keeps the
# cross-mode ratio honest while staying auditable.
C_ACT = 1.0


def token_counts(schedule: ScaleSchedule) -> tuple[list[int], list[int]]:
    """Per-scale token counts n_t = S_t**2 and their cumulative sums."""
    per = [s * s for s in schedule.sizes]
    cum, acc = [], 0
    for n in per:
        acc += n
        cum.append(acc)
    return per, cum


def _embedded_tokens(schedule: ScaleSchedule, j: int) -> int:
    """Token count of embedded scale j: one start token, then S_{j+1}**2."""
    return 1 if j == 0 else schedule.sizes[j] ** 2


def window_tokens(schedule: ScaleSchedule, window: int, t: int) -> int:
    """Tokens pooled when assembling the state that predicts scale t (1-based):
    the most recent embedded scales strictly before it, capped at the window."""
    k = t - 1
    return sum(_embedded_tokens(schedule, j) for j in range(max(0, k - window), k))


def attention_pairs(
    schedule: ScaleSchedule, mode: str, window: int = 3
) -> tuple[list[int], list[int]]:
    """Per-scale query-key pair counts, (attention, history pooling).

    Full-context at scale t pairs n_t queries with all tokens so far; markov
    pairs them within the block only, plus one pooling query over the window.
    """
    if mode not in MODES:
        raise ValueError(f"attention_pairs: mode must be one of {MODES}, got {mode!r}")
    per, cum = token_counts(schedule)
    if mode == "full-context":
        return [n * c for n, c in zip(per, cum)], [0] * len(per)
    attn = [n * n for n in per]
    pool = [window_tokens(schedule, window, t) for t in range(1, len(per) + 1)]
    return attn, pool


@dataclass(frozen=True)
class CostReport:
    mode: str
    tokens: list[int]
    cumulative: list[int]
    attn_pairs: list[int]
    pool_pairs: list[int]
    kv_bytes_per_step: list[float]
    act_bytes_per_step: list[float]
    peak_kv_bytes: float
    peak_act_bytes: float
    peak_total_bytes: float
    flops: float

    def rows(self) -> list[dict]:
        """One dict per scale step, for CSV emission."""
        return [
            {
                "step": t + 1,
                "tokens": self.tokens[t],
                "cumulative": self.cumulative[t],
                "attn_pairs": self.attn_pairs[t],
                "pool_pairs": self.pool_pairs[t],
                "kv_bytes": self.kv_bytes_per_step[t],
                "act_bytes": self.act_bytes_per_step[t],
            }
            for t in range(len(self.tokens))
        ]


def memory_estimate(
    cfg: ModelConfig,
    schedule: ScaleSchedule,
    mode: str,
    batch: int,
    bytes_per_elem: int,
) -> CostReport:
    """Per-step and peak computation-state bytes plus a relative flop count.

    Only depth, width, and window are read from the config; the analytic
    model does not require a runnable model configuration.
    """
    if batch < 1 or bytes_per_elem < 1:
        raise ValueError(
            f"memory_estimate: batch and bytes_per_elem must be positive, got {batch}, {bytes_per_elem}"
        )
    if mode not in MODES:
        raise ValueError(f"memory_estimate: mode must be one of {MODES}, got {mode!r}")
    per, cum = token_counts(schedule)
    attn, pool = attention_pairs(schedule, mode, cfg.window)
    unit = cfg.depth * cfg.width * batch * bytes_per_elem
    kv, act = [], []
    for t in range(1, len(per) + 1):
        n = per[t - 1]
        if mode == "full-context":
            kv.append(2.0 * unit * cum[t - 1])
            live = n
        else:
            kv.append(0.0)
            live = n + window_tokens(schedule, cfg.window, t) + 1
        act.append(C_ACT * unit * live)
    totals = [k + a for k, a in zip(kv, act)]
    flops = float(
        cfg.depth * sum(8 * cfg.width**2 * n + 4 * cfg.width * (a + p) for n, a, p in zip(per, attn, pool))
    )
    return CostReport(
        mode=mode,
        tokens=per,
        cumulative=cum,
        attn_pairs=attn,
        pool_pairs=pool,
        kv_bytes_per_step=kv,
        act_bytes_per_step=act,
        peak_kv_bytes=max(kv),
        peak_act_bytes=max(act),
        peak_total_bytes=max(totals),
        flops=flops,
    )


def preset_schedule(resolution: int) -> ScaleSchedule:
    if resolution not in RESOLUTION_PRESETS:
        raise ValueError(
            f"no preset for resolution {resolution}; choices: {sorted(RESOLUTION_PRESETS)}"
        )
    s_final, num = RESOLUTION_PRESETS[resolution]
    return build_schedule(num, s_final)


def compare(
    depth: int = 24,
    batch: int = 25,
    bytes_per_elem: int = 2,
    resolutions=(256, 512, 1024),
    window: int = 3,
) -> list[dict]:
    """Peak-memory ratio (full-context / markov) per resolution preset.

    The report records whether the ratio grows with resolution, the trend the
    bounded-window design predicts.
    """
    cfg = ModelConfig(
        schedule=ScaleSchedule((1,)), depth=depth, width=64 * depth, heads=depth, window=window
    )
    rows = []
    for res in resolutions:
        sch = preset_schedule(res)
        full = memory_estimate(cfg, sch, "full-context", batch, bytes_per_elem)
        markov = memory_estimate(cfg, sch, "markov", batch, bytes_per_elem)
        rows.append(
            {
                "resolution": res,
                "schedule": list(sch.sizes),
                "full_peak_bytes": full.peak_total_bytes,
                "markov_peak_bytes": markov.peak_total_bytes,
                "markov_kv_bytes": markov.peak_kv_bytes,
                "ratio": full.peak_total_bytes / markov.peak_total_bytes,
            }
        )
    for a, b in zip(rows, rows[1:]):
        b["ratio_increased"] = b["ratio"] > a["ratio"]
    return rows
