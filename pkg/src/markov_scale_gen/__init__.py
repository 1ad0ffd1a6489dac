"""Markovian scale prediction for visual autoregressive generation.

A desk-scale library and CLI: multi-scale residual quantization, a sliding
window of embedded scales pooled into a history vector, a transformer with
block-restricted attention over Markov states, teacher-forced training,
scale-by-scale sampling, an analytic cost model, and analysis tools.
"""

from .autodiff import (
    NumericError,
    Parameter,
    ShapeError,
    Tensor,
    finite_diff_check,
    no_grad,
    primitive_set,
)
from .backbone import (
    AttentionMask,
    MarkovModel,
    ModelConfig,
    full_context_mask,
    markov_mask,
    rope_apply,
    state_block_sizes,
)
from .checkpoint import CheckpointData, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config
from .costmodel import CostReport, attention_pairs, compare, memory_estimate, token_counts
from .dataset import generate_dataset, load_dataset, make_image
from .diagnostics import perturb_experiment, power_law_fit, rfa_score
from .optim import AdamW
from .sampler import GenerationTrace, generate, generate_batch, replay_logits, sample_tokens
from .states import (
    HistoryQuery,
    MarkovState,
    SlidingWindow,
    assemble_state,
    embed_scale,
    pool_history,
    window_push,
)
from .tokenizer import (
    Codebook,
    ResidualPyramid,
    ScaleSchedule,
    TokenizerConfig,
    TokenizerModel,
    build_schedule,
    decode_pyramid,
    encode_features,
    train_tokenizer,
)
from .trainer import (
    TrainConfig,
    build_teacher_inputs,
    build_teacher_inputs_batch,
    evaluate,
    scale_cross_entropy,
    train,
    train_step,
)

__version__ = "0.1.0"
