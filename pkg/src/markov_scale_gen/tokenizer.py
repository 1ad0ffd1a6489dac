"""Multi-scale residual vector quantizer.

Maps feature maps to a coarse-to-fine pyramid of codebook index grids and
back. The greedy scheme quantizes, at each scale, the downsampled residual
between the target map and the approximation accumulated so far; decoding sums
the upsampled code embeddings. A small convolutional VQ-VAE trained from
scratch supplies the feature maps for real images.

Feature maps are channel-last: (S, S, d_code), batched as (B, S, S, d_code).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, fields

import numpy as np

from .autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    conv2d,
    mean,
    mul,
    no_grad,
    resize_array,
    resize_grid,
    silu,
    sub,
)
from .optim import AdamW


@dataclass(frozen=True)
class ScaleSchedule:
    """Strictly increasing grid sizes, coarse to fine; the last is the latent size."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.sizes) < 1:
            raise ValueError("ScaleSchedule: need at least one size")
        if any(s < 1 for s in self.sizes):
            raise ValueError(f"ScaleSchedule: sizes must be positive, got {self.sizes}")
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError(f"ScaleSchedule: sizes must strictly increase, got {self.sizes}")

    @property
    def num_scales(self) -> int:
        return len(self.sizes)

    @property
    def final_size(self) -> int:
        return self.sizes[-1]

    def token_counts(self) -> list[int]:
        return [s * s for s in self.sizes]


def build_schedule(
    num_scales: int, final_size: int, explicit: list[int] | None = None
) -> ScaleSchedule:
    """Build a schedule of ``num_scales`` sizes ending at ``final_size``.

    An explicit list is validated and passed through. Otherwise sizes follow
    ceil(t * final_size / num_scales), bumping duplicates up by one to keep
    the sequence strictly increasing.
    """
    if explicit is not None:
        return ScaleSchedule(tuple(int(s) for s in explicit))
    if num_scales < 1:
        raise ValueError(f"build_schedule: num_scales must be >= 1, got {num_scales}")
    if num_scales > final_size:
        raise ValueError(
            f"build_schedule: num_scales ({num_scales}) exceeds final size ({final_size}) "
            "and no explicit size list was given"
        )
    sizes: list[int] = []
    for t in range(1, num_scales + 1):
        s = math.ceil(t * final_size / num_scales)
        if sizes and s <= sizes[-1]:
            s = sizes[-1] + 1
        sizes.append(s)
    return ScaleSchedule(tuple(sizes))


@dataclass(frozen=True)
class Codebook:
    """Code vectors (V x d_code); index 0 is the zero vector when zero_code is set."""

    entries: np.ndarray
    zero_code: bool = True

    def __post_init__(self):
        e = np.asarray(self.entries)
        if e.ndim != 2 or e.shape[0] < 2:
            raise ValueError(f"Codebook: entries must be (V >= 2) x d_code, got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("Codebook: entries must be finite")
        if self.zero_code and np.any(e[0] != 0.0):
            raise ValueError("Codebook: zero_code is set but entry 0 is not the zero vector")
        object.__setattr__(self, "entries", e)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def code_dim(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class ResidualPyramid:
    """Per-scale index grids, grid t of shape S_t x S_t with values in [0, V)."""

    grids: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "grids", tuple(np.asarray(g, dtype=np.int64) for g in self.grids)
        )

    def validate(self, schedule: ScaleSchedule, vocab: int) -> None:
        if len(self.grids) != schedule.num_scales:
            raise ValueError(
                f"ResidualPyramid: {len(self.grids)} grids vs {schedule.num_scales} scales"
            )
        for g, s in zip(self.grids, schedule.sizes):
            if g.shape != (s, s):
                raise ShapeError(f"ResidualPyramid: grid shape {g.shape} vs scale size {s}")
            if g.size and (g.min() < 0 or g.max() >= vocab):
                raise IndexError(
                    f"ResidualPyramid: index outside [0, {vocab}): min={g.min()}, max={g.max()}"
                )


def nearest_codes(vectors: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Index of the squared-Euclidean nearest code per row; ties go to the lowest index."""
    diff = vectors[:, None, :] - codebook.entries[None, :, :]
    return np.argmin((diff * diff).sum(axis=-1), axis=1)


def encode_features(
    feat: np.ndarray,
    codebook: Codebook,
    schedule: ScaleSchedule,
    kernel: str = "bilinear",
) -> tuple[ResidualPyramid, np.ndarray]:
    """Greedy residual quantization of one feature map.

    Returns the index pyramid and the accumulated approximation f_hat, which
    equals decode_pyramid of the returned pyramid bit for bit.
    """
    feat = np.asarray(feat)
    s_final = schedule.final_size
    if feat.shape != (s_final, s_final, codebook.code_dim):
        raise ShapeError(
            f"encode_features: feature shape {feat.shape} vs expected "
            f"({s_final}, {s_final}, {codebook.code_dim})"
        )
    if not np.all(np.isfinite(feat)):
        raise ValueError("encode_features: feature map must be finite")
    fhat = np.zeros_like(feat)
    grids = []
    for s in schedule.sizes:
        residual = resize_array(feat - fhat, s, kernel)
        idx = nearest_codes(residual.reshape(s * s, -1), codebook).reshape(s, s)
        grids.append(idx)
        fhat = fhat + resize_array(codebook.entries[idx], s_final, kernel)
    return ResidualPyramid(tuple(grids)), fhat


def decode_pyramid(
    pyramid: ResidualPyramid,
    codebook: Codebook,
    schedule: ScaleSchedule,
    kernel: str = "bilinear",
) -> np.ndarray:
    """Sum of upsampled code embeddings; the accumulation order matches encode."""
    pyramid.validate(schedule, codebook.size)
    s_final = schedule.final_size
    fhat = np.zeros((s_final, s_final, codebook.code_dim), dtype=codebook.entries.dtype)
    for grid in pyramid.grids:
        fhat = fhat + resize_array(codebook.entries[grid], s_final, kernel)
    return fhat


# ---------------------------------------------------------------------------
# trainable VQ-VAE


@dataclass
class TokenizerConfig:
    schedule: ScaleSchedule
    vocab_size: int = 64
    code_dim: int = 32
    hidden_channels: int = 32
    image_channels: int = 3
    kernel: str = "bilinear"
    zero_code: bool = True
    steps: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    commitment: float = 0.25
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    seed: int = 0
    dtype: str = "float64"

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["schedule"] = list(self.schedule.sizes)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TokenizerConfig":
        d = dict(d)
        sizes = d.pop("schedule")
        return TokenizerConfig(schedule=ScaleSchedule(tuple(sizes)), **d)

    def validate(self) -> list[str]:
        problems = []
        if self.vocab_size < 2:
            problems.append(f"tokenizer.vocab_size must be >= 2, got {self.vocab_size}")
        if self.code_dim < 1:
            problems.append(f"tokenizer.code_dim must be >= 1, got {self.code_dim}")
        if self.kernel not in ("bilinear", "nearest"):
            problems.append(f"tokenizer.kernel must be bilinear or nearest, got {self.kernel}")
        if not 0.0 <= self.ema_decay < 1.0:
            problems.append(f"tokenizer.ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.steps < 0:
            problems.append(f"tokenizer.steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            problems.append(f"tokenizer.batch_size must be >= 1, got {self.batch_size}")
        if self.dtype not in ("float32", "float64"):
            problems.append(f"tokenizer.dtype must be float32 or float64, got {self.dtype}")
        return problems


def _np_dtype(name: str):
    return np.float32 if name == "float32" else np.float64


def _conv_param(rng, kh, kw, cin, cout, name, dtype) -> tuple[Parameter, Parameter]:
    scale = math.sqrt(2.0 / (kh * kw * cin))
    w = Parameter(rng.normal(0.0, scale, size=(kh, kw, cin, cout)).astype(dtype), name + ".w")
    b = Parameter(np.zeros(cout, dtype=dtype), name + ".b")
    return w, b


class TokenizerModel:
    """Convolutional encoder/decoder around the multi-scale quantizer.

    The encoder downsamples by stride-2 convolutions until the latent grid
    matches the schedule's final size, so the image side must be the latent
    size times a power of two.
    """

    def __init__(self, config: TokenizerConfig, image_side: int, rng: np.random.Generator):
        self.config = config
        self.image_side = image_side
        s_final = config.schedule.final_size
        if image_side % s_final != 0:
            raise ValueError(
                f"image side {image_side} not divisible by latent size {s_final}"
            )
        stride_total = image_side // s_final
        if stride_total & (stride_total - 1):
            raise ValueError(
                f"image side / latent size must be a power of two, got {stride_total}"
            )
        self.num_halvings = stride_total.bit_length() - 1
        dtype = _np_dtype(config.dtype)
        self.dtype = dtype
        h = config.hidden_channels
        self.params: dict[str, Parameter] = {}

        def register(pair):
            for p in pair:
                self.params[p.name] = p
            return pair

        cin = config.image_channels
        self.enc_layers = []
        for i in range(self.num_halvings):
            self.enc_layers.append(register(_conv_param(rng, 3, 3, cin, h, f"enc.down{i}", dtype)))
            cin = h
        self.enc_out = register(_conv_param(rng, 3, 3, cin, config.code_dim, "enc.out", dtype))
        self.dec_in = register(_conv_param(rng, 3, 3, config.code_dim, h, "dec.in", dtype))
        self.dec_layers = []
        for i in range(self.num_halvings):
            self.dec_layers.append(register(_conv_param(rng, 3, 3, h, h, f"dec.up{i}", dtype)))
        self.dec_out = register(_conv_param(rng, 3, 3, h, config.image_channels, "dec.out", dtype))

        entries = rng.normal(0.0, 1.0, size=(config.vocab_size, config.code_dim)).astype(dtype)
        entries /= math.sqrt(config.code_dim)
        if config.zero_code:
            entries[0] = 0.0
        self._entries = entries
        self._ema_count = np.ones(config.vocab_size, dtype=np.float64)
        self._ema_sum = entries.astype(np.float64).copy()

    @property
    def codebook(self) -> Codebook:
        return Codebook(self._entries.copy(), zero_code=self.config.zero_code)

    def encoder_forward(self, images: Tensor) -> Tensor:
        x = images
        for w, b in self.enc_layers:
            x = silu(conv2d(x, w, b, stride=2, padding=1))
        return conv2d(x, *self.enc_out, stride=1, padding=1)

    def decoder_forward(self, feat: Tensor) -> Tensor:
        x = silu(conv2d(feat, *self.dec_in, stride=1, padding=1))
        for w, b in self.dec_layers:
            x = resize_grid(x, x.shape[-2] * 2, kernel="nearest")
            x = silu(conv2d(x, w, b, stride=1, padding=1))
        return conv2d(x, *self.dec_out, stride=1, padding=1)

    # -- inference -----------------------------------------------------------

    def encode_image(self, image: np.ndarray) -> tuple[ResidualPyramid, np.ndarray]:
        """Image (H, W, C) in [-1, 1] to pyramid plus accumulated feature map."""
        with no_grad():
            feat = self.encoder_forward(Tensor(image[None].astype(self.dtype))).data[0]
        return encode_features(feat, self.codebook, self.config.schedule, self.config.kernel)

    def decode_feature(self, fhat: np.ndarray) -> np.ndarray:
        """Accumulated feature map to image array (H, W, C), clipped to [-1, 1]."""
        with no_grad():
            img = self.decoder_forward(Tensor(fhat[None].astype(self.dtype))).data[0]
        return np.clip(img, -1.0, 1.0)

    def decode_indices(self, pyramid: ResidualPyramid) -> np.ndarray:
        fhat = decode_pyramid(pyramid, self.codebook, self.config.schedule, self.config.kernel)
        return self.decode_feature(fhat)

    # -- training ------------------------------------------------------------

    def _quantize_batch(self, z: np.ndarray) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
        """Greedy multi-scale quantization of a latent batch.

        Returns the accumulated approximation and, per scale, the residual
        vectors that were quantized with their assignments (for EMA updates).
        """
        cb = Codebook(self._entries, zero_code=False)  # EMA keeps row 0 at zero if needed
        sch = self.config.schedule
        kern = self.config.kernel
        fhat = np.zeros_like(z)
        stats = []
        for s in sch.sizes:
            residual = resize_array(z - fhat, s, kern)
            vecs = residual.reshape(-1, self.config.code_dim)
            idx = nearest_codes(vecs, cb)
            stats.append((vecs, idx))
            quant = cb.entries[idx].reshape(residual.shape)
            fhat = fhat + resize_array(quant, sch.final_size, kern)
        return fhat, stats

    def _ema_update(self, stats) -> None:
        cfg = self.config
        vocab = cfg.vocab_size
        counts = np.zeros(vocab, dtype=np.float64)
        sums = np.zeros((vocab, cfg.code_dim), dtype=np.float64)
        for vecs, idx in stats:
            counts += np.bincount(idx, minlength=vocab)
            np.add.at(sums, idx, vecs)
        self._ema_count = cfg.ema_decay * self._ema_count + (1 - cfg.ema_decay) * counts
        self._ema_sum = cfg.ema_decay * self._ema_sum + (1 - cfg.ema_decay) * sums
        total = self._ema_count.sum()
        smoothed = (self._ema_count + cfg.ema_eps) / (total + vocab * cfg.ema_eps) * total
        new_entries = (self._ema_sum / smoothed[:, None]).astype(self.dtype)
        if cfg.zero_code:
            new_entries[0] = 0.0
        self._entries = new_entries


def train_tokenizer(
    images: np.ndarray, config: TokenizerConfig
) -> tuple[TokenizerModel, list[dict]]:
    """Train the VQ-VAE on an image array (N, H, W, C) in [-1, 1].

    Gradients reach the encoder through a straight-through estimator plus a
    commitment term (weight ``config.commitment``); the codebook itself is
    updated by exponential moving averages of assigned residual vectors.
    Returns the model and a log with reconstruction MSE per epoch.
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] < 1:
        raise ValueError(f"train_tokenizer: need a non-empty (N, H, W, C) array, got {images.shape}")
    if images.shape[1] != images.shape[2]:
        raise ValueError(f"train_tokenizer: images must be square, got {images.shape}")
    problems = config.validate()
    if problems:
        raise ValueError("invalid tokenizer config: " + "; ".join(problems))

    rng = np.random.default_rng(config.seed)
    model = TokenizerModel(config, image_side=images.shape[1], rng=rng)
    images = images.astype(model.dtype)
    opt = AdamW(list(model.params.values()), lr=config.lr, beta2=0.999, weight_decay=0.0)

    n = images.shape[0]
    batch = min(config.batch_size, n)
    steps_per_epoch = max(1, math.ceil(n / batch))
    log: list[dict] = []
    epoch_losses: list[float] = []
    t0 = time.monotonic()
    for step in range(config.steps):
        idx = rng.choice(n, size=batch, replace=n < batch)
        x = Tensor(images[idx])
        z = model.encoder_forward(x)
        fhat, stats = model._quantize_batch(z.data)
        z_st = add(z, Tensor(fhat - z.data))  # straight-through to the encoder
        recon = model.decoder_forward(z_st)
        diff = sub(recon, x)
        recon_mse = mean(mul(diff, diff))
        commit_diff = sub(z, Tensor(fhat))
        loss = add(recon_mse, mul(mean(mul(commit_diff, commit_diff)), config.commitment))
        opt.zero_grad()
        loss.backward()
        opt.step()
        model._ema_update(stats)
        epoch_losses.append(float(recon_mse.data))
        if (step + 1) % steps_per_epoch == 0 or step + 1 == config.steps:
            log.append(
                {
                    "epoch": len(log) + 1,
                    "step": step + 1,
                    "recon_mse": float(np.mean(epoch_losses)),
                    "wall_time": time.monotonic() - t0,
                }
            )
            epoch_losses = []
    return model, log
