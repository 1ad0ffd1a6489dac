"""Flat dotted-key run configuration.

Files hold ``section.key = value`` lines with ``#`` comments. Parsing and
validation collect every problem before failing, so a bad file reports all
its defects at once. The resize kernel is configured once, under
``tokenizer.kernel``, and shared by training and sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

from .backbone import ModelConfig
from .tokenizer import ScaleSchedule, TokenizerConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """One or more configuration problems; the message lists all of them."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


def _parse_bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_int_list(raw: str) -> list[int]:
    return [int(part.strip()) for part in raw.split(",") if part.strip()]


# key -> (parser, default)
SCHEMA: dict = {
    "schedule.sizes": (_parse_int_list, [1, 2, 3, 4]),
    "model.depth": (int, 2),
    "model.width": (int, 128),
    "model.heads": (int, 2),
    "model.dropout": (float, 0.0),
    "model.vocab_size": (int, 64),
    "model.window": (int, 3),
    "model.attention_mode": (str, "markov"),
    "model.code_dim": (int, 32),
    "model.num_classes": (int, 8),
    "model.mlp_ratio": (float, 4.0),
    "model.rope_base": (float, 10000.0),
    "model.paper_scaling": (_parse_bool, False),
    "model.learned_kv": (_parse_bool, False),
    "model.add_class_to_scales": (_parse_bool, False),
    "model.use_history": (_parse_bool, True),
    "model.dtype": (str, "float64"),
    "model.seed": (int, 0),
    "train.lr": (float, 1e-3),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.95),
    "train.weight_decay": (float, 0.05),
    "train.batch_size": (int, 16),
    "train.steps": (int, 200),
    "train.seed": (int, 0),
    "train.log_every": (int, 10),
    "tokenizer.hidden_channels": (int, 32),
    "tokenizer.steps": (int, 300),
    "tokenizer.batch_size": (int, 16),
    "tokenizer.lr": (float, 1e-3),
    "tokenizer.commitment": (float, 0.25),
    "tokenizer.ema_decay": (float, 0.99),
    "tokenizer.seed": (int, 0),
    "tokenizer.dtype": (str, "float64"),
    "tokenizer.kernel": (str, "bilinear"),
    "tokenizer.zero_code": (_parse_bool, True),
    "sample.temperature": (float, 1.0),
    "sample.top_k": (int, 0),
    "sample.count": (int, 8),
    "sample.seed": (int, 0),
    "sample.class_id": (int, 0),
    "checkpoint.every": (int, 100),
}


@dataclass
class SampleSettings:
    temperature: float = 1.0
    top_k: int | None = None
    count: int = 8
    seed: int = 0
    class_id: int = 0

    def validate(self) -> list[str]:
        p = []
        if self.temperature < 0:
            p.append(f"sample.temperature must be >= 0, got {self.temperature}")
        if self.top_k is not None and self.top_k < 1:
            p.append(f"sample.top_k must be >= 1 (or 0 to disable), got {self.top_k}")
        if self.count < 0:
            p.append(f"sample.count must be >= 0, got {self.count}")
        if self.class_id < 0:
            p.append(f"sample.class_id must be >= 0, got {self.class_id}")
        return p


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    tokenizer: TokenizerConfig
    sample: SampleSettings
    checkpoint_every: int
    model_seed: int

    @property
    def schedule(self) -> ScaleSchedule:
        return self.model.schedule

    @property
    def kernel(self) -> str:
        return self.tokenizer.kernel

    def validate(self) -> list[str]:
        p = []
        p += self.model.validate()
        p += self.train.validate()
        p += self.tokenizer.validate()
        p += self.sample.validate()
        if self.checkpoint_every < 1:
            p.append(f"checkpoint.every must be >= 1, got {self.checkpoint_every}")
        if self.sample.class_id >= self.model.num_classes:
            p.append(
                f"sample.class_id {self.sample.class_id} outside model.num_classes "
                f"{self.model.num_classes}"
            )
        return p


def parse_config_lines(lines, source: str, problems: list[str]) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            problems.append(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
            continue
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in raw:
            problems.append(f"{source}:{lineno}: duplicate key {key!r}")
            continue
        raw[key] = value.strip()
    return raw


def build_run_config(raw: dict[str, str], problems: list[str]) -> RunConfig:
    values = {}
    for key, (parser, default) in SCHEMA.items():
        values[key] = default
    for key, text in raw.items():
        if key not in SCHEMA:
            problems.append(f"unknown config key {key!r}")
            continue
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(text)
        except ValueError as e:
            problems.append(f"bad value for {key!r}: {e}")

    try:
        schedule = ScaleSchedule(tuple(values["schedule.sizes"]))
    except ValueError as e:
        problems.append(f"schedule.sizes: {e}")
        schedule = ScaleSchedule((1,))

    def section(prefix, skip=()):
        plen = len(prefix) + 1
        return {
            k[plen:]: v
            for k, v in values.items()
            if k.startswith(prefix + ".") and k[plen:] not in skip
        }

    model = ModelConfig(schedule=schedule, **section("model", skip=("seed",)))
    train = TrainConfig(kernel=values["tokenizer.kernel"], **section("train"))
    tokenizer = TokenizerConfig(
        schedule=schedule,
        vocab_size=model.vocab_size,
        code_dim=model.code_dim,
        **section("tokenizer"),
    )
    top_k = values["sample.top_k"]
    sample = SampleSettings(
        temperature=values["sample.temperature"],
        top_k=None if top_k == 0 else top_k,
        count=values["sample.count"],
        seed=values["sample.seed"],
        class_id=values["sample.class_id"],
    )
    return RunConfig(
        model=model,
        train=train,
        tokenizer=tokenizer,
        sample=sample,
        checkpoint_every=values["checkpoint.every"],
        model_seed=values["model.seed"],
    )


def load_run_config(path=None, overrides=None) -> RunConfig:
    """Config from an optional file plus ``key=value`` override strings.

    Raises ConfigError listing every parse and validation problem at once.
    """
    problems: list[str] = []
    raw: dict[str, str] = {}
    if path is not None:
        with open(path) as f:
            raw = parse_config_lines(f, str(path), problems)
    for item in overrides or []:
        if "=" not in item:
            problems.append(f"override must look like key=value, got {item!r}")
            continue
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    cfg = build_run_config(raw, problems)
    problems += cfg.validate()
    if problems:
        raise ConfigError(problems)
    return cfg
