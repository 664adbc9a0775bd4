"""Declarative run configuration.

A config file is a JSON object whose keys are ``RunConfig`` fields; missing
keys take the defaults below and unknown keys are rejected. ``dump`` writes
the canonical form (sorted keys, compact separators), so a config that was
loaded and dumped again is byte-identical.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .evaluation import ExperimentConfig, PretrainConfig
from .model import PRESETS, get_preset
from .surgery import SplitPlan, canonical_json
from .tuning import DEFAULT_LR_GRID, PEFT_MODES, TrainConfig

_E = ExperimentConfig()

# Field documentation, listed by ``offsite config fields``.
FIELD_DOCS = {
    "preset": "model preset: " + ", ".join(sorted(PRESETS)),
    "plan": "adapter split as '<bottom>+<top>'",
    "emulator_method": "layer_drop, magnitude_prune or quantize",
    "emulator_k": "layers the layer-drop emulator keeps from the middle",
    "sparsity": "fraction of weight-matrix entries zeroed by magnitude_prune",
    "bits": "bit width for quantize",
    "distill_steps": "emulator distillation steps (0 = raw layer drop)",
    "distill_lr": "peak learning rate for distillation",
    "pretrain_steps": "owner-side pretraining steps for a fresh base model",
    "pretrain_lr": "peak pretraining learning rate",
    "pretrain_batch_size": "pretraining batch size",
    "lr": "peak fine-tuning learning rate (used when lr_grid is empty)",
    "lr_grid": "learning rates to sweep; best by emulator validation loss",
    "steps": "fine-tuning optimizer steps",
    "warmup_steps": "linear warmup steps before cosine decay",
    "weight_decay": "AdamW decoupled weight decay",
    "batch_size": "sequences per fine-tuning batch",
    "seq_len": "tokens per training / evaluation window",
    "seed": "seed for single runs",
    "seeds": "seeds for multi-seed experiments",
    "peft": "adapter tuning mode: " + ", ".join(PEFT_MODES),
    "eval_tokens": "validation tokens used for perplexity",
    "train_fraction": "leading fraction of each corpus used for training",
    "pretrain_corpus": "'bundled:pretrain' or a path",
    "downstream_corpus": "'bundled:downstream' or a path",
    "model_id": "identifier written into bundles",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    preset: str = "toy"
    plan: str = "2+2"
    emulator_method: str = _E.emulator_method
    emulator_k: int = _E.emulator_k
    sparsity: float = _E.sparsity
    bits: int = _E.bits
    distill_steps: int = _E.distill_steps
    distill_lr: float = _E.distill_lr
    pretrain_steps: int = _E.pretrain.steps
    pretrain_lr: float = _E.pretrain.lr
    pretrain_batch_size: int = _E.pretrain.batch_size
    lr: float = _E.finetune.lr
    lr_grid: list = field(default_factory=list)
    steps: int = _E.finetune.steps
    warmup_steps: int = _E.finetune.warmup_steps
    weight_decay: float = _E.finetune.weight_decay
    batch_size: int = _E.finetune.batch_size
    seq_len: int = _E.finetune.seq_len
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    peft: str = _E.peft
    eval_tokens: int = _E.eval_tokens
    train_fraction: float = _E.train_fraction
    pretrain_corpus: str = _E.pretrain_corpus
    downstream_corpus: str = _E.downstream_corpus
    model_id: str = "model"

    def validate(self) -> "RunConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        try:
            SplitPlan.parse(self.plan).validate(get_preset(self.preset).n_layers)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.emulator_method not in ("layer_drop", "magnitude_prune", "quantize"):
            raise ConfigError(f"unknown emulator_method {self.emulator_method!r}")
        if self.peft not in PEFT_MODES:
            raise ConfigError(f"unknown peft mode {self.peft!r}")
        for name in ("steps", "distill_steps", "pretrain_steps", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("batch_size", "seq_len", "eval_tokens", "pretrain_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if any(x <= 0 for x in self.lr_grid) or self.lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return canonical_json(self.to_dict()) + "\n"

    def dump(self, path) -> Path:
        p = Path(path)
        p.write_text(self.dumps())
        return p

    def override(self, **kw) -> "RunConfig":
        """New config with every non-None keyword applied."""
        return replace(self, **{k: v for k, v in kw.items() if v is not None}).validate()

    def to_experiment(self) -> ExperimentConfig:
        return ExperimentConfig(
            model=get_preset(self.preset),
            plan=SplitPlan.parse(self.plan),
            emulator_k=self.emulator_k,
            emulator_method=self.emulator_method,
            sparsity=self.sparsity,
            bits=self.bits,
            distill_steps=self.distill_steps,
            distill_lr=self.distill_lr,
            pretrain=replace(_E.pretrain, steps=self.pretrain_steps, lr=self.pretrain_lr,
                             batch_size=self.pretrain_batch_size, seq_len=self.seq_len),
            finetune=replace(_E.finetune, lr=self.lr, steps=self.steps, warmup_steps=self.warmup_steps,
                             weight_decay=self.weight_decay, batch_size=self.batch_size,
                             seq_len=self.seq_len, seed=self.seed, eval_tokens=self.eval_tokens),
            lr_grid=tuple(self.lr_grid),
            peft=self.peft,
            eval_tokens=self.eval_tokens,
            train_fraction=self.train_fraction,
            pretrain_corpus=self.pretrain_corpus,
            downstream_corpus=self.downstream_corpus,
        )

    def finetune_config(self) -> TrainConfig:
        return self.to_experiment().finetune

    def pretrain_config(self) -> PretrainConfig:
        return self.to_experiment().pretrain


def parse_lr_grid(text: str) -> list[float]:
    """``'default'`` or a comma-separated list of rates."""
    if text == "default":
        return list(DEFAULT_LR_GRID)
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad learning-rate grid {text!r}") from None


def loads(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if isinstance(raw.get("lr_grid"), str):
        raw["lr_grid"] = parse_lr_grid(raw["lr_grid"])
    return RunConfig(**raw).validate()


def load(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return loads(p.read_text())
