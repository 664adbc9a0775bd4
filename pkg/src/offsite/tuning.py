"""Adapter fine-tuning against a frozen middle (real or emulated), plus LoRA,
bottleneck-adapter and BitFit variants confined to the adapter blocks."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import BatchPlan, batch_stream, steps_per_epoch
from .model import TransformerBlock, TransformerModel, forward_full, linear_layout
from .surgery import AdapterWeights, SplitModel
from .tensor import (
    LrSchedule,
    OptimizerState,
    Tensor,
    adamw_step,
    backward,
    cosine_lr,
    no_grad,
    softmax_cross_entropy,
)

log = logging.getLogger(__name__)

DEFAULT_LR_GRID = (2e-5, 5e-5, 1e-4, 2e-4, 3e-4)
PEFT_MODES = ("full", "lora", "bottleneck", "bitfit")


class TrainingError(RuntimeError):
    pass


class PeftError(RuntimeError):
    pass


# ------------------------------------------------------------------ PEFT


@dataclass(frozen=True)
class LoraSpec:
    rank: int = 4
    alpha: float | None = None  # defaults to rank, i.e. scale 1
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise PeftError("LoRA rank must be at least 1")

    @property
    def scale(self) -> float:
        return (self.rank if self.alpha is None else self.alpha) / self.rank


@dataclass(frozen=True)
class BottleneckSpec:
    dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise PeftError("bottleneck dim must be at least 1")


def _check_full(adapter: AdapterWeights) -> None:
    for blk in adapter.a1 + adapter.a2:
        if blk.peft_mode != "full":
            raise PeftError(f"adapter already carries {blk.peft_mode!r} parameters")


def _freeze_base(adapter: AdapterWeights) -> None:
    for blk in adapter.a1 + adapter.a2:
        for t in blk.params.values():
            t.requires_grad = False
            t.grad = None
    for t in adapter.shell.values():
        t.requires_grad = False
        t.grad = None


def attach_lora(adapter: AdapterWeights, spec: LoraSpec = LoraSpec()) -> AdapterWeights:
    """Add W + scale * A @ B to every linear projection; only A, B train. B starts at zero."""
    _check_full(adapter)
    _freeze_base(adapter)
    rng = np.random.default_rng(spec.seed)
    for blk in adapter.a1 + adapter.a2:
        dtype = blk.params["ln1.gain"].dtype
        for name, i, o in linear_layout(blk.config):
            a = Tensor((rng.standard_normal((i, spec.rank)) / math.sqrt(i)).astype(dtype), requires_grad=True)
            b = Tensor(np.zeros((spec.rank, o), dtype=dtype), requires_grad=True)
            blk.peft[f"lora.{name}.A"] = a
            blk.peft[f"lora.{name}.B"] = b
        blk.peft_mode = "lora"
        blk.lora_scale = spec.scale
    return adapter


def attach_bottleneck(adapter: AdapterWeights, spec: BottleneckSpec = BottleneckSpec()) -> AdapterWeights:
    """Residual down/up modules after the attention and MLP sublayers; up-projection starts at zero."""
    _check_full(adapter)
    _freeze_base(adapter)
    rng = np.random.default_rng(spec.seed)
    for blk in adapter.a1 + adapter.a2:
        d = blk.config.d_model
        dtype = blk.params["ln1.gain"].dtype
        for site in ("attn", "mlp"):
            p = f"bottleneck.{site}"
            blk.peft[f"{p}.down.weight"] = Tensor((rng.standard_normal((d, spec.dim)) * 0.02).astype(dtype), requires_grad=True)
            blk.peft[f"{p}.down.bias"] = Tensor(np.zeros(spec.dim, dtype=dtype), requires_grad=True)
            blk.peft[f"{p}.up.weight"] = Tensor(np.zeros((spec.dim, d), dtype=dtype), requires_grad=True)
            blk.peft[f"{p}.up.bias"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        blk.peft_mode = "bottleneck"
    return adapter


def is_bias_like(name: str) -> bool:
    """Linear biases and layer-norm gain/shift: the one-dimensional block parameters."""
    return name.endswith(".bias") or name.endswith(".gain")


def attach_bitfit(adapter: AdapterWeights) -> AdapterWeights:
    """Train only the one-dimensional parameters of the adapter blocks."""
    _check_full(adapter)
    _freeze_base(adapter)
    for blk in adapter.a1 + adapter.a2:
        for name, t in blk.params.items():
            t.requires_grad = is_bias_like(name)
        blk.peft_mode = "bitfit"
    return adapter


def attach_peft(adapter: AdapterWeights, mode: str, lora: LoraSpec = LoraSpec(),
                bottleneck: BottleneckSpec = BottleneckSpec()) -> AdapterWeights:
    if mode == "full":
        return adapter
    if mode == "lora":
        return attach_lora(adapter, lora)
    if mode == "bottleneck":
        return attach_bottleneck(adapter, bottleneck)
    if mode == "bitfit":
        return attach_bitfit(adapter)
    raise PeftError(f"unknown PEFT mode {mode!r}; choose from {PEFT_MODES}")


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    lr: float = 3e-4
    steps: int = 100
    warmup_steps: int = 10
    lr_min: float = 0.0
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seq_len: int = 64
    batch_size: int = 8
    seed: int = 0
    eval_every: int = 0  # 0: only at the end
    eval_tokens: int = 16384

    def schedule(self) -> LrSchedule:
        total = max(self.steps, 1)
        return LrSchedule(self.lr, self.lr_min, total, min(self.warmup_steps, total))

    def batch_plan(self) -> BatchPlan:
        return BatchPlan(self.seq_len, self.batch_size, self.seed)

    def optimizer(self) -> OptimizerState:
        return OptimizerState(self.betas[0], self.betas[1], self.eps, self.weight_decay)


def lm_loss(model: TransformerModel, inputs, targets) -> Tensor:
    logits = forward_full(model, inputs)
    return softmax_cross_entropy(logits.reshape(-1, logits.shape[-1]), np.asarray(targets).reshape(-1))


def mean_nll(model: TransformerModel, tokens, seq_len: int, max_tokens: int | None = None) -> float:
    """Token-mean NLL over non-overlapping windows (no gradient)."""
    from .evaluation import total_nll

    tokens = np.asarray(tokens)
    if max_tokens is not None:
        tokens = tokens[: max_tokens + 1]
    nll, n = total_nll(model, tokens, seq_len)
    return nll / n


def train_lm(model: TransformerModel, params: dict[str, Tensor], tokens, cfg: TrainConfig,
             val_tokens=None, tag: str = "train") -> list[dict]:
    """AdamW + warmup/cosine on causal LM loss; updates ``params`` in place.

    Returns log rows ``{step, epoch, split, loss, perplexity, lr}``.
    """
    if not params:
        raise TrainingError("nothing to train: no parameter requires grad")
    tokens = np.asarray(tokens)
    plan = cfg.batch_plan()
    spe = steps_per_epoch(tokens, plan)
    if spe == 0:
        raise TrainingError("training corpus yields no full batch")
    sched = cfg.schedule()
    opt = cfg.optimizer()
    rows: list[dict] = []
    stream = batch_stream(tokens, plan)
    for step in range(cfg.steps):
        lr = cosine_lr(sched, step)
        x, y = next(stream)
        loss = lm_loss(model, x, y)
        value = float(loss.item())
        if not math.isfinite(value):
            raise TrainingError(f"non-finite training loss at step {step}")
        backward(loss)
        adamw_step(params, opt, lr)
        for p in params.values():
            p.grad = None
        rows.append({"step": step + 1, "epoch": (step + 1) / spe, "split": "train", "loss": value,
                     "perplexity": math.exp(value), "lr": lr})
        last = step + 1 == cfg.steps
        if val_tokens is not None and ((cfg.eval_every and (step + 1) % cfg.eval_every == 0) or last):
            with no_grad():
                v = mean_nll(model, val_tokens, cfg.seq_len, cfg.eval_tokens)
            rows.append({"step": step + 1, "epoch": (step + 1) / spe, "split": "validation", "loss": v,
                         "perplexity": math.exp(v), "lr": lr})
    log.debug("%s: %d steps, final train loss %.4f", tag, cfg.steps, rows[-1]["loss"] if rows else float("nan"))
    return rows


def composed_model(sm: SplitModel, adapter: AdapterWeights, middle: Sequence[TransformerBlock]) -> TransformerModel:
    return sm.model.with_blocks(list(adapter.a1) + list(middle) + list(adapter.a2))


@dataclass
class FinetuneResult:
    adapter: AdapterWeights
    lr: float
    val_loss: float
    log: list[dict] = field(default_factory=list)
    grid: dict = field(default_factory=dict)  # lr -> validation loss


def finetune(sm: SplitModel, middle: Sequence[TransformerBlock], train_tokens, val_tokens,
             cfg: TrainConfig, lr_grid: Sequence[float] | None = None, peft: str = "full",
             adapter: AdapterWeights | None = None) -> FinetuneResult:
    """Tune a copy of the adapter around ``middle`` (the emulator, or the real middle).

    With ``lr_grid`` every rate is tried from the same starting weights and
    the run with the lowest validation loss around ``middle`` is returned.
    ``sm`` and ``middle`` are left untouched.
    """
    if len(np.asarray(train_tokens)) == 0:
        raise TrainingError("empty training set")
    base = (adapter if adapter is not None else sm.adapter()).clone()
    if peft != "full" and base.peft_mode == "full":
        attach_peft(base, peft)
    grid = list(lr_grid) if lr_grid else [cfg.lr]
    best: FinetuneResult | None = None
    scores = {}
    logs = []
    for lr in grid:
        run_cfg = TrainConfig(**{**cfg.__dict__, "lr": lr})
        cand = base.clone()
        model = composed_model(sm, cand, middle)
        params = cand.trainable_parameters()
        if run_cfg.steps > 0:
            rows = train_lm(model, params, train_tokens, run_cfg, val_tokens, tag=f"finetune lr={lr:g}")
        else:
            rows = []
        with no_grad():
            v = mean_nll(model, val_tokens, cfg.seq_len, cfg.eval_tokens)
        scores[lr] = v
        logs.extend({**r, "lr_run": lr} for r in rows)
        if best is None or v < best.val_loss:
            best = FinetuneResult(cand, lr, v)
    best.log = logs
    best.grid = scores
    return best


def trainable_count(adapter: AdapterWeights) -> int:
    return sum(int(t.data.size) for t in adapter.trainable_parameters().values())
