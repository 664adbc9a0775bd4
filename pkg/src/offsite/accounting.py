"""Closed-form parameter and byte accounting.

Counts are derived from the configuration alone, with no weights allocated,
so they work for billion-parameter presets. Token and position embedding
tables never count as trainable.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .model import ModelConfig
from .surgery import EmulatorSpec, SplitPlan

MODES = ("ft", "full", "lora", "bottleneck", "bitfit")
FLOAT_BYTES = 4


@dataclass
class ParamReport:
    total_params: int
    trainable_params: int
    transmitted_params: int = 0
    transmitted_bytes: int = 0
    full_bytes: int = 0
    transmitted_block_params: int = 0
    full_block_params: int = 0
    breakdown: dict = field(default_factory=dict)  # name -> {"params", "trainable", "transmitted"}

    @property
    def block_ratio(self) -> float:
        return self.transmitted_block_params / self.full_block_params if self.full_block_params else 0.0

    @property
    def byte_ratio(self) -> float:
        return self.transmitted_bytes / self.full_bytes if self.full_bytes else 0.0

    def summary(self) -> dict:
        return {
            "total_params": self.total_params,
            "trainable_params": self.trainable_params,
            "transmitted_params": self.transmitted_params,
            "transmitted_bytes": self.transmitted_bytes,
            "full_bytes": self.full_bytes,
            "transmitted_block_params": self.transmitted_block_params,
            "full_block_params": self.full_block_params,
            "block_ratio": self.block_ratio,
            "byte_ratio": self.byte_ratio,
        }


def _linears(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    d, f = cfg.d_model, cfg.d_ff
    if cfg.arch == "gpt2-like":
        return [("attn.qkv", d, 3 * d), ("attn.proj", d, d), ("mlp.fc", d, f), ("mlp.proj", f, d)]
    return [("attn.q", d, d), ("attn.k", d, d), ("attn.v", d, d), ("attn.o", d, d),
            ("mlp.fc", d, f), ("mlp.proj", f, d)]


def block_params(cfg: ModelConfig) -> int:
    """4d^2 + 4d for attention, 2df + d + f for the MLP, 4d for two layer norms."""
    d, f = cfg.d_model, cfg.d_ff
    return 4 * d * d + 4 * d + 2 * d * f + d + f + 4 * d


def block_weight_matrix_params(cfg: ModelConfig) -> int:
    return 4 * cfg.d_model ** 2 + 2 * cfg.d_model * cfg.d_ff


def block_bias_like_params(cfg: ModelConfig) -> int:
    return block_params(cfg) - block_weight_matrix_params(cfg)


def lora_block_params(cfg: ModelConfig, rank: int) -> int:
    return sum(rank * (i + o) for _, i, o in _linears(cfg))


def bottleneck_block_params(cfg: ModelConfig, dim: int) -> int:
    d = cfg.d_model
    return 2 * (d * dim + dim + dim * d + d)


def embedding_params(cfg: ModelConfig) -> int:
    return cfg.vocab_size * cfg.d_model + cfg.max_seq_len * cfg.d_model


def shell_params(cfg: ModelConfig) -> dict[str, int]:
    d = cfg.d_model
    out = {"wte": cfg.vocab_size * d, "wpe": cfg.max_seq_len * d, "ln_f.gain": d, "ln_f.bias": d}
    if not cfg.tie_embeddings:
        out["lm_head.weight"] = d * cfg.vocab_size
    return out


def total_params(cfg: ModelConfig) -> int:
    return cfg.n_layers * block_params(cfg) + sum(shell_params(cfg).values())


def _block_breakdown(cfg: ModelConfig, i: int) -> dict[str, int]:
    d = cfg.d_model
    out = {f"blocks.{i}.ln1.gain": d, f"blocks.{i}.ln1.bias": d, f"blocks.{i}.ln2.gain": d, f"blocks.{i}.ln2.bias": d}
    for name, a, b in _linears(cfg):
        out[f"blocks.{i}.{name}.weight"] = a * b
        out[f"blocks.{i}.{name}.bias"] = b
    return out


def count_params(cfg: ModelConfig, plan: SplitPlan | None = None, peft: str = "full",
                 lora_rank: int = 4, bottleneck_dim: int = 64) -> ParamReport:
    """Trainable-parameter report. ``peft='ft'`` means every block plus the final norm (plan ignored)."""
    if peft not in MODES:
        raise ValueError(f"unknown mode {peft!r}; choose from {MODES}")
    n = cfg.n_layers
    if peft == "ft":
        adapter_idx = list(range(n))
    else:
        plan = plan or SplitPlan()
        plan.validate(n)
        adapter_idx = plan.adapter_indices(n)
    breakdown = {}
    trainable = 0
    for name, c in shell_params(cfg).items():
        t = peft == "ft" and name.startswith("ln_f.")
        breakdown[name] = {"params": c, "trainable": t, "transmitted": True}
        trainable += c if t else 0
    for i in range(n):
        in_adapter = i in adapter_idx
        for name, c in _block_breakdown(cfg, i).items():
            if not in_adapter:
                t = False
            elif peft in ("ft", "full"):
                t = True
            elif peft == "bitfit":
                t = name.endswith(".bias") or name.endswith(".gain")
            else:
                t = False
            breakdown[name] = {"params": c, "trainable": t, "transmitted": in_adapter}
            trainable += c if t else 0
        if in_adapter and peft in ("lora", "bottleneck"):
            extra = lora_block_params(cfg, lora_rank) if peft == "lora" else bottleneck_block_params(cfg, bottleneck_dim)
            breakdown[f"blocks.{i}.{peft}"] = {"params": extra, "trainable": True, "transmitted": True}
            trainable += extra
    total = sum(v["params"] for v in breakdown.values())
    transmitted = sum(v["params"] for v in breakdown.values() if v["transmitted"])
    return ParamReport(total, trainable, transmitted, transmitted * FLOAT_BYTES, total * FLOAT_BYTES,
                       len(adapter_idx) * block_params(cfg), n * block_params(cfg), breakdown)


def transmitted_footprint(plan: SplitPlan, spec: EmulatorSpec, cfg: ModelConfig) -> ParamReport:
    """What the owner ships (adapter, emulator, frozen embeddings/head) against the full model.

    Pruned weights count only their survivors and quantised weight matrices
    count ``bits / 8`` bytes per entry; everything else is float32.
    """
    rep = count_params(cfg, plan, "full")
    plan.validate(cfg.n_layers)
    m = cfg.n_layers - plan.n_bottom - plan.n_top
    bp = block_params(cfg)
    wp = block_weight_matrix_params(cfg)
    adapter_blocks = plan.n_bottom + plan.n_top
    shell = sum(shell_params(cfg).values())
    if spec.method in ("layer_drop", "distilled"):
        emu_blocks = spec.plan.k
        emu_params = emu_blocks * bp
        emu_bytes = emu_params * FLOAT_BYTES
    elif spec.method == "magnitude_prune":
        emu_blocks = m
        kept = wp - int(spec.sparsity * wp)  # floor per block's matrices is applied per tensor in practice
        emu_params = m * (bp - wp + kept)
        emu_bytes = emu_params * FLOAT_BYTES
    else:
        emu_blocks = m
        emu_params = m * bp
        emu_bytes = m * ((bp - wp) * FLOAT_BYTES + (wp * spec.bits + 7) // 8)
    rep.transmitted_params = shell + adapter_blocks * bp + emu_params
    rep.transmitted_bytes = (shell + adapter_blocks * bp) * FLOAT_BYTES + emu_bytes
    rep.transmitted_block_params = (adapter_blocks + emu_blocks) * bp
    return rep


def report_csv(rep: ParamReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "params", "trainable", "transmitted"])
    for name, v in rep.breakdown.items():
        w.writerow([name, v["params"], int(v["trainable"]), int(v["transmitted"])])
    return buf.getvalue()


def report_text(rep: ParamReport) -> str:
    return "\n".join(f"{k}: {v}" for k, v in rep.summary().items())
