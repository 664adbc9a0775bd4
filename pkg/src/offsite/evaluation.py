"""Perplexity, the four offsite-tuning metrics, and the ablation grids.

All experiments run from a pretrained base model. Pretraining results are
cached on disk (keyed by config, seed, corpus hash and kernel backend) so the
grids and the metric runs can share one foundation model per seed.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus, bundled_corpus
from .distill import distill_emulator
from .model import ModelConfig, TransformerModel, forward_full, init_model
from .surgery import EmulatorSpec, SplitPlan, build_emulator, canonical_json, plug_in, split
from .tensor import BACKEND, no_grad
from .tuning import TrainConfig, composed_model, finetune, train_lm

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


# ------------------------------------------------------------------ perplexity


def eval_windows(n_tokens: int, seq_len: int) -> list[tuple[int, int]]:
    """(start, length) of non-overlapping windows covering every next-token target once."""
    out = []
    s = 0
    while s < n_tokens - 1:
        ln = min(seq_len, n_tokens - 1 - s)
        out.append((s, ln))
        s += ln
    return out


def total_nll(model: TransformerModel, tokens, seq_len: int, batch_size: int = 16) -> tuple[float, int]:
    """Summed NLL (float64) and target count under non-overlapping causal windows."""
    from .tensor.kernels import xent_fwd

    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) < 2:
        raise EvaluationError("perplexity needs at least two tokens")
    seq_len = min(seq_len, model.config.max_seq_len)
    wins = eval_windows(len(tokens), seq_len)
    total = 0.0
    count = 0
    with no_grad():
        full = [w for w in wins if w[1] == seq_len]
        rest = [w for w in wins if w[1] != seq_len]
        groups = [full[i:i + batch_size] for i in range(0, len(full), batch_size)] + [[w] for w in rest]
        for grp in groups:
            ln = grp[0][1]
            idx = np.array([s for s, _ in grp])[:, None] + np.arange(ln)[None, :]
            logits = forward_full(model, tokens[idx]).data
            nll, _ = xent_fwd(np.ascontiguousarray(logits.reshape(-1, logits.shape[-1])), tokens[idx + 1].reshape(-1))
            total += nll
            count += idx.size
    return total, count


def perplexity(model: TransformerModel, tokens, seq_len: int = 64) -> float:
    """exp of token-mean NLL over non-overlapping windows of ``seq_len``."""
    nll, n = total_nll(model, tokens, seq_len)
    return math.exp(nll / n)


# ------------------------------------------------------------------ configs


@dataclass
class PretrainConfig:
    steps: int = 1200
    lr: float = 2e-3
    warmup_steps: int = 30
    seq_len: int = 64
    batch_size: int = 8
    weight_decay: float = 0.01

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, steps=self.steps, warmup_steps=self.warmup_steps, lr_min=self.lr * 0.1,
                           weight_decay=self.weight_decay, seq_len=self.seq_len, batch_size=self.batch_size,
                           seed=seed)


@dataclass
class ExperimentConfig:
    """Everything a four-metrics run or ablation point needs besides the seed."""

    model: ModelConfig = field(default_factory=ModelConfig)
    plan: SplitPlan = field(default_factory=SplitPlan)
    emulator_k: int = 2
    emulator_method: str = "layer_drop"
    sparsity: float = 0.5
    bits: int = 16
    distill_steps: int = 200
    distill_lr: float = 1e-3
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(lr=3e-4, steps=150, warmup_steps=10))
    lr_grid: tuple = ()
    peft: str = "full"
    eval_tokens: int = 16384
    train_fraction: float = 0.9
    pretrain_corpus: str = "bundled:pretrain"
    downstream_corpus: str = "bundled:downstream"

    def emulator_spec(self, m: int) -> EmulatorSpec:
        if self.emulator_method in ("layer_drop", "distilled"):
            return EmulatorSpec.layer_drop(m, self.emulator_k, distilled=self.distill_steps > 0)
        if self.emulator_method == "magnitude_prune":
            return EmulatorSpec.magnitude_prune(self.sparsity)
        if self.emulator_method == "quantize":
            return EmulatorSpec.quantize(self.bits)
        raise EvaluationError(f"unknown emulator method {self.emulator_method!r}")

    def to_dict(self):
        d = asdict(self)
        d["lr_grid"] = list(self.lr_grid)
        d["finetune"]["betas"] = list(self.finetune.betas)
        return d

    def fingerprint(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]


def _resolve(spec: str, frac: float) -> Corpus:
    from .corpus import resolve_corpus

    return resolve_corpus(spec, frac)


# ------------------------------------------------------------------ base model


def cache_dir() -> Path:
    root = os.environ.get("OFFSITE_CACHE") or os.path.join(os.environ.get("OFFSITE_WORKDIR", "."), ".offsite-cache")
    return Path(root)


def pretrain_base(config: ModelConfig, seed: int, corpus: Corpus, pcfg: PretrainConfig,
                  use_cache: bool = True) -> TransformerModel:
    """Seeded init followed by causal-LM pretraining on ``corpus.train``."""
    from .artifact import load_checkpoint, save_checkpoint

    key = hashlib.sha256(canonical_json({
        "config": config.to_dict(), "seed": seed, "corpus": corpus.content_hash,
        "frac": corpus.train_fraction, "pretrain": asdict(pcfg), "backend": BACKEND,
    }).encode()).hexdigest()[:24]
    path = cache_dir() / f"base-{key}.otb"
    if use_cache and path.exists():
        return load_checkpoint(path)
    model = init_model(config, seed)
    if pcfg.steps > 0:
        model.set_requires_grad(True)
        train_lm(model, model.named_parameters(), corpus.train, pcfg.train_config(seed), tag="pretrain")
        model.set_requires_grad(False)
    if use_cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, path, model_id=f"pretrained-seed{seed}")
    return model


# ------------------------------------------------------------------ metrics


@dataclass
class MetricsRecord:
    zero_shot_ppl: float
    emulator_ppl: float
    plug_in_ppl: float
    full_ft_ppl: float | None
    config_fingerprint: str
    seed: int
    point: str = ""
    lr: float | None = None
    failure: str = ""

    def orderings(self) -> dict[str, bool]:
        out = {
            "plug_in < zero_shot": self.plug_in_ppl < self.zero_shot_ppl,
            "emulator > plug_in": self.emulator_ppl > self.plug_in_ppl,
        }
        if self.full_ft_ppl is not None:
            out["plug_in <= 1.10 * full_ft"] = self.plug_in_ppl <= 1.10 * self.full_ft_ppl
        return out

    def to_dict(self):
        return asdict(self)


def full_finetune(base: TransformerModel, train_tokens, val_tokens, cfg: TrainConfig) -> TransformerModel:
    """Tune every block and the final norm; embeddings stay frozen."""
    model = base.clone()
    model.set_requires_grad(False)
    params = {}
    for k, t in model.named_parameters().items():
        if k.startswith("blocks.") or k.startswith("ln_f."):
            t.requires_grad = True
            params[k] = t
    train_lm(model, params, train_tokens, cfg, tag="full-ft")
    model.set_requires_grad(False)
    return model


def four_metrics(base: TransformerModel, cfg: ExperimentConfig, downstream: Corpus, seed: int,
                 pretrain_corpus: Corpus | None = None, include_full_ft: bool = True, point: str = "") -> MetricsRecord:
    """Zero-shot, emulator, plug-in and (optionally) full fine-tuning perplexity on the downstream validation split."""
    val = downstream.validation[: cfg.eval_tokens + 1]
    train = downstream.train
    ft_cfg = replace(cfg.finetune, seed=seed, eval_tokens=cfg.eval_tokens)
    fp = cfg.fingerprint()
    zero = perplexity(base, val, ft_cfg.seq_len)
    try:
        sm = split(base, cfg.plan)
        emu = build_emulator(sm, cfg.emulator_spec(sm.m))
        if cfg.distill_steps > 0:
            if pretrain_corpus is None:
                raise EvaluationError("distillation needs the pretraining corpus")
            dcfg = TrainConfig(lr=cfg.distill_lr, steps=cfg.distill_steps, warmup_steps=10,
                               seq_len=ft_cfg.seq_len, batch_size=ft_cfg.batch_size, seed=seed, weight_decay=0.0)
            emu, _ = distill_emulator(sm, emu, pretrain_corpus.train, dcfg)
        res = finetune(sm, emu.blocks, train, val, ft_cfg, cfg.lr_grid or None, peft=cfg.peft)
        emu_ppl = perplexity(composed_model(sm, res.adapter, emu.blocks), val, ft_cfg.seq_len)
        plugged = plug_in(base, res.adapter)
        plug = perplexity(plugged, val, ft_cfg.seq_len)
        full = None
        if include_full_ft:
            full_model = full_finetune(base, train, val, replace(ft_cfg, lr=res.lr))
            full = perplexity(full_model, val, ft_cfg.seq_len)
    except Exception as exc:  # partial record, annotated
        log.exception("four-metrics run failed")
        return MetricsRecord(zero, math.nan, math.nan, None, fp, seed, point, None, f"{type(exc).__name__}: {exc}")
    return MetricsRecord(zero, emu_ppl, plug, full, fp, seed, point, res.lr)


def run_four_metrics(cfg: ExperimentConfig, seeds: Sequence[int] = (0, 1, 2), use_cache: bool = True,
                     include_full_ft: bool = True) -> list[MetricsRecord]:
    pre = _resolve(cfg.pretrain_corpus, cfg.train_fraction)
    down = _resolve(cfg.downstream_corpus, cfg.train_fraction)
    out = []
    for seed in seeds:
        base = pretrain_base(cfg.model, seed, pre, cfg.pretrain, use_cache)
        out.append(four_metrics(base, cfg, down, seed, pre, include_full_ft))
    return out


# ------------------------------------------------------------------ ablations

AXES = ("adapter_position", "compression_method", "distillation")


@dataclass
class AblationGrid:
    axis: str
    points: list  # [(label, ExperimentConfig)]
    seeds: tuple = (0, 1, 2)
    results: list = field(default_factory=list)

    def __post_init__(self):
        if self.axis not in AXES:
            raise EvaluationError(f"unknown ablation axis {self.axis!r}; choose from {AXES}")
        if len(self.points) < 2 or len(self.seeds) < 1:
            raise EvaluationError("an ablation grid needs at least two points and one seed")


def default_grid(axis: str, base: ExperimentConfig | None = None, seeds=(0, 1, 2), budget: int = 4,
                 distill_steps: int = 200) -> AblationGrid:
    base = base or ExperimentConfig()
    if axis == "adapter_position":
        half = budget // 2
        pts = [
            (f"top-{budget}", replace(base, plan=SplitPlan(0, budget))),
            (f"bottom-{budget}", replace(base, plan=SplitPlan(budget, 0))),
            (f"sandwich-{half}+{budget - half}", replace(base, plan=SplitPlan(half, budget - half))),
        ]
    elif axis == "compression_method":
        pts = [
            ("layer_drop", replace(base, emulator_method="layer_drop", distill_steps=0)),
            ("magnitude_prune", replace(base, emulator_method="magnitude_prune", distill_steps=0)),
            ("quantize", replace(base, emulator_method="quantize", distill_steps=0)),
        ]
    elif axis == "distillation":
        pts = [
            ("off", replace(base, distill_steps=0)),
            ("on", replace(base, distill_steps=distill_steps)),
        ]
    else:
        raise EvaluationError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    return AblationGrid(axis, pts, tuple(seeds))


def run_ablation(grid: AblationGrid, use_cache: bool = True) -> AblationGrid:
    """Fill ``grid.results`` with one record per point per seed (no full fine-tuning)."""
    bases = {}
    corpora = {}
    grid.results = []
    for label, cfg in grid.points:
        key = (cfg.pretrain_corpus, cfg.downstream_corpus, cfg.train_fraction)
        if key not in corpora:
            corpora[key] = (_resolve(cfg.pretrain_corpus, cfg.train_fraction),
                            _resolve(cfg.downstream_corpus, cfg.train_fraction))
        pre, down = corpora[key]
        for seed in grid.seeds:
            bkey = (cfg.model, seed, pre.content_hash, canonical_json(asdict(cfg.pretrain)))
            if bkey not in bases:
                bases[bkey] = pretrain_base(cfg.model, seed, pre, cfg.pretrain, use_cache)
            rec = four_metrics(bases[bkey], cfg, down, seed, pre, include_full_ft=False, point=label)
            grid.results.append(rec)
    return grid


def summarize(records: Sequence[MetricsRecord]) -> list[dict]:
    """Mean and spread (population std) per point and metric, in first-seen point order."""
    points: dict[str, list[MetricsRecord]] = {}
    for r in records:
        points.setdefault(r.point, []).append(r)
    rows = []
    for label, recs in points.items():
        row = {"point": label, "n_seeds": len(recs)}
        for metric in ("zero_shot_ppl", "emulator_ppl", "plug_in_ppl", "full_ft_ppl"):
            vals = [getattr(r, metric) for r in recs if getattr(r, metric) is not None]
            if vals:
                row[f"{metric}_mean"] = statistics.fmean(vals)
                row[f"{metric}_std"] = statistics.pstdev(vals) if len(vals) > 1 else 0.0
        rows.append(row)
    return rows


RECORD_FIELDS = ["point", "seed", "zero_shot_ppl", "emulator_ppl", "plug_in_ppl", "full_ft_ppl", "lr",
                 "config_fingerprint", "failure"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_csv(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in records:
        d = r.to_dict()
        w.writerow([_fmt(d[k]) for k in RECORD_FIELDS])
    return buf.getvalue()


def summary_csv(rows: Sequence[dict]) -> str:
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in keys])
    return buf.getvalue()


def default_downstream(frac: float = 0.9) -> Corpus:
    return bundled_corpus("downstream", frac)


def config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2)
