"""Hidden-state distillation of a layer-dropped emulator toward the real middle."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .corpus import batch_stream, steps_per_epoch
from .model import embed, run_blocks
from .surgery import Emulator, EmulatorSpec, SplitModel
from .tensor import ShapeError, Tensor, adamw_step, backward, cosine_lr, mul, no_grad, sub, sum_all
from .tuning import TrainConfig, TrainingError


def distill_loss(student_out: Tensor, teacher_out: Tensor) -> Tensor:
    """Mean over the leading (sample) axis of the squared L2 norm of the difference."""
    if student_out.shape != teacher_out.shape:
        raise ShapeError(f"student output {student_out.shape} vs teacher output {teacher_out.shape}")
    n = student_out.shape[0]
    diff = sub(student_out, teacher_out)
    return mul(sum_all(mul(diff, diff)), 1.0 / n)


def distill_emulator(sm: SplitModel, emulator: Emulator, tokens, cfg: TrainConfig) -> tuple[Emulator, list[dict]]:
    """Train a copy of the emulator so that E*(x) tracks E(x) on hidden states x from the frozen bottom adapter.

    Inputs are recomputed from the adapter each step. Only the emulator copy
    changes; the split's adapter and middle are read-only here.
    """
    if emulator.spec.method not in ("layer_drop", "distilled"):
        raise ValueError(f"distillation starts from a layer-drop emulator, got {emulator.spec.method!r}")
    spec = EmulatorSpec("distilled", plan=emulator.spec.plan)
    student = Emulator(spec, [b.clone() for b in emulator.blocks], emulator.source_indices)
    params = student.named_parameters()
    rows: list[dict] = []
    if cfg.steps == 0:
        return student, rows
    for t in params.values():
        t.requires_grad = True
    tokens = np.asarray(tokens)
    plan = cfg.batch_plan()
    if steps_per_epoch(tokens, plan) == 0:
        raise TrainingError("distillation corpus yields no full batch")
    stream = batch_stream(tokens, plan)
    sched = cfg.schedule()
    opt = cfg.optimizer()
    try:
        for step in range(cfg.steps):
            lr = cosine_lr(sched, step)
            x, _ = next(stream)
            with no_grad():
                h = run_blocks(sm.a1, embed(sm.model, x))
                target = run_blocks(sm.middle, h)
            h = Tensor(h.data)
            target = Tensor(target.data)
            loss = distill_loss(run_blocks(student.blocks, h), target)
            value = float(loss.item())
            if not math.isfinite(value):
                raise TrainingError(f"non-finite distillation loss at step {step}")
            rows.append({"step": step, "loss": value, "lr": lr})
            backward(loss)
            adamw_step(params, opt, lr)
            for t in params.values():
                t.grad = None
    finally:
        for t in params.values():
            t.requires_grad = False
            t.grad = None
    return student, rows


def distill_step0_loss(sm: SplitModel, emulator: Emulator, tokens, cfg: TrainConfig) -> float:
    """Distillation loss of ``emulator`` on the first batch, without training."""
    x, _ = next(batch_stream(np.asarray(tokens), cfg.batch_plan()))
    with no_grad():
        h = run_blocks(sm.a1, embed(sm.model, x))
        return float(distill_loss(run_blocks(emulator.blocks, h), run_blocks(sm.middle, h)).item())


def write_loss_curve(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for r in rows:
            w.writerow([r["step"], repr(r["loss"])])
