"""Sandwich decomposition, emulator construction and plug-in.

A model is cut into a bottom adapter (first ``n_bottom`` blocks), a frozen
middle and a top adapter (last ``n_top`` blocks). The middle is replaced by a
lossy emulator for offsite tuning, and the tuned adapter is later installed
back around the untouched middle.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .model import TransformerBlock, TransformerModel, tensors_hash
from .tensor import Tensor


class PlanError(ValueError):
    pass


class EmulatorSpecError(ValueError):
    pass


class IntegrationError(RuntimeError):
    """A tuned adapter does not belong to the model it is being plugged into."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


# ------------------------------------------------------------------ plans


@dataclass(frozen=True)
class SplitPlan:
    n_bottom: int = 2
    n_top: int = 2
    include_embeddings_in_adapter: bool = False
    include_head_in_adapter: bool = False

    def validate(self, n_layers: int) -> None:
        if self.n_bottom < 0 or self.n_top < 0:
            raise PlanError("adapter layer counts must be non-negative")
        if self.n_bottom + self.n_top >= n_layers:
            raise PlanError(f"plan {self.label} leaves no middle in a {n_layers}-layer model")

    @property
    def label(self) -> str:
        return f"{self.n_bottom}+{self.n_top}"

    @classmethod
    def parse(cls, text: str, **kw) -> "SplitPlan":
        try:
            bottom, top = (int(p) for p in text.split("+"))
        except ValueError:
            raise PlanError(f"split plan must look like '2+2', got {text!r}") from None
        return cls(bottom, top, **kw)

    def to_dict(self):
        return asdict(self)

    def digest(self) -> str:
        return _digest(self.to_dict())

    def adapter_indices(self, n_layers: int) -> list[int]:
        return list(range(self.n_bottom)) + list(range(n_layers - self.n_top, n_layers))

    def middle_indices(self, n_layers: int) -> list[int]:
        return list(range(self.n_bottom, n_layers - self.n_top))


def round_half_away(x: Fraction) -> int:
    """Round to nearest integer, ties away from zero."""
    if x < 0:
        return -round_half_away(-x)
    return math.floor(x + Fraction(1, 2))


@dataclass(frozen=True)
class LayerDropPlan:
    m: int
    k: int
    retained_indices: tuple

    def to_dict(self):
        return {"m": self.m, "k": self.k, "retained_indices": list(self.retained_indices)}


def uniform_layer_drop(m: int, k: int) -> LayerDropPlan:
    """Keep ``k`` of ``m`` layers at rounded stride (m-1)/(k-1); first and last always kept."""
    if k < 2 or k > m:
        raise PlanError(f"uniform layer drop needs 2 <= k <= m, got m={m}, k={k}")
    stride = Fraction(m - 1, k - 1)
    idx = tuple(round_half_away(j * stride) for j in range(k))
    return LayerDropPlan(m, k, idx)


METHODS = ("layer_drop", "magnitude_prune", "quantize", "distilled")


@dataclass(frozen=True)
class EmulatorSpec:
    method: str
    plan: LayerDropPlan | None = None
    sparsity: float | None = None
    bits: int | None = None

    def __post_init__(self):
        m = self.method
        if m not in METHODS:
            raise EmulatorSpecError(f"unknown emulator method {m!r}; choose from {METHODS}")
        needs_plan = m in ("layer_drop", "distilled")
        if needs_plan != (self.plan is not None):
            raise EmulatorSpecError(f"method {m!r} {'requires' if needs_plan else 'takes no'} layer-drop plan")
        if (m == "magnitude_prune") != (self.sparsity is not None):
            raise EmulatorSpecError("sparsity is set exactly for magnitude_prune")
        if (m == "quantize") != (self.bits is not None):
            raise EmulatorSpecError("bits is set exactly for quantize")
        if self.sparsity is not None and not 0.0 <= self.sparsity < 1.0:
            raise EmulatorSpecError(f"sparsity must lie in [0, 1), got {self.sparsity}")
        if self.bits is not None and self.bits < 2:
            raise EmulatorSpecError(f"quantisation needs at least 2 bits, got {self.bits}")

    @classmethod
    def layer_drop(cls, m: int, k: int, distilled: bool = False) -> "EmulatorSpec":
        return cls("distilled" if distilled else "layer_drop", plan=uniform_layer_drop(m, k))

    @classmethod
    def magnitude_prune(cls, sparsity: float) -> "EmulatorSpec":
        return cls("magnitude_prune", sparsity=float(sparsity))

    @classmethod
    def quantize(cls, bits: int) -> "EmulatorSpec":
        return cls("quantize", bits=int(bits))

    def to_dict(self):
        return {
            "method": self.method,
            "plan": None if self.plan is None else self.plan.to_dict(),
            "sparsity": self.sparsity,
            "bits": self.bits,
        }

    @classmethod
    def from_dict(cls, d) -> "EmulatorSpec":
        plan = d.get("plan")
        if plan is not None:
            plan = LayerDropPlan(plan["m"], plan["k"], tuple(plan["retained_indices"]))
        return cls(d["method"], plan, d.get("sparsity"), d.get("bits"))

    def digest(self) -> str:
        return _digest(self.to_dict())


@dataclass
class Provenance:
    base_hash: str
    plan_hash: str
    emulator_hash: str = ""

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "Provenance":
        return cls(d["base_hash"], d["plan_hash"], d.get("emulator_hash", ""))

    def differences(self, other: "Provenance") -> list[str]:
        return [k for k in ("base_hash", "plan_hash", "emulator_hash") if getattr(self, k) != getattr(other, k)]


# ------------------------------------------------------------------ adapter


SHELL_EMBEDDINGS = ("wte", "wpe")
SHELL_HEAD = ("ln_f.gain", "ln_f.bias", "lm_head.weight")


@dataclass
class AdapterWeights:
    """Bottom and top adapter blocks plus any shell tensors the plan made trainable."""

    plan: SplitPlan
    n_layers: int
    a1: list[TransformerBlock]
    a2: list[TransformerBlock]
    provenance: Provenance
    shell: dict = field(default_factory=dict)

    @property
    def peft_mode(self) -> str:
        modes = {b.peft_mode for b in self.a1 + self.a2}
        return modes.pop() if len(modes) == 1 else ("full" if not modes else "mixed")

    def blocks_by_index(self) -> dict[int, TransformerBlock]:
        idx = self.plan.adapter_indices(self.n_layers)
        return dict(zip(idx, self.a1 + self.a2))

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, blk in self.blocks_by_index().items():
            for k, v in blk.named_parameters().items():
                out[f"blocks.{i}.{k}"] = v
        out.update(self.shell)
        return out

    def peft_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, blk in self.blocks_by_index().items():
            for k, v in blk.peft.items():
                out[f"blocks.{i}.{k}"] = v
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def frozen_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if not v.requires_grad}

    def clone(self) -> "AdapterWeights":
        shell = {}
        for k, v in self.shell.items():
            c = Tensor(np.array(v.data, copy=True))
            c.requires_grad = v.requires_grad
            shell[k] = c
        return AdapterWeights(self.plan, self.n_layers, [b.clone() for b in self.a1], [b.clone() for b in self.a2],
                              Provenance(**self.provenance.to_dict()), shell)

    def weight_hash(self) -> str:
        return tensors_hash(self.named_parameters())


class SplitModel:
    """A model cut into ``a1``, ``middle`` and ``a2`` with its own copy of every tensor.

    ``model`` is the composed stack ``a1 + middle + a2`` over a private shell,
    so training the adapter never touches the source model.
    """

    def __init__(self, model: TransformerModel, plan: SplitPlan, provenance: Provenance,
                 full_layers: int | None = None):
        self.model = model
        self.plan = plan
        self.provenance = provenance
        # depth of the source model; differs from model depth when the middle is an emulator
        self.full_layers = model.config.n_layers if full_layers is None else full_layers
        n = model.config.n_layers
        self.a1 = model.blocks[: plan.n_bottom]
        self.middle = model.blocks[plan.n_bottom: n - plan.n_top]
        self.a2 = model.blocks[n - plan.n_top:]

    @property
    def m(self) -> int:
        return len(self.middle)

    def adapter(self) -> AdapterWeights:
        """Live view of the adapter (shares tensors with this split)."""
        shell = {}
        if self.plan.include_embeddings_in_adapter:
            shell.update({k: self.model.shell[k] for k in SHELL_EMBEDDINGS})
        if self.plan.include_head_in_adapter:
            shell.update({k: self.model.shell[k] for k in SHELL_HEAD if k in self.model.shell})
        return AdapterWeights(self.plan, self.full_layers, list(self.a1), list(self.a2),
                              self.provenance, shell)

    def middle_named(self) -> dict[str, Tensor]:
        out = {}
        for j, blk in enumerate(self.middle):
            for k, v in blk.named_parameters().items():
                out[f"blocks.{self.plan.n_bottom + j}.{k}"] = v
        return out

    def shell_named(self) -> dict[str, Tensor]:
        return dict(self.model.shell)


def _set_grad(blocks: Sequence[TransformerBlock], flag: bool) -> None:
    for b in blocks:
        for t in b.named_parameters().values():
            t.requires_grad = flag
            t.grad = None


def split(model: TransformerModel, plan: SplitPlan) -> SplitModel:
    """Copy ``model`` and mark the adapter trainable, everything else frozen."""
    n = model.config.n_layers
    plan.validate(n)
    if plan.n_bottom + plan.n_top == 0:
        warnings.warn("split plan 0+0 leaves the adapter empty", stacklevel=2)
    prov = Provenance(model.weight_hash(), plan.digest())
    copy = model.clone()
    copy.set_requires_grad(False)
    sm = SplitModel(copy, plan, prov)
    _set_grad(sm.a1, True)
    _set_grad(sm.a2, True)
    for t in sm.adapter().shell.values():
        t.requires_grad = True
    return sm


# ------------------------------------------------------------------ emulator


@dataclass
class Emulator:
    spec: EmulatorSpec
    blocks: list[TransformerBlock]
    source_indices: tuple  # positions within the middle each block was derived from

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for j, blk in enumerate(self.blocks):
            for k, v in blk.named_parameters().items():
                out[f"emulator.{j}.{k}"] = v
        return out

    def weight_hash(self) -> str:
        return tensors_hash(self.named_parameters())


def magnitude_prune(w: np.ndarray, sparsity: float) -> np.ndarray:
    """Zero the ``floor(sparsity * size)`` smallest-magnitude entries; ties go to the lower flat index."""
    flat = np.array(w, copy=True).reshape(-1)
    n = int(np.floor(sparsity * flat.size))
    if n:
        order = np.argsort(np.abs(flat), kind="stable")
        flat[order[:n]] = 0
    return flat.reshape(w.shape)


def quantize_scale(w: np.ndarray, bits: int) -> float:
    qmax = 2 ** (bits - 1) - 1
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    return amax / qmax


def quantize_dequantize(w: np.ndarray, bits: int) -> np.ndarray:
    """Symmetric per-tensor round trip; rounding is half away from zero."""
    qmax = 2 ** (bits - 1) - 1
    scale = quantize_scale(w, bits)
    if scale == 0.0:
        return np.zeros_like(w)
    x = np.asarray(w, dtype=np.float64) / scale
    q = np.clip(np.sign(x) * np.floor(np.abs(x) + 0.5), -qmax, qmax)
    return (q * scale).astype(w.dtype)


def _compress_block(blk: TransformerBlock, fn) -> TransformerBlock:
    new = blk.clone()
    for name, t in new.params.items():
        if name.endswith(".weight") and t.data.ndim == 2:
            t.data = fn(t.data)
    return new


def build_emulator(sm: SplitModel, spec: EmulatorSpec) -> Emulator:
    """Compressed stand-in for ``sm.middle``. The middle itself is never modified."""
    m = sm.m
    if spec.method in ("layer_drop", "distilled"):
        if spec.plan.m != m:
            raise EmulatorSpecError(f"layer-drop plan is for m={spec.plan.m}, middle has {m} layers")
        blocks = [sm.middle[i].clone() for i in spec.plan.retained_indices]
        src = tuple(spec.plan.retained_indices)
    elif spec.method == "magnitude_prune":
        blocks = [_compress_block(b, lambda w: magnitude_prune(w, spec.sparsity)) for b in sm.middle]
        src = tuple(range(m))
    else:
        blocks = [_compress_block(b, lambda w: quantize_dequantize(w, spec.bits)) for b in sm.middle]
        src = tuple(range(m))
    _set_grad(blocks, False)
    return Emulator(spec, blocks, src)


def emulated_model(sm: SplitModel, emulator: Emulator) -> TransformerModel:
    """The adapter wrapped around the emulator instead of the real middle (tensors shared)."""
    return sm.model.with_blocks(list(sm.a1) + list(emulator.blocks) + list(sm.a2))


# ------------------------------------------------------------------ plug-in


def plug_in(model: TransformerModel, adapter: AdapterWeights) -> TransformerModel:
    """Return a copy of ``model`` with the adapter positions (and shell, if any) replaced."""
    if adapter.provenance.base_hash != model.weight_hash():
        raise IntegrationError("adapter was split from a different base model (base_hash mismatch)")
    n = model.config.n_layers
    if adapter.n_layers != n:
        raise IntegrationError(f"adapter expects {adapter.n_layers} layers, model has {n}")
    out = model.clone()
    for i, blk in adapter.blocks_by_index().items():
        for k, t in blk.params.items():
            if t.shape != out.blocks[i].params[k].shape:
                raise IntegrationError(f"shape mismatch for blocks.{i}.{k}")
        out.blocks[i] = blk.clone()
    for k, t in adapter.shell.items():
        out.shell[k] = Tensor(np.array(t.data, copy=True))
    out.set_requires_grad(False)
    return out
