"""Decoder-only transformer with pre-norm blocks and learned absolute positions.

The forward pass is split into ``embed`` / ``run_blocks`` / ``lm_logits`` so a
model can be driven as bottom adapter, middle and top adapter separately, with
the hidden state after each segment exposed.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .tensor import (
    Tensor,
    add,
    causal_softmax,
    embedding,
    gelu,
    layer_norm,
    linear,
    matmul,
    mul,
    reshape,
    split_last,
    transpose,
)

ARCHES = ("gpt2-like", "opt-like")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = 256
    max_seq_len: int = 256
    tie_embeddings: bool = True
    arch: str = "gpt2-like"
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.arch not in ARCHES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHES}")

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "toy": ModelConfig(),
    "tiny": ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=32, vocab_size=11, max_seq_len=16),
    # smallest byte-level stack with a non-trivial split; used for quick end-to-end runs
    "mini": ModelConfig(n_layers=6, d_model=16, n_heads=2, d_ff=64, vocab_size=256, max_seq_len=64),
    "gpt2-xl": ModelConfig(n_layers=48, d_model=1600, n_heads=25, d_ff=6400, vocab_size=50257,
                           max_seq_len=1024, tie_embeddings=True, arch="gpt2-like"),
    "opt-1.3b": ModelConfig(n_layers=24, d_model=2048, n_heads=32, d_ff=8192, vocab_size=50272,
                            max_seq_len=2048, tie_embeddings=True, arch="opt-like"),
}


def get_preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def linear_layout(config: ModelConfig) -> list[tuple[str, int, int]]:
    """(name, in_dim, out_dim) of every linear projection in one block."""
    d, f = config.d_model, config.d_ff
    if config.arch == "gpt2-like":
        attn = [("attn.qkv", d, 3 * d), ("attn.proj", d, d)]
    else:
        attn = [("attn.q", d, d), ("attn.k", d, d), ("attn.v", d, d), ("attn.o", d, d)]
    return attn + [("mlp.fc", d, f), ("mlp.proj", f, d)]


def block_param_shapes(config: ModelConfig) -> dict[str, tuple]:
    d = config.d_model
    shapes = {"ln1.gain": (d,), "ln1.bias": (d,), "ln2.gain": (d,), "ln2.bias": (d,)}
    for name, i, o in linear_layout(config):
        shapes[f"{name}.weight"] = (i, o)
        shapes[f"{name}.bias"] = (o,)
    return shapes


_RESIDUAL_OUT = ("attn.proj", "attn.o", "mlp.proj")


class TransformerBlock:
    """One pre-norm block; ``params`` holds base weights, ``peft`` any attached extras."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.peft: dict[str, Tensor] = {}
        self.peft_mode = "full"
        self.lora_scale = 1.0

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        out.update(self.peft)
        return out

    def clone(self) -> "TransformerBlock":
        new = TransformerBlock(self.config, {k: _copy_tensor(v) for k, v in self.params.items()})
        new.peft = {k: _copy_tensor(v) for k, v in self.peft.items()}
        new.peft_mode = self.peft_mode
        new.lora_scale = self.lora_scale
        return new

    def _proj(self, name: str, h: Tensor) -> Tensor:
        y = linear(h, self.params[f"{name}.weight"], self.params[f"{name}.bias"])
        if self.peft_mode == "lora":
            a = self.peft[f"lora.{name}.A"]
            b = self.peft[f"lora.{name}.B"]
            y = add(y, mul(matmul(matmul(h, a), b), self.lora_scale))
        return y

    def _bottleneck(self, site: str, h: Tensor) -> Tensor:
        if self.peft_mode != "bottleneck":
            return h
        p = self.peft
        z = gelu(linear(h, p[f"bottleneck.{site}.down.weight"], p[f"bottleneck.{site}.down.bias"]))
        return add(h, linear(z, p[f"bottleneck.{site}.up.weight"], p[f"bottleneck.{site}.up.bias"]))

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.config
        p = self.params
        bsz, seq, d = x.shape
        nh = cfg.n_heads
        hd = d // nh
        h = layer_norm(x, p["ln1.gain"], p["ln1.bias"], cfg.ln_eps)
        if cfg.arch == "gpt2-like":
            q, k, v = split_last(self._proj("attn.qkv", h), [d, d, d])
        else:
            q, k, v = (self._proj(n, h) for n in ("attn.q", "attn.k", "attn.v"))
        q, k, v = (transpose(reshape(t, (bsz, seq, nh, hd)), (0, 2, 1, 3)) for t in (q, k, v))
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        att = matmul(causal_softmax(scores), v)
        att = reshape(transpose(att, (0, 2, 1, 3)), (bsz, seq, d))
        att = self._proj("attn.proj" if cfg.arch == "gpt2-like" else "attn.o", att)
        x = add(x, self._bottleneck("attn", att))
        h = layer_norm(x, p["ln2.gain"], p["ln2.bias"], cfg.ln_eps)
        h = self._proj("mlp.proj", gelu(self._proj("mlp.fc", h)))
        return add(x, self._bottleneck("mlp", h))


class TransformerModel:
    """Embeddings, an ordered block stack, a final norm and an LM head.

    ``shell`` holds the non-block tensors: ``wte``, ``wpe``, ``ln_f.gain``,
    ``ln_f.bias`` and, when embeddings are untied, ``lm_head.weight``.
    """

    def __init__(self, config: ModelConfig, shell: dict[str, Tensor], blocks: list[TransformerBlock]):
        if len(blocks) != config.n_layers:
            raise ValueError(f"config says {config.n_layers} layers, got {len(blocks)} blocks")
        self.config = config
        self.shell = shell
        self.blocks = blocks

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for k in ("wte", "wpe"):
            out[k] = self.shell[k]
        for i, blk in enumerate(self.blocks):
            for k, v in blk.named_parameters().items():
                out[f"blocks.{i}.{k}"] = v
        for k in ("ln_f.gain", "ln_f.bias", "lm_head.weight"):
            if k in self.shell:
                out[k] = self.shell[k]
        return out

    def clone(self) -> "TransformerModel":
        return TransformerModel(self.config, {k: _copy_tensor(v) for k, v in self.shell.items()},
                                [b.clone() for b in self.blocks])

    def with_blocks(self, blocks: Sequence[TransformerBlock]) -> "TransformerModel":
        """A model sharing this shell but running ``blocks`` (no copies made)."""
        return TransformerModel(replace(self.config, n_layers=len(blocks)), self.shell, list(blocks))

    def num_params(self) -> int:
        return sum(int(t.data.size) for t in self.named_parameters().values())

    def weight_hash(self) -> str:
        return tensors_hash(self.named_parameters())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.named_parameters().values():
            t.requires_grad = flag
            t.grad = None

    def __call__(self, ids) -> Tensor:
        return forward_full(self, ids)


def _copy_tensor(t: Tensor) -> Tensor:
    c = Tensor(np.array(t.data, copy=True))
    c.requires_grad = t.requires_grad
    return c


def tensors_hash(named: dict[str, Tensor]) -> str:
    """sha256 over names, dtypes, shapes and little-endian bytes, in the given order."""
    h = hashlib.sha256()
    for name, t in named.items():
        arr = np.ascontiguousarray(t.data)
        h.update(name.encode())
        h.update(arr.dtype.str.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ forward


def check_ids(config: ModelConfig, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ValueError(f"token ids must be [batch, seq], got shape {ids.shape}")
    if ids.shape[1] > config.max_seq_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError(f"token id outside [0, {config.vocab_size})")
    return ids


def embed(model: TransformerModel, ids) -> Tensor:
    ids = check_ids(model.config, ids)
    pos = np.arange(ids.shape[1])
    return add(embedding(model.shell["wte"], ids), embedding(model.shell["wpe"], pos))


def run_blocks(blocks: Iterable[TransformerBlock], x: Tensor) -> Tensor:
    for blk in blocks:
        if blk.config.d_model != x.shape[-1]:
            raise ValueError(f"block width {blk.config.d_model} does not match hidden width {x.shape[-1]}")
        x = blk(x)
    return x


def lm_logits(model: TransformerModel, x: Tensor) -> Tensor:
    s = model.shell
    h = layer_norm(x, s["ln_f.gain"], s["ln_f.bias"], model.config.ln_eps)
    if model.config.tie_embeddings:
        return matmul(h, transpose(s["wte"], (1, 0)))
    return matmul(h, s["lm_head.weight"])


def forward_full(model: TransformerModel, ids) -> Tensor:
    """Causal LM logits [B, S, V]."""
    return lm_logits(model, run_blocks(model.blocks, embed(model, ids)))


def forward_segmented(model: TransformerModel, a1: Sequence[TransformerBlock], middle: Sequence[TransformerBlock],
                      a2: Sequence[TransformerBlock], ids) -> tuple[Tensor, Tensor, Tensor]:
    """Run bottom adapter, middle and top adapter using ``model``'s embeddings and head.

    Returns (hidden after ``a1``, hidden after ``middle``, logits).
    """
    h1 = run_blocks(a1, embed(model, ids))
    h2 = run_blocks(middle, h1)
    return h1, h2, lm_logits(model, run_blocks(a2, h2))


# --------------------------------------------------------------------- init

INIT_STD = 0.02
POS_INIT_STD = 0.01


def init_std(config: ModelConfig, name: str) -> float:
    """Target standard deviation for a parameter name (0 for constant-initialised ones)."""
    if name == "wte" or name == "lm_head.weight":
        return INIT_STD
    if name == "wpe":
        return POS_INIT_STD
    if name.endswith(".weight"):
        base = name.rsplit(".", 1)[0]
        if base in _RESIDUAL_OUT:
            return INIT_STD / math.sqrt(2 * config.n_layers)
        return INIT_STD
    return 0.0


def _fill(rng, config, name, shape, dtype, materialize):
    if not materialize:
        return np.broadcast_to(np.zeros((), dtype=dtype), shape)
    if name.endswith(".gain"):
        return np.ones(shape, dtype=dtype)
    std = init_std(config, name)
    if std == 0.0:
        return np.zeros(shape, dtype=dtype)
    return (rng.standard_normal(shape) * std).astype(dtype)


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32, materialize: bool = True) -> TransformerModel:
    """Seeded initialisation: N(0, 0.02) projections, 0.02/sqrt(2L) on residual outputs,
    N(0, 0.01) positions, zero biases, unit norm gains.

    ``materialize=False`` builds zero-stride placeholder arrays of the right
    shapes, for parameter accounting on configs too large to allocate.
    """
    rng = np.random.default_rng(seed)
    d, v = config.d_model, config.vocab_size
    shell = {
        "wte": Tensor(_fill(rng, config, "wte", (v, d), dtype, materialize)),
        "wpe": Tensor(_fill(rng, config, "wpe", (config.max_seq_len, d), dtype, materialize)),
    }
    blocks = []
    shapes = block_param_shapes(config)
    for _ in range(config.n_layers):
        params = {name: Tensor(_fill(rng, config, name, shape, dtype, materialize)) for name, shape in shapes.items()}
        blocks.append(TransformerBlock(config, params))
    shell["ln_f.gain"] = Tensor(_fill(rng, config, "ln_f.gain", (d,), dtype, materialize))
    shell["ln_f.bias"] = Tensor(_fill(rng, config, "ln_f.bias", (d,), dtype, materialize))
    if not config.tie_embeddings:
        shell["lm_head.weight"] = Tensor(_fill(rng, config, "lm_head.weight", (d, v), dtype, materialize))
    return TransformerModel(config, shell, blocks)


def deep_copy_blocks(blocks: Sequence[TransformerBlock]) -> list[TransformerBlock]:
    return [b.clone() for b in blocks]


__all__ = [
    "ModelConfig",
    "PRESETS",
    "TransformerBlock",
    "TransformerModel",
    "block_param_shapes",
    "deep_copy_blocks",
    "embed",
    "forward_full",
    "forward_segmented",
    "get_preset",
    "init_model",
    "init_std",
    "linear_layout",
    "lm_logits",
    "run_blocks",
    "tensors_hash",
]

