"""Bundle files exchanged between the model owner and the data owner.

Layout: ``b"OTB1"``, manifest length as 8-byte little-endian unsigned int,
canonical JSON manifest, then the payload: every tensor as little-endian
float32, row-major, concatenated in manifest index order. Each index entry
carries the sha256 of its payload slice and the manifest carries the sha256
of the whole payload plus the sha256 of its own canonical text (computed with
that field left out). A manifest that is not in canonical form is rejected,
so any single changed byte anywhere in the file is detected.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransformerBlock, TransformerModel, block_param_shapes
from .surgery import (
    AdapterWeights,
    Emulator,
    EmulatorSpec,
    Provenance,
    SplitModel,
    SplitPlan,
    canonical_json,
    plug_in,
    split,
)
from .tensor import Tensor
from .tuning import BottleneckSpec, LoraSpec, attach_bitfit, attach_bottleneck, attach_lora, is_bias_like

MAGIC = b"OTB1"
FORMAT_VERSION = 1
ROLES = ("owner_package", "adapter_return", "checkpoint", "emulator")
DTYPE = "<f4"


class BundleError(ValueError):
    """Malformed bundle file."""


class ChecksumError(BundleError):
    pass


class PackagingError(RuntimeError):
    pass


class ProvenanceError(RuntimeError):
    def __init__(self, differing: list[str]):
        self.differing = differing
        super().__init__("provenance mismatch in " + ", ".join(differing))


@dataclass
class ArtifactBundle:
    manifest: dict
    tensors: dict = field(default_factory=dict)  # name -> np.ndarray (float32)

    @property
    def role(self) -> str:
        return self.manifest["role"]

    def to_bytes(self) -> bytes:
        index = []
        chunks = []
        offset = 0
        for name, arr in self.tensors.items():
            raw = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
            index.append({"name": name, "dtype": "float32", "shape": list(arr.shape), "offset": offset,
                          "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()})
            chunks.append(raw)
            offset += len(raw)
        payload = b"".join(chunks)
        manifest = dict(self.manifest)
        manifest["format_version"] = FORMAT_VERSION
        manifest["tensors"] = index
        manifest["payload_bytes"] = len(payload)
        manifest["payload_sha256"] = hashlib.sha256(payload).hexdigest()
        manifest["manifest_sha256"] = _manifest_sha(manifest)
        text = canonical_json(manifest).encode()
        return MAGIC + struct.pack("<Q", len(text)) + text + payload

    def write(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(self.to_bytes())
        return p

    def nbytes(self) -> int:
        return len(self.to_bytes())


def _manifest_sha(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "manifest_sha256"}
    return hashlib.sha256(canonical_json(body).encode()).hexdigest()


def bundle_from_bytes(data: bytes) -> ArtifactBundle:
    if len(data) < 12 or data[:4] != MAGIC:
        raise BundleError("not an offsite bundle (bad magic bytes)")
    (mlen,) = struct.unpack("<Q", data[4:12])
    if 12 + mlen > len(data):
        raise BundleError("truncated manifest")
    text = data[12:12 + mlen]
    try:
        manifest = json.loads(text.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleError(f"unreadable manifest: {exc}") from None
    if not isinstance(manifest, dict) or canonical_json(manifest).encode() != text:
        raise BundleError("manifest is not in canonical form")
    if manifest.get("manifest_sha256") != _manifest_sha(manifest):
        raise ChecksumError("manifest checksum mismatch")
    try:
        return _decode(manifest, data[12 + mlen:])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, BundleError):
            raise
        raise BundleError(f"malformed manifest: {exc}") from None


def _decode(manifest: dict, payload: bytes) -> ArtifactBundle:
    if manifest.get("format_version") != FORMAT_VERSION:
        raise BundleError(f"unsupported format version {manifest.get('format_version')!r}")
    if len(payload) != manifest["payload_bytes"]:
        raise BundleError(f"payload is {len(payload)} bytes, manifest says {manifest['payload_bytes']}")
    tensors = {}
    expected_offset = 0
    for entry in manifest["tensors"]:
        off, n = entry["offset"], entry["nbytes"]
        if off != expected_offset:
            raise BundleError(f"tensor {entry['name']!r} is out of order or overlaps its predecessor")
        raw = payload[off:off + n]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise ChecksumError(f"checksum mismatch for tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype=DTYPE).astype(np.float32).reshape(entry["shape"])
        expected_offset = off + n
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise ChecksumError("payload checksum mismatch")
    meta = {k: v for k, v in manifest.items() if k not in ("tensors", "payload_bytes", "payload_sha256", "manifest_sha256")}
    return ArtifactBundle(meta, tensors)


def read_bundle(path) -> ArtifactBundle:
    return bundle_from_bytes(Path(path).read_bytes())


def _arrays(named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: np.asarray(v.data, dtype=np.float32) for k, v in named.items()}


def _sha(arr) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=DTYPE).tobytes()).hexdigest()


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(model: TransformerModel, path, model_id: str = "model") -> Path:
    man = {"role": "checkpoint", "model_id": model_id, "architecture": model.config.to_dict()}
    return ArtifactBundle(man, _arrays(model.named_parameters())).write(path)


def model_from_bundle_tensors(config: ModelConfig, tensors: dict) -> TransformerModel:
    shapes = block_param_shapes(config)
    shell = {k: Tensor(np.array(tensors[k])) for k in ("wte", "wpe", "ln_f.gain", "ln_f.bias", "lm_head.weight")
             if k in tensors}
    blocks = []
    for i in range(config.n_layers):
        blocks.append(TransformerBlock(config, {k: Tensor(np.array(tensors[f"blocks.{i}.{k}"])) for k in shapes}))
    return TransformerModel(config, shell, blocks)


def load_checkpoint(path) -> TransformerModel:
    b = read_bundle(path)
    if b.role != "checkpoint":
        raise BundleError(f"expected a checkpoint bundle, got role {b.role!r}")
    return model_from_bundle_tensors(ModelConfig(**b.manifest["architecture"]), b.tensors)


# ------------------------------------------------------------------ owner side


def save_emulator(emulator: Emulator, sm: SplitModel, path) -> Path:
    """Owner-internal emulator file (never sent as is; ``package_owner`` does that)."""
    man = {"role": "emulator", "emulator_spec": emulator.spec.to_dict(),
           "source_indices": list(emulator.source_indices), "architecture": sm.model.config.to_dict(),
           "provenance": owner_provenance(sm, emulator).to_dict()}
    return ArtifactBundle(man, _arrays(emulator.named_parameters())).write(path)


def load_emulator(path) -> tuple[Emulator, Provenance]:
    b = read_bundle(path)
    if b.role != "emulator":
        raise BundleError(f"expected an emulator bundle, got role {b.role!r}")
    cfg = ModelConfig(**b.manifest["architecture"])
    shapes = block_param_shapes(cfg)
    k = len({name.split(".")[1] for name in b.tensors})
    blocks = [TransformerBlock(cfg, {n: Tensor(np.array(b.tensors[f"emulator.{j}.{n}"])) for n in shapes})
              for j in range(k)]
    spec = EmulatorSpec.from_dict(b.manifest["emulator_spec"])
    return Emulator(spec, blocks, tuple(b.manifest["source_indices"])), Provenance.from_dict(b.manifest["provenance"])



def owner_provenance(sm: SplitModel, emulator: Emulator) -> Provenance:
    return Provenance(sm.provenance.base_hash, sm.provenance.plan_hash, emulator.spec.digest())


def _privacy_guard(sm: SplitModel, emulator: Emulator, tensors: dict[str, np.ndarray]) -> None:
    middle_prefixes = tuple(f"blocks.{i}." for i in sm.plan.middle_indices(sm.model.config.n_layers))
    leaked = [k for k in tensors if k.startswith(middle_prefixes)]
    if leaked:
        raise PackagingError(f"owner package would include middle-layer tensors: {leaked[:3]}")
    middle_arrays = [t.data for b in sm.middle for t in b.named_parameters().values()]
    for blk in emulator.blocks:
        for t in blk.named_parameters().values():
            if any(np.shares_memory(t.data, m) for m in middle_arrays):
                raise PackagingError("emulator shares memory with the frozen middle")
    # Weight matrices the emulator must not reproduce verbatim.
    if emulator.spec.method in ("layer_drop", "distilled"):
        guarded = [j for j in range(sm.m) if j not in emulator.source_indices]
    else:
        guarded = list(range(sm.m))
    forbidden = {}
    for j in guarded:
        for k, t in sm.middle[j].params.items():
            if t.data.ndim == 2:
                forbidden[_sha(t.data)] = f"blocks.{sm.plan.n_bottom + j}.{k}"
    for name, arr in tensors.items():
        h = _sha(arr)
        if h in forbidden:
            raise PackagingError(f"{name} is a verbatim copy of middle tensor {forbidden[h]}")


def package_owner(sm: SplitModel, emulator: Emulator, model_id: str = "model") -> ArtifactBundle:
    """Adapter + emulator + frozen embeddings/head. The real middle never enters the bundle."""
    tensors = {}
    for k in ("wte", "wpe", "ln_f.gain", "ln_f.bias", "lm_head.weight"):
        if k in sm.model.shell:
            tensors[k] = sm.model.shell[k].data
    adapter = sm.adapter()
    for k, t in adapter.named_parameters().items():
        if k.startswith("blocks."):
            tensors[k] = t.data
    for k, t in emulator.named_parameters().items():
        tensors[k] = t.data
    tensors = {k: np.asarray(v, dtype=np.float32) for k, v in tensors.items()}
    _privacy_guard(sm, emulator, tensors)
    man = {
        "role": "owner_package",
        "model_id": model_id,
        "architecture": sm.model.config.to_dict(),
        "split_plan": sm.plan.to_dict(),
        "emulator_spec": emulator.spec.to_dict(),
        "emulator_source_indices": list(emulator.source_indices),
        "provenance": owner_provenance(sm, emulator).to_dict(),
        "trainable_shell": sorted(adapter.shell),
    }
    return ArtifactBundle(man, tensors)


@dataclass
class OwnerPackage:
    """What the data owner reconstructs from an owner bundle."""

    split: SplitModel
    emulator: Emulator
    provenance: Provenance
    model_id: str


def unpack_owner(bundle: ArtifactBundle) -> OwnerPackage:
    if bundle.role != "owner_package":
        raise BundleError(f"expected an owner_package bundle, got role {bundle.role!r}")
    man = bundle.manifest
    full_cfg = ModelConfig(**man["architecture"])
    plan = SplitPlan(**man["split_plan"])
    spec = EmulatorSpec.from_dict(man["emulator_spec"])
    t = bundle.tensors
    shapes = block_param_shapes(full_cfg)
    n = full_cfg.n_layers

    def blk(prefix):
        return TransformerBlock(full_cfg, {k: Tensor(np.array(t[f"{prefix}.{k}"])) for k in shapes})

    a1 = [blk(f"blocks.{i}") for i in range(plan.n_bottom)]
    a2 = [blk(f"blocks.{i}") for i in range(n - plan.n_top, n)]
    k = len({name.split(".")[1] for name in t if name.startswith("emulator.")})
    emu_blocks = [blk(f"emulator.{j}") for j in range(k)]
    shell = {name: Tensor(np.array(t[name])) for name in ("wte", "wpe", "ln_f.gain", "ln_f.bias", "lm_head.weight")
             if name in t}
    user_cfg = ModelConfig(**{**full_cfg.to_dict(), "n_layers": len(a1) + k + len(a2)})
    model = TransformerModel(user_cfg, shell, a1 + emu_blocks + a2)
    prov = Provenance.from_dict(man["provenance"])
    sm = SplitModel(model, plan, prov, full_layers=n)
    for b in a1 + a2:
        for p in b.params.values():
            p.requires_grad = True
    for name in man.get("trainable_shell", []):
        shell[name].requires_grad = True
    emu = Emulator(spec, emu_blocks, tuple(man["emulator_source_indices"]))
    return OwnerPackage(sm, emu, prov, man["model_id"])


# ------------------------------------------------------------------ user side


def return_tensors(adapter: AdapterWeights) -> dict[str, np.ndarray]:
    """Tensors the user sends back: everything that trained, nothing else."""
    mode = adapter.peft_mode
    if mode == "full":
        named = adapter.named_parameters()
    elif mode in ("lora", "bottleneck"):
        named = adapter.peft_parameters()
    elif mode == "bitfit":
        named = {k: v for k, v in adapter.named_parameters().items() if k.startswith("blocks.") and is_bias_like(k)}
    else:
        raise PackagingError(f"cannot package adapter in mode {mode!r}")
    return _arrays(named)


def package_return(adapter: AdapterWeights, provenance: Provenance | None = None) -> ArtifactBundle:
    prov = provenance or adapter.provenance
    if prov is None or not prov.base_hash or not prov.plan_hash:
        raise PackagingError("tuned adapter carries no provenance")
    blocks = adapter.a1 + adapter.a2
    man = {
        "role": "adapter_return",
        "split_plan": adapter.plan.to_dict(),
        "n_layers": adapter.n_layers,
        "peft_mode": adapter.peft_mode,
        "lora_rank": _lora_rank(blocks),
        "lora_scale": blocks[0].lora_scale if blocks else 1.0,
        "bottleneck_dim": _bottleneck_dim(blocks),
        "provenance": prov.to_dict(),
    }
    return ArtifactBundle(man, return_tensors(adapter))


def _lora_rank(blocks) -> int:
    for b in blocks:
        for k, t in b.peft.items():
            if k.startswith("lora.") and k.endswith(".A"):
                return int(t.shape[1])
    return 0


def _bottleneck_dim(blocks) -> int:
    for b in blocks:
        for k, t in b.peft.items():
            if k.endswith("down.bias"):
                return int(t.shape[0])
    return 0


def load_return(adapter: AdapterWeights, bundle: ArtifactBundle) -> AdapterWeights:
    """Apply a return bundle to a fresh (untuned, full-mode) adapter in place."""
    man = bundle.manifest
    mode = man["peft_mode"]
    if mode == "lora":
        attach_lora(adapter, LoraSpec(rank=man["lora_rank"], alpha=man["lora_scale"] * man["lora_rank"]))
    elif mode == "bottleneck":
        attach_bottleneck(adapter, BottleneckSpec(dim=man["bottleneck_dim"]))
    elif mode == "bitfit":
        attach_bitfit(adapter)
    named = adapter.named_parameters()
    unknown = sorted(set(bundle.tensors) - set(named))
    if unknown:
        raise PackagingError(f"return bundle has tensors the adapter does not: {unknown[:3]}")
    for name, arr in bundle.tensors.items():
        tgt = named[name]
        if tuple(arr.shape) != tgt.shape:
            raise PackagingError(f"shape mismatch for {name}: {arr.shape} vs {tgt.shape}")
        tgt.data = np.array(arr, dtype=tgt.dtype)
    adapter.provenance = Provenance.from_dict(man["provenance"])
    return adapter


def adapter_from_return(model: TransformerModel, bundle: ArtifactBundle) -> AdapterWeights:
    """Rebuild the tuned adapter on the owner's side from the base model plus returned tensors."""
    plan = SplitPlan(**bundle.manifest["split_plan"])
    return load_return(split(model, plan).adapter().clone(), bundle)


def verify_and_plug(model: TransformerModel, bundle: ArtifactBundle, expected: Provenance | None = None) -> TransformerModel:
    """Check the return bundle belongs to ``model`` (and to the package ``expected`` describes), then plug it in."""
    if bundle.role != "adapter_return":
        raise BundleError(f"expected an adapter_return bundle, got role {bundle.role!r}")
    got = Provenance.from_dict(bundle.manifest["provenance"])
    plan = SplitPlan(**bundle.manifest["split_plan"])
    actual = Provenance(model.weight_hash(), plan.digest(), got.emulator_hash)
    if expected is not None:
        actual = Provenance(actual.base_hash, expected.plan_hash, expected.emulator_hash)
    diff = got.differences(actual)
    if diff:
        raise ProvenanceError(diff)
    return plug_in(model, adapter_from_return(model, bundle))
