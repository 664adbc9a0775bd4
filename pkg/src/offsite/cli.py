"""Command-line frontend: ``offsite owner|user|experiment|config <command>``.

Every command prints one machine-readable status line to stdout::

    STATUS {"command":"owner split","ok":true,...}

Exit codes: 0 success, 2 usage, 3 validation, 4 numeric failure. Outputs
land under the work directory (``--workdir``, else ``$OFFSITE_WORKDIR``,
else the current directory) and re-running a command with the same inputs
rewrites byte-identical files.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import accounting
from . import config as config_mod
from .artifact import (
    MAGIC,
    BundleError,
    PackagingError,
    ProvenanceError,
    load_checkpoint,
    load_emulator,
    load_return,
    package_owner,
    package_return,
    read_bundle,
    save_checkpoint,
    save_emulator,
    unpack_owner,
    verify_and_plug,
)
from .corpus import CorpusError, resolve_corpus
from .distill import distill_emulator, write_loss_curve
from .evaluation import (
    EvaluationError,
    default_grid,
    perplexity,
    pretrain_base,
    records_csv,
    run_ablation,
    run_four_metrics,
    summarize,
    summary_csv,
)
from .model import get_preset
from .surgery import (
    EmulatorSpec,
    EmulatorSpecError,
    IntegrationError,
    PlanError,
    Provenance,
    SplitPlan,
    build_emulator,
    canonical_json,
    split,
)
from .tensor import GradError, OptimizerError, ShapeError
from .tuning import PeftError, TrainConfig, TrainingError, composed_model, finetune

log = logging.getLogger("offsite")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4


class StageError(RuntimeError):
    """A prerequisite artifact is missing or stale."""


class RefusalError(RuntimeError):
    """A user-role command was handed something other than a bundle."""


VALIDATION_ERRORS = (config_mod.ConfigError, BundleError, PackagingError, ProvenanceError, IntegrationError,
                     PlanError, EmulatorSpecError, CorpusError, EvaluationError, PeftError, StageError,
                     RefusalError, ShapeError, FileNotFoundError)
NUMERIC_ERRORS = (TrainingError, OptimizerError, GradError, FloatingPointError)


# ------------------------------------------------------------------ helpers


def workdir(args) -> Path:
    root = args.workdir or os.environ.get("OFFSITE_WORKDIR") or "."
    return Path(root)


def status(command: str, **info) -> dict:
    rec = {"command": command, "ok": True, **info}
    print("STATUS " + canonical_json(rec), flush=True)
    return rec


def write_text(path: Path, text: str) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return str(path)


def _paths(wd: Path) -> dict[str, Path]:
    o, u, r = wd / "owner", wd / "user", wd / "reports"
    return {
        "base": o / "base.otb",
        "split": o / "split.json",
        "emulator": o / "emulator.otb",
        "distilled": o / "emulator_distilled.otb",
        "distill_log": r / "distill_loss.csv",
        "package": o / "package.otb",
        "plugged": o / "plugged.otb",
        "tuned": u / "tuned.otb",
        "train_log": r / "train_log.csv",
        "lr_grid": r / "lr_grid.csv",
        "return": u / "return.otb",
        "reports": r,
    }


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"{path} not found; run `offsite {stage}` first")
    return path


def _run_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    over = {}
    for name in ("preset", "plan", "seed", "steps", "lr", "batch_size", "seq_len", "peft", "eval_tokens",
                 "pretrain_steps", "distill_steps", "emulator_k", "sparsity", "bits"):
        val = getattr(args, name, None)
        if val is not None:
            over[name] = val
    if getattr(args, "method", None):
        over["emulator_method"] = args.method.replace("-", "_")
    if getattr(args, "lr_grid", None):
        over["lr_grid"] = config_mod.parse_lr_grid(args.lr_grid)
    if getattr(args, "seeds", None):
        over["seeds"] = [int(s) for s in args.seeds.split(",")]
    if getattr(args, "corpus", None):
        over["downstream_corpus"] = args.corpus
    return cfg.override(**over)


def _split_record(wd: Path) -> dict:
    return json.loads(_require(_paths(wd)["split"], "owner split").read_text())


def _owner_split(wd: Path):
    rec = _split_record(wd)
    base = load_checkpoint(_require(_paths(wd)["base"], "owner init"))
    if base.weight_hash() != rec["base_hash"]:
        raise StageError("owner/split.json was made from a different base; re-run `offsite owner split`")
    return base, split(base, SplitPlan(**rec["plan"]))


def _check_user_path(path: str, allowed=("owner_package", "adapter_return")) -> Path:
    """User commands take bundle paths only; full-model checkpoints are refused outright."""
    p = Path(path)
    if not p.exists():
        raise StageError(f"{p} not found")
    with open(p, "rb") as fh:
        head = fh.read(4)
    if head != MAGIC:
        raise RefusalError(f"{p} is not a bundle; user commands accept bundle paths only")
    role = read_bundle(p).role
    if role not in allowed:
        raise RefusalError(f"{p} is a {role!r} bundle; user commands refuse full-model and owner-internal files")
    return p


def _check_user_corpus(spec: str) -> str:
    if not spec.startswith("bundled:"):
        p = Path(spec)
        if p.exists():
            with open(p, "rb") as fh:
                if fh.read(4) == MAGIC:
                    raise RefusalError(f"{p} is a bundle, not a text corpus")
    return spec


# ------------------------------------------------------------------ owner


def owner_init(args) -> dict:
    cfg = _run_config(args)
    p = _paths(workdir(args))
    exp = cfg.to_experiment()
    corpus = resolve_corpus(cfg.pretrain_corpus, cfg.train_fraction)
    model = pretrain_base(exp.model, cfg.seed, corpus, exp.pretrain, use_cache=not args.no_cache)
    save_checkpoint(model, p["base"], model_id=cfg.model_id)
    return status("owner init", checkpoint=str(p["base"]), base_hash=model.weight_hash(),
                  n_layers=model.config.n_layers, pretrain_steps=cfg.pretrain_steps, seed=cfg.seed)


def owner_split(args) -> dict:
    cfg = _run_config(args)
    p = _paths(workdir(args))
    base = load_checkpoint(_require(p["base"], "owner init"))
    plan = SplitPlan.parse(cfg.plan)
    sm = split(base, plan)
    rec = {"plan": plan.to_dict(), "m": sm.m, "n_layers": base.config.n_layers,
           "adapter_indices": plan.adapter_indices(base.config.n_layers),
           "middle_indices": plan.middle_indices(base.config.n_layers),
           "base_hash": sm.provenance.base_hash, "plan_hash": sm.provenance.plan_hash}
    write_text(p["split"], canonical_json(rec) + "\n")
    return status("owner split", split=str(p["split"]), m=sm.m, plan=cfg.plan)


def owner_build_emulator(args) -> dict:
    cfg = _run_config(args)
    p = _paths(workdir(args))
    _, sm = _owner_split(workdir(args))
    spec = replace(cfg, distill_steps=0).to_experiment().emulator_spec(sm.m)
    emu = build_emulator(sm, spec)
    save_emulator(emu, sm, p["emulator"])
    if p["distilled"].exists():
        p["distilled"].unlink()  # stale once the raw emulator changes
    info = {"method": spec.method, "emulator": str(p["emulator"]), "blocks": len(emu.blocks)}
    if spec.plan is not None:
        info["retained_indices"] = list(spec.plan.retained_indices)
    return status("owner build-emulator", **info)


def owner_distill(args) -> dict:
    cfg = _run_config(args)
    p = _paths(workdir(args))
    _, sm = _owner_split(workdir(args))
    emu, prov = load_emulator(_require(p["emulator"], "owner build-emulator"))
    if prov.base_hash != sm.provenance.base_hash or prov.plan_hash != sm.provenance.plan_hash:
        raise StageError("emulator does not match the current split; re-run `offsite owner build-emulator`")
    steps = args.distill_steps if args.distill_steps is not None else (cfg.distill_steps or 200)
    corpus = resolve_corpus(cfg.pretrain_corpus, cfg.train_fraction)
    dcfg = TrainConfig(lr=cfg.distill_lr, steps=steps, warmup_steps=min(10, steps), seq_len=cfg.seq_len,
                       batch_size=cfg.batch_size, seed=cfg.seed, weight_decay=0.0)
    student, rows = distill_emulator(sm, emu, corpus.train, dcfg)
    save_emulator(student, sm, p["distilled"])
    p["distill_log"].parent.mkdir(parents=True, exist_ok=True)
    write_loss_curve(rows, p["distill_log"])
    first = rows[0]["loss"] if rows else None
    last = rows[-1]["loss"] if rows else None
    return status("owner distill", emulator=str(p["distilled"]), steps=steps, loss_first=first, loss_last=last,
                  log=str(p["distill_log"]))


def owner_package(args) -> dict:
    cfg = _run_config(args)
    p = _paths(workdir(args))
    _, sm = _owner_split(workdir(args))
    which = args.emulator
    if which == "auto":
        which = "distilled" if p["distilled"].exists() else "raw"
    path = p["distilled"] if which == "distilled" else p["emulator"]
    stage = "owner distill" if which == "distilled" else "owner build-emulator"
    emu, prov = load_emulator(_require(path, stage))
    if prov.base_hash != sm.provenance.base_hash or prov.plan_hash != sm.provenance.plan_hash:
        raise StageError(f"{path} does not match the current split; re-run `offsite {stage}`")
    bundle = package_owner(sm, emu, model_id=cfg.model_id)
    bundle.write(p["package"])
    return status("owner package", package=str(p["package"]), emulator=which, tensors=len(bundle.tensors),
                  bytes=p["package"].stat().st_size)


def owner_plug_in(args) -> dict:
    p = _paths(workdir(args))
    base = load_checkpoint(_require(p["base"], "owner init"))
    ret_path = Path(args.return_bundle) if args.return_bundle else _require(p["return"], "user package-return")
    bundle = read_bundle(ret_path)
    expected = None
    if p["package"].exists():
        expected = Provenance.from_dict(read_bundle(p["package"]).manifest["provenance"])
    plugged = verify_and_plug(base, bundle, expected)
    save_checkpoint(plugged, p["plugged"], model_id=base_id(p["base"]) + "+adapter")
    same = plugged.weight_hash() == base.weight_hash()
    return status("owner plug-in", checkpoint=str(p["plugged"]), identical_to_base=same,
                  weight_hash=plugged.weight_hash())


def base_id(path: Path) -> str:
    return read_bundle(path).manifest.get("model_id", "model")


def owner_eval(args) -> dict:
    cfg = _run_config(args)
    p = _paths(workdir(args))
    targets = {"base": p["base"], "plugged": p["plugged"]}
    names = args.model or ["base", "plugged"]
    corpus = resolve_corpus(cfg.downstream_corpus, cfg.train_fraction)
    val = corpus.validation[: cfg.eval_tokens + 1]
    rows = ["model,perplexity,tokens"]
    out = {}
    for name in names:
        path = targets.get(name, Path(name))
        if name in targets and not path.exists():
            if args.model:
                _require(path, "owner init" if name == "base" else "owner plug-in")
            continue
        model = load_checkpoint(_require(path, "owner init"))
        ppl = perplexity(model, val, cfg.seq_len)
        out[name] = ppl
        rows.append(f"{name},{ppl!r},{len(val) - 1}")
    report = write_text(p["reports"] / "owner_eval.csv", "\n".join(rows) + "\n")
    return status("owner eval", report=report, perplexity=out)


# ------------------------------------------------------------------ user


def _user_package(args):
    return unpack_owner(read_bundle(_check_user_path(args.package, ("owner_package",))))


def user_finetune(args) -> dict:
    cfg = _run_config(args)
    p = _paths(workdir(args))
    pkg = _user_package(args)
    corpus = resolve_corpus(_check_user_corpus(cfg.downstream_corpus), cfg.train_fraction)
    val = corpus.validation[: cfg.eval_tokens + 1]
    ft = cfg.finetune_config()
    res = finetune(pkg.split, pkg.emulator.blocks, corpus.train, val, ft, cfg.lr_grid or None, peft=cfg.peft)
    package_return(res.adapter, pkg.provenance).write(p["tuned"])
    lines = ["step,epoch,split,loss,perplexity,lr,lr_run"]
    for r in res.log:
        lines.append(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k])
                              for k in ("step", "epoch", "split", "loss", "perplexity", "lr", "lr_run")))
    write_text(p["train_log"], "\n".join(lines) + "\n")
    grid = ["lr,emulator_val_loss,selected"] + [f"{lr!r},{v!r},{int(lr == res.lr)}" for lr, v in res.grid.items()]
    write_text(p["lr_grid"], "\n".join(grid) + "\n")
    return status("user finetune", adapter=str(p["tuned"]), runs=len(res.grid), selected_lr=res.lr,
                  emulator_val_loss=res.val_loss, peft=cfg.peft, log=str(p["train_log"]))


def _user_adapter(args, pkg):
    adapter = pkg.split.adapter().clone()
    if args.adapter:
        bundle = read_bundle(_check_user_path(args.adapter, ("adapter_return",)))
        diff = Provenance.from_dict(bundle.manifest["provenance"]).differences(pkg.provenance)
        if diff:
            raise ProvenanceError(diff)
        load_return(adapter, bundle)
    return adapter


def user_eval(args) -> dict:
    cfg = _run_config(args)
    p = _paths(workdir(args))
    pkg = _user_package(args)
    adapter = _user_adapter(args, pkg)
    corpus = resolve_corpus(_check_user_corpus(cfg.downstream_corpus), cfg.train_fraction)
    val = corpus.validation[: cfg.eval_tokens + 1]
    ppl = perplexity(composed_model(pkg.split, adapter, pkg.emulator.blocks), val, cfg.seq_len)
    label = "tuned" if args.adapter else "zero_shot"
    report = write_text(p["reports"] / "user_eval.csv",
                        f"adapter,emulator_perplexity,tokens\n{label},{ppl!r},{len(val) - 1}\n")
    return status("user eval", report=report, adapter=label, emulator_perplexity=ppl)


def user_package_return(args) -> dict:
    p = _paths(workdir(args))
    pkg = _user_package(args)
    if not args.adapter:
        args.adapter = str(_require(p["tuned"], "user finetune"))
    adapter = _user_adapter(args, pkg)
    bundle = package_return(adapter, pkg.provenance)
    bundle.write(p["return"])
    return status("user package-return", bundle=str(p["return"]), tensors=len(bundle.tensors),
                  peft=adapter.peft_mode, bytes=p["return"].stat().st_size)


# ------------------------------------------------------------------ experiments


def _check_records(records) -> None:
    failed = [r for r in records if r.failure]
    if failed:
        numeric = any("Training" in r.failure or "Optimizer" in r.failure for r in failed)
        raise (TrainingError if numeric else EvaluationError)("; ".join(r.failure for r in failed))


def experiment_four_metrics(args) -> dict:
    cfg = _run_config(args)
    p = _paths(workdir(args))
    records = run_four_metrics(cfg.to_experiment(), cfg.seeds, use_cache=not args.no_cache)
    rep = write_text(p["reports"] / "four_metrics.csv", records_csv(records))
    summ = write_text(p["reports"] / "four_metrics_summary.csv", summary_csv(summarize(records)))
    _check_records(records)
    orderings = {str(r.seed): r.orderings() for r in records}
    return status("experiment four-metrics", report=rep, summary=summ, orderings=orderings,
                  all_hold=all(all(o.values()) for o in orderings.values()))


def experiment_ablation(args) -> dict:
    cfg = _run_config(args)
    p = _paths(workdir(args))
    axis = args.axis.replace("-", "_")
    grid = default_grid(axis, cfg.to_experiment(), seeds=tuple(cfg.seeds),
                        distill_steps=cfg.distill_steps or 200)
    run_ablation(grid, use_cache=not args.no_cache)
    rep = write_text(p["reports"] / f"ablation_{axis}.csv", records_csv(grid.results))
    rows = summarize(grid.results)
    summ = write_text(p["reports"] / f"ablation_{axis}_summary.csv", summary_csv(rows))
    _check_records(grid.results)
    return status("experiment ablation", axis=axis, report=rep, summary=summ,
                  plug_in_ppl_mean={r["point"]: r.get("plug_in_ppl_mean") for r in rows})


def experiment_accounting(args) -> dict:
    p = _paths(workdir(args))
    preset = args.preset or "gpt2-xl"
    cfg = get_preset(preset)
    plan = SplitPlan.parse(args.plan or "2+2")
    lines = ["preset,plan,mode,trainable_params,total_params,transmitted_block_params,full_block_params"]
    counts = {}
    for mode in accounting.MODES:
        rep = accounting.count_params(cfg, plan, mode, lora_rank=args.lora_rank, bottleneck_dim=args.bottleneck_dim)
        counts[mode] = rep.trainable_params
        lines.append(f"{preset},{plan.n_bottom}+{plan.n_top},{mode},{rep.trainable_params},{rep.total_params},"
                     f"{rep.transmitted_block_params},{rep.full_block_params}")
    info = {"trainable_params": counts}
    if args.emulator_k:
        m = cfg.n_layers - plan.n_bottom - plan.n_top
        fp = accounting.transmitted_footprint(plan, EmulatorSpec.layer_drop(m, args.emulator_k), cfg)
        info["block_ratio"] = fp.block_ratio
        info["transmitted_bytes"] = fp.transmitted_bytes
    report = write_text(p["reports"] / f"accounting_{preset}.csv", "\n".join(lines) + "\n")
    return status("experiment accounting", report=report, preset=preset, **info)


def config_show(args) -> dict:
    """Write the effective (fully defaulted, flag-overridden) config in canonical form."""
    cfg = _run_config(args)
    out = Path(args.output) if args.output else workdir(args) / "config.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg.dump(out)
    return status("config show", config=str(out), fingerprint=cfg.to_experiment().fingerprint())


def config_fields(args) -> dict:
    defaults = config_mod.RunConfig().to_dict()
    for name, doc in config_mod.FIELD_DOCS.items():
        print(f"{name} = {json.dumps(defaults[name])}  # {doc}")
    return status("config fields", n_fields=len(config_mod.FIELD_DOCS))


# ------------------------------------------------------------------ parser


def _common(sp: argparse.ArgumentParser, *, model=True, train=False, corpus=False) -> None:
    if model:
        sp.add_argument("--preset", help="model preset")
        sp.add_argument("--plan", help="adapter split, e.g. 2+2")
        sp.add_argument("--seed", type=int)
    if train:
        sp.add_argument("--steps", type=int, help="fine-tuning steps")
        sp.add_argument("--lr", type=float)
        sp.add_argument("--lr-grid", dest="lr_grid", help="'default' or comma-separated rates")
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--seq-len", dest="seq_len", type=int)
        sp.add_argument("--peft", choices=["full", "lora", "bottleneck", "bitfit"])
    if corpus:
        sp.add_argument("--corpus", help="downstream corpus: 'bundled:downstream' or a text file")
        sp.add_argument("--eval-tokens", dest="eval_tokens", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="offsite", description="Offsite adapter tuning: owner, user and experiments.")
    ap.add_argument("--workdir", help="output directory (default: $OFFSITE_WORKDIR or .)")
    ap.add_argument("--config", help="JSON run configuration; flags override it")
    ap.add_argument("-v", "--verbose", action="store_true")
    roles = ap.add_subparsers(dest="role", required=True)

    owner = roles.add_parser("owner", help="model-owner commands").add_subparsers(dest="cmd", required=True)
    sp = owner.add_parser("init", help="create (and pretrain) the base model checkpoint")
    _common(sp)
    sp.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    sp.add_argument("--no-cache", action="store_true", help="always pretrain from scratch")
    sp.set_defaults(fn=owner_init)
    sp = owner.add_parser("split", help="choose adapter and middle layers")
    _common(sp)
    sp.set_defaults(fn=owner_split)
    sp = owner.add_parser("build-emulator", help="compress the middle into an emulator")
    _common(sp)
    sp.add_argument("--method", choices=["layer-drop", "magnitude-prune", "quantize"])
    sp.add_argument("--k", dest="emulator_k", type=int, help="layers kept by layer drop")
    sp.add_argument("--sparsity", type=float)
    sp.add_argument("--bits", type=int)
    sp.set_defaults(fn=owner_build_emulator)
    sp = owner.add_parser("distill", help="distill the layer-drop emulator toward the middle")
    _common(sp)
    sp.add_argument("--steps", dest="distill_steps", type=int, help="distillation steps (default 200)")
    sp.set_defaults(fn=owner_distill)
    sp = owner.add_parser("package", help="write the owner package (adapter + emulator)")
    _common(sp)
    sp.add_argument("--emulator", choices=["auto", "raw", "distilled"], default="auto")
    sp.set_defaults(fn=owner_package)
    sp = owner.add_parser("plug-in", help="verify a return bundle and plug it into the base model")
    sp.add_argument("--return", dest="return_bundle", help="return bundle (default: <workdir>/user/return.otb)")
    sp.set_defaults(fn=owner_plug_in)
    sp = owner.add_parser("eval", help="downstream perplexity of owner-side checkpoints")
    _common(sp, model=False, corpus=True)
    sp.add_argument("--model", action="append", help="'base', 'plugged' or a checkpoint path (repeatable)")
    sp.set_defaults(fn=owner_eval)

    user = roles.add_parser("user", help="data-owner commands (bundles only)").add_subparsers(dest="cmd", required=True)
    sp = user.add_parser("finetune", help="tune the adapter around the emulator")
    sp.add_argument("--package", required=True, help="owner package bundle")
    _common(sp, model=False, train=True, corpus=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=user_finetune)
    sp = user.add_parser("eval", help="emulator perplexity with the received or tuned adapter")
    sp.add_argument("--package", required=True)
    sp.add_argument("--adapter", help="tuned adapter bundle; omit for the untuned adapter")
    sp.add_argument("--seq-len", dest="seq_len", type=int)
    _common(sp, model=False, corpus=True)
    sp.set_defaults(fn=user_eval)
    sp = user.add_parser("package-return", help="bundle the tuned adapter for the owner")
    sp.add_argument("--package", required=True)
    sp.add_argument("--adapter", help="tuned adapter bundle (default: <workdir>/user/tuned.otb)")
    sp.set_defaults(fn=user_package_return)

    exp = roles.add_parser("experiment", help="experiment drivers").add_subparsers(dest="cmd", required=True)
    sp = exp.add_parser("four-metrics", help="zero-shot / emulator / plug-in / full fine-tuning perplexity")
    _common(sp, train=True, corpus=True)
    sp.add_argument("--seeds", help="comma-separated seeds")
    sp.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    sp.add_argument("--distill-steps", dest="distill_steps", type=int)
    sp.add_argument("--no-cache", action="store_true")
    sp.set_defaults(fn=experiment_four_metrics)
    sp = exp.add_parser("ablation", help="adapter-position, compression-method or distillation sweep")
    sp.add_argument("--axis", required=True, choices=["adapter-position", "compression-method", "distillation"])
    _common(sp, train=True, corpus=True)
    sp.add_argument("--seeds")
    sp.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    sp.add_argument("--distill-steps", dest="distill_steps", type=int)
    sp.add_argument("--no-cache", action="store_true")
    sp.set_defaults(fn=experiment_ablation)
    sp = exp.add_parser("accounting", help="trainable-parameter counts per tuning mode")
    sp.add_argument("--preset")
    sp.add_argument("--plan")
    sp.add_argument("--lora-rank", dest="lora_rank", type=int, default=4)
    sp.add_argument("--bottleneck-dim", dest="bottleneck_dim", type=int, default=64)
    sp.add_argument("--emulator-k", dest="emulator_k", type=int)
    sp.set_defaults(fn=experiment_accounting)

    conf = roles.add_parser("config", help="inspect run configurations").add_subparsers(dest="cmd", required=True)
    sp = conf.add_parser("show", help="write the effective config (file + flags + defaults)")
    _common(sp, train=True, corpus=True)
    sp.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    sp.add_argument("--distill-steps", dest="distill_steps", type=int)
    sp.add_argument("--output", help="destination (default: <workdir>/config.json)")
    sp.set_defaults(fn=config_show)
    sp = conf.add_parser("fields", help="list config keys with defaults")
    sp.set_defaults(fn=config_fields)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    command = f"{args.role} {args.cmd}"
    try:
        args.fn(args)
    except NUMERIC_ERRORS as exc:
        _fail(command, exc)
        return EXIT_NUMERIC
    except VALIDATION_ERRORS as exc:
        _fail(command, exc)
        return EXIT_VALIDATION
    except ValueError as exc:
        _fail(command, exc)
        return EXIT_VALIDATION
    return EXIT_OK


def _fail(command: str, exc: Exception) -> None:
    print(f"offsite: error: {exc}", file=sys.stderr)
    print("STATUS " + canonical_json({"command": command, "ok": False, "error": type(exc).__name__,
                                       "message": str(exc)}), flush=True)


if __name__ == "__main__":
    sys.exit(main())
