"""Command-line front end: one executable, one subcommand per stage.

Heavy modules load inside the handlers so --threads can cap the BLAS
pool before numpy is imported. Exit codes: 0 success, 1 runtime failure,
2 usage or config error. Output paths resolve under $STRATAFLOW_OUT when
that is set and the path is relative.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    InputError,
    NumericError,
    ShapeError,
)

OUT_ROOT_VAR = "STRATAFLOW_OUT"

_USAGE_ERRORS = (ConfigError, ContractError, InputError, ShapeError)
_RUNTIME_ERRORS = (CheckpointError, NumericError, OSError)


def _resolve(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ROOT_VAR, "")
    return Path(root) / p if root and not p.is_absolute() else p


def _write_out(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _read_input(path) -> str:
    # a missing input file is a usage error, not a runtime one
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"no such file: {p}")
    return p.read_text()


def cmd_gen_data(args) -> int:
    from .data import DatasetSpec, export_dataset

    spec = DatasetSpec.from_text(_read_input(args.spec))
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = export_dataset(spec, out)
    print(f"wrote {n} samples ({spec.mode}/{spec.family}) to {out}")
    return 0


def cmd_train(args) -> int:
    from . import training
    from .config import RunConfig
    from .model import build_model, load_model

    cfg = RunConfig.from_text(_read_input(args.config), args.set)
    out = _resolve(cfg.out_dir)
    if args.resume:
        model = load_model(_resolve(args.resume))
        if model.config.to_text() != cfg.model.to_text():
            raise ConfigError("checkpoint model config differs from run config")
        res = training.train(model, cfg.data, cfg.train, out,
                             resume_from=_resolve(args.resume))
    else:
        model = build_model(cfg.model, seed=cfg.seed)
        res = training.train(model, cfg.data, cfg.train, out)
    if math.isnan(res.final_loss):
        # a numeric blow-up raises, so nan can only mean zero steps ran
        # this session (resume from an already-finished checkpoint)
        print(f"already trained to step {res.steps}; nothing to do")
    else:
        print(f"trained to step {res.steps}; final loss {res.final_loss:.6g}")
    print(f"checkpoint {res.checkpoint}")
    return 0


def cmd_sample(args) -> int:
    import numpy as np

    from . import data, flow
    from .model import load_model
    from .rng import named_rng

    if args.n < 1:
        raise ContractError(f"need at least one sample, got {args.n}")
    model = load_model(_resolve(args.ckpt))
    sampler = flow.SamplerConfig(num_steps=args.steps,
                                 guidance_scale=args.cfg_scale)
    sampler.validate()
    cfgm = model.config
    mode = "points2d" if cfgm.num_tokens == 1 else "grid8"
    family = args.family or ("gauss8" if mode == "points2d" else "blobs")
    spec = data.DatasetSpec(mode=mode, family=family, classes=cfgm.num_classes,
                            n_train=args.n, n_eval=0, seed=args.seed)
    if spec.num_tokens != cfgm.num_tokens or spec.latent_dim != cfgm.latent_dim:
        raise ConfigError(f"family {family} does not match the model geometry")
    if args.cls is None:
        labels = (np.arange(args.n) % cfgm.num_classes).astype(np.int64)
    else:
        if not 0 <= args.cls < cfgm.num_classes:
            raise InputError(
                f"class {args.cls} outside 0..{cfgm.num_classes - 1}")
        labels = np.full(args.n, args.cls, dtype=np.int64)
    x = flow.sample(model, labels, sampler, named_rng(args.seed, "sample.noise"))
    x = data.denormalize(x, spec)
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.write_export(spec, x, labels, out)
    summary = (
        f"checkpoint = {args.ckpt}\n"
        f"n_samples = {args.n}\n"
        f"class = {'all' if args.cls is None else args.cls}\n"
        f"num_steps = {sampler.num_steps}\n"
        f"guidance_scale = {sampler.guidance_scale:g}\n"
        f"seed = {args.seed}\n"
        f"family = {family}\n"
    )
    _write_out(Path(str(out) + ".txt"), summary)
    print(summary, end="")
    return 0


def cmd_eval(args) -> int:
    from . import data, evaluate, flow
    from .model import load_model

    if (args.ckpt is None) == (args.samples is None):
        raise ConfigError("provide exactly one of --ckpt or --samples")
    dspec, dx, dlabels = data.read_export(_resolve(args.data))
    if args.samples is not None:
        sspec, sx, slabels = data.read_export(_resolve(args.samples))
        if sspec.mode != dspec.mode:
            raise ConfigError(
                f"sample mode {sspec.mode} does not match data mode {dspec.mode}")
        rep = evaluate.evaluate_sets(sx, slabels, dx, dlabels,
                                     classes=dspec.classes,
                                     n_proj=args.n_proj, seed=args.seed)
    else:
        model = load_model(_resolve(args.ckpt))
        if model.config.num_classes != dspec.classes:
            raise ConfigError(
                f"model has {model.config.num_classes} classes, "
                f"data has {dspec.classes}")
        sampler = flow.SamplerConfig(num_steps=args.steps,
                                     guidance_scale=args.cfg_scale)
        rep = evaluate.evaluate_model(model, dspec, sampler, args.n,
                                      seed=args.seed, n_proj=args.n_proj)
    print(rep.to_text(), end="")
    return 0


def cmd_analyze_attn(args) -> int:
    from . import evaluate, flow
    from .model import load_model

    model = load_model(_resolve(args.ckpt))
    sampler = flow.SamplerConfig(num_steps=args.steps,
                                 guidance_scale=args.cfg_scale)
    csv = evaluate.analyze_similarity(model, model.schedule, sampler, args.n,
                                      seed=args.seed)
    out = _resolve(args.out)
    _write_out(out, csv)
    print(f"wrote {len(csv.splitlines()) - 1} rows to {out}")
    return 0


def cmd_analyze_gates(args) -> int:
    from . import evaluate
    from .model import load_model

    model = load_model(_resolve(args.ckpt))
    if args.stride < 1:
        raise ContractError(f"stride must be positive, got {args.stride}")
    csv = evaluate.analyze_gates(model, stride=args.stride)
    out = _resolve(args.out)
    _write_out(out, csv)
    print(f"wrote {len(csv.splitlines()) - 1} rows to {out}")
    return 0


def cmd_bench(args) -> int:
    from dataclasses import replace

    from . import evaluate, flow
    from .model import build_model, load_model

    expert = load_model(_resolve(args.ckpt))
    vanilla = build_model(replace(expert.config, num_groups=1), seed=0)
    sampler = flow.SamplerConfig(num_steps=args.steps,
                                 guidance_scale=args.cfg_scale)
    rep = evaluate.bench(expert, vanilla, sampler, args.n, seed=args.seed)
    print(rep.to_text(), end="")
    return 0


def cmd_inspect_ckpt(args) -> int:
    from .model import load_model

    model = load_model(_resolve(args.ckpt))
    sched = model.schedule
    per_group = {}
    for name, t in model.named_parameters().items():
        head, _, rest = name.partition(".")
        if head == "groups":
            k = int(rest.partition(".")[0])
            per_group[k] = per_group.get(k, 0) + t.size
    shared = sum(t.size for n, t in model.named_parameters().items()
                 if n.startswith("time."))
    for k, layers in enumerate(sched.layer_map):
        for i in layers:
            for n, t in model.named_parameters().items():
                if n.startswith(f"layers.{i}."):
                    per_group[k] = per_group.get(k, 0) + t.size
    activated = shared + max(per_group.values()) if per_group else shared
    print("config:")
    print(model.config.to_text(), end="")
    print("schedule:")
    print(sched.to_text(), end="")
    print(f"activated_layers_per_step = {sched.group_size}")
    print(f"parameters_total = {model.parameter_count()}")
    trainable = sum(t.size for t in model.trainable_parameters().values())
    print(f"parameters_trainable = {trainable}")
    print(f"parameters_activated_per_step = {activated}")
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="strataflow")
    p.add_argument("--threads", type=int, default=0,
                   help="cap BLAS worker threads (default: library choice)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a dataset export")
    g.add_argument("--spec", required=True, help="dataset spec text file")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", required=True, help="run config text file")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config line (repeatable; flags win)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--class", dest="cls", type=int, default=None,
                   help="condition on one class (default: cycle through all)")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--steps", type=int, default=40)
    s.add_argument("--cfg-scale", type=float, default=5.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--family", default=None,
                   help="dataset family for units and file header")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score samples against real data")
    e.add_argument("--ckpt", help="sample from this checkpoint and score")
    e.add_argument("--samples", help="score an existing sample export")
    e.add_argument("--data", required=True, help="real data export")
    e.add_argument("--n", type=int, default=512)
    e.add_argument("--steps", type=int, default=40)
    e.add_argument("--cfg-scale", type=float, default=5.0)
    e.add_argument("--n-proj", type=int, default=128)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    aa = sub.add_parser("analyze-attn",
                        help="adjacent-layer attention similarity CSV")
    aa.add_argument("--ckpt", required=True)
    aa.add_argument("--out", required=True)
    aa.add_argument("--n", type=int, default=8)
    aa.add_argument("--steps", type=int, default=40)
    aa.add_argument("--cfg-scale", type=float, default=5.0)
    aa.add_argument("--seed", type=int, default=0)
    aa.set_defaults(func=cmd_analyze_attn)

    ag = sub.add_parser("analyze-gates", help="residual gate trace CSV")
    ag.add_argument("--ckpt", required=True)
    ag.add_argument("--out", required=True)
    ag.add_argument("--stride", type=int, default=10)
    ag.set_defaults(func=cmd_analyze_gates)

    b = sub.add_parser("bench",
                       help="expert vs full-depth sampling wall clock")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--n", type=int, default=5)
    b.add_argument("--steps", type=int, default=40)
    b.add_argument("--cfg-scale", type=float, default=5.0)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("inspect-ckpt", help="print checkpoint structure")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=cmd_inspect_ckpt)
    return p


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.threads:
        # effective only before numpy first loads in this process
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except _USAGE_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
