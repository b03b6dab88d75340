"""Command line entry point: ``emuformer <subcommand> [options]``.

Outputs land under ``$EMUFORMER_OUT`` (default ``./runs``) unless ``--out``
is an absolute path.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .config import Config, ConfigError, dump_config, load_config
from .data import DatasetError, load_dataset, make_synthetic_dataset, write_dataset
from .distill import train_student
from .metrics import MetricsReport
from .model import MCDropout, load_checkpoint
from .plots import collect_panels, emit_plots
from .train import benchmark, evaluate, train, train_ensemble
from .uq import make_predictor

log = logging.getLogger("emuformer")

OUT_ENV = "EMUFORMER_OUT"
VAL_SEED_OFFSET = 10_000


def out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def resolve_out(name) -> Path:
    p = Path(name)
    return p if p.is_absolute() else out_root() / p


def build_config(args) -> Config:
    overrides = list(args.set or [])
    if getattr(args, "uq", None):
        overrides.append(f"uq.method={args.uq}")
    if getattr(args, "samples", None) is not None:
        overrides.append(f"uq.samples={args.samples}")
    if getattr(args, "members", None) is not None:
        overrides.append(f"uq.members={args.members}")
    if getattr(args, "dropout", None) is not None:
        overrides.append(f"uq.dropout={args.dropout}")
    if getattr(args, "data", None):
        overrides.append(f"data.root={args.data}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    cfg = load_config(args.config, overrides)
    if cfg.uq.method == "dse":
        cfg = replace(cfg, model=replace(cfg.model, num_heads=cfg.uq.members))
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    return cfg


def get_dataset(cfg: Config, split: str = "train"):
    if cfg.data.root:
        root = Path(cfg.data.root)
        sub = root / split
        return load_dataset(sub if sub.is_dir() else root, cfg.data.depth_scale)
    n = cfg.data.n_train if split == "train" else cfg.data.n_val
    seed = cfg.data.seed + (0 if split == "train" else VAL_SEED_OFFSET)
    return make_synthetic_dataset(n, seed=seed, size=tuple(cfg.data.image_size), num_classes=cfg.model.num_classes)


def checkpoint_list(spec: list[str]) -> list[Path]:
    """Expand a mix of checkpoint files and directories (all ``*.pt`` inside, sorted)."""
    paths = []
    for item in spec:
        p = Path(item)
        if p.is_dir():
            found = sorted(p.glob("*.pt"))
            if not found:
                raise FileNotFoundError(f"no *.pt checkpoints in {p}")
            paths.extend(found)
        elif p.exists():
            paths.append(p)
        else:
            raise FileNotFoundError(f"checkpoint not found: {p}")
    return paths


def load_predictor(args, cfg: Config):
    paths = checkpoint_list(args.checkpoint)
    dtype = getattr(torch, cfg.dtype)
    models = [load_checkpoint(p, dtype=dtype) for p in paths]
    method = cfg.uq.method
    if method == "none" and len(models) > 1:
        method = "de"
    if method == "dse" and models[0].num_heads < 2:
        raise ConfigError(f"{paths[0]} has a single head; cannot run --uq dse")
    if method == "mcd" and cfg.uq.dropout is not None:
        # test-time dropout rate override for a checkpoint trained with dropout
        for m in models:
            for mod in m.modules():
                if isinstance(mod, MCDropout):
                    mod.p = cfg.uq.dropout
            m.cfg = replace(m.cfg, dropout=cfg.uq.dropout)
    return make_predictor(models, replace(cfg.uq, method=method))


def _write_json(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2))
    return path


def cmd_make_synth(args):
    out = resolve_out(args.out)
    for split, n, offset in (("train", args.n, 0), ("val", args.n_val, VAL_SEED_OFFSET)):
        if n:
            samples = make_synthetic_dataset(n, seed=args.seed + offset, size=(args.size, args.size),
                                             num_classes=args.classes)
            write_dataset(samples, out / split, args.depth_scale)
    print(out)


def cmd_train(args):
    cfg = build_config(args)
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    res = train(cfg, get_dataset(cfg, "train"), log_path=out / "train.jsonl", checkpoint_path=out / "model.pt")
    print(res.checkpoint)


def cmd_train_ensemble(args):
    cfg = build_config(args)
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    results = train_ensemble(cfg, get_dataset(cfg, "train"), members=cfg.uq.members, out_dir=out)
    for r in results:
        print(r.checkpoint)


def cmd_distill(args):
    cfg = build_config(args)
    teacher = [str(p) for p in checkpoint_list(args.teacher)]
    distill = replace(cfg.distill, teacher=teacher, student_init=args.student_init)
    if args.epochs is not None:
        distill = replace(distill, epochs=args.epochs)
    cfg = replace(cfg, distill=distill)
    if args.student_init != "fresh" and not Path(args.student_init).exists():
        raise FileNotFoundError(f"student checkpoint not found: {args.student_init}")
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    val = get_dataset(cfg, "val") if cfg.distill.early_stopping else None
    res = train_student(cfg, get_dataset(cfg, "train"), val_dataset=val,
                        log_path=out / "distill.jsonl", checkpoint_path=out / "student.pt")
    print(res.checkpoint)


def cmd_evaluate(args):
    cfg = build_config(args)
    predictor = load_predictor(args, cfg)
    metrics_cfg = cfg.metrics if args.patch is None else replace(cfg.metrics, patch=args.patch)
    report = evaluate(predictor, get_dataset(cfg, args.split), metrics_cfg)
    out = resolve_out(args.out)
    report.save(out, resolve_out(args.csv) if args.csv else None)
    print(json.dumps(report.to_dict(), indent=2))


def cmd_benchmark(args):
    cfg = build_config(args)
    predictor = load_predictor(args, cfg)
    stats = benchmark(predictor, tuple(args.input_shape), warmup=args.warmup, iters=args.iters)
    if args.out:
        _write_json(stats, resolve_out(args.out))
    print(json.dumps(stats, indent=2))


def cmd_plot(args):
    cfg = build_config(args)
    predictor = load_predictor(args, cfg)
    dataset = get_dataset(cfg, args.split)
    panels = collect_panels(predictor, dataset, range(min(args.num_images, len(dataset))))
    reports = None
    if args.report:
        reports = {}
        for path in args.report:
            d = json.loads(Path(path).read_text())
            reports[Path(path).stem] = MetricsReport(seg=d["seg"], depth=d["depth"], timing=d["timing"],
                                                     params=d.get("params"))
    for p in emit_plots(panels, reports, resolve_out(args.out)):
        print(p)


def _common(p, uq=True):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (repeatable)")
    p.add_argument("--data", help="dataset root with images/ labels/ depth/ (synthetic if omitted)")
    p.add_argument("--seed", type=int)
    if uq:
        p.add_argument("--uq", choices=("none", "mcd", "dse", "de"))
        p.add_argument("--samples", type=int, help="MC dropout passes")
        p.add_argument("--members", type=int, help="ensemble members / sub-ensemble heads")
        p.add_argument("--dropout", type=float)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emuformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synth", help="write a synthetic paired-directory dataset")
    p.add_argument("--out", default="synth")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--n-val", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--depth-scale", type=float, default=1000.0)
    p.set_defaults(func=cmd_make_synth)

    p = sub.add_parser("train", help="train one baseline model (or a DSE with --uq dse)")
    _common(p)
    p.add_argument("--out", default="train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-ensemble", help="train M independently seeded members")
    _common(p)
    p.add_argument("--out", default="ensemble")
    p.set_defaults(func=cmd_train_ensemble)

    p = sub.add_parser("distill", help="distil teacher uncertainty into a single-pass student")
    _common(p, uq=False)
    p.add_argument("--teacher", nargs="+", required=True, help="checkpoint files or a directory of them")
    p.add_argument("--student-init", default="fresh", help="checkpoint path or 'fresh'")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default="distill")
    p.set_defaults(func=cmd_distill)

    for name, func, default_out in (("evaluate", cmd_evaluate, "metrics.json"),
                                    ("plot", cmd_plot, "plots")):
        p = sub.add_parser(name)
        _common(p)
        p.add_argument("--checkpoint", nargs="+", required=True)
        p.add_argument("--split", choices=("train", "val"), default="val")
        p.add_argument("--out", default=default_out)
        p.set_defaults(func=func)
        if name == "evaluate":
            p.add_argument("--csv", help="per-image conditional metrics CSV")
            p.add_argument("--patch", type=int)
        else:
            p.add_argument("--num-images", type=int, default=4)
            p.add_argument("--report", nargs="*", help="metric JSON files for the bar charts")

    p = sub.add_parser("benchmark", help="wall-clock inference timing")
    _common(p)
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--input-shape", type=int, nargs=4, default=(1, 3, 32, 32))
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
