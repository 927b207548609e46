"""``dyngate`` command line: gen-data, train, eval, report, gradcheck, config.

Exit codes: 0 success, 1 verification failure, 2 input/config error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

from . import data as D
from .config import SEED_ENV, default_config_text, load_config
from .errors import DimensionError, DivergenceError, DyngateError, FormatError, ParseError, ValidationError
from .network import load_checkpoint
from .prompts import PromptBank
from .trainer import best_row, evaluate, split_source, train

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("dyngate")


def _seed_default() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"${SEED_ENV} must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else (_seed_default() or 0)
    domains = [d for d in args.domains.replace(",", " ").split() if d]
    if not domains:
        raise ValidationError("--domains needs at least one preset")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for d in domains:
        ds = D.generate(d, args.classes, args.per_domain, D.domain_seed(seed, d), "train")
        path = out / f"{d}.dgds"
        D.save(ds, path)
        entries.append(D.ManifestEntry(d, "train", path))
        counts = " ".join(str(c) for c in ds.class_counts())
        print(f"{d}\t{len(ds)} samples\tper class: {counts}\t{path}")
    D.write_manifest(out / "manifest.tsv", entries)
    print(f"manifest\t{out / 'manifest.tsv'}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def _resolve_datasets(cfg) -> Dict[str, D.DomainDataset]:
    manifest = cfg.manifest
    if not manifest.exists():
        raise ValidationError(f"manifest not found: {manifest}")
    by_domain = {}
    for e in D.read_manifest(manifest):
        by_domain.setdefault(e.domain, e.path)
    needed = [cfg["data.source"], *cfg["data.targets"]]
    missing = [d for d in needed if d not in by_domain]
    if missing:
        raise ValidationError(f"manifest {manifest} has no entry for domain(s) {missing}")
    out = {}
    for d in needed:
        ds = D.load(by_domain[d])
        if ds.domain_name != d:
            raise ValidationError(f"{by_domain[d]} holds domain {ds.domain_name!r}, manifest says {d!r}")
        out[d] = ds
    return out


def run_training(cfg, out_dir: Path):
    tcfg, ncfg = cfg.train_config(), cfg.network_config()
    datasets = _resolve_datasets(cfg)
    prompts = None
    if cfg.embeddings is not None:
        prompts = PromptBank.from_file(cfg.embeddings, ncfg.d_text, ncfg.prompt_tokens, ncfg.prompt_seed)
    train_ds, val_ds = split_source(datasets[tcfg.source], tcfg.val_fraction)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.cfg").write_text(cfg.to_text(), encoding="utf-8")
    D.save(val_ds, out_dir / "val.dgds")
    targets = {t: datasets[t] for t in tcfg.targets}
    return train(tcfg, ncfg, train_ds, val_ds, targets, out_dir, prompts)


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.variant:
        overrides.append(f"train.variant={args.variant}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.epochs is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if args.manifest:
        overrides.append(f"data.manifest={Path(args.manifest).resolve()}")
    cfg = load_config(args.config, overrides)
    out_dir = Path(args.out_dir)
    result = run_training(cfg, out_dir)
    best = best_row(result)
    print(f"variant\t{cfg['train.variant']}\nseed\t{cfg.seed}\nbest_epoch\t{int(best['epoch'])}\n"
          f"val_acc\t{best['val_acc']:.6f}")
    for t in cfg["data.targets"]:
        print(f"acc_{t}\t{best[f'acc_{t}']:.6f}")
    for k in result.columns:
        if k.startswith("density_"):
            print(f"{k}\t{best[k]:.6f}")
    print(f"mac_ratio\t{best['mac_ratio']:.6f}")
    print(f"metrics\t{out_dir / 'metrics.csv'}\ncheckpoint\t{out_dir / 'best.ckpt'}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    ds = D.load(args.dataset)
    if ds.num_classes != model.config.num_classes:
        raise ValidationError(f"dataset has K={ds.num_classes}, checkpoint expects {model.config.num_classes}")
    rep = evaluate(model, ds, args.scene or ds.domain_name)
    print(f"domain\t{args.scene or ds.domain_name}\nsamples\t{rep.n}\naccuracy\t{rep.accuracy:.6f}")
    for k, v in rep.densities.items():
        layer, kind = k.rsplit(".", 1)
        print(f"density_{layer}_{kind}\t{v:.6f}")
    print(f"mac_ratio\t{rep.mac_ratio:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------- report

def cmd_report(args) -> int:
    from .report import write_report
    res = write_report(args.metrics, args.out, plots=not args.no_plots)
    for s in res["summaries"]:
        print(f"{s['run']}\t{s['variant']}\tunseen {s['unseen_acc']:.4f}\tval {s['val_acc']:.4f}\tmac {s['mac_ratio']:.4f}")
    for v, m in res["medians"].items():
        print(f"median_unseen_{v}\t{m:.6f}")
    print(f"comparison\t{Path(args.out) / 'comparison.csv'}")
    for f in res["figures"]:
        print(f"figure\t{f}")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    from .verify import run_battery
    seed = args.seed if args.seed is not None else (_seed_default() or 0)
    results = run_battery(range(seed, seed + args.seeds))
    worst: Dict[str, float] = {}
    tol: Dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
        tol[r.name] = r.tolerance
    failing = [name for name in worst if not worst[name] <= tol[name]]
    for name, err in worst.items():
        print(f"{name}\t{err:.3e}\t{'ok' if name not in failing else 'FAIL'}")
    if failing:
        print(f"failing checks: {', '.join(failing)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(default_config_text())
    return EXIT_OK


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyngate", description="Prompt-conditioned dynamic gating at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render synthetic domain datasets and a manifest")
    g.add_argument("--out", default="data")
    g.add_argument("--domains", default=",".join(D.DEFAULT_DOMAINS))
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--per-domain", type=int, default=400)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--config", type=Path, default=None)
    t.add_argument("--variant", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--manifest", default=None)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--scene", default=None, help="prompt scene name (default: the dataset's domain)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="comparison table and curves from run directories")
    r.add_argument("--metrics", nargs="+", required=True, help="run directories or metrics.csv files")
    r.add_argument("--out", required=True)
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--seeds", type=int, default=20, help="number of consecutive seeds")
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("config", help="print a documented default config file")
    d.set_defaults(func=cmd_config)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValidationError, ParseError, FormatError, DimensionError, DyngateError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
