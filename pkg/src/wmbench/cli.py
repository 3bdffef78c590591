"""wmbench command line: embed, attack, adaptive, claim, evade, grid, report, verify, run."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness as H
from . import models as M
from . import schemes as S


def _common(p):
    p.add_argument("--dataset", default="mnist-5k")
    p.add_argument("--scheme", default="content", choices=S.SCHEMES)
    p.add_argument("--arch", default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--adversary-fraction", type=float, default=0.5)
    p.add_argument("--out", default="results.jsonl", help="JSONL results file (appended)")
    p.add_argument("--cache", default=None, help="model cache directory (default $WMBENCH_CACHE)")
    p.add_argument("--data-root", default=None)
    p.add_argument("--force", action="store_true", help="ignore cached models and prior records")
    p.add_argument("--embed-epochs", type=int, default=None, help="override embedding epochs (quick runs)")


def _config(args, attacks) -> H.ExperimentConfig:
    kw = {}
    if args.seeds:
        kw["seeds"] = args.seeds
    if args.embed_epochs is not None:
        kw["embed"] = {"epochs": args.embed_epochs}
    return H.ExperimentConfig(dataset=args.dataset, arch=args.arch, scheme_id=args.scheme, attacks=attacks,
                              adversary_fraction=args.adversary_fraction, output=args.out,
                              data_root=args.data_root, **kw)


def _print_records(records):
    for r in records:
        keep = {k: r[k] for k in ("kind", "scheme_id", "seed", "embed_recall", "test_acc", "recall_before",
                                  "recall_after", "acc_before", "acc_after", "detection_accuracy",
                                  "adversary_recall", "owner_recall", "success", "status", "error") if k in r}
        if "params" in r and "p" in r["params"]:
            keep["p"] = r["params"]["p"]
        print(json.dumps(keep, sort_keys=True))


def build_parser():
    ap = argparse.ArgumentParser(prog="wmbench", description="Trigger-set watermark robustness benchmark")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("embed", help="embed (or load cached) watermarked models")
    _common(p)

    p = sub.add_parser("attack", help="non-adaptive removal attack")
    _common(p)
    p.add_argument("--type", required=True, choices=("finetune", "steal", "prune"))
    p.add_argument("--p", type=float, nargs="+", default=None, help="pruning percentages (default: sweep)")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--optimizer", default=None, choices=M.OPTIMIZERS)

    p = sub.add_parser("adaptive", help="adaptive removal attack with synthesized surrogate keys")
    _common(p)
    p.add_argument("--type", required=True, choices=("finetune", "steal", "prune"))
    p.add_argument("--p", type=float, nargs="+", default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--synth-epochs", type=int, default=None)
    p.add_argument("--post-activation", action="store_true")

    p = sub.add_parser("claim", help="removal followed by piracy or ambiguity")
    _common(p)
    p.add_argument("--type", required=True, choices=("piracy", "ambiguity"))
    p.add_argument("--removal", default="steal", choices=("steal", "finetune", "prune", "none"))
    p.add_argument("--allow-no-removal", action="store_true")

    p = sub.add_parser("evade", help="build and calibrate the key-image detector")
    _common(p)
    p.add_argument("--fpr", type=float, default=0.001)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("grid", help="fine-tuning hyperparameter grid")
    _common(p)
    p.add_argument("--optimizer", nargs="+", default=None)
    p.add_argument("--data-source", nargs="+", default=None, choices=("train", "adversary"))
    p.add_argument("--learning-rate", nargs="+", default=None, help='floats, "last" or "x10"')
    p.add_argument("--epochs", type=int, default=10)

    p = sub.add_parser("report", help="render tables and plots from a results file")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--format", nargs="+", default=["md", "csv", "png"], choices=("md", "csv", "png"))
    p.add_argument("--out-dir", default="report")

    p = sub.add_parser("verify", help="trigger set recall of a model (black-box ownership check)")
    p.add_argument("--model", required=True, help="checkpoint .npz or a watermarked-model directory")
    p.add_argument("--trigger", required=True, help="trigger set directory")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("run", help="run a JSON experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--cache", default=None)
    p.add_argument("--force", action="store_true")
    return ap


def _attack_entry(args, kind):
    a = {"type": kind}
    if getattr(args, "p", None):
        a["p"] = args.p if len(args.p) > 1 else args.p[0]
    for src, dst in (("lr", "learning_rate"), ("epochs", "epochs"), ("optimizer", "optimizer"), ("lam", "lam"),
                     ("gamma", "gamma"), ("per_class", "per_class"), ("synth_epochs", "synth_epochs"),
                     ("fpr", "fpr_bound"), ("removal", "removal")):
        v = getattr(args, src, None)
        if v is not None:
            a[dst] = v
    if getattr(args, "post_activation", False):
        a["post_activation"] = True
    if getattr(args, "allow_no_removal", False):
        a["allow_no_removal"] = True
    return a


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cmd = args.cmd
    if cmd == "verify":
        return _verify(args)
    if cmd == "report":
        records = H.read_records(args.inp)
        if not records:
            print(f"no records in {args.inp}", file=sys.stderr)
            return 1
        for p in H.render_report(records, args.out_dir, tuple(args.format)):
            print(p)
        return 0
    if cmd == "run":
        cfg = H.ExperimentConfig.load(args.config)
        _print_records(H.run_experiment(cfg, args.cache, args.force))
        return 0
    if cmd == "grid":
        grid = {}
        if args.optimizer:
            grid["optimizer"] = args.optimizer
        if args.data_source:
            grid["data_source"] = args.data_source
        if args.learning_rate:
            grid["learning_rate"] = args.learning_rate
        cfg = _config(args, [])
        cells = None if grid else list(H.GRID_CELLS)
        _print_records(H.hyperparameter_grid(cfg, grid or None, cells, args.cache, epochs=args.epochs))
        return 0
    attacks = {"embed": [], "attack": [_attack_entry(args, getattr(args, "type", ""))],
               "adaptive": [_attack_entry(args, f"adaptive_{getattr(args, 'type', '')}")],
               "claim": [_attack_entry(args, getattr(args, "type", ""))],
               "evade": [_attack_entry(args, "evade")]}[cmd]
    cfg = _config(args, attacks)
    _print_records(H.run_experiment(cfg, args.cache, args.force, record_embed=cmd == "embed"))
    return 0


def _verify(args) -> int:
    mp = Path(args.model)
    if mp.is_dir():
        mp = mp / "model.npz"
    model = M.checkpoint_load(mp)
    trigger = S.TriggerSet.load(args.trigger)
    r = S.trigger_recall(model, trigger)
    if args.json:
        print(json.dumps({"recall": r}))
    else:
        print(f"trigger set recall: {r:.4f} ({len(trigger)} keys)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
