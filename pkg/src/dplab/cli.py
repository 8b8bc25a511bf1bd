"""Command-line front end: ``dplab <subcommand> ...``.

Exit codes: 0 on success, 1 for configuration errors, 2 for runtime failures.
Subcommands taking a config file accept ``--<dotted.key> VALUE`` overrides for
any config key, e.g. ``--training.epochs 20`` or ``--privacy.variants '[NC, RDP]'``.
Values are parsed as YAML scalars or flow sequences.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import yaml

from dplab import accountant as acc
from dplab.attacks import AttackError, write_predictions
from dplab.data import DataError, Schema, save_delimited, synth_multiclass, write_schema
from dplab.models import load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parse_overrides(extra: list[str]) -> dict:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise _cfg_error(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise _cfg_error(f"override {tok} needs a value")
            val = extra[i + 1]
            i += 2
        out[key] = yaml.safe_load(val)
    return out


def _cfg_error(msg: str):
    from dplab.runner import ConfigError

    return ConfigError(msg)


def _load_config(args, extra):
    from dplab.runner import ExperimentConfig

    return ExperimentConfig.load(args.config, _parse_overrides(extra))


# --------------------------------------------------------------------------


def cmd_calibrate(args, extra) -> int:
    if extra:
        raise _cfg_error(f"unexpected arguments {extra}")
    print("variant,epsilon,delta,k,sigma,eps_step_or_rho,achieved_epsilon")
    for v in args.variants:
        for e in args.epsilons:
            sigma = acc.calibrate_sigma(v, acc.PrivacyBudget(e, args.delta), args.k, args.sensitivity)
            step = acc.step_budget(v, sigma, args.k, args.delta, args.sensitivity)
            got = acc.achieved_budget(v, sigma, args.k, args.delta, args.sensitivity).epsilon
            print(f"{v},{e:g},{args.delta:g},{args.k},{sigma:.10g},{step:.10g},{got:.10g}")
    return EXIT_OK


def cmd_synth(args, extra) -> int:
    if extra:
        raise _cfg_error(f"unexpected arguments {extra}")
    ds = synth_multiclass(
        args.n, args.d, args.c, args.margin, args.label_noise, args.seed, args.spread, args.num_binary
    )
    out = Path(args.out)
    save_delimited(ds, out, header=True)
    schema = Schema(label_column=ds.dim, num_classes=ds.num_classes, header=True, attributes=ds.attributes)
    schema_path = out.with_suffix(".schema")
    write_schema(schema, schema_path)
    print(f"wrote {len(ds)} rows to {out} and schema to {schema_path}")
    return EXIT_OK


def cmd_train(args, extra) -> int:
    from dplab.runner import prepare

    cfg = _load_config(args, extra)
    ctx = prepare(cfg)
    k = cfg.steps()
    if args.sigma is not None:
        sigma = args.sigma
    else:
        sigma = acc.calibrate_sigma(args.variant, acc.PrivacyBudget(args.epsilon, cfg.delta), k, 1.0, cfg.rdp_orders)
    model = train(ctx.train, cfg.training_config(ctx.arch, sigma, args.seed))
    if sigma > 0:
        model.accountant_record = acc.achieved_budget(args.variant, sigma, k, cfg.delta, 1.0, cfg.rdp_orders)
    save_checkpoint(model, args.out)
    tr = model.accuracy(ctx.train.features, ctx.train.labels)
    te = model.accuracy(ctx.test.features, ctx.test.labels)
    print(f"sigma={sigma:.10g} steps={k} train_acc={tr:.4f} test_acc={te:.4f} -> {args.out}")
    return EXIT_OK


def cmd_attack(args, extra) -> int:
    from dplab.runner import ATTACKS, attack_rows, prepare

    cfg = _load_config(args, extra)
    if args.attacks:
        bad = [a for a in args.attacks if a not in ATTACKS]
        if bad:
            raise _cfg_error(f"unknown attack(s) {bad}")
        cfg.raw["attacks"] = list(args.attacks)
        cfg.validate()
    ctx = prepare(cfg)
    model = load_checkpoint(args.model)
    model.info["seed"] = args.seed
    eps = model.accountant_record.epsilon if model.accountant_record else None
    preds = []
    print("attack_name,advantage,tpr,fpr,ppv,bound")
    for name, rep, adv, p in attack_rows(ctx, model, eps):
        if rep is None:
            print(f"{name},{adv:.6f},NA,NA,NA,NA")
        else:
            bound = "NA" if rep.bound is None or not math.isfinite(rep.bound) else f"{rep.bound:.6g}"
            ppv = "NA" if rep.ppv is None else f"{rep.ppv:.6f}"
            print(f"{name},{adv:.6f},{rep.tpr:.6f},{rep.fpr:.6f},{ppv},{bound}")
        preds.extend(p)
    if args.out:
        write_predictions(args.out, preds)
    return EXIT_OK


def cmd_sweep(args, extra) -> int:
    from dplab.runner import sweep

    cfg = _load_config(args, extra)
    res = sweep(cfg, args.workers)
    print(f"{len(res.completed)} cells run, {len(res.skipped)} resumed, {len(res.failed)} failed -> {res.out_dir}")
    for k, msg in res.failed.items():
        print(f"  {k}: {msg}", file=sys.stderr)
    return EXIT_OK if res.ok else EXIT_RUNTIME


def cmd_report(args, extra) -> int:
    from dplab.runner import report

    if extra:
        raise _cfg_error(f"unexpected arguments {extra}")
    overlap = None
    if args.overlap_variant or args.overlap_epsilon is not None:
        if not (args.overlap_variant and args.overlap_epsilon is not None):
            raise _cfg_error("--overlap-variant and --overlap-epsilon go together")
        overlap = (args.overlap_variant, args.overlap_epsilon, args.overlap_attack)
    for p in report(args.results_dir, args.out, overlap):
        print(p)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dplab", description="Differential-privacy evaluation lab.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    variants = [v.value for v in acc.Variant]

    p = sub.add_parser("calibrate", help="noise multiplier and per-step budget for a variant / epsilon grid")
    p.add_argument("--variants", nargs="+", choices=variants, default=variants)
    p.add_argument("--epsilons", nargs="+", type=float, required=True)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--k", type=int, required=True, help="number of noisy steps")
    p.add_argument("--sensitivity", type=float, default=1.0)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("synth", help="write a synthetic dataset and its schema")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--d", type=int, default=50)
    p.add_argument("--c", type=int, default=10)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--label-noise", type=float, default=0.2)
    p.add_argument("--spread", type=float, default=0.6)
    p.add_argument("--num-binary", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model from a config and save a checkpoint")
    p.add_argument("config")
    p.add_argument("--variant", choices=variants, default="RDP")
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=None, help="skip calibration and use this noise multiplier")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack a checkpoint on the config's evaluation set")
    p.add_argument("config")
    p.add_argument("--model", required=True)
    p.add_argument("--attacks", nargs="+")
    p.add_argument("--seed", type=int, default=0, help="seed for shadow models")
    p.add_argument("--out", help="write per-record predictions here")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="run every (variant, epsilon, seed) cell")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="figure-shaped data files from a sweep directory")
    p.add_argument("results_dir")
    p.add_argument("--out")
    p.add_argument("--overlap-variant", choices=variants)
    p.add_argument("--overlap-epsilon", type=float)
    p.add_argument("--overlap-attack", default="yeom_membership")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    from dplab.runner import CellError, ConfigError

    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, extra)
    except (ConfigError, DataError, acc.AccountingError, AttackError) as exc:
        print(f"dplab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CellError, RuntimeError, ArithmeticError, ValueError, OSError) as exc:
        print(f"dplab: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
