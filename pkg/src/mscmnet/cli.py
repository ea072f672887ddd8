"""Command-line surface: gen-data, train, eval, gradcheck, sweep-alb.

Exit codes: 0 ok, 1 check failure, 2 config error, 3 IO/data error,
4 numerical divergence, 5 format version mismatch.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import gradcheck as gradcheck_mod
from .checkpoint import load_checkpoint
from .config import config_text, load_config
from .data.store import GenParams, load_dataset, write_dataset
from .data.synthetic import generate_dataset
from .errors import ConfigError, MscmError
from .evaluation import build_banks, run_protocol, write_cmc_csv, write_report
from .train import build_model, split_identities, train_run


def _parse_size(raw):
    try:
        h, w = raw.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise ConfigError(f"--size expects HxW (e.g. 96x48), got {raw!r}") from exc


def _collect_overrides(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    for flag, key in (
        ("data", "paths.dataset_dir"),
        ("out", "paths.checkpoint_dir"),
        ("seed", "seed"),
        ("epochs", "train.epochs"),
        ("lr", "optimizer.lr"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    return overrides


def cmd_gen_data(args):
    height, width = _parse_size(args.size)
    params = GenParams(
        num_identities=args.ids, samples_per_id=args.per_id,
        image_h=height, image_w=width, cams_per_modality=args.cams,
        modality_gap=args.gap, noise_std=args.noise, seed=args.seed,
    )
    dataset = generate_dataset(params, workers=args.workers)
    manifest = write_dataset(params, dataset.records, args.out)
    print(f"wrote {len(dataset.records)} records "
          f"({params.num_identities} ids x {params.samples_per_id} samples x 2 modalities)")
    print(f"manifest: {manifest}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config, _collect_overrides(args))
    os.makedirs(cfg.paths.checkpoint_dir, exist_ok=True)
    with open(os.path.join(cfg.paths.checkpoint_dir, "effective.cfg"), "w") as fh:
        fh.write(config_text(cfg))
    log_path = os.path.join(cfg.paths.checkpoint_dir, "train.log")
    with open(log_path, "a" if args.resume else "w") as log:
        _, records, ckpt = train_run(cfg, resume=args.resume, log_stream=log)
    if records:
        first_epoch = [r.l_total for r in records if r.epoch == records[0].epoch]
        print(f"steps: {len(records)}  first-epoch mean L_total: "
              f"{float(np.mean(first_epoch)):.4f}  final L_total: {records[-1].l_total:.4f}")
    print(f"checkpoint: {ckpt}")
    print(f"log: {log_path}")
    return 0


def _load_eval_model(cfg, checkpoint_path):
    mapping = load_checkpoint(checkpoint_path)
    if "classifier.weight" not in mapping:
        raise MscmError("checkpoint has no classifier.weight tensor")
    model = build_model(cfg, num_classes=mapping["classifier.weight"].shape[1])
    model.load_state(mapping)
    return model


def cmd_eval(args):
    cfg = load_config(args.config, _collect_overrides(args))
    if args.direction is not None:
        cfg.eval.direction = args.direction
        cfg.eval.validate()
    if args.trials is not None:
        cfg.eval.trials = args.trials
        cfg.eval.validate()
    dataset = load_dataset(cfg.paths.dataset_dir)
    if args.split == "test":
        _, ids = split_identities(dataset, cfg.train.train_ids)
        if not ids:
            raise ConfigError("no held-out identities: train.train_ids covers the dataset")
    else:
        ids = dataset.identities()
    model = _load_eval_model(cfg, args.checkpoint)
    bank_v, bank_t = build_banks(
        model, dataset, ids,
        batch_size=cfg.eval.batch_size, workers=cfg.eval.workers,
    )
    directions = ("t2v", "v2t") if cfg.eval.direction == "both" else (cfg.eval.direction,)
    report_path = args.report or cfg.paths.report_path
    os.makedirs(os.path.dirname(report_path) or ".", exist_ok=True)
    for direction in directions:
        report, _ = run_protocol(
            bank_v, bank_t, protocol=direction,
            trials=cfg.eval.trials, seed=cfg.seed, max_rank=cfg.eval.max_rank,
        )
        if len(directions) == 1:
            target = report_path
        else:
            base, ext = os.path.splitext(report_path)
            target = f"{base}.{direction}{ext or '.txt'}"
        write_report(report, target)
        write_cmc_csv(report, os.path.splitext(target)[0] + ".cmc.csv")
        print(f"{direction}: rank1={report.cmc[0]:.4f} map={report.map:.4f} "
              f"minp={report.minp:.4f} -> {target}")
    return 0


def cmd_gradcheck(args):
    groups = tuple(args.groups.split(",")) if args.groups else gradcheck_mod.SUITE_GROUPS
    results = gradcheck_mod.run_suite(
        seeds=args.seeds, step=args.step, tol=args.tol, groups=groups,
    )
    failed = []
    for name in sorted(results):
        err = results[name]
        status = "PASS" if err <= args.tol else "FAIL"
        if status == "FAIL":
            failed.append(name)
        print(f"{status} {name:28s} max_rel_err={err:.3e}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed "
          f"(tol {args.tol:g}, {args.seeds} seeds)")
    return 1 if failed else 0


def cmd_sweep_alb(args):
    cfg = load_config(args.config, _collect_overrides(args))
    dataset = load_dataset(cfg.paths.dataset_dir)
    _, test_ids = split_identities(dataset, cfg.train.train_ids)
    if not test_ids:
        raise ConfigError("sweep needs held-out identities for evaluation")
    rows = []
    for num_alb in range(6):
        for multiscale in (True, False):
            cell = dataclasses.replace(
                cfg,
                model=dataclasses.replace(cfg.model, num_alb=num_alb, multiscale=multiscale),
                paths=dataclasses.replace(
                    cfg.paths,
                    checkpoint_dir=os.path.join(
                        cfg.paths.checkpoint_dir,
                        f"alb{num_alb}_ms{'on' if multiscale else 'off'}",
                    ),
                ),
            )
            model, _, _ = train_run(cell, dataset=dataset)
            bank_v, bank_t = build_banks(
                model, dataset, test_ids, batch_size=cfg.eval.batch_size,
            )
            report, _ = run_protocol(
                bank_v, bank_t, protocol="t2v",
                trials=cfg.eval.trials, seed=cfg.seed, max_rank=cfg.eval.max_rank,
            )
            rows.append((num_alb, "on" if multiscale else "off",
                         float(report.cmc[0]), report.map))
            print(f"num_alb={num_alb} multiscale={'on' if multiscale else 'off'} "
                  f"rank1={report.cmc[0]:.4f} map={report.map:.4f}")
    out_csv = args.out_csv or os.path.join(cfg.paths.checkpoint_dir, "sweep_alb.csv")
    os.makedirs(os.path.dirname(out_csv) or ".", exist_ok=True)
    with open(out_csv, "w") as fh:
        fh.write("num_alb,multiscale,rank1,map\n")
        for num_alb, multiscale, rank1, map_value in rows:
            fh.write(f"{num_alb},{multiscale},{rank1:.6f},{map_value:.6f}\n")
    print(f"sweep CSV: {out_csv}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mscmnet",
        description="Cross-modal person re-identification on synthetic paired data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    p.add_argument("--ids", type=int, default=48)
    p.add_argument("--per-id", type=int, default=8)
    p.add_argument("--size", default="96x48")
    p.add_argument("--cams", type=int, default=2)
    p.add_argument("--gap", type=float, default=0.35)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    def common_run_flags(p):
        p.add_argument("--config")
        p.add_argument("--data", help="dataset directory (overrides paths.dataset_dir)")
        p.add_argument("--out", help="run directory (overrides paths.checkpoint_dir)")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key (repeatable)")

    p = sub.add_parser("train", help="train a model")
    common_run_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--direction", choices=("t2v", "v2t", "both"))
    p.add_argument("--trials", type=int)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--report", help="report path (overrides paths.report_path)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--groups", help="comma-separated subset of check groups")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-alb", help="train/eval the attention-link grid")
    common_run_flags(p)
    p.add_argument("--out-csv", dest="out_csv")
    p.set_defaults(func=cmd_sweep_alb)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MscmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


def entry():
    sys.exit(main())
