"""Command-line entry point: ``pneumollm <command> ...``.

Exit codes: 0 success, 1 usage/config error, 2 runtime/data error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cv as cvmod
from .config import ExperimentConfig, apply_overrides, load_config
from .data import (DatasetFormatError, export_csv, generate_synthetic, load_dataset,
                   save_dataset)
from .emitter import StackTrace
from .engine import context_maps
from .gradcheck import full_model_check, toy_config
from .metrics import mean_report
from .model import (CheckpointError, ConfigError, PneumoModel, load_checkpoint,
                    parameter_census, save_checkpoint)
from .training import train

log = logging.getLogger("pneumollm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = list(args.set or [])
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if getattr(args, "seed", None) is not None:
        overrides += [f"model.seed={args.seed}", f"train.seed={args.seed}",
                      f"cv.seed={args.seed}"]
    return apply_overrides(cfg, overrides) if overrides else cfg


def _dataset(args, cfg: ExperimentConfig):
    ds = load_dataset(args.data)
    if ds.width != cfg.model.feat_dim:
        raise ConfigError(f"dataset feature width {ds.width} != model.feat_dim "
                          f"{cfg.model.feat_dim}")
    return ds


def _write(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def cmd_gen_data(args) -> int:
    try:
        ds = generate_synthetic(n=args.n, pos_ratio=args.pos_ratio, separation=args.sep,
                                patients=args.patients, seed=args.seed,
                                feat_dim=args.feat_dim)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    save_dataset(ds, args.out)
    if args.csv:
        export_csv(ds, args.csv)
    counts = ds.class_counts()
    print(f"wrote {len(ds)} samples ({counts['1']} positive) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _experiment(args)
    ds = _dataset(args, cfg)
    model = PneumoModel.create(cfg.model)
    model, trace = train(model, ds.features, ds.labels, cfg.train)
    save_checkpoint(model, args.out)
    if args.trace:
        lines = ["epoch,loss"] + [f"{i},{v:.10g}" for i, v in enumerate(trace)]
        _write(args.trace, "\n".join(lines) + "\n")
    census = parameter_census(model)
    print(f"checkpoint {args.out} (config {cfg.digest()[:12]}, trainable {census.trainable}, "
          f"frozen {census.frozen})")
    return EXIT_OK


def _report(args, result: cvmod.AblationResult, cfg: ExperimentConfig, table: str) -> None:
    _write(args.out, cvmod.metrics_csv(result.rows, result.summary))
    if args.report:
        _write(args.report, table)
    meta = {"config_hash": cfg.digest(), "config": cfg.to_dict(), "flags": result.flags}
    _write(str(args.out) + ".meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def cmd_cv(args) -> int:
    cfg = _experiment(args)
    ds = _dataset(args, cfg)
    parallel = args.parallel_folds or cfg.cv.parallel_folds
    results = cvmod.run_cv(ds, cfg.model, cfg.train, cfg.cv.k, cfg.cv.seed, parallel)
    name = args.variant
    out = cvmod.AblationResult(rows=[(name, str(r.fold), r.report) for r in results],
                               summary={name: mean_report([r.report for r in results])})
    _report(args, out, cfg, cvmod.summary_markdown(out, cfg.digest()))
    s = out.summary[name]
    print(f"{name}: acc={s['acc']:.4f} auc={s['auc']:.4f} avg={s['avg']:.4f}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as err:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from err


def cmd_sweep_m(args) -> int:
    cfg = _experiment(args)
    ds = _dataset(args, cfg)
    out = cvmod.sweep_m(ds, _int_list(args.m), cfg.model, cfg.train, cfg.cv.k, cfg.cv.seed,
                        args.parallel_folds or cfg.cv.parallel_folds)
    _report(args, out, cfg, cvmod.summary_markdown(out, cfg.digest()))
    print(cvmod.summary_markdown(out))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _experiment(args)
    ds = _dataset(args, cfg)
    variants = args.variants.split(",") if args.variants else list(cvmod.ABLATION_VARIANTS)
    out = cvmod.run_ablation(ds, variants, cfg.model, cfg.train, cfg.cv.k,
                             _int_list(args.seeds), args.parallel_folds or cfg.cv.parallel_folds)
    table = cvmod.ablation_markdown(out, cfg.digest())
    _report(args, out, cfg, table)
    print(table)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    report = full_model_check(toy_config(), seed=args.seed, h=args.h)
    ok = report.passed(args.tol)
    print(f"checked {report.checked} entries; max rel err {report.max_rel_err:.3e} at "
          f"{report.worst_param}{report.worst_index}; frozen grads zero: "
          f"{report.frozen_grads_zero} -> {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


def _write_matrix(path: Path, rows: np.ndarray, header: list[str], label: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([label] + header)
        for i, row in enumerate(rows):
            w.writerow([i] + [f"{v:.10g}" for v in row])


def cmd_inspect(args) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        cfg_model = model.config
    else:
        cfg_model = _experiment(args).model
        model = PneumoModel.create(cfg_model)
    ds = load_dataset(args.data)
    if not 0 <= args.sample < len(ds):
        raise ConfigError(f"sample {args.sample} outside 0..{len(ds) - 1}")
    if ds.width != cfg_model.feat_dim:
        raise ConfigError(f"dataset width {ds.width} != model.feat_dim {cfg_model.feat_dim}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x = model.encoder.encode_batch(ds.features[args.sample:args.sample + 1])
    trace = StackTrace()
    z, mix = model.features(x, trace=trace)
    written = []
    if mix is not None:
        mc = context_maps(mix, 1, cfg_model.m)[0]
        path = out_dir / "context_map.csv"
        _write_matrix(path, mc, [f"diag{j}" for j in range(mc.shape[1])], "source_token")
        written.append(path)
    tokens = cfg_model.tokens
    for layer, heads in enumerate(trace.attention):
        for h, weights in enumerate(heads):
            path = out_dir / f"attention_l{layer}_h{h}.csv"
            _write_matrix(path, weights[0], [f"key{j}" for j in range(tokens)], "query")
            written.append(path)
    logit = model.head_logits(z, 1).item()
    print(f"sample {args.sample} (label {ds.samples[args.sample].label}): logit {logit:.6f}; "
          f"wrote {len(written)} files to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pneumollm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic PNDS1 dataset")
    g.add_argument("--n", type=int, default=630)
    g.add_argument("--pos-ratio", type=float, default=401 / 630)
    g.add_argument("--sep", type=float, default=6.0)
    g.add_argument("--patients", type=int, default=210)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--feat-dim", type=int, default=32)
    g.add_argument("--out", required=True)
    g.add_argument("--csv", help="also export a CSV copy")
    g.set_defaults(func=cmd_gen_data)

    def experiment_flags(sp, needs_data=True):
        if needs_data:
            sp.add_argument("--data", required=True, help="PNDS1 dataset file")
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=10")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int, help="sets model, train and cv seeds")

    def report_flags(sp):
        sp.add_argument("--out", required=True, help="metrics CSV")
        sp.add_argument("--report", help="Markdown table")
        sp.add_argument("--parallel-folds", action="store_true")

    t = sub.add_parser("train", help="train on a whole dataset and write a checkpoint")
    experiment_flags(t)
    t.add_argument("--out", required=True, help="PNLM checkpoint path")
    t.add_argument("--trace", help="loss trace CSV")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("cv", help="grouped k-fold cross-validation")
    experiment_flags(c)
    report_flags(c)
    c.add_argument("--variant", default="pneumollm", help="row label in the CSV")
    c.set_defaults(func=cmd_cv)

    s = sub.add_parser("sweep-m", help="cross-validate over diagnosis-token counts")
    experiment_flags(s)
    report_flags(s)
    s.add_argument("--m", default="1,2,3,4,5,6,7,8")
    s.set_defaults(func=cmd_sweep_m)

    a = sub.add_parser("ablate", help="component ablation table")
    experiment_flags(a)
    report_flags(a)
    a.add_argument("--variants", help=f"comma list from {list(cvmod.ABLATION_VARIANTS)}")
    a.add_argument("--seeds", default="0")
    a.set_defaults(func=cmd_ablate)

    gc = sub.add_parser("grad-check", help="finite-difference check of the toy model")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_grad_check)

    i = sub.add_parser("inspect", help="dump context map and attention weights for a sample")
    experiment_flags(i)
    i.add_argument("--checkpoint")
    i.add_argument("--sample", type=int, default=0)
    i.add_argument("--out-dir", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"{err}\n{parser.format_usage().strip()}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetFormatError, CheckpointError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
