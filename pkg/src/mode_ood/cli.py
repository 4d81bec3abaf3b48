"""Operator pipeline: gen | train | fit | score | eval | bench.

Every option can come from a plain ``key = value`` config file
(``--config``) with command-line flags taking precedence; the resolved
configuration is dumped next to the outputs so any run is reproducible
from that file alone. Exit codes: 0 success, 2 config error, 3 data
error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import detector, knn, metrics, trainer
from .detector import ScaleMode
from .errors import (
    ContractError,
    CorruptionError,
    FormatError,
    GradientError,
    NormalizationError,
    NumericError,
    ValidationError,
)
from .features import SynthSpec, gen_synthetic, load_features, save_features

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# Latency-benchmark protocol: subsampling percentage paired with its k.
BENCH_ALPHA_K = [(5, 10), (10, 20), (50, 30), (100, 50)]


class ConfigError(ContractError):
    pass


def _read_config(path: Path) -> dict:
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Fill args from the config file; on-command-line flags win."""
    if not getattr(args, "config", None):
        return
    cfg = _read_config(Path(args.config))
    known = vars(args)
    given = set(args._given_flags)
    for key, raw in cfg.items():
        if key not in known or key in ("config", "_given_flags", "command"):
            raise ConfigError(f"unknown config key {key!r}")
        if key in given:
            continue
        current = known[key]
        if isinstance(current, bool):
            setattr(args, key, raw.lower() in ("1", "true", "yes"))
        elif isinstance(current, int) and not isinstance(current, bool):
            setattr(args, key, int(raw))
        elif isinstance(current, float):
            setattr(args, key, float(raw))
        else:
            setattr(args, key, raw)


class _TrackGiven(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        # subcommands parse into a fresh namespace, so create on demand
        if not hasattr(namespace, "_given_flags"):
            namespace._given_flags = []
        namespace._given_flags.append(self.dest)


def _add(parser, flag, **kw):
    kw.setdefault("action", _TrackGiven)
    if kw.get("action") is _TrackGiven and kw.get("nargs") is None and isinstance(kw.get("default"), bool):
        # booleans handled as explicit values: --flag true/false
        kw["type"] = lambda s: s.lower() in ("1", "true", "yes")
    parser.add_argument(flag, **kw)


def _dump_resolved(args, out_dir: Path, command: str) -> None:
    skip = {"config", "command", "_given_flags", "func"}
    lines = [f"{k} = {v}" for k, v in sorted(vars(args).items())
             if k not in skip and v is not None]
    (out_dir / f"{command}.resolved.cfg").write_text("\n".join(lines) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args) -> int:
    out = _out_dir(args)
    spec = SynthSpec(
        classes=args.classes, per_class=args.per_class, height=args.height,
        width=args.width, channels=args.channels,
        signal_quadrant_strength=args.signal_strength,
        clutter_strength=args.clutter_strength,
        ood_classes=args.ood_classes, seed=args.seed,
    )
    train_ds, id_ds, ood_ds = gen_synthetic(spec)
    for name, ds in (("train", train_ds), ("id_test", id_ds), ("ood_test", ood_ds)):
        save_features(ds, out / f"{name}.fmb")
    _dump_resolved(args, out, "gen")
    h, w, e = train_ds.shape
    print(f"gen: wrote {len(train_ds)}/{len(id_ds)}/{len(ood_ds)} maps "
          f"({h}x{w}x{e}, {train_ds.class_count} classes) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _out_dir(args)
    dataset = load_features(Path(args.train))
    cfg = trainer.TrainConfig(
        mode=args.mode, lam=args.lam, lr=args.lr, momentum=args.momentum,
        weight_decay=args.weight_decay, epochs=args.epochs, batch_n=args.batch_n,
        tau=args.tau, e_dim=args.e_dim,
        view_noise_sigma=args.view_noise_sigma, seed=args.seed,
    )
    init = None
    if args.init:
        init = trainer.load_model(Path(args.init))
    elif args.mode == trainer.MODE_F:
        # Desk-scale stand-in for a pretrained model: identity encoder.
        e_raw = dataset.shape[2]
        init = trainer.init_model(e_raw, e_raw, args.e_dim, args.seed)
    model = trainer.train(dataset, cfg, init=init)
    trainer.save_model(model, out / "model.mdl")
    with open(out / "loss_history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(model.loss_history):
            writer.writerow([epoch, repr(loss)])
    _dump_resolved(args, out, "train")
    print(f"train: {cfg.mode}, {cfg.epochs} epochs -> {out / 'model.mdl'}")
    return EXIT_OK


def cmd_fit(args) -> int:
    out = _out_dir(args)
    dataset = load_features(Path(args.train))
    model = trainer.load_model(Path(args.model))
    mode = ScaleMode.parse(args.scale_mode)
    bank = detector.fit_bank(dataset, model, mode, alpha=args.alpha, seed=args.seed)
    knn.save_bank(bank, out / "bank.bnk")
    _dump_resolved(args, out, "fit")
    print(f"fit: bank of {len(bank)} rows ({mode.value}, alpha={args.alpha}) "
          f"-> {out / 'bank.bnk'}")
    return EXIT_OK


def _score_split(path, tag, model, bank, k, mode):
    dataset = load_features(Path(path))
    return [(i, tag, s) for i, s in
            enumerate(detector.score_dataset(dataset, model, bank, k, mode))]


def cmd_score(args) -> int:
    out = _out_dir(args)
    model = trainer.load_model(Path(args.model))
    bank = knn.load_bank(Path(args.bank))
    mode = ScaleMode.parse(args.scale_mode)
    id_rows = _score_split(args.id_test, "id", model, bank, args.k, mode)
    ood_rows = _score_split(args.ood_test, "ood", model, bank, args.k, mode) \
        if args.ood_test else []
    eps = detector.select_threshold([s.score for _, _, s in id_rows], args.tpr_target)
    rows = [(i, tag, s, detector.decide(s, eps).verdict)
            for i, tag, s in id_rows + ood_rows]
    detector.write_scores_csv(out / "scores.csv", rows)
    _dump_resolved(args, out, "score")
    print(f"score: {len(rows)} examples (epsilon={eps!r}) -> {out / 'scores.csv'}")
    return EXIT_OK


def _read_scores_csv(path):
    id_scores, ood_scores = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            (id_scores if row["dataset_tag"] == "id" else ood_scores).append(
                float(row["score"]))
    return id_scores, ood_scores


def cmd_eval(args) -> int:
    out = _out_dir(args)
    id_scores, ood_scores = _read_scores_csv(Path(args.scores))
    id_acc = None
    if args.train and args.id_test and args.model:
        id_acc = metrics.id_accuracy(load_features(Path(args.id_test)),
                                     load_features(Path(args.train)),
                                     trainer.load_model(Path(args.model)))
    report = metrics.evaluate(id_scores, ood_scores, args.tpr_target, id_acc=id_acc)
    (out / "report.txt").write_text(report.to_text())
    metrics.write_report_csv(out / "report.csv", [("eval", report)])
    _dump_resolved(args, out, "eval")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    out = _out_dir(args)
    train_ds = load_features(Path(args.train))
    id_ds = load_features(Path(args.id_test))
    ood_ds = load_features(Path(args.ood_test))
    model = trainer.load_model(Path(args.model))
    mode = ScaleMode.parse(args.scale_mode)
    rows = []
    prev_ms = None
    for alpha, k in BENCH_ALPHA_K:
        bank = detector.fit_bank(train_ds, model, mode, alpha=alpha, seed=args.seed)
        k_eff = min(k, len(bank))
        start = time.perf_counter()
        id_scores = [s.score for s in detector.score_dataset(id_ds, model, bank, k_eff, mode)]
        ood_scores = [s.score for s in detector.score_dataset(ood_ds, model, bank, k_eff, mode)]
        elapsed = time.perf_counter() - start
        per_img_ms = 1000.0 * elapsed / (len(id_ds) + len(ood_ds))
        report = metrics.evaluate(id_scores, ood_scores, args.tpr_target)
        rows.append([alpha, k_eff, len(bank), repr(per_img_ms),
                     repr(report.fpr95), repr(report.auroc)])
        if prev_ms is not None and per_img_ms < prev_ms:
            print(f"bench: warning: latency decreased from alpha={alpha} "
                  f"({per_img_ms:.3f} < {prev_ms:.3f} ms)", file=sys.stderr)
        prev_ms = per_img_ms
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "k", "bank_rows", "mean_ms_per_image", "fpr", "auroc"])
        writer.writerows(rows)
    _dump_resolved(args, out, "bench")
    print(f"bench: {len(rows)} rows -> {out / 'bench.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mode-ood", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        _add(p, "--config", default=None, help="key = value config file")
        _add(p, "--seed", type=int, default=0)
        _add(p, "--threads", type=int, default=1, help="accepted for config echo")
        _add(p, "--out", default=".", help="output directory")

    p = sub.add_parser("gen", help="generate synthetic .fmb datasets")
    common(p)
    _add(p, "--classes", type=int, default=4)
    _add(p, "--per-class", type=int, default=50)
    _add(p, "--height", type=int, default=4)
    _add(p, "--width", type=int, default=4)
    _add(p, "--channels", type=int, default=8)
    _add(p, "--signal-strength", type=float, default=1.0)
    _add(p, "--clutter-strength", type=float, default=1.0)
    _add(p, "--ood-classes", type=int, default=1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a .fmb dataset")
    common(p)
    _add(p, "--train", required=True)
    _add(p, "--init", default=None, help=".mdl to start from (MODE-F)")
    _add(p, "--mode", default=trainer.MODE_F, choices=[trainer.MODE_T, trainer.MODE_F])
    _add(p, "--lam", type=float, default=1.0)
    _add(p, "--lr", type=float, default=0.1)
    _add(p, "--momentum", type=float, default=0.9)
    _add(p, "--weight-decay", type=float, default=1e-4)
    _add(p, "--epochs", type=int, default=30)
    _add(p, "--batch-n", type=int, default=8)
    _add(p, "--tau", type=float, default=0.1)
    _add(p, "--e-dim", type=int, default=16)
    _add(p, "--view-noise-sigma", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit", help="build a .bnk bank from training features")
    common(p)
    _add(p, "--train", required=True)
    _add(p, "--model", required=True)
    _add(p, "--scale-mode", default=detector.DEFAULT_SCALE_MODE.value)
    _add(p, "--alpha", type=float, default=100.0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("score", help="score datasets against a bank")
    common(p)
    _add(p, "--model", required=True)
    _add(p, "--bank", required=True)
    _add(p, "--id-test", required=True)
    _add(p, "--ood-test", default=None)
    _add(p, "--k", type=int, default=detector.DEFAULT_K)
    _add(p, "--scale-mode", default=detector.DEFAULT_SCALE_MODE.value)
    _add(p, "--tpr-target", type=float, default=0.95)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate a scores CSV")
    common(p)
    _add(p, "--scores", required=True)
    _add(p, "--tpr-target", type=float, default=0.95)
    _add(p, "--train", default=None, help="train .fmb (for ID accuracy)")
    _add(p, "--id-test", default=None, help="labeled ID test .fmb (for ID accuracy)")
    _add(p, "--model", default=None, help=".mdl (for ID accuracy)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency benchmark over subsampling levels")
    common(p)
    _add(p, "--train", required=True)
    _add(p, "--id-test", required=True)
    _add(p, "--ood-test", required=True)
    _add(p, "--model", required=True)
    _add(p, "--scale-mode", default=detector.DEFAULT_SCALE_MODE.value)
    _add(p, "--tpr-target", type=float, default=0.95)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv, namespace=argparse.Namespace(_given_flags=[]))
    try:
        _apply_config(args, parser)
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, CorruptionError, ValidationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, GradientError, NormalizationError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
