"""Command-line entry point: ``commgame <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
inputs), 3 numeric failure (a NaN or infinity reached the parameters).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import corpus, experiment, game, plotting
from .autodiff import ParamStore
from .eval import (TfidfBaseline, baseline_random, bleu, decode_test, evaluate_test, validate, write_pairs,
                   write_report_csv, write_summary)
from .seqmodels import ModelConfig, init_captioner, init_translator

log = logging.getLogger("commgame")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
METRIC_COLUMNS = ("step", "epoch", "mean_reward", "val_bleu")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- flags


def _game_flags(p, pretrain=False):
    d = game.GameConfig()
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--clip-norm", type=float, default=d.clip_norm)
    if pretrain:
        p.add_argument("--epochs", type=int, default=d.pretrain_epochs)
        p.add_argument("--lr", type=float, default=d.lr_pretrain)
        return
    p.add_argument("--epochs", type=int, default=d.max_epochs)
    p.add_argument("--lr-translator", type=float, default=d.lr_translator)


def _model_flags(p):
    d = ModelConfig()
    p.add_argument("--embed-dim", type=int, default=d.embed_dim)
    p.add_argument("--hidden-dim", type=int, default=d.hidden_dim)
    p.add_argument("--attention-dim", type=int, default=d.attention_dim)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="commgame", description="Zero-resource translation through a two-agent captioning game.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, required=True)
        return p

    p = command("gen-data", "generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500, help="documents per side")
    p.add_argument("--noise", type=float, default=experiment.DEFAULT_NOISE)

    p = command("pretrain-captioner", "maximum-likelihood captioner training on D_zx")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    _game_flags(p, pretrain=True)
    _model_flags(p)

    p = command("train", "game training of the translator")
    p.add_argument("--mode", choices=("pre", "joint"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--captioner", required=True, help="pre-trained captioner checkpoint")
    p.add_argument("--out", required=True, help="run directory")
    _game_flags(p)
    _model_flags(p)
    d = game.GameConfig()
    p.add_argument("--beam-k", type=int, default=d.beam_k)
    p.add_argument("--lr-captioner", type=float, default=d.lr_captioner)
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam)
    p.add_argument("--freeze-epochs", type=int, default=d.freeze_captioner_epochs)
    p.add_argument("--val-beam", type=int, default=d.val_beam)

    p = command("eval", "test BLEU of a translator checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--translator", required=True)
    p.add_argument("--captioner", help="also report two-step validation BLEU")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--dump-pairs", action="store_true")

    p = command("baseline", "retrieval baselines")
    p.add_argument("--kind", choices=("random", "tfidf"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--dump-pairs", action="store_true")

    p = command("oracle-train", "translator trained on the parallel pairs of the D_zy images")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    _game_flags(p)
    _model_flags(p)

    p = command("export-metrics", "merge run metrics and render figures")
    p.add_argument("runs", nargs="+", help="run directories holding metrics.csv")
    p.add_argument("--out", required=True)

    p = command("experiment", "the paired-seed comparison of all systems")
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--n", type=int, default=500, help="documents per side")
    p.add_argument("--noise", type=float, default=experiment.DEFAULT_NOISE)
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------- helpers


def _require(path, kind="file"):
    ok = os.path.isdir(path) if kind == "dir" else os.path.isfile(path)
    if not ok:
        raise DataError(f"missing {kind}: {path}")
    return path


def _load_split(path) -> corpus.CorpusSplit:
    _require(path, "dir")
    try:
        return corpus.load_corpus(path)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot read corpus {path}: {e}") from e


def _load_params(path) -> ParamStore:
    _require(path)
    try:
        return ParamStore.load(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e


def _model_config(args) -> ModelConfig:
    return ModelConfig(src_vocab=len(corpus.SOURCE_VOCAB), tgt_vocab=len(corpus.TARGET_VOCAB),
                       embed_dim=args.embed_dim, hidden_dim=args.hidden_dim, attention_dim=args.attention_dim,
                       feature_dim=corpus.FEATURE_DIM, locations=corpus.LOCATIONS)


def _game_config(args) -> game.GameConfig:
    cfg = game.GameConfig(seed=args.seed, batch_size=args.batch_size, clip_norm=args.clip_norm)
    if args.command == "pretrain-captioner":
        return replace(cfg, pretrain_epochs=args.epochs, lr_pretrain=args.lr)
    cfg = replace(cfg, max_epochs=args.epochs, lr_translator=args.lr_translator)
    if args.command == "train":
        cfg = replace(cfg, beam_k=args.beam_k, lr_captioner=args.lr_captioner, lam=args.lam,
                      freeze_captioner_epochs=args.freeze_epochs, val_beam=args.val_beam)
    return cfg


def _log_config(args, **resolved) -> dict:
    config = {"command": args.command, "args": {k: v for k, v in vars(args).items() if k != "command"}}
    config.update({k: asdict(v) if hasattr(v, "__dataclass_fields__") else v for k, v in resolved.items()})
    log.info("resolved configuration: %s", json.dumps(config, sort_keys=True))
    return config


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _fmt(v):
    return "" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def read_metrics(path) -> list[dict]:
    _require(path)
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise DataError(f"{path}: expected columns {','.join(METRIC_COLUMNS)}")
        for r in reader:
            rows.append({"step": int(r["step"]), "epoch": int(r["epoch"]),
                         "mean_reward": float(r["mean_reward"]) if r["mean_reward"] else None,
                         "val_bleu": float(r["val_bleu"]) if r["val_bleu"] else None})
    return rows


def _report(out, title, report, extra=None, pairs=None):
    os.makedirs(out, exist_ok=True)
    metrics = {"test_bleu": report.score}
    for n, p in enumerate(report.precisions, 1):
        metrics[f"p{n}"] = p
    metrics.update(brevity_penalty=report.brevity_penalty, hyp_length=report.hyp_length,
                   ref_length=report.ref_length)
    metrics.update(extra or {})
    write_report_csv(os.path.join(out, "report.csv"), metrics)
    write_summary(os.path.join(out, "summary.txt"), title, metrics)
    if pairs is not None:
        write_pairs(os.path.join(out, "pairs.tsv"), pairs, corpus.SOURCE_VOCAB, corpus.TARGET_VOCAB)
    print(f"test BLEU: {report.score:.2f}")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.noise < 0:
        raise UsageError("--noise must be >= 0")
    _log_config(args)
    split = corpus.make_splits(args.n, args.seed, args.noise)
    corpus.save_corpus(split, args.out)
    log.info("wrote %d + %d documents to %s", len(split.D_zx), len(split.D_zy), args.out)


def cmd_pretrain(args):
    split = _load_split(args.data)
    mc, cfg = _model_config(args), _game_config(args)
    _log_config(args, model=mc, game=cfg)
    cap = game.pretrain_captioner(split.D_zx, cfg, init_captioner(mc, args.seed), D_val=split.D_zx_val)
    cap.save(args.out)


def cmd_train(args):
    split = _load_split(args.data)
    captioner = _load_params(args.captioner)
    mc, cfg = _model_config(args), _game_config(args)
    os.makedirs(args.out, exist_ok=True)
    config = _log_config(args, model=mc, game=cfg)
    _write_json(os.path.join(args.out, "config.json"), config)
    translator = init_translator(mc, experiment.translator_seed(args.seed))
    ckpt_dir = os.path.join(args.out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)

    def on_epoch(state):
        state.translator.save(os.path.join(ckpt_dir, f"translator_epoch{state.epoch:03d}.ckpt"))
        if args.mode == "joint":
            state.captioner.save(os.path.join(ckpt_dir, f"captioner_epoch{state.epoch:03d}.ckpt"))
        write_metrics(os.path.join(args.out, "metrics.csv"), state.history)

    if args.mode == "pre":
        state = game.train_pre(captioner, translator, split.D_zy, cfg, D_val=split.D_zy_val, on_epoch=on_epoch)
    else:
        state = game.train_joint(captioner, translator, split.D_zy, split.D_zx, cfg, D_val=split.D_zy_val,
                                 on_epoch=on_epoch)
    write_metrics(os.path.join(args.out, "metrics.csv"), state.history)
    state.best_translator.save(os.path.join(args.out, "translator.ckpt"))
    state.best_captioner.save(os.path.join(args.out, "captioner.ckpt"))
    print(f"best validation BLEU: {state.best_val:.2f}")


def cmd_eval(args):
    split = _load_split(args.data)
    translator = _load_params(args.translator)
    captioner = _load_params(args.captioner) if args.captioner else None
    _log_config(args)
    if not split.test_pairs:
        raise DataError(f"{args.data}: no test pairs")
    report = evaluate_test(translator, split.test_pairs, args.beam)
    extra = {"n_test": len(split.test_pairs)}
    if captioner is not None:
        extra["val_bleu"] = validate(captioner, translator, split.D_zy_val, args.beam).bleu.score
    pairs = decode_test(translator, split.test_pairs, args.beam) if args.dump_pairs else None
    _report(args.out, f"evaluation of {args.translator}", report, extra, pairs)


def cmd_baseline(args):
    split = _load_split(args.data)
    _log_config(args)
    if args.kind == "random":
        fn = baseline_random(split.D_zy, np.random.default_rng([args.seed, 7]))
    else:
        fn = TfidfBaseline(split.D_zx, split.D_zy)
    outputs = [(x, fn(x)) for x, _ in split.test_pairs]
    report = bleu([y_hat for _, y_hat in outputs], [[y] for _, y in split.test_pairs])
    _report(args.out, f"{args.kind} baseline", report, {"n_test": len(split.test_pairs)},
            outputs if args.dump_pairs else None)


def cmd_oracle(args):
    split = _load_split(args.data)
    mc, cfg = _model_config(args), _game_config(args)
    _log_config(args, model=mc, game=cfg)
    pairs = split.parallel_pairs()
    if not pairs:
        raise DataError(f"{args.data}: no oracle pairs")
    game.train_oracle(pairs, cfg, init_translator(mc, experiment.translator_seed(args.seed))).save(args.out)


def cmd_export(args):
    _log_config(args)
    histories = {}
    for run in args.runs:
        name = os.path.basename(os.path.normpath(run))
        histories[name] = read_metrics(os.path.join(run, "metrics.csv"))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(("run",) + METRIC_COLUMNS)
        for name, rows in histories.items():
            for row in rows:
                w.writerow([name] + [_fmt(row[c]) for c in METRIC_COLUMNS])
    plotting.plot_training(histories, os.path.join(args.out, "training.png"))


def cmd_experiment(args):
    cfg = replace(experiment.ExperimentConfig(), n_per_side=args.n, noise_sigma=args.noise)
    _log_config(args, experiment=cfg)
    os.makedirs(args.out, exist_ok=True)
    results = []
    for s in range(args.seed, args.seed + args.n_seeds):
        results.append(experiment.run_seed(s, replace(cfg, with_checkpoints=(s == args.seed))))
    report = experiment.write_report(results, args.out)
    for k, v in report["median"].items():
        print(f"median test BLEU {k}: {v:.2f}")
    print(f"final test BLEU (joint, median): {report['median']['joint']:.2f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-captioner": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "oracle-train": cmd_oracle,
    "export-metrics": cmd_export,
    "experiment": cmd_experiment,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"commgame: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(logging.INFO)
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(f"commgame: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"commgame: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (game.NumericError, FloatingPointError) as e:
        print(f"commgame: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
