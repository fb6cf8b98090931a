"""Command-line entry point: ``genmc {train,eval,clue,synth,report,bench}``.

Exit codes: 0 success, 2 missing file, 3 validation failure, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import tensor as T
from .baselines import BaselineKind, PipelineError
from .checkpoint import CheckpointError
from .data import DataError, dump_jsonl, gen_synth_copy, gen_synth_twohop, load_jsonl, write_jsonl
from .training import (TrainConfig, bench_latency, evaluate_accuracy, format_kv, load_run,
                       make_vocab, parse_kv, save_run, split_config, train_model)
from .transformer import ConfigError, ModelConfig

EXIT_MISSING, EXIT_INVALID, EXIT_NUMERIC = 2, 3, 4


def _load_many(paths) -> list:
    out = []
    for p in paths:
        out += load_jsonl(p)
    return out


def resolve_config(config_path: str | None, overrides: list[str]) -> dict[str, str]:
    values = {}
    if config_path:
        values.update(parse_kv(Path(config_path).read_text(), config_path))
    if overrides:
        values.update(parse_kv("\n".join(overrides), "--set"))
    return values


def cmd_train(args) -> int:
    values = resolve_config(args.config, args.set)
    values["model"] = args.model
    if args.seed is not None:
        values["seeds"] = str(args.seed)
    mvals, tvals, run = split_config(values)
    cfg = TrainConfig(**tvals)
    train, dev = _load_many(args.train), load_jsonl(args.dev)
    test = load_jsonl(args.test) if args.test else []
    vocab = make_vocab([train, dev, test], run.get("vocab_max"))
    model_cfg = ModelConfig(**{**mvals, "vocab_size": len(vocab)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = dict(model=args.model, **model_cfg.to_dict(), **dataclasses.asdict(cfg),
                    **{k: v for k, v in run.items() if k != "model"})
    (out / "config.txt").write_text(format_kv(resolved))
    run_opts = {k: v for k, v in run.items() if k in ("clue_max_len", "t2t_target", "vocab_max")}
    entries = ["config.txt"]
    log = (lambda s: print(s, file=sys.stderr)) if args.verbose else None
    for seed in cfg.seeds:
        model, res = train_model(args.model, model_cfg, vocab, train, dev, test, cfg, seed,
                                 run.get("clue_max_len"), run.get("t2t_target", "id"), log=log)
        save_run(out / f"seed-{seed}", args.model, model, vocab, model_cfg, cfg, res, run_opts)
        entries.append(f"seed-{seed}/")
        test_txt = "-" if res.test_accuracy is None else f"{res.test_accuracy:.4f}"
        print(f"{args.model}\tseed={seed}\tbest_epoch={res.best_epoch}\t"
              f"dev={res.dev_accuracy:.4f}\ttest={test_txt}")
    (out / "MANIFEST").write_text("\n".join(entries) + "\n")
    return 0


def cmd_eval(args) -> int:
    model, vocab, _ = load_run(args.ckpt)
    data = load_jsonl(args.data)
    acc = evaluate_accuracy(model, data, vocab)
    print(f"accuracy\t{acc!r}\tn={len(data)}")
    return 0


def cmd_clue(args) -> int:
    model, vocab, _ = load_run(args.ckpt)
    if not hasattr(model, "clues"):
        raise PipelineError(f"model kind {getattr(model, 'kind', '?')} does not generate clues")
    data = load_jsonl(args.data)
    lines = []
    for s in range(0, len(data), 64):
        chunk = data[s:s + 64]
        for ex, c in zip(chunk, model.clues(model.prepare(chunk, vocab))):
            text = vocab.decode(c).replace("\t", "\\t").replace("\n", "\\n")
            lines.append(f"{ex.id}\t{text}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    header = dict(task=args.task, n=args.n, options=args.options, vocab=args.vocab, seed=args.seed)
    if args.task == "copy":
        exs = gen_synth_copy(args.n, args.vocab, args.options, args.seed)
    else:
        header.update(part=args.part, sample_seed=args.sample_seed, bridge_fraction=args.bridge_fraction,
                      holdout_fraction=args.holdout_fraction)
        exs = gen_synth_twohop(args.n, args.vocab, args.options, args.seed, part=args.part,
                               sample_seed=args.sample_seed, holdout_fraction=args.holdout_fraction,
                               bridge_fraction=args.bridge_fraction)
    if args.out:
        write_jsonl(args.out, exs, header)
    else:
        sys.stdout.write(dump_jsonl(exs, header))
    return 0


def cmd_report(args) -> int:
    from .report import write_report
    runs = Path(args.runs)
    if not runs.is_dir():
        raise FileNotFoundError(str(runs))
    table = write_report(runs, Path(args.out) if args.out else runs)
    sys.stdout.write(table)
    return 0


def cmd_bench(args) -> int:
    model, vocab, values = load_run(args.ckpt)
    data = load_jsonl(args.data)
    if args.limit:
        data = data[:args.limit]
    r = bench_latency(model, data, vocab, values)
    print("model\tn\tmean_seconds\tstd_seconds\tconfig_hash")
    print(f"{r['model']}\t{r['n']}\t{r['mean_seconds']:.6f}\t{r['std_seconds']:.6f}\t{r['config_hash']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="genmc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model kind over its seeds")
    t.add_argument("--model", required=True, choices=[k.value for k in BaselineKind])
    t.add_argument("--train", required=True, action="append", help="repeat to concatenate sets")
    t.add_argument("--dev", required=True)
    t.add_argument("--test")
    t.add_argument("--config", help="flat key = value file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value (repeatable)")
    t.add_argument("--seed", type=int, help="train this seed only")
    t.add_argument("--out", required=True)
    t.add_argument("--verbose", action="store_true", help="per-epoch log on stderr")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "accuracy of a saved run"),
                              ("clue", cmd_clue, "dump generated clues: id TAB text"),
                              ("bench", cmd_bench, "per-question inference latency")):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--ckpt", required=True, help="run directory (one seed)")
        c.add_argument("--data", required=True)
        if name == "clue":
            c.add_argument("--out")
        if name == "bench":
            c.add_argument("--limit", type=int)
        c.set_defaults(func=func)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--task", required=True, choices=["copy", "twohop"])
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--options", type=int, default=4)
    s.add_argument("--vocab", type=int, default=200)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--part", choices=["all", "train", "heldout"], default="all")
    s.add_argument("--sample-seed", type=int)
    s.add_argument("--bridge-fraction", type=float, default=0.0)
    s.add_argument("--holdout-fraction", type=float, default=0.2)
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("report", help="aggregate run directories into report.tsv and figures")
    r.add_argument("--runs", required=True)
    r.add_argument("--out", help="output directory (default: the runs directory)")
    r.set_defaults(func=cmd_report)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: missing file: {e.filename or e}", file=sys.stderr)
        return EXIT_MISSING
    except (DataError, ConfigError, CheckpointError, PipelineError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (T.NumericError, FloatingPointError) as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())
