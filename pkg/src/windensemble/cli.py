"""
Command-line entry point
========================

Subcommands::

    synth      write a synthetic corpus (series, farm metadata, regime labels)
    train      fit the pool, embeddings and agent; write checkpoints
    evaluate   score frozen checkpoints on the test split
    compare    full experiment over all repetitions; write the report
    gradcheck  finite-difference gradient suite

Every subcommand writes ``config.resolved.json`` next to its outputs. The
output directory is ``--out``, else ``$WINDENSEMBLE_OUT``, else the
config's ``output_dir``. Flags override values from ``--config``.

Exit codes: 0 success, 1 validation or data error, 2 bad flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from . import gradcheck as gc
from .config import RunConfig, canonical_json, config_from_dict, derive_seed, load_config
from .data import CsvSchema, gen_synthetic, write_farm_meta, write_series_csv
from .errors import ConfigError, WindEnsembleError

ENV_OUT = "WINDENSEMBLE_OUT"
GRADCHECK_TOL = 1e-4

logger = logging.getLogger("windensemble")


def _parser():
    p = argparse.ArgumentParser(prog="windensemble", description="Graph-embedded RL ensembles for wind power.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="run configuration (JSON)")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", help=f"output directory (default: ${ENV_OUT} or the config's output_dir)")
        return sp

    common(sub.add_parser("synth", help="write a synthetic corpus"))
    t = common(sub.add_parser("train", help="fit pool, embeddings and agent; write checkpoints"))
    t.add_argument("--rep", type=int, default=0, help="repetition index (default 0)")
    e = common(sub.add_parser("evaluate", help="score frozen checkpoints"), config=False)
    e.add_argument("--checkpoint", required=True, help="directory written by 'train'")
    e.add_argument("--config", help="run configuration (default: the checkpoint's resolved config)")
    c = common(sub.add_parser("compare", help="full experiment; write the report"))
    c.add_argument("--repetitions", type=int, help="number of seeded repetitions")
    g = common(sub.add_parser("gradcheck", help="finite-difference gradient suite"), config=False)
    g.add_argument("--points", type=int, default=100, help="random points per case (default 100)")
    return p


def _resolve(args, config_path=None) -> RunConfig:
    path = config_path or getattr(args, "config", None)
    cfg = load_config(path) if path else config_from_dict({})
    over = {"seed": args.seed}
    if getattr(args, "repetitions", None) is not None:
        over["repetitions"] = args.repetitions
    cfg = cfg.with_overrides(**over)
    out = args.out or os.environ.get(ENV_OUT) or cfg.output_dir
    return replace(cfg, output_dir=str(out))


def _write_resolved(out_dir, doc):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(canonical_json(doc))
    return out


def cmd_synth(args):
    cfg = _resolve(args)
    if cfg.synthetic is None:
        raise ConfigError("synthetic", "synth needs a synthetic corpus spec")
    out = _write_resolved(cfg.output_dir, cfg.to_dict())
    frames, farms, labels = gen_synthetic(cfg.synthetic, derive_seed(cfg.seed, 0, "corpus"))
    write_series_csv(frames, out / "series.csv", CsvSchema())
    write_farm_meta(farms, out / "farms.csv")
    with open(out / "labels.csv", "w") as fh:
        fh.write("step,regime\n")
        fh.writelines(f"{i},{lab}\n" for i, lab in enumerate(labels))
    # a ready-to-use config reading the emitted files back
    doc = cfg.to_dict()
    doc.pop("synthetic")
    doc["csv"] = {"series": [str(out / "series.csv")], "metadata": str(out / "farms.csv")}
    (out / "corpus.config.json").write_text(canonical_json(doc))
    print(f"wrote {len(frames)} farms x {len(labels)} steps to {out}")
    return 0


def cmd_train(args):
    cfg = _resolve(args)
    out = _write_resolved(cfg.output_dir, cfg.to_dict())
    corpus = ev.load_corpus(cfg)
    ev._boundaries(cfg, corpus.power.shape[1])
    trained = ev.train_pipeline(cfg, corpus, rep=args.rep)
    ev.save_pipeline(trained, out / "checkpoint")
    print(f"checkpoints written to {out / 'checkpoint'}")
    return 0


def cmd_evaluate(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_dir():
        raise ConfigError("checkpoint", f"directory not found: {ckpt}")
    cfg_path = args.config
    if cfg_path is None:
        for cand in (ckpt / "config.resolved.json", ckpt.parent / "config.resolved.json"):
            if cand.exists():
                cfg_path = cand
                break
        else:
            raise ConfigError("config", f"no config.resolved.json next to {ckpt}; pass --config")
    cfg = _resolve(args, cfg_path)
    out = _write_resolved(cfg.output_dir, cfg.to_dict())
    corpus = ev.load_corpus(cfg)
    trained = ev.load_pipeline(ckpt)
    rep = ev.evaluate_pipeline(cfg, corpus, trained)
    report = ev.assemble_report(cfg, [rep], corpus.labels)
    report.write(out)
    print(report.to_text(), end="")
    return 0


def cmd_compare(args):
    cfg = _resolve(args)
    out = _write_resolved(cfg.output_dir, cfg.to_dict())
    report = ev.run_experiment(cfg)
    report.write(out)
    print(report.to_text(), end="")
    return 0


def cmd_gradcheck(args):
    if args.points < 1:
        raise ConfigError("points", "must be >= 1")
    seed = 0 if args.seed is None else args.seed
    out = _write_resolved(args.out or os.environ.get(ENV_OUT) or "runs",
                          {"command": "gradcheck", "points": args.points, "seed": seed})
    rows = gc.run_suite(points=args.points, seed=seed)
    worst = max(r.max_rel_error for r in rows)
    for r in rows:
        print(f"{r.name:<22} points={r.points:<4} max_rel_error={r.max_rel_error:.3e}  {r.seconds:.2f}s")
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:.0e})")
    (out / "gradcheck.json").write_text(canonical_json(
        {"tolerance": GRADCHECK_TOL, "max_rel_error": worst,
         "cases": [{"name": r.name, "points": r.points, "max_rel_error": r.max_rel_error} for r in rows]}))
    return 0 if worst < GRADCHECK_TOL and np.isfinite(worst) else 1


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate, "compare": cmd_compare,
            "gradcheck": cmd_gradcheck}


def run(argv=None):
    """Parse ``argv`` and dispatch; returns the process exit code."""
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 1
    except (WindEnsembleError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
