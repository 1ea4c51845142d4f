"""Command-line entry point: ``credgnss {simulate,train,eval,gradcheck}``.

Exit codes: 0 success, 1 validation error (bad flags, config or file), 2
runtime or numerical error. Output paths default to ``$CREDGNSS_OUTPUT_DIR``
(or the working directory) when not given.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import dataio, evaluation, gradcheck, sim
from .pipeline import prepare_run
from .solver import SolverError
from .trainer import Objective, train, write_log_csv
from .weighting import SchemeKind, WeightScheme, WeightingError
from .wgn import load_model, save_model

OUTPUT_ENV = "CREDGNSS_OUTPUT_DIR"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("credgnss")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_path(path: str | None, default_name: str) -> str:
    if path:
        return path
    return os.path.join(os.environ.get(OUTPUT_ENV, "."), default_name)


def _load_config(path):
    return dataio.read_config(path) if path else dataio.RunConfig()


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="credgnss", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--config", help="YAML run config (scenario section is used)")
    s.add_argument("--preset", choices=sorted(sim.presets()))
    s.add_argument("--epochs", type=_positive)
    s.add_argument("--seed", type=int)
    s.add_argument("--start-time", type=float)
    s.add_argument("--out")

    t = sub.add_parser("train", help="train a weighting network")
    t.add_argument("--dataset", required=True)
    t.add_argument("--config")
    t.add_argument("--objective", choices=[o.value for o in Objective])
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--passes", type=_positive, help="passes over the training windows")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--log-csv")

    e = sub.add_parser("eval", help="evaluate a checkpoint or a classical scheme")
    e.add_argument("--dataset", required=True)
    g = e.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--scheme", choices=[k.value for k in SchemeKind])
    e.add_argument("--config")
    e.add_argument("--out-dir")
    e.add_argument("--diagnose-epoch", type=int, action="append", default=[])

    c = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    c.add_argument("--dataset", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--start", type=int, default=0, help="first epoch row of the audited window")
    c.add_argument("--tolerance", type=float, default=gradcheck.DEFAULT_TOLERANCE)
    return p


def cmd_simulate(args) -> int:
    if args.preset and args.config:
        raise dataio.ConfigError("simulate: give either --preset or --config, not both")
    cfg = sim.presets()[args.preset] if args.preset else _load_config(args.config).scenario
    overrides = {k: v for k, v in (("n_epochs", args.epochs), ("seed", args.seed),
                                   ("start_time", args.start_time)) if v is not None}
    cfg = dataclasses.replace(cfg, **overrides)
    run = sim.generate(cfg)
    out = _out_path(args.out, f"{cfg.name}_{cfg.seed}.jsonl")
    meta = dict(run.metadata, scenario=cfg.to_dict())
    dataio.write_dataset(dataio.Dataset(run.origin, run.epochs, meta), out)
    print(f"wrote {len(run.epochs)} epochs to {out}")
    return EXIT_OK


def _prepared(path):
    ds = dataio.read_dataset(path)
    return ds, prepare_run(ds.epochs, ds.origin)


def cmd_train(args) -> int:
    rc = _load_config(args.config)
    ds = dataio.read_dataset(args.dataset)
    if not ds.has_truth:
        raise dataio.FormatError(f"{args.dataset}: training needs truth_position on every epoch")
    cfg = rc.train_config()
    over = {k: v for k, v in (("objective", args.objective), ("alpha", args.alpha), ("beta", args.beta),
                              ("epochs_over_data", args.passes), ("seed", args.seed)) if v is not None}
    try:
        cfg = dataclasses.replace(cfg, **over)
    except ValueError as exc:
        raise dataio.ConfigError(f"train: {exc}") from exc
    run = prepare_run(ds.epochs, ds.origin)
    out = _out_path(args.out, f"wgn_{cfg.objective.value}.json")
    result = train(run, cfg, progress=lambda p, tr, va: log.info("pass %d train %.4f val %.4f", p, tr, va))
    save_model(result.model, out)
    log_csv = args.log_csv or os.path.splitext(out)[0] + "_log.csv"
    write_log_csv(result.state.history, log_csv)
    print(f"wrote checkpoint {out} and log {log_csv}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = _load_config(args.config)
    ds, run = _prepared(args.dataset)
    if not run.has_truth:
        raise dataio.FormatError(f"{args.dataset}: evaluation needs truth_position on every epoch")
    if args.checkpoint:
        try:
            model = load_model(args.checkpoint)
        except ValueError as exc:
            raise dataio.FormatError(f"{args.checkpoint}: {exc}") from exc
        est = evaluation.estimate_with_model(run, model, name=os.path.basename(args.checkpoint))
    else:
        scheme = rc.scheme if rc.scheme.kind.value == args.scheme else WeightScheme.named(args.scheme)
        est = evaluation.estimate_with_scheme(run, scheme)
    out_dir = _out_path(args.out_dir, "eval")
    ev = evaluation.evaluate_run(run, est, es_samples=rc.eval.es_samples, seed=rc.eval.seed)
    wanted = list(args.diagnose_epoch) + list(rc.eval.diagnose_epochs)
    diags = []
    for epoch in wanted:
        hits = np.flatnonzero(run.packed.epoch_index == epoch)
        if hits.size == 0:
            raise dataio.ConfigError(f"--diagnose-epoch: epoch {epoch} not in {args.dataset}")
        diags.append(evaluation.satellite_diagnostics(run, est, int(hits[0])))
    paths = evaluation.export_artifacts(ev, diags, out_dir)
    summary = os.path.join(out_dir, "summary.json")
    evaluation.write_summary([ev.summary()], summary, {"dataset": os.path.basename(args.dataset)})
    print(json.dumps(ev.summary(), sort_keys=True))
    print(f"wrote {summary} and {len(paths)} artifact files")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _, run = _prepared(args.dataset)
    if not 0 <= args.start <= run.n_epochs - 5:
        raise dataio.ConfigError(f"--start {args.start}: a 5-epoch window must fit in {run.n_epochs} epochs")
    report = gradcheck.run_audit(run, start=args.start, seed=args.seed, tolerance=args.tolerance)
    print(report.table())
    if not report.passed:
        print("gradient audit failed for: " + ", ".join(report.offenders), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"credgnss: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (dataio.ConfigError, dataio.FormatError, sim.SimulationError, WeightingError, FileNotFoundError,
            evaluation.EvaluationError) as exc:
        print(f"credgnss: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SolverError, ValueError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"credgnss: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
