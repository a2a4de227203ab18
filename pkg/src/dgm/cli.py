"""``dgm`` command line: run, eval, report, selftest.

Exit codes: 0 success, 1 a failed check or run, 2 bad usage or config.
"""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, load_config
from .trainer import restore_trainer, run_stream, write_csv

log = logging.getLogger("dgm")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    ap = _Parser(prog="dgm", description="Continual learning with a masked, growing generative memory.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train over a task stream and write a run directory")
    run.add_argument("--config", help="sectioned key=value config file")
    run.add_argument("--out", required=True, help="run directory to create")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config key, e.g. replay.enabled=false (repeatable)")
    run.add_argument("--seed", type=int, help="override the run seed")

    ev = sub.add_parser("eval", help="reload a checkpoint and evaluate it on the test split")
    ev.add_argument("path", help="checkpoint file or run directory (latest checkpoint is used)")

    rep = sub.add_parser("report", help="summarize a run directory from its CSV artifacts")
    rep.add_argument("run_dir")
    rep.add_argument("--out", help="where to write tidy CSVs (default: RUN_DIR/report)")

    st = sub.add_parser("selftest", help="check core invariants")
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--fault", choices=["gate-bypass"], help=argparse.SUPPRESS)
    return ap


# ---------------------------------------------------------------- run

def cmd_run(args):
    if args.config and not Path(args.config).is_file():
        raise ConfigError(f"config file not found: {args.config}")
    cfg = load_config(args.config, args.overrides, args.seed)
    trainer = run_stream(cfg, out_dir=args.out)
    for t in sorted(trainer.ledger.accuracy):
        print(f"A_{t} = {trainer.ledger.accuracy[t]:.4f}  generator width {trainer.ledger.network_size[t]}")
    print(f"run directory: {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def latest_checkpoint(path):
    path = Path(path)
    if path.is_file():
        return path
    found = sorted(path.glob("checkpoint_t*.bin"), key=lambda p: int(p.stem.split("_t")[-1]))
    if not found:
        raise FileNotFoundError(f"no checkpoint_t*.bin under {path}")
    return found[-1]


def cmd_eval(args):
    path = latest_checkpoint(args.path)
    trainer = restore_trainer(ckpt.load(path))
    t = max(trainer.mem.finished)
    acc, per_task, _ = trainer.evaluate(t, record=False)
    print(f"{path.name}: tasks seen {t}, accuracy {acc:.4f}")
    for j, a in per_task.items():
        print(f"  task {j}: {a:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- report

def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args):
    run_dir = Path(args.run_dir)
    metrics_path = run_dir / "metrics.csv"
    if not metrics_path.exists():
        log.warning("%s has no metrics.csv; nothing to report", run_dir)
        print(f"warning: {run_dir} contains no completed run artifacts")
        return EXIT_OK
    metrics = _read_csv(metrics_path)
    overall = [r for r in metrics if r["scope"] == "all"]
    if not overall:
        print(f"warning: {metrics_path} has no completed checkpoints")
        return EXIT_OK
    print("checkpoint  classes  accuracy  generator width")
    for r in overall:
        print(f"{int(r['checkpoint']):>10}  {int(r['classes_seen']):>7}  {float(r['accuracy']):.4f}  "
              f"{int(r['network_size']):>15}")

    last = int(overall[-1]["checkpoint"])
    cm_path = run_dir / f"confusion_t{last}.csv"
    if cm_path.exists():
        rows = _read_csv(cm_path)
        labels = [c for c in rows[0] if c != "true"]
        cm = np.array([[int(r[c]) for c in labels] for r in rows])
        off = cm.sum() - np.trace(cm)
        print(f"confusion at checkpoint {last}: {int(np.trace(cm))} correct, {int(off)} misclassified")
        if off:
            cols = cm.sum(axis=0) - np.diag(cm)
            top = int(np.argmax(cols))
            print(f"  most errors predicted as class {labels[top].removeprefix('pred_')} "
                  f"({cols[top] / off:.1%} of misclassified mass)")

    growth = _read_csv(run_dir / "growth.csv") if (run_dir / "growth.csv").exists() else []
    added = sum(int(r["neurons_added"]) for r in growth)
    reserved = sum(int(r["delta"]) for r in growth)
    print(f"total growth: {added} neurons added, {reserved} units reserved over {len({r['task'] for r in growth})} tasks")

    expected = _expected_tasks(run_dir)
    if expected and last < expected:
        print(f"warning: incomplete run, {last} of {expected} tasks finished")

    out = Path(args.out) if args.out else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    acc_rows = [{"task": int(r["checkpoint"]), "scope": r["scope"], "accuracy": float(r["accuracy"])}
                for r in metrics]
    write_csv(out / "accuracy_vs_task.csv", ["task", "scope", "accuracy"], acc_rows)
    occ_path = run_dir / "occupation.csv"
    occ = _read_csv(occ_path) if occ_path.exists() else []
    occ_rows = [{"step": k, "task": int(r["task"]), "epoch": int(r["epoch"]), "layer": int(r["layer"]),
                 "fraction": float(r["fraction"])} for k, r in enumerate(occ)]
    write_csv(out / "occupation_vs_epoch.csv", ["step", "task", "epoch", "layer", "fraction"], occ_rows)
    print(f"tidy CSVs written to {out}")
    return EXIT_OK


def _expected_tasks(run_dir):
    manifest = run_dir / "manifest.json"
    if not manifest.exists():
        return None
    with open(manifest, encoding="utf-8") as fh:
        return len(json.load(fh)["stream"]["tasks"])


# ---------------------------------------------------------------- selftest

def cmd_selftest(args):
    from .selftest import run_all
    results = run_all(fault=args.fault, seed=args.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    failed = [name for name, ok, _ in results if not ok]
    if failed:
        print(f"failed properties: {', '.join(failed)}")
        return EXIT_FAIL
    return EXIT_OK


COMMANDS = {"run": cmd_run, "eval": cmd_eval, "report": cmd_report, "selftest": cmd_selftest}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"dgm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"dgm: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ckpt.CheckpointError) as exc:
        print(f"dgm: {exc}", file=sys.stderr)
        return EXIT_USAGE if args.command in ("eval",) else EXIT_FAIL
    except Exception as exc:
        log.exception("command failed")
        print(f"dgm: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
