#!/usr/bin/env python3
"""Deep-Mobility Handover Lab: command-line entry point.

    gen-dataset  scenario  ->  A3-driven, hindsight-labelled KPI CSV
    train        KPI CSV   ->  model JSON (scaler embedded) + history CSV
    eval         model + KPI CSV  ->  loss / accuracy
    simulate     scenario + one policy  ->  report, event log, per-cell breakdown
    compare      scenario + several policies  ->  side-by-side table

Every artifact gets a ``<artifact>.manifest.json`` next to it, and every
command appends one row to ``run_log.csv`` in its output directory.

Usage:
    python tools/run_lab.py gen-dataset --scenario corridor --out out/data.csv --seed 1
    python tools/run_lab.py train --data out/data.csv --out out/model.json --epochs 20
    python tools/run_lab.py simulate --scenario corridor --policy deep:out/model.json \\
        --report out/report.csv
"""

import argparse
import logging
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

# ---------------------------------------------------------------------------
# Path setup: allow importing sibling modules without a package __init__
# ---------------------------------------------------------------------------
sys.path.insert(0, str(Path(__file__).resolve().parent))

import config                                   # noqa: E402
import dataset                                  # noqa: E402
import nn                                       # noqa: E402
import sim                                      # noqa: E402
import tables                                   # noqa: E402
import trainer                                  # noqa: E402
from errors import DataError, LabError, UsageError  # noqa: E402

__version__ = "1.0.0"

# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)
logger = logging.getLogger(__name__)

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting on its own."""

    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="run_lab.py", description="Deep-Mobility handover lab")
    parser.add_argument("--config", help="defaults YAML (default: configs/defaults.yaml)")
    parser.add_argument("--verbose", action="store_true", help="DEBUG logging")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-dataset", help="simulate a scenario and write labelled KPI records")
    p.add_argument("--scenario", required=True, help="scenario name or YAML path")
    p.add_argument("--out", required=True, help="output KPI CSV")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a model on a KPI CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output model JSON")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--recurrent", choices=["lstm", "rnn"])
    p.add_argument("--paper-exact-cell", action="store_true",
                   help="wrap the LSTM cell update in a sigmoid: c = sigmoid(f*c + i*g)")
    p.add_argument("--freeze-biases", action="store_true")
    p.add_argument("--history", help="history CSV (default: <out>_history.csv)")
    p.add_argument("--scenario", help="take model/training overrides from this scenario")

    p = sub.add_parser("eval", help="loss and accuracy of a model on a KPI CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("simulate", help="run one policy on a scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--policy", required=True, help="a3 | greedy | oracle | deep:MODEL")
    p.add_argument("--report", required=True, help="output report CSV")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("compare", help="run several policies on one scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--policies", required=True, help="comma-separated, e.g. a3,deep:MODEL")
    p.add_argument("--report", required=True)
    p.add_argument("--reference", help="policy the deltas are relative to (default: first)")
    p.add_argument("--seed", type=int)
    return parser


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------
def _sibling(path, suffix):
    """out/report.csv + "_events" -> out/report_events.csv; out/model.json -> out/model_history.csv

    Siblings are always CSV tables, whatever the parent artifact is.
    """
    path = Path(path)
    return path.with_name(f"{path.stem}{suffix}.csv")


def write_manifest(artifact, command, argv, merged_config, seed, inputs, outputs, started):
    """Atomically write <artifact>.manifest.json describing how it was made."""
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": merged_config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "duration_seconds": round(time.monotonic() - started, 3),
    }
    path = Path(f"{artifact}.manifest.json")
    tables.write_json_atomic(path, manifest)
    return path


def _load_model(path):
    return nn.load_model(path, dataset.Scaler.from_dict)


def _load_world(args):
    scenario, settings, merged = config.load_scenario(args.scenario, args.config, args.seed)
    return scenario, settings, merged


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def cmd_gen_dataset(args, argv, started, summary):
    scenario, _, merged = _load_world(args)
    records = sim.generate_dataset(scenario)
    if not records:
        raise DataError(f"scenario {scenario.name} produced no records")
    dataset.write_csv(records, args.out)
    labels = [r["label"] for r in records]
    summary["counts"] = {
        "records": len(records),
        **{f"label_{k}": labels.count(k) for k in range(dataset.SLOTS + 1)},
    }
    write_manifest(args.out, "gen-dataset", argv, merged, scenario.seed,
                   [config.resolve_scenario_path(args.scenario)], [args.out], started)


def cmd_train(args, argv, started, summary):
    if args.scenario:
        _, settings, merged = _load_world(args)
    else:
        merged = config.load_defaults(args.config)
        settings = config.build_settings(merged)

    ms, hp = settings.model, settings.training
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        hp = replace(hp, **overrides)
    if hp.epochs < 0:
        raise UsageError("--epochs must be >= 0")
    recurrent = nn.RecurrentKind(args.recurrent.upper()) if args.recurrent else ms.recurrent
    paper_exact = args.paper_exact_cell or ms.paper_exact_cell_update
    freeze = args.freeze_biases or ms.freeze_biases

    records = dataset.read_csv(args.data)
    model, history, train_w, val_w = trainer.train_on_records(
        records, ms, hp, settings.val_fraction, recurrent=recurrent,
        paper_exact_cell_update=paper_exact, freeze_biases=freeze)
    model.metadata = {
        "data": str(args.data), "epochs": hp.epochs, "seed": hp.seed,
        "train_windows": len(train_w), "val_windows": len(val_w),
    }

    history_path = args.history or _sibling(args.out, "_history")
    nn.save_model(model, args.out)
    tables.write_history(history_path, history)
    summary["counts"] = {"train_windows": len(train_w), "val_windows": len(val_w),
                         "epochs": hp.epochs}
    if history:
        summary["counts"]["val_acc"] = round(history[-1]["val_acc"], 4)
    merged = config.deep_merge(merged, {"training": {"epochs": hp.epochs, "seed": hp.seed}})
    for artifact in (args.out, history_path):
        write_manifest(artifact, "train", argv, merged, hp.seed, [args.data],
                       [args.out, history_path], started)


def cmd_eval(args, argv, started, summary):
    model = _load_model(args.model)
    if model.scaler is None:
        raise DataError(f"{args.model}: model has no embedded scaler")
    records = dataset.read_csv(args.data)
    windows = dataset.build_windows(records, model.window_len)
    if not windows:
        raise DataError("empty evaluation set")
    seq, static, labels = dataset.windows_to_arrays(windows, model.scaler)
    loss, acc = nn.evaluate(model, seq, static, labels)
    summary["counts"] = {"windows": len(windows), "loss": round(loss, 6),
                         "accuracy": round(acc, 4)}
    print(f"windows={len(windows)} loss={loss:.6f} accuracy={acc:.4f}")


def _write_sim_outputs(report_path, reports, scenario):
    tables.write_reports(report_path, reports)
    outputs = [Path(report_path)]
    for name, rep in reports.items():
        suffix = "" if len(reports) == 1 else f"_{name.replace(':', '-').replace('/', '-')}"
        events_path = _sibling(report_path, f"{suffix}_events")
        cells_path = _sibling(report_path, f"{suffix}_cells")
        tables.write_events(events_path, rep.events)
        sim.handover_breakdown(rep.events, scenario.ping_pong_window_s).to_csv(
            cells_path, index=False, float_format="%.6f", lineterminator="\n")
        outputs += [events_path, cells_path]
        if rep.decisions:
            decisions_path = _sibling(report_path, f"{suffix}_decisions")
            tables.write_decisions(decisions_path, rep.decisions)
            outputs.append(decisions_path)
    return outputs


def cmd_simulate(args, argv, started, summary):
    scenario, _, merged = _load_world(args)
    policy = sim.make_policy(args.policy, scenario, _load_model)
    report = sim.run(scenario, policy)
    outputs = _write_sim_outputs(args.report, {args.policy: report}, scenario)
    summary["counts"] = report.metrics()
    for artifact in outputs:
        write_manifest(artifact, "simulate", argv, merged, scenario.seed,
                       [config.resolve_scenario_path(args.scenario)], outputs, started)


def cmd_compare(args, argv, started, summary):
    names = [p.strip() for p in args.policies.split(",") if p.strip()]
    if len(names) < 2:
        raise UsageError("--policies needs at least two policies")
    if len(set(names)) != len(names):
        raise UsageError("--policies lists a policy twice")
    scenario, _, merged = _load_world(args)

    reports = {}
    for name in names:
        reports[name] = sim.run(scenario, sim.make_policy(name, scenario, _load_model))
    table = sim.compare(reports, args.reference)

    outputs = _write_sim_outputs(args.report, reports, scenario)
    compare_path = _sibling(args.report, "_compare")
    table.to_csv(compare_path, float_format="%.6f", lineterminator="\n")
    outputs.append(compare_path)
    print(sim.format_comparison(table))
    summary["counts"] = {"policies": len(names)}
    for artifact in outputs:
        write_manifest(artifact, "compare", argv, merged, scenario.seed,
                       [config.resolve_scenario_path(args.scenario)], outputs, started)


COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
}


def _output_dir(args):
    for attr in ("out", "report", "model"):
        value = getattr(args, attr, None)
        if value:
            return Path(value).resolve().parent
    return Path.cwd()


# ---------------------------------------------------------------------------
# Main
# ---------------------------------------------------------------------------
def main(argv=None):
    """Run one command and return its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()

    if not argv:
        parser.print_usage(sys.stderr)
        return UsageError.exit_code

    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        logger.error("%s", exc)
        return exc.exit_code
    if args.command is None:
        parser.print_usage(sys.stderr)
        return UsageError.exit_code

    logging.getLogger().setLevel(logging.DEBUG if args.verbose else logging.INFO)

    start_time = datetime.now(timezone.utc)
    started = time.monotonic()
    summary = {
        "command": args.command,
        "started_at": start_time.strftime(TIMESTAMP_FORMAT),
        "finished_at": "",
        "duration_seconds": "",
        "status": "SUCCESS",
        "errors": "",
        "counts": {},
    }

    logger.info("=" * 50)
    logger.info("Deep-Mobility lab: %s", args.command)
    logger.info("Seed: %s  |  Args: %s", getattr(args, "seed", None), " ".join(argv))
    logger.info("=" * 50)

    exit_code = 0
    try:
        COMMANDS[args.command](args, argv, started, summary)
    except LabError as exc:
        summary["status"] = "FAILED"
        summary["errors"] = str(exc)
        logger.error("%s", exc)
        exit_code = exc.exit_code
    except Exception as exc:
        summary["status"] = "FAILED"
        summary["errors"] = str(exc)
        logger.error("Unexpected failure: %s", exc, exc_info=True)
        exit_code = 1
    finally:
        end_time = datetime.now(timezone.utc)
        summary["finished_at"] = end_time.strftime(TIMESTAMP_FORMAT)
        summary["duration_seconds"] = round(time.monotonic() - started, 1)

        try:
            tables.log_run(_output_dir(args) / "run_log.csv", summary)
        except OSError as log_exc:
            logger.error("Failed to write run_log entry: %s", log_exc)

        logger.info("=" * 50)
        logger.info("Run Summary")
        logger.info("  Status:   %s", summary["status"])
        for key, value in summary["counts"].items():
            logger.info("  %-15s %s", key + ":", value)
        logger.info("  Duration: %ss", summary["duration_seconds"])
        if summary["errors"]:
            logger.info("  Errors:   %s", summary["errors"])
        logger.info("=" * 50)

    return exit_code


if __name__ == "__main__":
    sys.exit(main())
