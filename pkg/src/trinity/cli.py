"""Command-line entry point.

Every subcommand takes ``--config`` (experiment YAML), ``--seed`` (overrides
the config seed) and ``--out`` (output directory). Stages can be chained
through the output directory::

    trinity generate --out run
    trinity features --out run
    trinity train --out run
    trinity evaluate --out run
    trinity daily-loop --out run
    trinity ablate --out run
    trinity report --out run

On failure the process exits nonzero and prints one JSON error record to
stderr (also written to ``<out>/error.json`` when possible).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import harness as H
from . import metrics as M
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, NumericError, UndefinedMetricError
from .features import N_TARGET, SampleRows, load_rows_npz, save_rows_npz
from .model import init_model, train
from .synthgen import (
    EventLog, GroundTruth, read_impressions_csv, read_population_csv, write_impressions_csv,
    write_population_csv,
)
from .updater import make_saver, run_daily_loop, write_decision_log

log = logging.getLogger("trinity")

EXIT_CODES = {ConfigError: 2, ContractError: 3, NumericError: 4, UndefinedMetricError: 5,
              OSError: 6}


def _config(args) -> H.ExperimentConfig:
    cfg = H.load_experiment_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    return cfg.validate()


def _out(cfg) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _load_rows(out: Path, cfg):
    path = out / "features.npz"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `trinity features` first")
    rows = load_rows_npz(path)
    day = H._day_of(rows.timestamp)
    return {d: rows.take(day == d) for d in list(cfg.train_days) + list(cfg.test_days)}


def _variant_rows(rows_by_day, cfg, days, restrict):
    data = H.ExperimentData(None, rows_by_day, {}, "")
    return [H._day_rows(data, cfg, d, restrict) for d in days]


def cmd_generate(args):
    cfg = _config(args)
    out = _out(cfg)
    population, events, imp, truth = H.generate_data(cfg)
    write_population_csv(population, out / "population.csv")
    events.write_csv(out / "events.csv")
    write_impressions_csv(imp, out / "impressions.csv", truth=GroundTruth(truth))
    _write_json(out / "experiment_config.json", cfg.to_dict())
    return {"users": len(population), "events": len(events), "impressions": len(imp)}


def cmd_features(args):
    cfg = _config(args)
    out = _out(cfg)
    population = read_population_csv(out / "population.csv")
    events = EventLog.read_csv(out / "events.csv")
    imp, truth = read_impressions_csv(out / "impressions.csv")
    days = list(cfg.train_days) + list(cfg.test_days)
    rows_by_day, _ = H.build_day_rows(population, events, imp, truth.p_click, days)
    rows = SampleRows.concat([rows_by_day[d] for d in days])
    save_rows_npz(rows, out / "features.npz")
    return {"rows": len(rows), "digest": H._rows_digest(rows_by_day)}


def cmd_train(args):
    cfg = _config(args)
    out = _out(cfg)
    model_cfg, _, restrict = H.variant_setup(args.variant, cfg.model, cfg.updater)
    rows = SampleRows.concat(_variant_rows(_load_rows(out, cfg), cfg, cfg.train_days, restrict))
    init = init_model(model_cfg, cfg.seed, rows.dense)
    losses = []
    ckpt = H.pretrain(init.prepare(rows), init, cfg, log=losses)
    path = save_checkpoint(ckpt, out / f"{args.variant}_m0.trnckpt")
    return {"checkpoint": str(path), "id": ckpt.id, "epoch_losses": losses}


def _checkpoint(args, out):
    path = Path(args.checkpoint) if args.checkpoint else out / f"{args.variant}_m0.trnckpt"
    return load_checkpoint(path)


def cmd_evaluate(args):
    cfg = _config(args)
    out = _out(cfg)
    ckpt = _checkpoint(args, out)
    restrict = ckpt.config.n_fields == N_TARGET
    per_day = {}
    for d, rows in zip(cfg.test_days, _variant_rows(_load_rows(out, cfg), cfg, cfg.test_days,
                                                    restrict)):
        per_day[str(d)] = H.evaluate_input(ckpt, ckpt.prepare(rows))[2]
    result = {"checkpoint": ckpt.id, "per_day": per_day}
    _write_json(out / "evaluation.json", result)
    return result


def cmd_daily_loop(args):
    cfg = _config(args)
    out = _out(cfg)
    _, upd_cfg, restrict = H.variant_setup(args.variant, cfg.model, cfg.updater)
    ckpt = _checkpoint(args, out)
    days = list(cfg.test_days)
    inputs = [ckpt.prepare(r) for r in _variant_rows(_load_rows(out, cfg), cfg, days, restrict)]

    def train_fn(c, inp, s, day):
        return train(inp, c, upd_cfg.epochs_per_day, s, created_day=day)

    def eval_fn(c, inp):
        return H.evaluate_input(c, inp, upd_cfg.gating_slice)

    final, records = run_daily_loop(inputs, ckpt, upd_cfg, cfg.seed, train_fn=train_fn,
                                    evaluate_fn=eval_fn, save_fn=make_saver(out / "checkpoints"),
                                    day_ids=days)
    log_path = out / "decisions.jsonl"
    log_path.unlink(missing_ok=True)
    write_decision_log(records, log_path)
    return {"final": final.id, "decisions": [(r.day, r.accepted, r.reason) for r in records]}


def cmd_ablate(args):
    cfg = _config(args)
    out = _out(cfg)
    table = H.run_experiment(cfg, checkpoint_dir=out / "checkpoints" if args.save_checkpoints else None)
    paths = H.emit_report(table, out, formats=_formats(args))
    print(M.format_table(H.table_rows(table)))
    failed = [k for k, v in table["variants"].items() if v.get("status") != "ok"]
    return {"written": [str(p) for p in paths], "failed_variants": failed}


def cmd_report(args):
    cfg = _config(args)
    out = _out(cfg)
    table = H.load_table(Path(args.table) if args.table else out / "report.json")
    paths = H.emit_report(table, out, formats=_formats(args))
    print(M.format_table(H.table_rows(table)))
    return {"written": [str(p) for p in paths]}


def _formats(args):
    fmts = ["json", "text", "csv"]
    if not args.no_figures:
        fmts.append("png")
    return tuple(fmts)


COMMANDS = {
    "generate": (cmd_generate, "simulate population, event log and impressions"),
    "features": (cmd_features, "build point-in-time feature rows"),
    "train": (cmd_train, "train the initial checkpoint on the train days"),
    "evaluate": (cmd_evaluate, "score a checkpoint on the test days"),
    "daily-loop": (cmd_daily_loop, "run the promotion loop over the test days"),
    "ablate": (cmd_ablate, "run the variant grid and write reports"),
    "report": (cmd_report, "re-render reports from a saved report.json"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="trinity", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="experiment config YAML")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "evaluate", "daily-loop"):
            p.add_argument("--variant", default="trinity", choices=H.VARIANTS)
        if name in ("evaluate", "daily-loop"):
            p.add_argument("--checkpoint", default=None)
        if name in ("ablate", "report"):
            p.add_argument("--no-figures", action="store_true")
        if name == "ablate":
            p.add_argument("--save-checkpoints", action="store_true")
        if name == "report":
            p.add_argument("--table", default=None, help="report.json to render")
    return parser


def error_record(command, exc):
    code = next((c for t, c in EXIT_CODES.items() if isinstance(exc, t)), 1)
    rec = {"status": "error", "command": command, "error_type": type(exc).__name__,
           "message": str(exc), "exit_code": code}
    for attr in ("layer", "batch_index", "n_positives", "n_negatives"):
        if getattr(exc, attr, None) is not None:
            rec[attr] = getattr(exc, attr)
    return rec


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn = COMMANDS[args.command][0]
    try:
        result = fn(args)
    except Exception as exc:  # noqa: BLE001 - converted to an error record
        rec = error_record(args.command, exc)
        log.debug("%s", traceback.format_exc())
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        if args.out:
            try:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                _write_json(Path(args.out) / "error.json", rec)
            except OSError:
                pass
        return rec["exit_code"]
    print(json.dumps({"status": "ok", "command": args.command, "result": _jsonable(result)},
                     sort_keys=True))
    return 0


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: o.item() if isinstance(o, np.generic)
                                 else str(o)))


if __name__ == "__main__":
    sys.exit(main())
