"""Experiment orchestration: data, ablation variants, daily loop, reports.

Protocol per variant: transforms are fitted on the train days only, an
initial model is trained on the train days, then the promotion loop walks
the test days. The model serving test day ``d`` has only ever seen data from
days before ``d``; its metrics on day ``d`` are recorded before the loop
trains on that day. Reported numbers are per-day slice metrics averaged over
the test days.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import metrics as M
from .errors import ConfigError
from .features import SampleRows, restrict_to_target, snapshot_rows, N_TARGET
from .model import (
    Checkpoint, ModelConfig, ModelInput, init_model, model_config_from_dict, predict_input, train,
)
from .synthgen import (
    EPOCH, SECONDS_PER_DAY, EventLog, GenConfig, Impressions, PopulationArrays, gen_config_from_dict,
    generate_population, simulate_day,
)
from .updater import UpdaterConfig, make_saver, run_daily_loop, updater_config_from_dict

log = logging.getLogger(__name__)

VARIANTS = ("trinity", "trinity_small", "trinity_wo_check", "trinity_w_ple", "ple_baseline")
EXPERIMENT_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1
TABLE_SLICES = ("classic", "copilot")


def desk_model_config():
    """Model settings sized for minutes-scale CPU runs."""
    return ModelConfig(embed_dim=4, expert_width=64, tower_widths=(64, 32))


@dataclass
class ExperimentConfig:
    schema_version: int = EXPERIMENT_SCHEMA_VERSION
    seed: int = 0
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=desk_model_config)
    updater: UpdaterConfig = field(default_factory=UpdaterConfig)
    variants: tuple = VARIANTS
    train_days: tuple = (0, 1, 2, 3, 4, 5, 6)
    test_days: tuple = (7, 8, 9)
    warmup_epochs: int = 1         # initial-model epochs at warmup_lr
    warmup_lr: float = 1e-3
    pretrain_epochs: int = 1       # further initial-model epochs at the model's own rate
    noise_day: int | None = None
    noise_flip_prob: float = 0.5
    output_dir: str = "out"

    def validate(self):
        if self.schema_version != EXPERIMENT_SCHEMA_VERSION:
            raise ConfigError(f"unsupported experiment schema_version {self.schema_version}")
        bad = set(self.variants) - set(VARIANTS)
        if bad:
            raise ConfigError(f"unknown variants {sorted(bad)}; choose from {VARIANTS}")
        tr, te = list(self.train_days), list(self.test_days)
        if not tr or not te:
            raise ConfigError("train_days and test_days must be non-empty")
        if tr != sorted(set(tr)) or te != sorted(set(te)):
            raise ConfigError("day ranges must be strictly increasing")
        if max(tr) >= min(te):
            raise ConfigError("train days must all precede test days")
        if min(tr) < 0:
            raise ConfigError("days are numbered from 0")
        if not 0.0 <= self.noise_flip_prob <= 1.0:
            raise ConfigError("noise_flip_prob must be in [0, 1]")
        if self.pretrain_epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("pretrain_epochs and warmup_epochs must be >= 0")
        if not self.warmup_lr > 0:
            raise ConfigError("warmup_lr must be > 0")
        self.gen.validate()
        self.model.validate()
        self.updater.validate()
        return self

    def to_dict(self):
        return {
            "schema_version": self.schema_version, "seed": self.seed,
            "gen": self.gen.to_dict(), "model": self.model.to_dict(),
            "updater": dataclasses.asdict(self.updater),
            "variants": list(self.variants), "train_days": list(self.train_days),
            "test_days": list(self.test_days), "warmup_epochs": self.warmup_epochs,
            "warmup_lr": self.warmup_lr, "pretrain_epochs": self.pretrain_epochs,
            "noise_day": self.noise_day, "noise_flip_prob": self.noise_flip_prob,
            "output_dir": self.output_dir,
        }

    def hash(self):
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def experiment_config_from_dict(data) -> ExperimentConfig:
    data = dict(data or {})
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
    if "gen" in data:
        data["gen"] = gen_config_from_dict(data["gen"])
    if "model" in data:
        base = desk_model_config().to_dict()
        base.update(data["model"])
        data["model"] = model_config_from_dict(base)
    if "updater" in data:
        data["updater"] = updater_config_from_dict(data["updater"])
    for k in ("variants", "train_days", "test_days"):
        if k in data:
            data[k] = tuple(data[k])
    return ExperimentConfig(**data).validate()


def stability_config(base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Noise-day experiment: 3 train days, 4 test days, labels of day 4 flipped.

    The loop decides on days 3-5; day 6 scores the final checkpoint.
    """
    base = base or ExperimentConfig()
    return dataclasses.replace(base, variants=("trinity", "trinity_wo_check"),
                               train_days=(0, 1, 2), test_days=(3, 4, 5, 6),
                               noise_day=4, noise_flip_prob=0.5).validate()


def load_experiment_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    with open(path, encoding="utf-8") as f:
        return experiment_config_from_dict(yaml.safe_load(f))


# ---------------------------------------------------------------------------
# data

@dataclass
class ExperimentData:
    population: list
    rows_by_day: dict          # day -> SampleRows (full 120 features)
    truth_by_day: dict         # day -> true click probability per row
    digest: str


def _rows_digest(rows_by_day):
    h = hashlib.sha256()
    for d in sorted(rows_by_day):
        r = rows_by_day[d]
        for c in SampleRows.COLUMNS:
            h.update(np.ascontiguousarray(getattr(r, c)).tobytes())
    return h.hexdigest()[:16]


def generate_data(config: ExperimentConfig):
    """Population, full event log, and experiment-day impressions with truth."""
    gen, seed = config.gen, config.seed
    population = generate_population(gen, seed)
    pop = PopulationArrays.from_profiles(population)
    sims = {d: simulate_day(pop, d, gen, seed)
            for d in range(-gen.history_days, max(config.test_days) + 1)}
    events = EventLog.concat([s.events for s in sims.values()])
    days = sorted(set(config.train_days) | set(config.test_days))
    imp = Impressions.concat([sims[d].impressions for d in days])
    truth = np.concatenate([sims[d].truth.p_click for d in days])
    return population, events, imp, truth


def _day_of(ts):
    return (np.asarray(ts) - EPOCH) // SECONDS_PER_DAY


def build_day_rows(population, events, impressions, truth, days):
    # snapshot windows are half-open before each impression, so the full log
    # can be used without leaking same-or-later events
    imp_day = _day_of(impressions.timestamp)
    rows_by_day, truth_by_day = {}, {}
    for d in days:
        mask = imp_day == d
        rows_by_day[d] = snapshot_rows(events, impressions.select(mask), population=population)
        truth_by_day[d] = truth[mask]
    return rows_by_day, truth_by_day


def prepare_data(config: ExperimentConfig) -> ExperimentData:
    """Generate history + experiment days and build point-in-time rows."""
    population, events, imp, truth = generate_data(config)
    days = list(config.train_days) + list(config.test_days)
    rows_by_day, truth_by_day = build_day_rows(population, events, imp, truth, days)
    return ExperimentData(population, rows_by_day, truth_by_day, _rows_digest(rows_by_day))


def flip_labels(rows: SampleRows, prob, seed, day) -> SampleRows:
    """Flip each click label independently with probability ``prob``."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(4, day))))
    flip = rng.random(len(rows)) < prob
    return rows.replace(label_click=np.where(flip, 1 - rows.label_click, rows.label_click))


# ---------------------------------------------------------------------------
# variants

def variant_setup(name, model: ModelConfig, updater: UpdaterConfig):
    """Return (model config, updater config, restrict_to_target?) for a variant."""
    rep = dataclasses.replace
    if name == "trinity":
        return model, updater, False
    if name == "trinity_small":
        return rep(model, n_fields=N_TARGET), updater, True
    if name == "trinity_wo_check":
        return model, rep(updater, always_accept=True), False
    if name == "trinity_w_ple":
        return rep(model, use_gate=False, use_adapter=False, context_concat=True), updater, False
    if name == "ple_baseline":
        return (rep(model, input_mode="dense", use_gate=False, use_adapter=False, context_concat=True),
                rep(updater, always_accept=True), False)
    raise ConfigError(f"unknown variant {name!r}")


def _day_rows(data, config, day, restrict):
    rows = data.rows_by_day[day]
    if config.noise_day is not None and day == config.noise_day:
        rows = flip_labels(rows, config.noise_flip_prob, config.seed, day)
    return restrict_to_target(rows) if restrict else rows


def pretrain(inp, init: Checkpoint, config: ExperimentConfig, log=None) -> Checkpoint:
    """Initial model: warm-up epochs at ``warmup_lr``, then the model's own rate.

    The returned checkpoint keeps the model's own learning rate in its Adam
    state, so daily updates warm-started from it run at that rate.
    """
    day = max(config.train_days)
    ck = init.copy()
    ck.adam.lr = config.warmup_lr
    ck = train(inp, ck, config.warmup_epochs, config.seed, log=log, created_day=day)
    ck.adam.lr = init.config.learning_rate
    ck = train(inp, ck, config.pretrain_epochs, config.seed, log=log, created_day=day,
               first_epoch=config.warmup_epochs)
    ck.lineage.update(parent_id=init.id, accepted=True)
    return ck


def evaluate_input(ckpt: Checkpoint, inp: ModelInput, gating_slice="global"):
    pred = predict_input(ckpt, inp).p_click
    reports = M.sliced_report(inp.scenario, inp.label_click, pred)
    gate = reports.get(gating_slice)
    auc = gate.auc if gate is not None else None
    copc = gate.copc if gate is not None else None
    return auc, copc, {k: (v.to_dict() if v is not None else None) for k, v in reports.items()}


def run_variant(data: ExperimentData, config: ExperimentConfig, name: str, cache=None,
                checkpoint_dir=None) -> dict:
    model_cfg, upd_cfg, restrict = variant_setup(name, config.model, config.updater)
    seed = config.seed
    cache = {} if cache is None else cache
    key = (model_cfg.hash(), restrict)
    if key in cache:
        m0, train_slices = cache[key]
    else:
        train_rows = SampleRows.concat([_day_rows(data, config, d, restrict) for d in config.train_days])
        init = init_model(model_cfg, seed, train_rows.dense)
        train_inp = init.prepare(train_rows)
        del train_rows
        m0 = pretrain(train_inp, init, config)
        train_slices = evaluate_input(m0, train_inp, upd_cfg.gating_slice)[2]
        del train_inp
        cache[key] = m0, train_slices
    test_inputs = [m0.prepare(_day_rows(data, config, d, restrict)) for d in config.test_days]

    made = {m0.id: m0}

    def train_fn(ckpt, inp, s, day):
        cand = train(inp, ckpt, upd_cfg.epochs_per_day, s, created_day=day)
        made[cand.id] = cand
        return cand

    def eval_fn(ckpt, inp):
        return evaluate_input(ckpt, inp, upd_cfg.gating_slice)

    saver = make_saver(Path(checkpoint_dir) / name) if checkpoint_dir else None
    days = list(config.test_days)
    final, records = run_daily_loop(test_inputs[:-1], m0, upd_cfg, seed, train_fn=train_fn,
                                    evaluate_fn=eval_fn, save_fn=saver, day_ids=days[:-1])
    per_day = []
    serving_id, serving_day = m0.id, m0.lineage.get("created_day")
    for i, d in enumerate(days):
        if i < len(records) and upd_cfg.eval_mode == "literal_same_day" and "old" in records[i].extra:
            slices = records[i].extra["old"]
        else:
            slices = evaluate_input(made[serving_id], test_inputs[i], upd_cfg.gating_slice)[2]
        if serving_day is not None and serving_day >= d:
            raise RuntimeError(f"checkpoint created on day {serving_day} served day {d}")
        per_day.append({"day": d, "served_by": serving_id, "served_created_day": serving_day,
                        "slices": slices})
        if i < len(records) and records[i].accepted:
            serving_id, serving_day = records[i].resulting_id, records[i].day
    return {
        "status": "ok", "error": None,
        "model_config_hash": model_cfg.hash(),
        "data_digest": data.digest,
        "train": train_slices,
        "per_day": per_day,
        "mean": _mean_slices(per_day),
        "final": per_day[-1]["slices"],
        "decisions": [_record_summary(r) for r in records],
    }


def _record_summary(r):
    return {"day": r.day, "auc_old": r.auc_old, "copc_old": r.copc_old, "auc_new": r.auc_new,
            "copc_new": r.copc_new, "accepted": r.accepted, "reason": r.reason,
            "incumbent_id": r.incumbent_id, "candidate_id": r.candidate_id,
            "resulting_id": r.resulting_id}


def _mean_slices(per_day):
    out = {}
    for s in M.SLICES:
        aucs = [p["slices"][s]["auc"] for p in per_day
                if p["slices"].get(s) is not None and p["slices"][s]["auc"] is not None]
        copcs = [p["slices"][s]["copc"] for p in per_day if p["slices"].get(s) is not None]
        out[s] = {"auc": float(np.mean(aucs)) if aucs else None,
                  "copc": float(np.mean(copcs)) if copcs else None,
                  "days": len(copcs)}
    return out


def run_experiment(config: ExperimentConfig, data: ExperimentData | None = None,
                   checkpoint_dir=None) -> dict:
    """Run every requested variant; failures are recorded per variant."""
    config.validate()
    data = data or prepare_data(config)
    table = {"schema_version": REPORT_SCHEMA_VERSION, "config_hash": config.hash(),
             "seed": config.seed, "test_days": list(config.test_days),
             "slices": list(M.SLICES), "variants": {}}
    cache = {}
    for name in config.variants:
        t0 = time.perf_counter()
        try:
            table["variants"][name] = run_variant(data, config, name, cache, checkpoint_dir)
        except Exception as exc:  # noqa: BLE001 - recorded, run continues
            log.exception("variant %s failed", name)
            table["variants"][name] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
        log.info("variant %s done in %.1fs", name, time.perf_counter() - t0)
    return table


# ---------------------------------------------------------------------------
# reports

def table_rows(table, slices=TABLE_SLICES, which="mean"):
    rows = {}
    for name, v in table["variants"].items():
        if v.get("status") != "ok":
            rows[name] = {}
            continue
        src = v[which]
        rows[name] = {s: ((src[s] or {}).get("auc"), (src[s] or {}).get("copc")) for s in slices}
    return rows


def dump_table(table) -> str:
    return json.dumps(table, sort_keys=True, indent=1) + "\n"


def emit_report(table, out_dir, formats=("json", "text", "csv", "png")) -> list:
    """Write report files; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = out / "report.json"
        p.write_text(dump_table(table), encoding="utf-8")
        written.append(p)
    if "text" in formats:
        p = out / "report.txt"
        p.write_text(M.format_table(table_rows(table)), encoding="utf-8")
        written.append(p)
    if "csv" in formats:
        p = out / "per_day_metrics.csv"
        with open(p, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["variant", "day", "slice", "auc", "copc", "realctr", "pctr",
                        "n_samples", "n_positives"])
            for name, v in table["variants"].items():
                for day in v.get("per_day", []):
                    for s in M.SLICES:
                        r = day["slices"].get(s)
                        if r is None:
                            continue
                        w.writerow([name, day["day"], s, "" if r["auc"] is None else repr(r["auc"]),
                                    repr(r["copc"]), repr(r["realctr"]), repr(r["pctr"]),
                                    r["n_samples"], r["n_positives"]])
        written.append(p)
    if "png" in formats:
        from .plotting import plot_report

        written.extend(plot_report(table, out / "figures"))
    return written


def load_table(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
