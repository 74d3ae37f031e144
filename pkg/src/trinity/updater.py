"""Stability-aware daily checkpoint promotion.

Each day the incumbent and a candidate warm-started from it are scored on
the same evaluation data. The candidate replaces the incumbent only if

    auc_new > auc_old  and  |1 - copc_new| <= |1 - copc_old| + delta

otherwise the incumbent is kept.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .errors import ConfigError, UndefinedMetricError

EVAL_MODES = ("literal_same_day", "next_day_holdout")
GATING_SLICES = ("global", "classic", "copilot")


@dataclass(frozen=True)
class UpdaterConfig:
    delta: float = 0.05
    eval_mode: str = "literal_same_day"
    gating_slice: str = "global"
    epochs_per_day: int = 1
    always_accept: bool = False   # ablation: promotion gate disabled

    def validate(self):
        if not self.delta >= 0:
            raise ConfigError("delta must be >= 0")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigError(f"eval_mode must be one of {EVAL_MODES}")
        if self.gating_slice not in GATING_SLICES:
            raise ConfigError(f"gating_slice must be one of {GATING_SLICES}")
        if self.epochs_per_day < 0:
            raise ConfigError("epochs_per_day must be >= 0")
        return self


def updater_config_from_dict(data):
    known = {f.name for f in dataclasses.fields(UpdaterConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown updater config keys: {sorted(unknown)}")
    return UpdaterConfig(**data).validate()


def _defined(m):
    return m is not None and all(v is not None and math.isfinite(v) for v in m)


def decide(metrics_old, metrics_new, delta: float) -> bool:
    """Promotion predicate on ``(auc, copc)`` pairs. Undefined metrics reject."""
    if not (_defined(metrics_old) and _defined(metrics_new)):
        return False
    auc_old, copc_old = metrics_old
    auc_new, copc_new = metrics_new
    return auc_new > auc_old and abs(1.0 - copc_new) <= abs(1.0 - copc_old) + delta


def decision_reason(metrics_old, metrics_new, delta) -> str:
    if not (_defined(metrics_old) and _defined(metrics_new)):
        return "metric-undefined"
    if not metrics_new[0] > metrics_old[0]:
        return "auc-not-improved"
    if not abs(1.0 - metrics_new[1]) <= abs(1.0 - metrics_old[1]) + delta:
        return "copc-deviation"
    return "accepted"


@dataclass
class DecisionRecord:
    day: int
    auc_old: float | None
    copc_old: float | None
    auc_new: float | None
    copc_new: float | None
    accepted: bool
    reason: str
    incumbent_id: str | None
    candidate_id: str | None
    resulting_id: str | None
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


def write_decision_log(records, path):
    """Append-only newline-delimited JSON, one record per day."""
    with open(path, "a", encoding="utf-8") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def read_decision_log(path):
    with open(path, encoding="utf-8") as f:
        return [DecisionRecord.from_json(line) for line in f if line.strip()]


def _ckpt_id(ckpt):
    return getattr(ckpt, "id", None) if ckpt is not None else None


def run_daily_loop(days, m0, config: UpdaterConfig, seed: int, *,
                   train_fn: Callable, evaluate_fn: Callable,
                   save_fn: Callable | None = None, day_ids=None):
    """Run the promotion loop over ``days`` (a list of per-day datasets).

    Args:
        days: per-day data, in order. ``None`` or empty entries are skipped.
        m0: initial checkpoint.
        config: gate settings.
        seed: base seed; day ``t`` trains with ``seed + t``.
        train_fn: ``(checkpoint, data, seed, day) -> checkpoint``; warm-starts
            from the given checkpoint.
        evaluate_fn: ``(checkpoint, data) -> (auc, copc, extra)`` where auc or
            copc may be ``None`` when undefined on that data.
        save_fn: optional ``(checkpoint, day, accepted)`` hook.
        day_ids: labels for the records (defaults to 0..len-1).

    Returns:
        ``(final_checkpoint, records)``.
    """
    config.validate()
    day_ids = list(range(len(days))) if day_ids is None else list(day_ids)
    current = m0
    records = []
    for i, (t, data) in enumerate(zip(day_ids, days)):
        if config.eval_mode == "literal_same_day":
            eval_data = data
        else:
            if i + 1 >= len(days):
                break
            eval_data = days[i + 1]
        if data is None or len(data) == 0 or eval_data is None or len(eval_data) == 0:
            records.append(DecisionRecord(t, None, None, None, None, False, "empty-day",
                                          _ckpt_id(current), None, _ckpt_id(current)))
            continue
        auc_old, copc_old, extra_old = _safe_eval(evaluate_fn, current, eval_data)
        candidate = train_fn(current, data, seed + t, t)
        auc_new, copc_new, extra_new = _safe_eval(evaluate_fn, candidate, eval_data)
        old, new = (auc_old, copc_old), (auc_new, copc_new)
        if config.always_accept:
            accepted, reason = True, "always-accept"
        else:
            accepted = decide(old, new, config.delta)
            reason = decision_reason(old, new, config.delta)
        incumbent_id = _ckpt_id(current)
        if hasattr(candidate, "lineage") and candidate is not current:
            candidate.lineage["accepted"] = bool(accepted)
        if accepted:
            current = candidate
        records.append(DecisionRecord(
            t, auc_old, copc_old, auc_new, copc_new, bool(accepted), reason,
            incumbent_id, _ckpt_id(candidate), _ckpt_id(current),
            {"old": extra_old, "new": extra_new}))
        if save_fn is not None:
            save_fn(current, t, accepted)
    return current, records


def _safe_eval(evaluate_fn, ckpt, data):
    try:
        out = evaluate_fn(ckpt, data)
    except UndefinedMetricError as exc:
        return None, None, {"error": str(exc)}
    if len(out) == 2:
        return out[0], out[1], {}
    return out


def checkpoint_filename(day, config_hash, accepted):
    return f"ckpt_day{day:03d}_{config_hash}_{'accepted' if accepted else 'kept'}.trnckpt"


def make_saver(out_dir):
    from .checkpoint import save_checkpoint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def save(ckpt, day, accepted):
        save_checkpoint(ckpt, out / checkpoint_filename(day, ckpt.config_hash, accepted))
    return save
