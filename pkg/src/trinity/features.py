"""Statistical behaviour tensors and point-in-time training rows.

A user's tensor counts events per (time window, scenario, card type, action)
at a reference time. Windows are half-open ``[ref - w, ref)``: an impression
never sees itself or anything later. Flattening is T-major, then scenario,
card type, action, giving 4 * 3 * 5 * 2 = 120 dense features.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .synthgen import (
    ACTIVITY_LEVELS, CARD_TYPES, MEMBERSHIPS, SCENARIOS, EventLog, Impressions,
)

WINDOWS = (3600, 86400, 7 * 86400, 30 * 86400)
WINDOW_NAMES = ("1h", "1d", "7d", "30d")
FEATURE_SCENARIOS = ("classic", "copilot", "all")
ALL = 2
TENSOR_SHAPE = (len(WINDOWS), len(FEATURE_SCENARIOS), len(CARD_TYPES), 2)
N_DENSE = int(np.prod(TENSOR_SHAPE))
N_TARGET = len(WINDOWS) * 2

# dwell seconds: [0, 1) -> 0, [1, 15) -> 1, [15, 60) -> 2, [60, inf) -> 3
DURATION_THRESHOLDS = (1.0, 15.0, 60.0)
N_DURATION_CLASSES = len(DURATION_THRESHOLDS) + 1
N_PROFILE = len(ACTIVITY_LEVELS) + len(MEMBERSHIPS)

_N_CHANNELS = len(SCENARIOS) * len(CARD_TYPES) * 2


def feature_names():
    return [f"f_{w}_{s}_{c}_{a}" for w in WINDOW_NAMES for s in FEATURE_SCENARIOS
            for c in CARD_TYPES for a in ("view", "click")]


def flatten(counts):
    """(…, 4, 3, 5, 2) -> (…, 120) in T-major order."""
    counts = np.asarray(counts)
    return counts.reshape(counts.shape[:-4] + (N_DENSE,))


def unflatten(flat):
    flat = np.asarray(flat)
    return flat.reshape(flat.shape[:-1] + TENSOR_SHAPE)


@dataclass(frozen=True)
class BehaviorTensor:
    counts: np.ndarray   # int64, shape TENSOR_SHAPE
    ref_time: int

    def flat(self):
        return flatten(self.counts)


def build_tensor(user_events: EventLog, ref_time: int) -> BehaviorTensor:
    """Count one user's events in each window ending (exclusively) at ``ref_time``."""
    ts = np.asarray(user_events.timestamp)
    if ts.size > 1 and np.any(np.diff(ts) < 0):
        raise ContractError("build_tensor expects events sorted by timestamp")
    counts = np.zeros(TENSOR_SHAPE, dtype=np.int64)
    hi = np.searchsorted(ts, ref_time, side="left")
    for t, w in enumerate(WINDOWS):
        lo = np.searchsorted(ts, ref_time - w, side="left")
        if hi <= lo:
            continue
        sl = slice(lo, hi)
        np.add.at(counts[t], (user_events.scenario[sl], user_events.card_type[sl],
                              user_events.action[sl]), 1)
    counts[:, ALL] = counts[:, 0] + counts[:, 1]
    return BehaviorTensor(counts, int(ref_time))


@dataclass(frozen=True)
class SampleRows:
    """Column batch of labelled training rows (one per impression).

    ``dense`` has 120 columns for full rows and 8 for target-restricted
    rows; ``profile`` is activity one-hot followed by membership one-hot.
    """

    user_id: np.ndarray
    timestamp: np.ndarray
    label_click: np.ndarray
    label_duration: np.ndarray
    scenario: np.ndarray
    card_type: np.ndarray
    dense: np.ndarray
    profile: np.ndarray

    COLUMNS = ("user_id", "timestamp", "label_click", "label_duration", "scenario",
               "card_type", "dense", "profile")

    def __len__(self):
        return len(self.user_id)

    def take(self, index):
        return SampleRows(**{c: getattr(self, c)[index] for c in self.COLUMNS})

    def replace(self, **kw):
        data = {c: getattr(self, c) for c in self.COLUMNS}
        data.update(kw)
        return SampleRows(**data)

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ContractError("cannot concatenate zero non-empty row batches")
        return cls(**{c: np.concatenate([getattr(p, c) for p in parts]) for c in cls.COLUMNS})


def duration_class(dwell):
    return np.searchsorted(DURATION_THRESHOLDS, np.asarray(dwell, dtype=float), side="right")


def profile_matrix(user_ids, population=None):
    """Activity and membership one-hots per user id; unknown users get zeros."""
    user_ids = np.asarray(user_ids, dtype=np.int64)
    out = np.zeros((len(user_ids), N_PROFILE))
    if not population:
        return out
    max_id = max(p.user_id for p in population)
    table = np.zeros((max_id + 1, N_PROFILE))
    for p in population:
        table[p.user_id, ACTIVITY_LEVELS.index(p.activity_level)] = 1.0
        table[p.user_id, len(ACTIVITY_LEVELS) + MEMBERSHIPS.index(p.scenario_membership)] = 1.0
    known = (user_ids >= 0) & (user_ids <= max_id)
    out[known] = table[user_ids[known]]
    return out


def snapshot_rows(log: EventLog, impressions: Impressions, window_horizon=WINDOWS,
                  population=None) -> SampleRows:
    """Build one row per impression from events strictly before it.

    Vectorised: events are sorted by a composite (user, channel, time) key
    and each window count is a difference of two binary searches.
    """
    windows = tuple(window_horizon)
    if windows != WINDOWS:
        raise ContractError(f"window_horizon must be {WINDOWS}")
    n = len(impressions)
    counts = np.zeros((n, len(WINDOWS), len(FEATURE_SCENARIOS), len(CARD_TYPES), 2), dtype=np.int32)
    if n and len(log):
        tmin = int(min(log.timestamp.min(), impressions.timestamp.min())) - max(WINDOWS) - 1
        span = int(max(log.timestamp.max(), impressions.timestamp.max())) - tmin + 1
        if span >= 2**32:
            raise ContractError("event log spans too long a period")
        chan = (log.scenario * len(CARD_TYPES) + log.card_type) * 2 + log.action
        ev_key = (log.user_id.astype(np.int64) * _N_CHANNELS + chan) << 32
        ev_key = np.sort(ev_key + (log.timestamp - tmin))
        ref = impressions.timestamp.astype(np.int64) - tmin
        base_user = impressions.user_id.astype(np.int64) * _N_CHANNELS
        for ch in range(_N_CHANNELS):
            s, rem = divmod(ch, len(CARD_TYPES) * 2)
            c, a = divmod(rem, 2)
            k = (base_user + ch) << 32
            hi = np.searchsorted(ev_key, k + ref, side="left")
            for t, w in enumerate(WINDOWS):
                lo = np.searchsorted(ev_key, k + np.maximum(ref - w, 0), side="left")
                counts[:, t, s, c, a] = hi - lo
        counts[:, :, ALL] = counts[:, :, 0] + counts[:, :, 1]
    return SampleRows(
        user_id=impressions.user_id.astype(np.int64),
        timestamp=impressions.timestamp.astype(np.int64),
        label_click=impressions.clicked.astype(np.int64),
        label_duration=duration_class(impressions.dwell).astype(np.int64),
        scenario=impressions.scenario.astype(np.int64),
        card_type=impressions.card_type.astype(np.int64),
        dense=counts.reshape(n, N_DENSE),
        profile=profile_matrix(impressions.user_id, population),
    )


def target_indices(scenario, card_type):
    """Flat dense indices of the 8 cells matching each row's own scenario and
    card type, ordered (window, action). Shape (n, 8)."""
    scenario = np.asarray(scenario).reshape(-1, 1, 1)
    card = np.asarray(card_type).reshape(-1, 1, 1)
    t = np.arange(len(WINDOWS)).reshape(1, -1, 1)
    a = np.arange(2).reshape(1, 1, -1)
    idx = ((t * len(FEATURE_SCENARIOS) + scenario) * len(CARD_TYPES) + card) * 2 + a
    return idx.reshape(-1, N_TARGET)


def restrict_to_target(rows: SampleRows) -> SampleRows:
    """Keep only the behaviour cells about the row's own card and scenario."""
    if rows.dense.shape[1] != N_DENSE:
        raise ContractError(f"restrict_to_target needs {N_DENSE} dense features, "
                            f"got {rows.dense.shape[1]}")
    idx = target_indices(rows.scenario, rows.card_type)
    return rows.replace(dense=np.take_along_axis(rows.dense, idx, axis=1))


def write_rows_csv(rows: SampleRows, path):
    names = feature_names() if rows.dense.shape[1] == N_DENSE else \
        [f"t_{w}_{a}" for w in WINDOW_NAMES for a in ("view", "click")]
    prof_names = [f"p_{v}" for v in ACTIVITY_LEVELS + MEMBERSHIPS]
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["user_id", "timestamp", "label_click", "label_duration", "scenario",
                    "card_type"] + prof_names + names)
        scen = np.array(SCENARIOS)[rows.scenario].tolist()
        card = np.array(CARD_TYPES)[rows.card_type].tolist()
        prof = rows.profile.astype(int).tolist()
        dense = rows.dense.tolist()
        for i in range(len(rows)):
            w.writerow([int(rows.user_id[i]), int(rows.timestamp[i]), int(rows.label_click[i]),
                        int(rows.label_duration[i]), scen[i], card[i]] + prof[i] + dense[i])


def read_rows_csv(path) -> SampleRows:
    with open(path, encoding="utf-8", newline="") as f:
        r = csv.reader(f)
        next(r)
        data = list(r)
    arr = np.array([[row[0], row[1], row[2], row[3],
                     SCENARIOS.index(row[4]), CARD_TYPES.index(row[5])] + row[6:] for row in data],
                   dtype=np.int64).reshape(len(data), -1)
    return SampleRows(
        user_id=arr[:, 0], timestamp=arr[:, 1], label_click=arr[:, 2], label_duration=arr[:, 3],
        scenario=arr[:, 4], card_type=arr[:, 5],
        profile=arr[:, 6:6 + N_PROFILE].astype(float),
        dense=arr[:, 6 + N_PROFILE:].astype(np.int32),
    )


def save_rows_npz(rows: SampleRows, path):
    """Binary column store; much smaller and faster than the CSV form."""
    np.savez(path, **{c: getattr(rows, c) for c in SampleRows.COLUMNS})


def load_rows_npz(path) -> SampleRows:
    with np.load(path) as z:
        return SampleRows(**{c: z[c] for c in SampleRows.COLUMNS})
