"""Synthetic two-scenario user population and daily event logs.

Every impression carries its true click probability

    p = logistic(b_s + b_c + affinity_scale * a_u[c] + w_sc)

so ranking and calibration claims can be checked against an oracle. User
affinities are drawn from a low-rank latent factor model, which plants
cross-card preference structure: a user's behaviour on ``news`` says
something about their taste for ``copilot_content``.

Random streams: the population uses ``SeedSequence(seed, spawn_key=(0,))``.
Day ``d`` draws users in fixed blocks of :data:`USER_BLOCK` ids, block ``k``
using ``SeedSequence(seed, spawn_key=(1, d + DAY_KEY_OFFSET, k))``. Blocks
are independent, so generation order never changes the output; the merge is
a stable sort on (timestamp, user_id, item_id, action).
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import yaml
from scipy.special import expit

from .errors import ConfigError, ContractError

SCENARIOS = ("classic", "copilot")
CARD_TYPES = ("weather", "finance", "news", "video", "copilot_content")
ACTIONS = ("view", "click")
ACTIVITY_LEVELS = ("active", "cold_start")
MEMBERSHIPS = ("classic_only", "copilot_only", "both")

CLASSIC, COPILOT = 0, 1
COPILOT_CONTENT = CARD_TYPES.index("copilot_content")
VIEW, CLICK = 0, 1

SECONDS_PER_DAY = 86400
EPOCH = 1_752_451_200  # day 0, 00:00 UTC
USER_BLOCK = 256
DAY_KEY_OFFSET = 10_000
GEN_SCHEMA_VERSION = 1

EVENT_COLUMNS = ("user_id", "timestamp", "scenario", "card_type", "action", "item_id")


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    activity_level: str
    affinity: tuple[float, ...]
    scenario_membership: str


def _default_loadings():
    # weather, finance, news, video, copilot_content over 2 latent tastes
    return [[0.9, 0.0], [0.3, 0.9], [0.7, 0.6], [-0.5, 0.6], [0.2, 1.2]]


@dataclass
class GenConfig:
    """Generator parameters. Loaded from YAML/JSON with :func:`load_gen_config`.

    The scenario base logits were calibrated with :func:`calibrate_scenario_logits`
    so the default config lands at 1% classic CTR and 0.1% copilot CTR.
    """

    schema_version: int = GEN_SCHEMA_VERSION
    n_users: int = 20000
    cold_start_fraction: float = 0.4
    membership_active: dict = field(
        default_factory=lambda: {"classic_only": 0.5, "copilot_only": 0.0, "both": 0.5})
    membership_cold: dict = field(
        default_factory=lambda: {"classic_only": 0.0, "copilot_only": 0.75, "both": 0.25})
    active_rate: float = 6.0
    cold_rate_ratio: float = 0.1
    both_copilot_prob: float = 0.5
    history_days: int = 14
    card_mix: dict = field(default_factory=lambda: {
        "classic": {"weather": 0.0, "finance": 0.0, "news": 0.5, "video": 0.0},
        "copilot": {"weather": -0.5, "finance": -0.5, "news": 0.0, "video": -0.5,
                    "copilot_content": 0.5},
    })
    card_affinity_pull: float = 1.0
    scenario_base_logit: dict = field(
        default_factory=lambda: {"classic": -5.5225, "copilot": -8.3179})
    card_base_logit: dict = field(default_factory=lambda: {
        "weather": -0.3, "finance": 0.0, "news": 0.3, "video": 0.2, "copilot_content": 0.4})
    scenario_card_logit: dict = field(default_factory=lambda: {
        "classic": {"weather": 0.0, "finance": 0.0, "news": 0.0, "video": 0.0},
        "copilot": {"weather": -0.4, "finance": 0.0, "news": 0.2, "video": 0.0,
                    "copilot_content": 0.6},
    })
    affinity_scale: float = 2.0
    affinity_loadings: list = field(default_factory=_default_loadings)
    items_per_card: int = 500
    dwell_log_mean: float = 2.5
    dwell_log_sigma: float = 1.0
    dwell_affinity: float = 0.8

    def validate(self):
        if self.schema_version != GEN_SCHEMA_VERSION:
            raise ConfigError(f"unsupported generator schema_version {self.schema_version}")
        if self.n_users < 0:
            raise ConfigError("n_users must be >= 0")
        if not 0.0 <= self.cold_start_fraction <= 1.0:
            raise ConfigError(f"cold_start_fraction {self.cold_start_fraction} outside [0, 1]")
        if not 0.0 <= self.both_copilot_prob <= 1.0:
            raise ConfigError(f"both_copilot_prob {self.both_copilot_prob} outside [0, 1]")
        for name in ("membership_active", "membership_cold"):
            mix = getattr(self, name)
            if set(mix) - set(MEMBERSHIPS):
                raise ConfigError(f"{name}: unknown membership {sorted(set(mix) - set(MEMBERSHIPS))}")
            vals = [mix.get(m, 0.0) for m in MEMBERSHIPS]
            if any(v < 0 or v > 1 for v in vals) or abs(sum(vals) - 1.0) > 1e-9:
                raise ConfigError(f"{name} fractions must lie in [0, 1] and sum to 1")
        if self.active_rate < 0:
            raise ConfigError("active_rate must be >= 0")
        if not 0.0 <= self.cold_rate_ratio < 1.0:
            raise ConfigError("cold_rate_ratio must be in [0, 1): cold users see fewer impressions")
        if self.history_days < 0:
            raise ConfigError("history_days must be >= 0")
        if self.items_per_card < 1:
            raise ConfigError("items_per_card must be >= 1")
        if "copilot_content" in self.card_mix.get("classic", {}):
            raise ConfigError("copilot_content cards cannot be served in the classic scenario")
        if np.asarray(self.affinity_loadings, dtype=float).shape[0] != len(CARD_TYPES):
            raise ConfigError("affinity_loadings needs one row per card type")

    def to_dict(self):
        return dataclasses.asdict(self)


def gen_config_from_dict(data):
    known = {f.name for f in dataclasses.fields(GenConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
    cfg = GenConfig(**data)
    cfg.validate()
    return cfg


def load_gen_config(path):
    with open(path, encoding="utf-8") as f:
        return gen_config_from_dict(yaml.safe_load(f) or {})


# ---------------------------------------------------------------------------
# population

def generate_population(config: GenConfig, seed: int) -> list[UserProfile]:
    config.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0,))))
    n = config.n_users
    cold = rng.random(n) < config.cold_start_fraction
    u = rng.random(n)
    active_cdf = np.cumsum([config.membership_active.get(m, 0.0) for m in MEMBERSHIPS])
    cold_cdf = np.cumsum([config.membership_cold.get(m, 0.0) for m in MEMBERSHIPS])
    membership = np.where(cold,
                          np.searchsorted(cold_cdf, u, side="right"),
                          np.searchsorted(active_cdf, u, side="right"))
    membership = np.minimum(membership, len(MEMBERSHIPS) - 1)
    loadings = np.asarray(config.affinity_loadings, dtype=float)
    latent = rng.standard_normal((n, loadings.shape[1]))
    affinity = np.tanh(latent @ loadings.T)
    return [
        UserProfile(int(i), ACTIVITY_LEVELS[int(cold[i])],
                    tuple(float(a) for a in affinity[i]), MEMBERSHIPS[int(membership[i])])
        for i in range(n)
    ]


@dataclass(frozen=True)
class PopulationArrays:
    user_id: np.ndarray
    cold: np.ndarray          # bool
    membership: np.ndarray    # index into MEMBERSHIPS
    affinity: np.ndarray      # (n, |C|)

    @classmethod
    def from_profiles(cls, population):
        n = len(population)
        return cls(
            user_id=np.array([p.user_id for p in population], dtype=np.int64),
            cold=np.array([p.activity_level == "cold_start" for p in population], dtype=bool),
            membership=np.array([MEMBERSHIPS.index(p.scenario_membership) for p in population],
                                dtype=np.int64),
            affinity=np.array([p.affinity for p in population], dtype=float).reshape(n, len(CARD_TYPES)),
        )


# ---------------------------------------------------------------------------
# logs

@dataclass(frozen=True)
class EventLog:
    """Column store of events; categorical columns hold indices into the
    module-level name tuples."""

    user_id: np.ndarray
    timestamp: np.ndarray
    scenario: np.ndarray
    card_type: np.ndarray
    action: np.ndarray
    item_id: np.ndarray

    def __len__(self):
        return len(self.user_id)

    @classmethod
    def empty(cls):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, z, z)

    @classmethod
    def concat(cls, logs):
        logs = [lg for lg in logs if len(lg)]
        if not logs:
            return cls.empty()
        cols = {c: np.concatenate([getattr(lg, c) for lg in logs]) for c in EVENT_COLUMNS}
        order = np.lexsort((cols["action"], cols["item_id"], cols["user_id"], cols["timestamp"]))
        return cls(**{c: v[order] for c, v in cols.items()})

    def select(self, mask):
        return EventLog(**{c: getattr(self, c)[mask] for c in EVENT_COLUMNS})

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(EVENT_COLUMNS)
            scen = np.array(SCENARIOS)[self.scenario]
            card = np.array(CARD_TYPES)[self.card_type]
            act = np.array(ACTIONS)[self.action]
            w.writerows(zip(self.user_id.tolist(), self.timestamp.tolist(), scen.tolist(),
                            card.tolist(), act.tolist(), self.item_id.tolist()))

    @classmethod
    def read_csv(cls, path):
        with open(path, encoding="utf-8", newline="") as f:
            r = csv.reader(f)
            header = next(r, None)
            if header is None or tuple(header) != EVENT_COLUMNS:
                raise ContractError(f"{path}: expected header {','.join(EVENT_COLUMNS)}")
            rows = list(r)
        if not rows:
            return cls.empty()
        cols = list(zip(*rows))
        lookup = [None, None, SCENARIOS, CARD_TYPES, ACTIONS, None]
        out = {}
        for name, values, names in zip(EVENT_COLUMNS, cols, lookup):
            if names is None:
                out[name] = np.array(values, dtype=np.int64)
            else:
                index = {v: i for i, v in enumerate(names)}
                out[name] = np.array([index[v] for v in values], dtype=np.int64)
        return cls(**out)


@dataclass(frozen=True)
class Impressions:
    """Served impressions: one row per view event, with outcome labels."""

    user_id: np.ndarray
    timestamp: np.ndarray
    scenario: np.ndarray
    card_type: np.ndarray
    item_id: np.ndarray
    clicked: np.ndarray
    dwell: np.ndarray

    COLUMNS = ("user_id", "timestamp", "scenario", "card_type", "item_id", "clicked", "dwell")

    def __len__(self):
        return len(self.user_id)

    @classmethod
    def empty(cls):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, z, z, np.zeros(0))

    def select(self, mask):
        return Impressions(**{c: getattr(self, c)[mask] for c in self.COLUMNS})

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(**{c: np.concatenate([getattr(p, c) for p in parts]) for c in cls.COLUMNS})


@dataclass(frozen=True)
class GroundTruth:
    p_click: np.ndarray  # aligned with Impressions rows, strictly inside (0, 1)


class SimulatedDay(NamedTuple):
    events: EventLog
    impressions: Impressions
    truth: GroundTruth


def _card_tables(config):
    mix = np.full((len(SCENARIOS), len(CARD_TYPES)), -np.inf)
    for s, name in enumerate(SCENARIOS):
        for card, val in config.card_mix.get(name, {}).items():
            mix[s, CARD_TYPES.index(card)] = val
    inter = np.zeros((len(SCENARIOS), len(CARD_TYPES)))
    for s, name in enumerate(SCENARIOS):
        for card, val in config.scenario_card_logit.get(name, {}).items():
            inter[s, CARD_TYPES.index(card)] = val
    base_card = np.array([config.card_base_logit.get(c, 0.0) for c in CARD_TYPES])
    base_scen = np.array([config.scenario_base_logit[s] for s in SCENARIOS])
    return mix, inter, base_card, base_scen


def _day_rng(seed, day_index, block):
    ss = np.random.SeedSequence(seed, spawn_key=(1, day_index + DAY_KEY_OFFSET, block))
    return np.random.Generator(np.random.PCG64(ss))


def _draw_block(pop, lo, hi, day_index, config, seed, tables):
    """Draw one user block's impressions. Returns a dict of columns incl.
    the logit without the scenario base term, plus the block's rng so that
    outcome draws continue on the same stream."""
    mix, inter, base_card, _ = tables
    rng = _day_rng(seed, day_index, lo // USER_BLOCK)
    cold = pop.cold[lo:hi]
    rate = np.where(cold, config.active_rate * config.cold_rate_ratio, config.active_rate)
    n_imp = rng.poisson(rate)
    local = np.repeat(np.arange(hi - lo), n_imp)
    n = len(local)
    membership = pop.membership[lo:hi][local]
    both_pick = rng.random(n) < config.both_copilot_prob
    scenario = np.where(membership == MEMBERSHIPS.index("copilot_only"), COPILOT,
                        np.where(membership == MEMBERSHIPS.index("classic_only"), CLASSIC,
                                 np.where(both_pick, COPILOT, CLASSIC)))
    aff = pop.affinity[lo:hi][local]
    logits = mix[scenario] + config.card_affinity_pull * aff
    logits = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    cdf = np.cumsum(w, axis=1)
    u = rng.random(n) * cdf[:, -1]
    card = np.minimum((cdf < u[:, None]).sum(axis=1), len(CARD_TYPES) - 1)
    # a zero-weight card can never be picked: cdf is flat over it
    offset = rng.integers(0, SECONDS_PER_DAY, size=n)
    item = card * config.items_per_card + rng.integers(0, config.items_per_card, size=n)
    a_uc = aff[np.arange(n), card]
    rest = base_card[card] + config.affinity_scale * a_uc + inter[scenario, card]
    return dict(user_id=pop.user_id[lo:hi][local], offset=offset, scenario=scenario,
                card_type=card, item_id=item, rest_logit=rest, a_uc=a_uc), rng


def simulate_day(population, day_index: int, config: GenConfig, seed: int) -> SimulatedDay:
    """Simulate one day of impressions, clicks and dwell times.

    ``day_index`` may be negative for pre-history days (features only).
    """
    config.validate()
    pop = population if isinstance(population, PopulationArrays) else \
        PopulationArrays.from_profiles(population)
    tables = _card_tables(config)
    base_scen = tables[3]
    day_start = EPOCH + day_index * SECONDS_PER_DAY
    parts = []
    n_users = len(pop.user_id)
    for lo in range(0, n_users, USER_BLOCK):
        hi = min(lo + USER_BLOCK, n_users)
        cols, rng = _draw_block(pop, lo, hi, day_index, config, seed, tables)
        p = expit(base_scen[cols["scenario"]] + cols["rest_logit"])
        p = np.clip(p, 1e-12, 1 - 1e-12)
        clicked = rng.random(len(p)) < p
        dwell = np.where(
            clicked,
            rng.lognormal(config.dwell_log_mean + config.dwell_affinity * cols["a_uc"],
                          config.dwell_log_sigma),
            0.0)
        cols.update(p=p, clicked=clicked.astype(np.int64), dwell=dwell)
        parts.append(cols)
    if not parts or sum(len(c["p"]) for c in parts) == 0:
        return SimulatedDay(EventLog.empty(), Impressions.empty(), GroundTruth(np.zeros(0)))
    cat = {k: np.concatenate([c[k] for c in parts]) for k in parts[0]}
    ts = day_start + cat["offset"]
    order = np.lexsort((cat["item_id"], cat["user_id"], ts))
    imp = Impressions(
        user_id=cat["user_id"][order], timestamp=ts[order], scenario=cat["scenario"][order],
        card_type=cat["card_type"][order], item_id=cat["item_id"][order],
        clicked=cat["clicked"][order], dwell=cat["dwell"][order])
    truth = GroundTruth(cat["p"][order])
    views = EventLog(imp.user_id, imp.timestamp, imp.scenario, imp.card_type,
                     np.full(len(imp), VIEW, dtype=np.int64), imp.item_id)
    c = imp.clicked.astype(bool)
    clicks = EventLog(imp.user_id[c], imp.timestamp[c], imp.scenario[c], imp.card_type[c],
                      np.full(int(c.sum()), CLICK, dtype=np.int64), imp.item_id[c])
    return SimulatedDay(EventLog.concat([views, clicks]), imp, truth)


def simulate_days(population, day_indices, config, seed):
    pop = PopulationArrays.from_profiles(population) if not isinstance(population, PopulationArrays) \
        else population
    return {d: simulate_day(pop, d, config, seed) for d in day_indices}


def oracle_auc(event_labels, ground_truth) -> float:
    """AUC of the true click probabilities against realised labels."""
    from .metrics import auc

    p = ground_truth.p_click if isinstance(ground_truth, GroundTruth) else ground_truth
    return auc(event_labels, p)


def calibrate_scenario_logits(config: GenConfig, targets=None, seed=0, n_days=3,
                              tol=1e-7) -> dict:
    """Bisection on each scenario's base logit so that the expected CTR over
    simulated impressions hits ``targets`` (default 1% classic, 0.1% copilot)."""
    targets = targets or {"classic": 0.01, "copilot": 0.001}
    pop = PopulationArrays.from_profiles(generate_population(config, seed))
    tables = _card_tables(config)
    rest, scen = [], []
    for d in range(n_days):
        for lo in range(0, len(pop.user_id), USER_BLOCK):
            hi = min(lo + USER_BLOCK, len(pop.user_id))
            cols, _ = _draw_block(pop, lo, hi, d, config, seed, tables)
            rest.append(cols["rest_logit"])
            scen.append(cols["scenario"])
    rest, scen = np.concatenate(rest), np.concatenate(scen)
    out = {}
    for s, name in enumerate(SCENARIOS):
        r = rest[scen == s]
        if len(r) == 0:
            out[name] = config.scenario_base_logit[name]
            continue
        lo, hi = -30.0, 30.0
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if expit(mid + r).mean() < targets[name]:
                lo = mid
            else:
                hi = mid
        out[name] = 0.5 * (lo + hi)
    return out


def write_population_csv(population, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["user_id", "activity_level", "scenario_membership"]
                   + [f"affinity_{c}" for c in CARD_TYPES])
        for p in population:
            w.writerow([p.user_id, p.activity_level, p.scenario_membership]
                       + [repr(a) for a in p.affinity])


def read_population_csv(path):
    with open(path, encoding="utf-8", newline="") as f:
        r = csv.reader(f)
        next(r)
        return [UserProfile(int(row[0]), row[1], tuple(float(a) for a in row[3:]), row[2])
                for row in r]


def write_impressions_csv(imp: Impressions, path, truth: GroundTruth | None = None):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["user_id", "timestamp", "scenario", "card_type", "item_id", "clicked", "dwell"]
                   + (["p_true"] if truth is not None else []))
        scen = np.array(SCENARIOS)[imp.scenario]
        card = np.array(CARD_TYPES)[imp.card_type]
        cols = [imp.user_id.tolist(), imp.timestamp.tolist(), scen.tolist(), card.tolist(),
                imp.item_id.tolist(), imp.clicked.tolist(), [repr(x) for x in imp.dwell.tolist()]]
        if truth is not None:
            cols.append([repr(x) for x in truth.p_click.tolist()])
        w.writerows(zip(*cols))


def read_impressions_csv(path):
    with open(path, encoding="utf-8", newline="") as f:
        r = csv.reader(f)
        header = next(r)
        rows = list(r)
    has_truth = header[-1] == "p_true"
    if not rows:
        return Impressions.empty(), (GroundTruth(np.zeros(0)) if has_truth else None)
    cols = list(zip(*rows))
    imp = Impressions(
        user_id=np.array(cols[0], dtype=np.int64),
        timestamp=np.array(cols[1], dtype=np.int64),
        scenario=np.array([SCENARIOS.index(v) for v in cols[2]], dtype=np.int64),
        card_type=np.array([CARD_TYPES.index(v) for v in cols[3]], dtype=np.int64),
        item_id=np.array(cols[4], dtype=np.int64),
        clicked=np.array(cols[5], dtype=np.int64),
        dwell=np.array(cols[6], dtype=float),
    )
    truth = GroundTruth(np.array(cols[7], dtype=float)) if has_truth else None
    return imp, truth
