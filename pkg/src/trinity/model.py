"""The scenario-aware multi-task ranking network and its training loop.

Data flow for one batch::

    bucket ids -> field embeddings (F x d)
      -> SENet reweighting -> linear projection to floor(F*d/3)     [compress]
      -> x 2*sigmoid(gate(card_emb, scenario_emb))                  [scenario gate]
      -> one PLE extraction level (shared + per-task experts)
      -> per-task towers, each hidden pre-activation
         x 2*sigmoid(adapter(profile, card_emb, scenario_emb))      [profile adapter]
      -> sigmoid click head, softmax duration head

The gate and adapter output layers start at zero, so at initialisation both
multipliers are exactly 1 and the network equals its gate-free subnetwork.

Ablation switches on :class:`ModelConfig` remove the gate and adapter
(``use_gate``/``use_adapter``), feed card/scenario embeddings to the experts
as plain inputs (``context_concat``), or skip embeddings entirely and feed
standardised counts (``input_mode="dense"``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dense2sparse import BinBoundaries, NormStats, encode, fit_encoder, fit_normalizer
from .errors import ConfigError, ContractError, NumericError
from .features import N_DURATION_CLASSES, N_PROFILE, SampleRows
from .synthgen import CARD_TYPES, SCENARIOS

TASKS = ("click", "duration")
_ENCODE_CHUNK = 16384


@dataclass(frozen=True)
class ModelConfig:
    n_fields: int = 120
    n_buckets: int = 16
    reserve_zero: bool = True
    embed_dim: int = 8
    senet_reduction: int = 16
    gate_hidden: int = 32
    adapter_hidden: int = 32
    expert_width: int = 128
    tower_widths: tuple = (128, 64)
    n_shared_experts: int = 2
    n_task_experts: int = 2
    n_duration: int = N_DURATION_CLASSES
    duration_weight: float = 0.3
    batch_size: int = 1024
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-6
    input_mode: str = "binned"
    use_gate: bool = True
    use_adapter: bool = True
    context_concat: bool = False
    n_profile: int = N_PROFILE

    def __post_init__(self):
        object.__setattr__(self, "tower_widths", tuple(int(w) for w in self.tower_widths))

    @property
    def compressed_dim(self):
        if self.input_mode == "dense":
            return self.n_fields
        return (self.n_fields * self.embed_dim) // 3

    @property
    def senet_hidden(self):
        return max(1, self.n_fields // self.senet_reduction)

    @property
    def expert_input_dim(self):
        return self.compressed_dim + (2 * self.embed_dim if self.context_concat else 0)

    @property
    def uses_context(self):
        return self.use_gate or self.use_adapter or self.context_concat

    def validate(self):
        if self.input_mode not in ("binned", "dense"):
            raise ConfigError(f"input_mode must be 'binned' or 'dense', got {self.input_mode!r}")
        ints = dict(n_fields=self.n_fields, embed_dim=self.embed_dim, expert_width=self.expert_width,
                    gate_hidden=self.gate_hidden, adapter_hidden=self.adapter_hidden,
                    senet_reduction=self.senet_reduction, batch_size=self.batch_size,
                    n_duration=self.n_duration)
        for k, v in ints.items():
            if int(v) < 1:
                raise ConfigError(f"{k} must be >= 1")
        if not 2 <= self.n_buckets <= 256:
            raise ConfigError("n_buckets must be in [2, 256]")
        if self.compressed_dim < 1:
            raise ConfigError("compressed dimension must be >= 1")
        if not self.tower_widths or min(self.tower_widths) < 1:
            raise ConfigError("tower widths must all be >= 1")
        if self.n_shared_experts < 0 or self.n_task_experts < 0 or \
                self.n_shared_experts + self.n_task_experts < 1:
            raise ConfigError("need at least one expert per task")
        if self.learning_rate <= 0 or self.duration_weight < 0:
            raise ConfigError("learning_rate must be > 0 and duration_weight >= 0")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["tower_widths"] = list(self.tower_widths)
        return d

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def model_config_from_dict(data):
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**data).validate()


def expert_names(cfg):
    shared = [f"shared{i}" for i in range(cfg.n_shared_experts)]
    per_task = {t: [f"{t}{i}" for i in range(cfg.n_task_experts)] for t in TASKS}
    return shared, per_task


def task_outputs(cfg, task):
    return 1 if task == "click" else cfg.n_duration


# ---------------------------------------------------------------------------
# parameters

def param_shapes(cfg: ModelConfig) -> dict:
    """Name -> shape for every trainable array, in a fixed order."""
    F, d = cfg.n_fields, cfg.embed_dim
    shapes = {}
    if cfg.input_mode == "binned":
        shapes["emb"] = (F * cfg.n_buckets, d)
        shapes["se_w1"] = (F, cfg.senet_hidden)
        shapes["se_b1"] = (cfg.senet_hidden,)
        shapes["se_w2"] = (cfg.senet_hidden, F)
        shapes["se_b2"] = (F,)
        shapes["proj_w"] = (F * d, cfg.compressed_dim)
        shapes["proj_b"] = (cfg.compressed_dim,)
    if cfg.uses_context:
        shapes["card_emb"] = (len(CARD_TYPES), d)
        shapes["scen_emb"] = (len(SCENARIOS), d)
    if cfg.use_gate:
        shapes["gate_w1"] = (2 * d, cfg.gate_hidden)
        shapes["gate_b1"] = (cfg.gate_hidden,)
        shapes["gate_w2"] = (cfg.gate_hidden, cfg.compressed_dim)
        shapes["gate_b2"] = (cfg.compressed_dim,)
    din, he = cfg.expert_input_dim, cfg.expert_width
    shared, per_task = expert_names(cfg)
    for name in shared + per_task["click"] + per_task["duration"]:
        shapes[f"exp_{name}_w"] = (din, he)
        shapes[f"exp_{name}_b"] = (he,)
    n_mix = cfg.n_shared_experts + cfg.n_task_experts
    t_total = sum(cfg.tower_widths)
    for task in TASKS:
        shapes[f"pgate_{task}_w"] = (din, n_mix)
        shapes[f"pgate_{task}_b"] = (n_mix,)
        prev = he
        for i, w in enumerate(cfg.tower_widths):
            shapes[f"tower_{task}_w{i}"] = (prev, w)
            shapes[f"tower_{task}_b{i}"] = (w,)
            prev = w
        shapes[f"tower_{task}_out_w"] = (prev, task_outputs(cfg, task))
        shapes[f"tower_{task}_out_b"] = (task_outputs(cfg, task),)
        if cfg.use_adapter:
            shapes[f"adp_{task}_w1"] = (cfg.n_profile + 2 * d, cfg.adapter_hidden)
            shapes[f"adp_{task}_b1"] = (cfg.adapter_hidden,)
            shapes[f"adp_{task}_w2"] = (cfg.adapter_hidden, t_total)
            shapes[f"adp_{task}_b2"] = (t_total,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def _zero_init(name):
    # gate/adapter output layers start at zero so both multipliers are 1
    return name in ("gate_w2", "gate_b2") or (name.startswith("adp_") and name[-2:] in ("w2", "b2"))


def init_params(cfg: ModelConfig, seed: int) -> dict:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(3,))))
    params = {}
    for name, shape in param_shapes(cfg).items():
        if _zero_init(name) or len(shape) == 1:
            params[name] = np.zeros(shape)
        elif name in ("emb", "card_emb", "scen_emb"):
            params[name] = rng.normal(0.0, 0.01, size=shape)
        else:
            params[name] = nn.glorot_uniform(rng, *shape)
    return params


# ---------------------------------------------------------------------------
# building blocks (forward returns (out, cache); backward returns (dinput, grads))

def senet_forward(p, emb):
    """(n, F, d) field embeddings -> (n, floor(F*d/3)) compressed vector."""
    n, F, d = emb.shape
    if p["se_w1"].shape[0] != F or p["proj_w"].shape[0] != F * d:
        raise ContractError(f"senet: got {F} fields x {d} dims, weights expect "
                            f"{p['se_w1'].shape[0]} fields")
    z, c_sq = nn.reduce_mean_per_field_forward(emb)
    h, c_a1 = nn.affine_forward(z, p["se_w1"], p["se_b1"], "senet_squeeze")
    h, c_e1 = nn.elu_forward(h, "senet_elu")
    s, c_a2 = nn.affine_forward(h, p["se_w2"], p["se_b2"], "senet_excite")
    s, c_s = nn.sigmoid_forward(s, "senet_sigmoid")
    scaled, c_m = nn.mul_forward(emb, s[:, :, None], "senet_scale")
    out, c_p = nn.affine_forward(scaled.reshape(n, F * d), p["proj_w"], p["proj_b"], "senet_project")
    return out, (c_sq, c_a1, c_e1, c_a2, c_s, c_m, c_p, emb.shape)


def senet_backward(dout, cache):
    c_sq, c_a1, c_e1, c_a2, c_s, c_m, c_p, shape = cache
    g = {}
    dflat, g["proj_w"], g["proj_b"] = nn.affine_backward(dout, c_p)
    demb_direct, ds = nn.mul_backward(dflat.reshape(shape), c_m)
    ds = nn.sigmoid_backward(ds[:, :, 0], c_s)
    dh, g["se_w2"], g["se_b2"] = nn.affine_backward(ds, c_a2)
    dh = nn.elu_backward(dh, c_e1)
    dz, g["se_w1"], g["se_b1"] = nn.affine_backward(dh, c_a1)
    demb = demb_direct + nn.reduce_mean_per_field_backward(dz, c_sq)
    return demb, g


def gate_forward(p, compressed, ctx):
    """Multiply ``compressed`` by 2*sigmoid(MLP(ctx)), element-wise in (0, 2)."""
    h, c1 = nn.affine_forward(ctx, p["gate_w1"], p["gate_b1"], "gate_hidden")
    h, ce = nn.elu_forward(h, "gate_elu")
    pre, c2 = nn.affine_forward(h, p["gate_w2"], p["gate_b2"], "gate_out")
    s, cs = nn.sigmoid_forward(pre, "gate_sigmoid")
    g = 2.0 * s
    out, cm = nn.mul_forward(g, compressed, "gate_apply")
    return out, (c1, ce, c2, cs, cm)


def gate_backward(dout, cache):
    c1, ce, c2, cs, cm = cache
    g = {}
    dg, dcomp = nn.mul_backward(dout, cm)
    dpre = nn.sigmoid_backward(2.0 * dg, cs)
    dh, g["gate_w2"], g["gate_b2"] = nn.affine_backward(dpre, c2)
    dh = nn.elu_backward(dh, ce)
    dctx, g["gate_w1"], g["gate_b1"] = nn.affine_backward(dh, c1)
    return dcomp, dctx, g


def ple_forward(p, cfg, x):
    """One extraction level. Returns ``{task: (n, expert_width)}``."""
    shared, per_task = expert_names(cfg)
    outs, caches = {}, {}
    for name in shared + per_task["click"] + per_task["duration"]:
        h, ca = nn.affine_forward(x, p[f"exp_{name}_w"], p[f"exp_{name}_b"], f"expert_{name}")
        h, ce = nn.elu_forward(h, f"expert_{name}_elu")
        outs[name], caches[name] = h, (ca, ce)
    result, task_caches = {}, {}
    for task in TASKS:
        members = per_task[task] + shared
        logits, cg = nn.affine_forward(x, p[f"pgate_{task}_w"], p[f"pgate_{task}_b"], f"ple_gate_{task}")
        w, cs = nn.softmax_forward(logits, f"ple_gate_{task}_softmax")
        stack = np.stack([outs[m] for m in members], axis=1)
        result[task] = np.einsum("ne,neh->nh", w, stack)
        task_caches[task] = (members, cg, cs, w, stack)
    return result, (caches, task_caches)


def ple_backward(dres, cache):
    caches, task_caches = cache
    g = {}
    dx = 0.0
    dexp = {}
    for task, (members, cg, cs, w, stack) in task_caches.items():
        dr = dres[task]
        dw = np.einsum("nh,neh->ne", dr, stack)
        dstack = w[:, :, None] * dr[:, None, :]
        for i, m in enumerate(members):
            dexp[m] = dexp.get(m, 0.0) + dstack[:, i]
        dlogits = nn.softmax_backward(dw, cs)
        dxi, g[f"pgate_{task}_w"], g[f"pgate_{task}_b"] = nn.affine_backward(dlogits, cg)
        dx = dx + dxi
    for name, (ca, ce) in caches.items():
        dh = nn.elu_backward(dexp[name], ce)
        dxi, g[f"exp_{name}_w"], g[f"exp_{name}_b"] = nn.affine_backward(dh, ca)
        dx = dx + dxi
    return dx, g


def adapter_forward(p, task, adp_in):
    """2*sigmoid(MLP(profile, card_emb, scenario_emb)) covering all tower layers."""
    h, c1 = nn.affine_forward(adp_in, p[f"adp_{task}_w1"], p[f"adp_{task}_b1"], f"adapter_{task}")
    h, ce = nn.elu_forward(h, f"adapter_{task}_elu")
    pre, c2 = nn.affine_forward(h, p[f"adp_{task}_w2"], p[f"adp_{task}_b2"], f"adapter_{task}_out")
    s, cs = nn.sigmoid_forward(pre, f"adapter_{task}_sigmoid")
    return 2.0 * s, (c1, ce, c2, cs)


def adapter_backward(task, da, cache):
    c1, ce, c2, cs = cache
    g = {}
    dpre = nn.sigmoid_backward(2.0 * da, cs)
    dh, g[f"adp_{task}_w2"], g[f"adp_{task}_b2"] = nn.affine_backward(dpre, c2)
    dh = nn.elu_backward(dh, ce)
    din, g[f"adp_{task}_w1"], g[f"adp_{task}_b1"] = nn.affine_backward(dh, c1)
    return din, g


def tower_forward(p, cfg, task, r, scale=None):
    """Hidden layers with optional per-layer multipliers before each ELU."""
    caches = []
    h = r
    offset = 0
    for i, w in enumerate(cfg.tower_widths):
        pre, ca = nn.affine_forward(h, p[f"tower_{task}_w{i}"], p[f"tower_{task}_b{i}"],
                                    f"tower_{task}_{i}")
        cm = None
        if scale is not None:
            pre, cm = nn.mul_forward(pre, scale[:, offset:offset + w], f"adapter_{task}_apply_{i}")
        offset += w
        h, ce = nn.elu_forward(pre, f"tower_{task}_{i}_elu")
        caches.append((ca, cm, ce))
    out, co = nn.affine_forward(h, p[f"tower_{task}_out_w"], p[f"tower_{task}_out_b"],
                                f"tower_{task}_out")
    return out, (caches, co)


def tower_backward(cfg, task, dout, cache):
    caches, co = cache
    g = {}
    dh, g[f"tower_{task}_out_w"], g[f"tower_{task}_out_b"] = nn.affine_backward(dout, co)
    dscale = []
    for i in reversed(range(len(cfg.tower_widths))):
        ca, cm, ce = caches[i]
        dpre = nn.elu_backward(dh, ce)
        if cm is not None:
            dpre, ds = nn.mul_backward(dpre, cm)
            dscale.append(ds)
        dh, g[f"tower_{task}_w{i}"], g[f"tower_{task}_b{i}"] = nn.affine_backward(dpre, ca)
    ds = np.concatenate(dscale[::-1], axis=1) if dscale else None
    return dh, ds, g


# ---------------------------------------------------------------------------
# full network

@dataclass
class ModelInput:
    """Network-ready batch. ``features`` holds per-field bucket ids (binned
    mode) or standardised dense values (dense mode)."""

    features: np.ndarray
    card: np.ndarray
    scenario: np.ndarray
    profile: np.ndarray
    label_click: np.ndarray | None = None
    label_duration: np.ndarray | None = None

    def __len__(self):
        return len(self.card)

    def take(self, idx):
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return ModelInput(self.features[idx], self.card[idx], self.scenario[idx],
                          self.profile[idx], pick(self.label_click), pick(self.label_duration))


def field_offsets(cfg):
    return (np.arange(cfg.n_fields, dtype=np.int64) * cfg.n_buckets)[None, :]


def network_forward(p, cfg: ModelConfig, inp: ModelInput):
    """Returns (click_logit (n,), duration_logits (n, n_t), cache)."""
    cache = {}
    if cfg.input_mode == "binned":
        ids = np.asarray(inp.features, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != cfg.n_fields:
            raise ContractError(f"expected (n, {cfg.n_fields}) bucket ids, got {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.n_buckets):
            raise ContractError(f"bucket id out of table range [0, {cfg.n_buckets})")
        emb, cache["emb"] = nn.embedding_forward(ids + field_offsets(cfg), p["emb"], "field_embedding")
        comp, cache["senet"] = senet_forward(p, emb)
    else:
        comp = np.asarray(inp.features, dtype=float)
        if comp.ndim != 2 or comp.shape[1] != cfg.n_fields:
            raise ContractError(f"expected (n, {cfg.n_fields}) dense features, got {comp.shape}")
    if cfg.uses_context:
        card_e, cache["card"] = nn.embedding_forward(inp.card, p["card_emb"], "card_embedding")
        scen_e, cache["scen"] = nn.embedding_forward(inp.scenario, p["scen_emb"], "scenario_embedding")
        ctx, cache["ctx"] = nn.concat_forward([card_e, scen_e])
    x = comp
    if cfg.use_gate:
        x, cache["gate"] = gate_forward(p, comp, ctx)
    if cfg.context_concat:
        x, cache["xcat"] = nn.concat_forward([x, ctx])
    reps, cache["ple"] = ple_forward(p, cfg, x)
    if cfg.use_adapter:
        adp_in, cache["adp_in"] = nn.concat_forward([np.asarray(inp.profile, dtype=float), card_e, scen_e])
    outs = {}
    for task in TASKS:
        scale = None
        if cfg.use_adapter:
            scale, cache[f"adp_{task}"] = adapter_forward(p, task, adp_in)
        outs[task], cache[f"tower_{task}"] = tower_forward(p, cfg, task, reps[task], scale)
    return outs["click"][:, 0], outs["duration"], cache


def network_backward(p, cfg: ModelConfig, cache, dclick, ddur):
    grads = {}
    douts = {"click": dclick[:, None], "duration": ddur}
    dreps = {}
    dadp_in = 0.0
    for task in TASKS:
        dr, dscale, g = tower_backward(cfg, task, douts[task], cache[f"tower_{task}"])
        grads.update(g)
        dreps[task] = dr
        if cfg.use_adapter:
            di, g = adapter_backward(task, dscale, cache[f"adp_{task}"])
            grads.update(g)
            dadp_in = dadp_in + di
    dx, g = ple_backward(dreps, cache["ple"])
    grads.update(g)
    dctx = 0.0
    if cfg.use_adapter:
        _dprof, dcard_a, dscen_a = nn.concat_backward(dadp_in, cache["adp_in"])
        dctx = dctx + np.concatenate([dcard_a, dscen_a], axis=1)
    if cfg.context_concat:
        dx, dctx_c = nn.concat_backward(dx, cache["xcat"])
        dctx = dctx + dctx_c
    if cfg.use_gate:
        dx, dctx_g, g = gate_backward(dx, cache["gate"])
        grads.update(g)
        dctx = dctx + dctx_g
    if cfg.uses_context:
        dcard, dscen = nn.concat_backward(dctx, cache["ctx"])
        grads["card_emb"] = nn.embedding_backward(dcard, cache["card"])
        grads["scen_emb"] = nn.embedding_backward(dscen, cache["scen"])
    if cfg.input_mode == "binned":
        demb, g = senet_backward(dx, cache["senet"])
        grads.update(g)
        grads["emb"] = nn.embedding_backward(demb, cache["emb"])
    return grads


def batch_loss(cfg, click_logit, dur_logits, y_click, y_dur):
    """Mean BCE(click) + duration_weight * mean CE(duration), computed from
    logits, with gradients w.r.t. both logit arrays."""
    n = click_logit.shape[0]
    y = np.asarray(y_click, dtype=float)
    bce = np.mean(np.logaddexp(0.0, click_logit) - y * click_logit)
    p = nn.expit(click_logit)
    dclick = (p - y) / n
    z = dur_logits - dur_logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    yd = np.asarray(y_dur, dtype=np.int64)
    ce = np.mean(logsum - z[np.arange(n), yd])
    probs = np.exp(z - logsum[:, None])
    ddur = probs.copy()
    ddur[np.arange(n), yd] -= 1.0
    ddur *= cfg.duration_weight / n
    return float(bce + cfg.duration_weight * ce), float(bce), dclick, ddur


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    """Complete model state; self-contained for inference."""

    config: ModelConfig
    params: dict
    norm: NormStats
    bins: BinBoundaries | None
    adam: nn.AdamState
    lineage: dict = field(default_factory=lambda: {"created_day": None, "parent_id": None,
                                                   "accepted": None})

    @property
    def config_hash(self):
        return self.config.hash()

    @property
    def id(self):
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()[:12]

    def copy(self, **lineage):
        lin = dict(self.lineage)
        lin.update(lineage)
        return Checkpoint(self.config, {k: v.copy() for k, v in self.params.items()},
                          self.norm, self.bins, self.adam.copy(), lin)

    def prepare(self, rows: SampleRows) -> ModelInput:
        """Encode rows with this checkpoint's own frozen transforms."""
        cfg = self.config
        if rows.dense.shape[1] != cfg.n_fields:
            raise ContractError(f"rows have {rows.dense.shape[1]} dense features; model expects "
                                f"{cfg.n_fields}")
        # stored compactly; batches are widened to float64 inside the network
        binned = cfg.input_mode == "binned"
        feats = np.empty(rows.dense.shape, dtype=np.uint8 if binned else np.float32)
        for lo in range(0, len(rows), _ENCODE_CHUNK):
            sl = slice(lo, lo + _ENCODE_CHUNK)
            feats[sl] = encode(rows.dense[sl], self.norm, self.bins) if binned \
                else self.norm.transform(rows.dense[sl])
        return ModelInput(feats, rows.card_type, rows.scenario, rows.profile,
                          rows.label_click, rows.label_duration)


def fit_transforms(cfg: ModelConfig, train_dense):
    if cfg.input_mode == "binned":
        return fit_encoder(train_dense, cfg.n_buckets, cfg.reserve_zero)
    return fit_normalizer(train_dense), None


def init_model(cfg: ModelConfig, seed: int, train_dense=None, norm=None, bins=None) -> Checkpoint:
    """Fresh checkpoint. Transforms are fitted on ``train_dense`` unless given."""
    cfg.validate()
    if norm is None:
        if train_dense is None:
            train_dense = np.zeros((1, cfg.n_fields))
        norm, bins = fit_transforms(cfg, train_dense)
    params = init_params(cfg, seed)
    adam = nn.AdamState.for_params(params, lr=cfg.learning_rate, beta1=cfg.beta1,
                                   beta2=cfg.beta2, eps=cfg.adam_eps)
    return Checkpoint(cfg, params, norm, bins, adam)


@dataclass(frozen=True)
class Prediction:
    p_click: np.ndarray
    duration_probs: np.ndarray


def predict_input(ckpt: Checkpoint, inp: ModelInput, chunk=8192) -> Prediction:
    pc, pd = [], []
    for lo in range(0, len(inp), chunk):
        part = inp.take(slice(lo, lo + chunk))
        z, dl, _ = network_forward(ckpt.params, ckpt.config, part)
        pc.append(nn.expit(z))
        pd.append(nn.softmax_forward(dl, "duration_head")[0])
    if not pc:
        return Prediction(np.zeros(0), np.zeros((0, ckpt.config.n_duration)))
    p = np.clip(np.concatenate(pc), nn.PROB_CLIP, 1.0 - nn.PROB_CLIP)
    return Prediction(p, np.concatenate(pd))


def forward(ckpt: Checkpoint, rows: SampleRows) -> Prediction:
    """Full pipeline from raw rows: encode -> network -> heads."""
    return predict_input(ckpt, ckpt.prepare(rows))


def train(data, init: Checkpoint, epochs: int, seed: int, log=None, created_day=None,
          first_epoch=0) -> Checkpoint:
    """Adam on mean BCE(click) + duration_weight * CE(duration).

    ``data`` is a :class:`ModelInput` (already encoded) or :class:`SampleRows`.
    Batches are reshuffled per epoch from ``SeedSequence(seed, spawn_key=(2, epoch))``;
    ``first_epoch`` lets a run split into stages continue the shuffle sequence.
    ``log``, if given, receives one mean training loss per epoch.
    """
    inp = data if isinstance(data, ModelInput) else init.prepare(data)
    if len(inp) == 0:
        raise ContractError("train needs at least one row")
    ckpt = init.copy(parent_id=init.id, created_day=created_day, accepted=None)
    cfg = ckpt.config
    for epoch in range(first_epoch, first_epoch + epochs):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(2, epoch))))
        order = rng.permutation(len(inp))
        total, seen = 0.0, 0
        for b, lo in enumerate(range(0, len(inp), cfg.batch_size)):
            batch = inp.take(order[lo:lo + cfg.batch_size])
            try:
                loss, grads = loss_and_grads(ckpt.params, cfg, batch)
                nn.adam_step(ckpt.params, grads, ckpt.adam)
            except NumericError as exc:
                raise NumericError(f"{exc} (epoch {epoch}, batch {b})", layer=exc.layer,
                                   batch_index=b) from exc
            total += loss * len(batch)
            seen += len(batch)
        if log is not None:
            log.append(total / seen)
    return ckpt


def loss_and_grads(params, cfg, batch: ModelInput):
    z, dl, cache = network_forward(params, cfg, batch)
    loss, _, dz, ddl = batch_loss(cfg, z, dl, batch.label_click, batch.label_duration)
    return loss, network_backward(params, cfg, cache, dz, ddl)
