"""Acceptance gate. Each test prints one PASS/FAIL line (also collected in the
terminal summary). The long runs go through the installed CLI so time and
peak memory are measured on a fresh process."""

import dataclasses
import itertools
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE, random_log
from gradcheck import numeric_grad, rel_error
from test_features import brute_force_tensor
from test_metrics import pairwise_auc
from trinity import harness as H
from trinity import metrics as M
from trinity import model as Mdl
from trinity import nn
from trinity.dense2sparse import encode, encode_linear_scan, fit_encoder
from trinity.features import build_tensor
from trinity.model import ModelConfig, ModelInput
from trinity.updater import UpdaterConfig, decide, run_daily_loop

SEEDS = (0, 1, 2)


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------------------
# 1. gradients

def _check(fwd, bwd, args, rng):
    """Max relative error over every array in ``args`` for objective sum(R * fwd)."""
    out = fwd(*args)
    R = rng.normal(size=np.shape(out))
    analytic = bwd(R, *args)
    f = lambda: float(np.sum(fwd(*args) * R))  # noqa: E731
    return max(rel_error(a, numeric_grad(f, x)) for a, x in zip(analytic, args) if a is not None)


def _layer_errors(rng):
    errs = {}
    x, W, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=3)
    errs["affine"] = _check(lambda x, W, b: nn.affine_forward(x, W, b)[0],
                            lambda R, x, W, b: nn.affine_backward(R, nn.affine_forward(x, W, b)[1]),
                            (x, W, b), rng)
    for kind in ("elu", "sigmoid", "softmax"):
        fwd, bwd = nn.LAYERS[kind]
        z = rng.normal(scale=2.0, size=(4, 5))
        z[np.abs(z) < 1e-3] = 0.5
        errs[kind] = _check(lambda z: fwd(z)[0], lambda R, z: (bwd(R, fwd(z)[1]),), (z,), rng)
    a, s = rng.normal(size=(4, 3, 2)), rng.normal(size=(4, 3, 1))
    errs["elementwise_mul"] = _check(lambda a, s: nn.mul_forward(a, s)[0],
                                     lambda R, a, s: nn.mul_backward(R, nn.mul_forward(a, s)[1]),
                                     (a, s), rng)
    p, q = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
    errs["concat"] = _check(lambda p, q: nn.concat_forward([p, q])[0],
                            lambda R, p, q: nn.concat_backward(R, nn.concat_forward([p, q])[1]),
                            (p, q), rng)
    e = rng.normal(size=(4, 3, 2))
    errs["reduce_mean_per_field"] = _check(
        lambda e: nn.reduce_mean_per_field_forward(e)[0],
        lambda R, e: (nn.reduce_mean_per_field_backward(R, nn.reduce_mean_per_field_forward(e)[1]),),
        (e,), rng)
    table, ids = rng.normal(size=(6, 3)), rng.integers(0, 6, size=(4, 2))
    errs["embedding_lookup"] = _check(
        lambda t: nn.embedding_forward(ids, t)[0],
        lambda R, t: (nn.embedding_backward(R, nn.embedding_forward(ids, t)[1]),), (table,), rng)
    pr, y = rng.uniform(0.05, 0.95, size=6), rng.integers(0, 2, 6).astype(float)
    errs["bce"] = _check(lambda pr: nn.loss_bce(pr, y)[0], lambda R, pr: (R * nn.loss_bce(pr, y)[1],),
                         (pr,), rng)
    probs, yc = nn.softmax_forward(rng.normal(size=(5, 4)))[0], rng.integers(0, 4, 5)
    logits = rng.normal(size=(5, 4))
    errs["softmax_ce"] = _check(
        lambda z: nn.loss_softmax_ce(nn.softmax_forward(z)[0], yc)[0],
        lambda R, z: (R * nn.loss_softmax_ce(nn.softmax_forward(z)[0], yc)[1],), (logits,), rng)
    del probs
    errs.update(_block_errors(rng))
    return errs


def _param_check(fwd, bwd, params, inputs, rng):
    """Gradient check of a model block w.r.t. its parameters and inputs."""
    out = fwd(params, *inputs)
    R = rng.normal(size=out.shape)
    dinputs, grads = bwd(R, params, *inputs)
    f = lambda: float(np.sum(fwd(params, *inputs) * R))  # noqa: E731
    errs = [rel_error(grads[k], numeric_grad(f, params[k])) for k in grads]
    errs += [rel_error(d, numeric_grad(f, x)) for d, x in zip(dinputs, inputs)]
    return max(errs)


def _block_errors(rng):
    cfg = ModelConfig(n_fields=6, n_buckets=4, embed_dim=3, senet_reduction=2, gate_hidden=4,
                      adapter_hidden=3, expert_width=5, tower_widths=(4, 3))
    p = {k: rng.normal(scale=0.5, size=v.shape) for k, v in Mdl.init_params(cfg, 0).items()}
    errs = {}
    emb = rng.normal(size=(4, 6, 3))
    errs["senet"] = _param_check(
        lambda p, e: Mdl.senet_forward(p, e)[0],
        lambda R, p, e: (lambda d: ((d[0],), d[1]))(Mdl.senet_backward(R, Mdl.senet_forward(p, e)[1])),
        p, (emb,), rng)
    comp, ctx = rng.normal(size=(4, cfg.compressed_dim)), rng.normal(size=(4, p["gate_w1"].shape[0]))
    errs["context_gate"] = _param_check(
        lambda p, c, x: Mdl.gate_forward(p, c, x)[0],
        lambda R, p, c, x: (lambda d: ((d[0], d[1]), d[2]))(Mdl.gate_backward(R, Mdl.gate_forward(p, c, x)[1])),
        p, (comp, ctx), rng)
    xin = rng.normal(size=(4, cfg.compressed_dim))
    for task in Mdl.TASKS:
        other = [t for t in Mdl.TASKS if t != task][0]

        def ple_fwd(p, x, task=task):
            return Mdl.ple_forward(p, cfg, x)[0][task]

        def ple_bwd(R, p, x, task=task, other=other):
            res, cache = Mdl.ple_forward(p, cfg, x)
            dx, g = Mdl.ple_backward({task: R, other: np.zeros_like(res[other])}, cache)
            return (dx,), g

        errs[f"ple_{task}"] = _param_check(ple_fwd, ple_bwd, p, (xin,), rng)
        adp_in = rng.normal(size=(4, p[f"adp_{task}_w1"].shape[0]))
        errs[f"adapter_{task}"] = _param_check(
            lambda p, a, task=task: Mdl.adapter_forward(p, task, a)[0],
            lambda R, p, a, task=task: (lambda d: ((d[0],), d[1]))(
                Mdl.adapter_backward(task, R, Mdl.adapter_forward(p, task, a)[1])),
            p, (adp_in,), rng)
        r = rng.normal(size=(4, cfg.expert_width))
        scale = rng.uniform(0.2, 1.8, size=(4, sum(cfg.tower_widths)))
        errs[f"tower_{task}"] = _param_check(
            lambda p, r, s, task=task: Mdl.tower_forward(p, cfg, task, r, s)[0],
            lambda R, p, r, s, task=task: (lambda d: ((d[0], d[1]), d[2]))(
                Mdl.tower_backward(cfg, task, R, Mdl.tower_forward(p, cfg, task, r, s)[1])),
            p, (r, scale), rng)
    return errs


def _end_to_end_error(cfg, rng, n=4):
    p = {k: rng.normal(scale=0.4, size=v.shape) for k, v in Mdl.init_params(cfg, 0).items()}
    feats = rng.integers(0, cfg.n_buckets, size=(n, cfg.n_fields)) if cfg.input_mode == "binned" \
        else rng.normal(size=(n, cfg.n_fields))
    prof = np.zeros((n, 5))
    prof[np.arange(n), rng.integers(0, 2, n)] = 1
    prof[np.arange(n), 2 + rng.integers(0, 3, n)] = 1
    inp = ModelInput(feats, rng.integers(0, 5, n), rng.integers(0, 2, n), prof,
                     rng.integers(0, 2, n), rng.integers(0, 4, n))

    def f():
        z, dl, _ = Mdl.network_forward(p, cfg, inp)
        return Mdl.batch_loss(cfg, z, dl, inp.label_click, inp.label_duration)[0]

    _, grads = Mdl.loss_and_grads(p, cfg, inp)
    return max(rel_error(grads[k], numeric_grad(f, p[k])) for k in p)


def test_01_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    layer = _layer_errors(rng)
    cfg = ModelConfig(n_fields=12, n_buckets=5, embed_dim=3, senet_reduction=3, gate_hidden=4,
                      adapter_hidden=4, expert_width=6, tower_widths=(5, 4))
    e2e = {name: _end_to_end_error(dataclasses.replace(cfg, **kw), rng) for name, kw in {
        "trinity": {},
        "ple_sparse": {"use_gate": False, "use_adapter": False, "context_concat": True},
        "ple_dense": {"input_mode": "dense", "use_gate": False, "use_adapter": False,
                      "context_concat": True},
    }.items()}
    elapsed = time.perf_counter() - t0
    worst = max(layer, key=layer.get)
    ok = max(layer.values()) < 1e-4 and max(e2e.values()) < 1e-3 and elapsed < 30
    detail = (f"worst layer {worst} {layer[worst]:.2e} (<1e-4), end-to-end max "
              f"{max(e2e.values()):.2e} (<1e-3), {elapsed:.1f}s (<30s)")
    assert record(1, "gradient checks", ok, detail), layer


# ---------------------------------------------------------------------------
# 2. oracle equivalence

def test_02_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    auc_err = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 501))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        s = np.round(rng.random(n), 2)
        auc_err = max(auc_err, abs(M.auc(y, s) - pairwise_auc(y, s)))
    tensor_bad = 0
    for _ in range(100):
        log = random_log(rng, int(rng.integers(1, 120)), n_users=1)
        ref = int(rng.integers(log.timestamp.min(), log.timestamp.max() + 86400))
        tensor_bad += not np.array_equal(build_tensor(log, ref).counts, brute_force_tensor(log, ref))
    train = rng.poisson(2.0, size=(3000, 20)) * rng.integers(0, 2, size=(3000, 20))
    stats, bins = fit_encoder(train, 16)
    test = rng.poisson(2.0, size=(1000, 20))
    fast = encode(test, stats, bins)
    bin_bad = sum(fast[i].tolist() != encode_linear_scan(test[i], stats, bins) for i in range(1000))
    elapsed = time.perf_counter() - t0
    ok = auc_err <= 1e-12 and tensor_bad == 0 and bin_bad == 0 and elapsed < 60
    detail = (f"AUC max |diff| {auc_err:.1e} over 100 instances, {tensor_bad}/100 tensor "
              f"mismatches, {bin_bad}/1000 encoding mismatches, {elapsed:.1f}s (<60s)")
    assert record(2, "oracle equivalence", ok, detail)


# ---------------------------------------------------------------------------
# 3. identity at init

def test_03_identity_at_init():
    rng = np.random.default_rng(3)
    cfg = H.desk_model_config()
    full = Mdl.init_params(cfg, 11)
    bare_cfg = dataclasses.replace(cfg, use_gate=False, use_adapter=False)
    shared = Mdl.param_shapes(bare_cfg)
    for k in shared:
        full[k] = rng.normal(scale=0.3, size=full[k].shape)
    bare = {k: full[k] for k in shared}
    n = 256
    prof = np.zeros((n, 5))
    prof[np.arange(n), rng.integers(0, 2, n)] = 1
    prof[np.arange(n), 2 + rng.integers(0, 3, n)] = 1
    inp = ModelInput(rng.integers(0, cfg.n_buckets, size=(n, cfg.n_fields)), rng.integers(0, 5, n),
                     rng.integers(0, 2, n), prof)
    z1, d1, _ = Mdl.network_forward(full, cfg, inp)
    z2, d2, _ = Mdl.network_forward(bare, bare_cfg, inp)
    diff = max(np.max(np.abs(z1 - z2)), np.max(np.abs(d1 - d2)))
    assert record(3, "identity at init", diff <= 1e-12,
                  f"max |gated - ungated| = {diff:.1e} on {n} rows (<=1e-12)")


# ---------------------------------------------------------------------------
# long runs

def _run_cli(args, out):
    """Run the CLI in a child process; returns (exit code, wall seconds, peak RSS MB)."""
    env = dict(os.environ, PYTHONHASHSEED="0")
    t0 = time.perf_counter()
    proc = subprocess.Popen([sys.executable, "-m", "trinity.cli", *args, "--out", str(out)],
                            stdout=subprocess.DEVNULL, stderr=subprocess.PIPE, env=env)
    _, status, usage = os.wait4(proc.pid, 0)
    wall = time.perf_counter() - t0
    proc.returncode = os.waitstatus_to_exitcode(status)
    err = proc.stderr.read().decode()
    proc.stderr.close()
    assert proc.returncode == 0, err
    return proc.returncode, wall, usage.ru_maxrss / 1024


@pytest.fixture(scope="session")
def default_runs(tmp_path_factory):
    """Seed 0 twice (reproducibility, budget) and seeds 1 and 2, default config."""
    root = tmp_path_factory.mktemp("ablate")
    runs = {}
    for tag, seed in (("a", 0), ("b", 0), ("s1", 1), ("s2", 2)):
        out = root / tag
        _, wall, rss = _run_cli(["ablate", "--seed", str(seed)], out)
        runs[tag] = {"dir": out, "wall": wall, "rss": rss,
                     "table": json.loads((out / "report.json").read_text())}
    return runs


def _tables(runs):
    return [runs["a"]["table"], runs["s1"]["table"], runs["s2"]["table"]]


def _copilot(table, variant, which="mean"):
    return table["variants"][variant][which]["copilot"]["auc"]


def test_04_calibration(default_runs):
    v = default_runs["a"]["table"]["variants"]["trinity"]
    train_copc = v["train"]["global"]["copc"]
    test_copc = v["mean"]["copilot"]["copc"]
    ok = 0.9 <= train_copc <= 1.1 and 0.7 <= test_copc <= 1.3
    others = [t["variants"]["trinity"]["mean"]["copilot"]["copc"] for t in _tables(default_runs)]
    detail = (f"train global COPC {train_copc:.3f} in [0.9, 1.1], test copilot COPC "
              f"{test_copc:.3f} in [0.7, 1.3] (seeds 0-2 copilot: "
              f"{', '.join(f'{c:.3f}' for c in others)})")
    assert record(4, "calibration", ok, detail)


def test_05_trinity_beats_ple_baseline(default_runs):
    tr = np.mean([_copilot(t, "trinity") for t in _tables(default_runs)])
    base = np.mean([_copilot(t, "ple_baseline") for t in _tables(default_runs)])
    ok = tr >= base + 0.03
    assert record(5, "trinity vs ple_baseline copilot AUC", ok,
                  f"{tr:.4f} vs {base:.4f}, margin {tr - base:+.4f} (>= +0.03, 3 seeds)")


def test_06_full_features_beat_target_only(default_runs):
    tr = np.mean([_copilot(t, "trinity") for t in _tables(default_runs)])
    small = np.mean([_copilot(t, "trinity_small") for t in _tables(default_runs)])
    assert record(6, "trinity vs trinity_small copilot AUC", tr >= small,
                  f"{tr:.4f} vs {small:.4f} (>=, 3 seeds)")


@pytest.fixture(scope="session")
def stability_tables():
    base = H.load_experiment_config(None)
    return [H.run_experiment(H.stability_config(dataclasses.replace(base, seed=s))) for s in SEEDS]


def _predicate_violations(tables):
    bad = checked = 0
    for t in tables:
        for name, v in t["variants"].items():
            _, upd, _ = H.variant_setup(name, H.desk_model_config(), UpdaterConfig())
            if upd.always_accept:
                continue
            for r in v["decisions"]:
                if not r["accepted"]:
                    continue
                checked += 1
                bad += not decide((r["auc_old"], r["copc_old"]), (r["auc_new"], r["copc_new"]),
                                  upd.delta)
    return bad, checked


def test_07_stability_under_noise_day(stability_tables, default_runs):
    gated = np.mean([_copilot(t, "trinity", "final") for t in stability_tables])
    ungated = np.mean([_copilot(t, "trinity_wo_check", "final") for t in stability_tables])
    bad, checked = _predicate_violations(stability_tables + _tables(default_runs))
    noise_day = H.stability_config(H.load_experiment_config(None)).noise_day
    verdicts = [next(r["accepted"] for r in t["variants"]["trinity"]["decisions"]
                     if r["day"] == noise_day) for t in stability_tables]
    ok = gated >= ungated and bad == 0
    detail = (f"final copilot AUC {gated:.4f} vs {ungated:.4f} (>=, 3 seeds); "
              f"{bad}/{checked} accepted records violate the predicate; noise-day candidate "
              f"accepted in {sum(verdicts)}/3 seeds")
    assert record(7, "stability under a label-flipped day", ok, detail)


# ---------------------------------------------------------------------------
# 8. scripted updater trace

class _Stub:
    def __init__(self, name):
        self.id = name
        self.lineage = {}


A, R = True, False
# Each sequence: delta, always_accept, per-day ((auc_old, copc_old), (auc_new, copc_new)),
# then the decisions and resulting ids worked out by hand.
TRACES = [
    (0.05, False, [((0.70, 1.00), (0.72, 1.02)), ((0.72, 1.02), (0.74, 0.99)),
                   ((0.74, 0.99), (0.73, 1.00))],
     [A, A, R], ["c0", "c1", "c1"]),
    (0.05, False, [((0.80, 1.00), (0.80, 1.00)), ((0.80, 1.00), (0.79, 1.00))],
     [R, R], ["m0", "m0"]),
    (0.25, False, [((0.60, 1.00), (0.61, 1.25)), ((0.61, 1.25), (0.62, 1.50)),
                   ((0.62, 1.50), (0.63, 1.75))],
     [A, A, A], ["c0", "c1", "c2"]),
    (0.0, False, [((0.60, 0.50), (0.70, 1.50)), ((0.70, 1.50), (0.80, 1.75))],
     [A, R], ["c0", "c0"]),
    (0.05, False, [((0.70, 1.00), (None, 1.00)), ((0.70, 1.00), (0.75, None)),
                   ((0.70, 1.00), (0.75, 1.00))],
     [R, R, A], ["m0", "m0", "c2"]),
    (0.05, False, [((0.50, 2.00), (0.90, 1.00))],
     [A], ["c0"]),
    (0.05, False, [((0.584, 0.12), (0.726, 0.95)), ((0.726, 0.95), (0.72, 0.95))],
     [A, R], ["c0", "c0"]),
    (0.05, True, [((0.70, 1.00), (0.10, 9.00)), ((0.70, 1.00), (0.10, 9.00))],
     [A, A], ["c0", "c1"]),
    (0.05, False, [((0.70, 1.00), (0.90, 0.50)), ((0.70, 1.00), (0.90, 1.00)),
                   ((0.90, 1.00), (0.95, 0.75))],
     [R, A, R], ["m0", "c1", "c1"]),
    (0.05, False, [((0.70, 1.00), (0.71, 1.00)), ((0.71, 1.00), (0.705, 1.00)),
                   ((0.71, 1.00), (0.72, 1.00)), ((0.72, 1.00), (0.72, 1.00)),
                   ((0.72, 1.00), (0.80, 0.50)), ((0.72, 1.00), (0.73, 1.00))],
     [A, R, A, R, R, A], ["c0", "c0", "c2", "c2", "c2", "c5"]),
]


def _scripted(delta, always, days):
    def train_fn(ckpt, data, seed, day):
        return _Stub(f"c{day}")

    def eval_fn(ckpt, data):
        day = data[0]
        return days[day][1] if ckpt.id == f"c{day}" else days[day][0]

    cfg = UpdaterConfig(delta=delta, always_accept=always)
    return run_daily_loop([[d] for d in range(len(days))], _Stub("m0"), cfg, 0,
                          train_fn=train_fn, evaluate_fn=eval_fn)


def test_08_scripted_updater_trace():
    mismatched = []
    for i, (delta, always, days, want, ids) in enumerate(TRACES):
        final, recs = _scripted(delta, always, days)
        got = [r.accepted for r in recs]
        if got != want or [r.resulting_id for r in recs] != ids or final.id != ids[-1]:
            mismatched.append(i)
    n_dec = sum(len(t[3]) for t in TRACES)
    assert record(8, "scripted updater trace", not mismatched,
                  f"{len(TRACES)} sequences, {n_dec} decisions, mismatched sequences: "
                  f"{mismatched or 'none'}")


# ---------------------------------------------------------------------------
# 9, 10. reproducibility and budget

def test_09_ablate_is_byte_reproducible(default_runs):
    a = (default_runs["a"]["dir"] / "report.json").read_bytes()
    b = (default_runs["b"]["dir"] / "report.json").read_bytes()
    assert record(9, "ablate reproducibility", a == b,
                  f"report.json identical across two runs ({len(a)} bytes)" if a == b
                  else "report.json differs between two identical runs")


def test_10_ablate_budget(default_runs):
    run = default_runs["a"]
    ok = run["wall"] < 600 and run["rss"] < 2048
    assert record(10, "ablate budget", ok,
                  f"{run['wall']:.0f}s (<600s), peak RSS {run['rss']:.0f} MB (<2048 MB), 1 process")
