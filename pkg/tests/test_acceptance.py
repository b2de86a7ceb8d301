"""Acceptance criteria 1-8, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together in the
terminal summary. Criteria 3 and 4 share the fits of the n = 5, K = 5,
25,000-point sweeps. Criterion 8 reads ``FTGMM_MAGIC_CSV`` when set and
otherwise uses a synthetic 10-dimensional surrogate of the same size.
"""
import math
import os
import time

import numpy as np
import pytest

from ftgmm import manifold, optim
from ftgmm import model as M
from ftgmm.cli import parse_sweep, run_bench
from ftgmm.data import SyntheticSpec, synth_dataset, whiten
from ftgmm.fit import FitError, RunConfig, prepare, run_pipeline

from conftest import random_params

RESULTS = {}

FOUR_METHODS = ["adam-euclidean", "acclip-euclidean", "adam-manifold", "acclip-manifold"]
SEPARATIONS = {"low": 0.1, "mid": 1.0, "high": 5.0}


def record(number, title, passed, detail):
    RESULTS[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}"
    return passed


@pytest.fixture(scope="module")
def sweeps():
    """Lazily run the n = 5, K = 5, size 25,000 sweep once per truth structure."""
    cache = {}

    def get(structure):
        if structure not in cache:
            sweep = parse_sweep({
                "structure": structure,
                "separations": list(SEPARATIONS.values()),
                "sizes": [25000],
                "methods": FOUR_METHODS,
                "seeds": 10,
            })
            t0 = time.perf_counter()
            rows, table = run_bench(sweep)
            cache[structure] = rows, table, time.perf_counter() - t0
        return cache[structure]

    return get


# -- 1 -----------------------------------------------------------------------------


def _fd_block_errors(X, p, cfg, scale, h=1e-5):
    g = M.grad(X, p, cfg, scale=scale).blocks()
    errs = {}
    for name, arr in p.blocks().items():
        if arr.size == 0:
            continue
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = M.objective(X, p, cfg, scale)
            arr[idx] = old - h
            fm = M.objective(X, p, cfg, scale)
            arr[idx] = old
            fd[idx] = (fp - fm) / (2 * h)
        denom = max(np.linalg.norm(fd), np.linalg.norm(g[name]))
        errs[name] = 0.0 if denom == 0 else float(np.linalg.norm(g[name] - fd) / denom)
    return errs


def test_criterion_1_gradient_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, count, blocks_seen = 0.0, 0, set()
    for i in range(102):
        mode = M.MODES[i % 3]
        n, K = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        p = random_params(mode, n, K, rng)
        A = rng.standard_normal((n, n))
        cfg = M.PriorConfig(A @ A.T + n * np.eye(n), 0.7, rng.standard_normal(n), positive_psi3=bool(i % 2))
        X = 1.5 * rng.standard_normal((10, n))
        errs = _fd_block_errors(X, p, cfg, scale=0.5)
        blocks_seen |= {(mode, b) for b in errs}
        worst = max(worst, max(errs.values()))
        count += 1
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-5 and count >= 100 and seconds < 120
    record(1, "gradient oracle", ok,
           f"{count} instances, {len(blocks_seen)} (mode, block) pairs, worst rel err {worst:.2e} (<= 1e-5), {seconds:.1f}s")
    assert ok


# -- 2 -----------------------------------------------------------------------------


def test_criterion_2_orthogonality_preservation():
    truth, X = synth_dataset(SyntheticSpec(n=5, K=5, c=1.0, size=2500, seed=0))
    X, _ = whiten(X)
    cfg_prior = M.PriorConfig.from_data(X, 5)
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = {}
    for retraction in ("qr", "polar", "cayley"):
        oc = optim.OptimizerConfig(retraction=retraction)
        p = M.init_params(X, 5, "orthogonal", seed=0)
        state = optim.init_state(p, oc)
        err = 0.0
        for _ in range(10_000):
            batch = X[rng.integers(0, X.shape[0], 16)]
            g = M.grad(batch, p, cfg_prior, scale=16 / X.shape[0])
            g = g.with_blocks({k: v / 16 for k, v in g.blocks().items()})
            p, state = optim.step(p, g, state, oc, 0.05)
            err = max(err, manifold.orthogonality_error(p.U))
        worst[retraction] = err
    seconds = time.perf_counter() - t0
    ok = all(e <= 1e-6 for e in worst.values()) and seconds < 60
    detail = ", ".join(f"{r} max {e:.1e}" for r, e in worst.items())
    record(2, "orthogonality preservation", ok, f"10,000 steps each: {detail} (<= 1e-6), {seconds:.1f}s")
    assert ok


# -- 3 -----------------------------------------------------------------------------


def test_criterion_3_high_separation_recovery(sweeps):
    rows, _, _ = sweeps("orthogonal")
    runs = [r for r in rows if r["method"] == "acclip-manifold" and r["separation"] == 5.0]
    assert len(runs) == 10
    failed = [r for r in runs if r["status"] != "ok"]
    ok_runs = [r for r in runs if r["status"] == "ok"]
    gap = float(np.mean([r["test_avg_nll"] - r["true_test_avg_nll"] for r in ok_runs])) if ok_runs else math.inf
    merr = float(np.mean([r["mean_err"] for r in ok_runs])) if ok_runs else math.inf
    cerr = float(np.mean([r["cov_err"] for r in ok_runs])) if ok_runs else math.inf
    seconds = sum(r["seconds"] for r in ok_runs)
    ok = not failed and gap <= 0.3 and merr <= 0.05 and cerr <= 2.0 and seconds < 1200
    record(3, "high-separation recovery (acclip-manifold, c = 5)", ok,
           f"mean NLL gap to truth {gap:.3f} (<= 0.3), mean_err {merr:.2e} (<= 0.05), "
           f"cov_err {cerr:.2f} (<= 2.0), {len(failed)} failed runs, {seconds:.0f}s")
    assert ok


# -- 4 -----------------------------------------------------------------------------


def test_criterion_4_separation_ordering(sweeps):
    lines, ok, total = [], True, 0.0
    for structure in ("random", "orthogonal"):
        _, table, seconds = sweeps(structure)
        total += seconds
        by = {(t["method"], t["separation"]): t for t in table}
        for method in FOUR_METHODS:
            hi, mid, lo = (by[(method, SEPARATIONS[s])]["test_avg_nll"] for s in ("high", "mid", "low"))
            fails = sum(by[(method, c)]["failures"] for c in SEPARATIONS.values())
            good = hi < mid < lo and fails == 0
            ok &= good
            lines.append(f"{structure}/{method} {hi:.2f} < {mid:.2f} < {lo:.2f}{'' if good else ' VIOLATED'}")
    ok &= total < 45 * 60
    record(4, "separation ordering", ok, "; ".join(lines) + f"; {total:.0f}s")
    assert ok


# -- 5 -----------------------------------------------------------------------------


def test_criterion_5_determinant_identities():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst = {"orthogonal": 0.0, "plu": 0.0}
    for i in range(1000):
        mode = "orthogonal" if i % 2 else "plu"
        n, K = int(rng.integers(1, 11)), int(rng.integers(1, 4))
        p = random_params(mode, n, K, rng)
        fast = M.log_det_precisions(p)
        dense = np.array([np.linalg.slogdet(P)[1] for P in p.precisions()])
        worst[mode] = max(worst[mode], float(np.max(np.abs(fast - dense))))
    seconds = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-9 and seconds < 30
    record(5, "determinant identities", ok,
           f"1000 instances, max |diff| orthogonal {worst['orthogonal']:.1e}, plu {worst['plu']:.1e} (<= 1e-9), {seconds:.1f}s")
    assert ok


# -- 6 -----------------------------------------------------------------------------


def test_criterion_6_descent_sanity():
    rng = np.random.default_rng(6)
    t0 = time.perf_counter()
    worst_increase = -math.inf
    for i in range(20):
        mode = M.MODES[i % 3]
        n, K = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        p = random_params(mode, n, K, rng)
        X = rng.standard_normal((100, n))
        cfg = M.PriorConfig.from_data(X, K)
        oc = optim.OptimizerConfig(
            geometry="manifold" if mode == "orthogonal" else "euclidean",
            clip=optim.ClipConfig(mode="none", beta1=0.0),
        )
        state = optim.init_state(p, oc)
        f = M.objective(X, p, cfg)
        for _ in range(50):
            g = M.grad(X, p, cfg)
            g = g.with_blocks({k: v / X.shape[0] for k, v in g.blocks().items()})
            p, state = optim.step(p, g, state, oc, 1e-3)
            f_new = M.objective(X, p, cfg)
            worst_increase = max(worst_increase, f_new - f)
            f = f_new
    seconds = time.perf_counter() - t0
    ok = worst_increase <= 1e-9 and seconds < 60
    record(6, "descent sanity", ok, f"20 instances x 50 steps, largest step change {worst_increase:.2e} (<= 1e-9), {seconds:.1f}s")
    assert ok


# -- 7 -----------------------------------------------------------------------------


def _scalar_gclip(tau, m):
    norm = math.sqrt(sum(x * x for x in m))
    factor = 1.0 if norm == 0 else min(tau / norm, 1.0)
    return [factor * x for x in m]


def _scalar_cclip(tau, m):
    return [max(-t, min(t, x)) for t, x in zip(tau, m)]


def _scalar_acclip(tau, m, eps):
    return [min(t / (abs(x) + eps), 1.0) * x for t, x in zip(tau, m)]


def test_criterion_7_clipping_suite():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(300):
        size = int(rng.integers(1, 8))
        m = rng.standard_normal(size) * 10 ** rng.uniform(-3, 3)
        tau_s = float(rng.uniform(0, 5))
        tau_v = rng.uniform(0, 5, size)
        worst = max(worst, np.max(np.abs(optim.gclip(tau_s, m) - _scalar_gclip(tau_s, m.tolist()))))
        worst = max(worst, np.max(np.abs(optim.cclip(tau_v, m) - _scalar_cclip(tau_v.tolist(), m.tolist()))))
        worst = max(worst, np.max(np.abs(optim.acclip(tau_v, m, 1e-8) - _scalar_acclip(tau_v.tolist(), m.tolist(), 1e-8))))
    # threshold and momentum recurrences over 500 steps against scalar loops
    for trial in range(5):
        cfg = optim.ClipConfig(beta1=0.9, beta2=[0.99, 0.9, 0.5, 0.0, 0.999][trial], alpha=[2.0, 1.0, 1.5, 2.0, 3.0][trial])
        state = optim.OptimState(0, {}, {}, {})
        tau, mom = [cfg.tau0] * 3, [0.0] * 3
        for _ in range(500):
            g = rng.standard_normal(3) * 3
            out, state = optim.acclip_step(state, g, cfg)
            tau = [(cfg.beta2 * t**cfg.alpha + (1 - cfg.beta2) * abs(x) ** cfg.alpha) ** (1 / cfg.alpha) for t, x in zip(tau, g)]
            mom = [cfg.beta1 * a + (1 - cfg.beta1) * x for a, x in zip(mom, g)]
            ref = _scalar_acclip(tau, mom, cfg.eps)
            worst = max(worst, np.max(np.abs(state.tau["x"] - tau)), np.max(np.abs(out - ref)))
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-12 and seconds < 10
    record(7, "clipping unit suite", ok, f"max |diff| vs scalar oracles {worst:.1e}, 2,500 recurrence steps, {seconds:.1f}s")
    assert ok


# -- 8 -----------------------------------------------------------------------------


def _magic_sized_data():
    path = os.environ.get("FTGMM_MAGIC_CSV")
    if path:
        # the UCI file ends in a g/h class label; keep the ten features
        X = np.genfromtxt(path, delimiter=",", usecols=range(10))
        return X[~np.isnan(X).any(axis=1)], path
    spec = SyntheticSpec(n=10, K=10, c=0.1, e=10.0, size=19020, structure="random", seed=0)
    return synth_dataset(spec)[1], "synthetic surrogate (n=10, K=10, c=0.1, random structure, 19,020 rows)"


def test_criterion_8_small_real_data_smoke():
    X, source = _magic_sized_data()
    t0 = time.perf_counter()
    finals, failures = {}, []
    for method in FOUR_METHODS:
        config = RunConfig.for_method(method, K=10, seed=0)
        try:
            result, _ = run_pipeline(X, config)
        except FitError as exc:
            failures.append(f"{method}: {exc}")
            continue
        finals[method] = result.report.test_avg_nll[-1]
    seconds = time.perf_counter() - t0
    finite = all(math.isfinite(v) for v in finals.values())
    best = min(finals.values()) if finals else math.nan
    best_ok = bool(finals) and abs(best - min(finals.values())) <= 0.1 * abs(best)
    spread = max(finals.values()) - best if finals else math.nan
    ok = not failures and finite and len(finals) == 4 and best_ok and seconds < 15 * 60
    values = ", ".join(f"{m} {v:.3f}" for m, v in finals.items())
    record(8, "small-real-data smoke", ok,
           f"{source}: {values}; best {best:.3f}, spread {spread:.3f}; {len(failures)} failures, {seconds:.0f}s")
    assert ok
