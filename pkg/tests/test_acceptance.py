"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed immediately and again in the
terminal summary) before asserting, so a full run lists every criterion.
"""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import norm

from almcflow.almc import AlmcConfig, AnnealPath, Marginal, marginal_log_weights, run_almc
from almcflow.cli import main, resolve_config, run_experiment
from almcflow.core import Ensemble, RngStream
from almcflow.flow_ode import estimate_velocity
from almcflow.interpolant import InterpolantSchedule
from almcflow.target import GaussianMixture, kou20, standard_gaussian

RESULTS = {}


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    print(f"\ncriterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def load_reports(out_dir, method):
    paths = sorted(Path(out_dir, method).glob("seed_*/metrics.json"), key=lambda p: int(p.parent.name[5:]))
    return [json.loads(p.read_text()) for p in paths]


def weighted_mean_and_se(x, log_w):
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    mean = w @ x
    return mean, np.sqrt(np.sum(w**2 * (x - mean) ** 2))


# 1 -------------------------------------------------------------------------


def test_criterion_1_interpolants():
    start = time.perf_counter()
    worst_bc, worst_fd = 0.0, 0.0
    h = 1e-6
    for kind in ("linear", "follmer", "trig"):
        s = InterpolantSchedule(kind)
        a0, b0, _, _ = s.eval(0.0)
        a1, b1, _, _ = s.eval(1.0)
        worst_bc = max(worst_bc, abs(a0 - 1), abs(b0), abs(a1), abs(b1 - 1))
        for t in np.linspace(0.05, 0.95, 19):
            _, _, da, db = s.eval(t)
            ap, bp, _, _ = s.eval(t + h)
            am, bm, _, _ = s.eval(t - h)
            worst_fd = max(worst_fd, abs((ap - am) / (2 * h) - da), abs((bp - bm) / (2 * h) - db))
    elapsed = time.perf_counter() - start
    record(1, worst_bc <= 1e-12 and worst_fd <= 1e-6 and elapsed < 1.0,
           f"boundary err {worst_bc:.1e}, derivative err {worst_fd:.1e}, {elapsed:.2f}s")


# 2 -------------------------------------------------------------------------


def test_criterion_2_jarzynski_identity():
    start = time.perf_counter()
    rho = GaussianMixture([[1.0]], 0.7)  # normalized, so ln(Z_K / Z_0) = 0
    res = run_almc(AlmcConfig(100_000, AnnealPath.linear(500, 0.01), rho, ess_threshold=1.0, seed=11))
    assert res.n_resamples == 0
    lw = res.ensemble.log_weights
    w = np.exp(lw - lw.max())
    se = w.std(ddof=1) / (w.mean() * np.sqrt(len(w)))
    elapsed = time.perf_counter() - start
    record(2, abs(res.log_z) < 3 * se and elapsed < 30,
           f"ln(Z_K/Z_0) = {res.log_z:+.5f} (SE {se:.5f}), {elapsed:.1f}s")


# 3 -------------------------------------------------------------------------


def _exact_forward_law(path, mu, s2):
    # linear drift: x_k = (1 - delta a_k) x_{k-1} + delta b_k + sqrt(2 delta) xi, from N(0, 1)
    m, v = 0.0, 1.0
    for k in range(1, path.K + 1):
        lam, delta = path.lam(k), path.delta(k)
        a = (1 - lam) + lam / s2
        b = lam * mu / s2
        m = (1 - delta * a) * m + delta * b
        v = (1 - delta * a) ** 2 * v + 2 * delta
    return m, v


def test_criterion_3_marginal_matches_jarzynski():
    start = time.perf_counter()
    mu, s = 1.5, 0.6
    rho = GaussianMixture([[mu]], s)
    path = AnnealPath.linear(100, 0.02)
    n = 100_000
    jar = run_almc(AlmcConfig(n, path, rho, ess_threshold=1.0, seed=21))
    mar = run_almc(AlmcConfig(n, path, rho, weight_mode=Marginal(2048), ess_threshold=1.0, seed=22, weight_stride=50))
    m_j, se_j = weighted_mean_and_se(jar.ensemble.positions[:, 0], jar.ensemble.log_weights)
    m_m, se_m = weighted_mean_and_se(mar.ensemble.positions[:, 0], mar.ensemble.log_weights)

    # the same marginal weights with the closed-form forward law in place of the kernel estimate
    fm, fv = _exact_forward_law(path, mu, s * s)
    x = mar.ensemble
    lw_exact = marginal_log_weights(path, path.K, rho, x, x, log_forward_density=lambda z: norm.logpdf(z[:, 0], fm, np.sqrt(fv)))
    m_e, se_e = weighted_mean_and_se(x.positions[:, 0], lw_exact)

    ok_est = abs(m_m - m_j) < 4 * np.hypot(se_m, se_j)
    ok_exact = abs(m_e - m_j) < 4 * np.hypot(se_e, se_j)
    elapsed = time.perf_counter() - start
    record(3, ok_est and ok_exact and elapsed < 60,
           f"E[x]: jarzynski {m_j:.4f}±{se_j:.4f}, marginal {m_m:.4f}±{se_m:.4f}, "
           f"marginal (exact law) {m_e:.4f}±{se_e:.4f}, {elapsed:.1f}s")


# 4 -------------------------------------------------------------------------


def test_criterion_4_mse_rate():
    start = time.perf_counter()
    g = kou20()
    s = InterpolantSchedule()
    t = 0.5
    alpha, beta, _, _ = s.eval(t)
    gen = np.random.default_rng(41)
    probes = alpha * gen.standard_normal((20, 2)) + beta * g.sample(20, gen)
    exact = g.exact_velocity(s, t, probes)
    sizes = [250, 1000, 4000]
    mse = []
    for n in sizes:
        errs = [
            np.mean(np.sum((estimate_velocity(s, t, probes, Ensemble.unweighted(g.sample(n, gen))) - exact) ** 2, axis=1))
            for _ in range(20)
        ]
        mse.append(np.mean(errs))
    slope = np.polyfit(np.log(sizes), np.log(mse), 1)[0]
    elapsed = time.perf_counter() - start
    record(4, abs(slope + 1) <= 0.3 and elapsed < 300,
           f"log-log slope {slope:.3f}, MSE {', '.join(f'{m:.3g}' for m in mse)}, {elapsed:.1f}s")


# 5 -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def gmm2d_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("gmm2d")
    cfg = resolve_config(
        {
            "preset": "gmm2d",
            "seeds": [0, 1, 2, 3, 4],
            "almc": {"n": 2000, "K": 1000},
            "flow": {"N": 2000},
            "metrics": {"n_reference": 5000},
        }
    )
    start = time.perf_counter()
    run_experiment(cfg, out)
    return out, time.perf_counter() - start


def test_criterion_5_two_dim_mixture(gmm2d_run):
    out, elapsed = gmm2d_run
    almc, hmc, mc = (load_reports(out, m) for m in ("almc_ode", "hmc", "mc_ode"))
    assert len(almc) == len(hmc) == len(mc) == 5
    ed = {name: np.mean([r["energy_distance"] for r in rs]) for name, rs in (("almc", almc), ("hmc", hmc), ("mc", mc))}
    cov_almc = [r["extra"]["mode_coverage"]["covered"] for r in almc]
    cov_hmc = [r["extra"]["mode_coverage"]["covered"] for r in hmc]
    ok = (
        ed["almc"] <= 0.3
        and ed["hmc"] >= 2.0
        and ed["mc"] >= 2.0
        and min(cov_almc) >= 18
        and max(cov_hmc) <= 3
        and elapsed < 15 * 60
    )
    record(5, ok,
           f"energy distance almc {ed['almc']:.3f}, hmc {ed['hmc']:.3f}, mc-ode {ed['mc']:.3f}; "
           f"modes almc {cov_almc}, hmc {cov_hmc}; {elapsed / 60:.1f} min")


def test_mc_ode_far_from_almc_ode(gmm2d_run):
    out, _ = gmm2d_run
    almc = [r["energy_distance"] for r in load_reports(out, "almc_ode")]
    mc = [r["energy_distance"] for r in load_reports(out, "mc_ode")]
    assert all(m >= 5 * a for a, m in zip(almc, mc)), (almc, mc)


# 6 -------------------------------------------------------------------------


def test_criterion_6_hundred_dim_mixture(tmp_path):
    cfg = resolve_config(
        {
            "preset": "gmm100d",
            "seeds": [0, 1, 2],
            "almc": {"n": 2000, "K": 1000},
            "flow": {"N": 2000},
            "metrics": {"n_reference": 5000},
        }
    )
    start = time.perf_counter()
    run_experiment(cfg, tmp_path)
    elapsed = time.perf_counter() - start
    almc, hmc = load_reports(tmp_path, "almc_ode"), load_reports(tmp_path, "hmc")
    assert len(almc) == len(hmc) == 3
    ed_almc = np.mean([r["energy_distance"] for r in almc])
    ed_hmc = np.mean([r["energy_distance"] for r in hmc])
    acc = np.mean([r["acceptance_rate"] for r in hmc])
    mean_err = np.mean([r["mean_err"] for r in hmc])
    ok = ed_almc <= 0.5 and ed_almc <= ed_hmc / 10 and acc >= 0.95 and mean_err >= 5 and elapsed < 30 * 60
    record(6, ok,
           f"energy distance almc {ed_almc:.3f}, hmc {ed_hmc:.3f}; hmc acceptance {acc:.3f}, "
           f"hmc mean error {mean_err:.3f}; {elapsed / 60:.1f} min")


# 7 -------------------------------------------------------------------------

ALLEN_CAHN_16 = {
    "preset": "allen_cahn",
    "methods": ["almc_ode", "hmc"],
    "seeds": [0, 1, 2],
    "target": {"d": 16},
    "almc": {"n": 10000, "K": 4000, "delta_start": 0.002, "delta_end": 0.0005},
    "flow": {"N": 1000, "M": 100, "epsilon": 3e-3},
}


def test_criterion_7_allen_cahn_reduced(tmp_path):
    cfg = resolve_config(ALLEN_CAHN_16)
    start = time.perf_counter()
    run_experiment(cfg, tmp_path)
    elapsed = time.perf_counter() - start
    almc, hmc = load_reports(tmp_path, "almc_ode"), load_reports(tmp_path, "hmc")
    assert len(almc) == len(hmc) == 3
    pol_almc = [r["extra"]["polarity"]["positive"] for r in almc]
    pol_hmc = [max(r["extra"]["polarity"].values()) for r in hmc]
    ksd_almc = [r["ksd_v"] for r in almc]
    ksd_hmc = [r["ksd_v"] for r in hmc]
    balanced = all(0.2 <= p <= 0.8 for p in pol_almc)
    ok = (
        balanced
        and min(pol_hmc) >= 0.95
        and all(a < h for a, h in zip(ksd_almc, ksd_hmc))
        and elapsed < 30 * 60
    )
    record(7, ok,
           f"almc positive fraction {[round(p, 3) for p in pol_almc]}, hmc majority {[round(p, 3) for p in pol_hmc]}; "
           f"KSD_v almc {[round(k, 2) for k in ksd_almc]} vs hmc {[round(k, 2) for k in ksd_hmc]}; {elapsed / 60:.1f} min")


# 8 -------------------------------------------------------------------------


def test_criterion_8_mc_ode_degeneracy(tmp_path):
    cfg = resolve_config({"preset": "allen_cahn", "methods": ["mc_ode"], "seeds": [0]}, scale=0.1)
    results = run_experiment(cfg, tmp_path)
    report = load_reports(tmp_path, "mc_ode")[0]
    extra = report["extra"]
    table = (tmp_path / "table.txt").read_text()
    ok = (
        results[0]["ok"]
        and extra["degenerate"]
        and extra["min_proposal_ess"] < 5
        and extra["ksd_status"] == "undefined"
        and report["ksd_u"] is None
        and report["ksd_v"] is None
        and "undefined" in table
    )
    record(8, ok, f"d=64 min proposal ESS {extra['min_proposal_ess']:.3f}, ksd_status {extra['ksd_status']!r}")


# 9 -------------------------------------------------------------------------


def test_criterion_9_metric_suite():
    start = time.perf_counter()
    suite = Path(__file__).with_name("test_metrics.py")
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(suite)], capture_output=True, text=True)
    elapsed = time.perf_counter() - start
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    # the KSD centering check is part of the suite; repeat it here for the log line
    from test_metrics import _ksd_se

    from almcflow.metrics import ksd_imq

    g = standard_gaussian(2)
    X = np.random.default_rng(91).normal(size=(2000, 2))
    u, _ = ksd_imq(X, g)
    se = _ksd_se(X, g)
    record(9, proc.returncode == 0 and abs(u) < 4 * se and elapsed < 120,
           f"metrics suite: {summary}; KSD u {u:.2e} ({abs(u) / se:.2f} SE); {elapsed:.1f}s")


# 10 ------------------------------------------------------------------------


def _outputs(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file() and p.name != "timing.json"}


def test_criterion_10_determinism(tmp_path, monkeypatch):
    mismatched = []
    for preset, scale in (("gmm2d", 0.02), ("gmm100d", 0.02), ("allen_cahn", 0.01)):
        runs = {}
        for label, threads, jobs in (("serial", "1", 1), ("again", "1", 1), ("parallel", "2", 2)):
            monkeypatch.setenv("ALMCFLOW_THREADS", threads)
            out = tmp_path / preset / label
            code = main(["run", preset, "--scale", str(scale), "--seeds", "0,1", "--jobs", str(jobs), "--out", str(out)])
            assert code == 0, (preset, label)
            runs[label] = _outputs(out)
        for label in ("again", "parallel"):
            if runs[label] != runs["serial"]:
                diff = sorted(str(k) for k in set(runs[label]) | set(runs["serial"]) if runs[label].get(k) != runs["serial"].get(k))
                mismatched.append(f"{preset}/{label}: {diff[:3]}")
    record(10, not mismatched, "byte-identical across reruns, 1 and 2 threads/jobs" if not mismatched else "; ".join(mismatched))
