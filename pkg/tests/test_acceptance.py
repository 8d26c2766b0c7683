"""Acceptance suite: every criterion at its stated scale and tolerance.

Each test logs one ``criterion N: PASS|FAIL`` line (repeated in the pytest
terminal summary) before asserting. The replicate study behind criteria 4-6
runs once per session and takes tens of minutes.
"""

import math
import os
from collections import Counter

import numpy as np
import pytest

from clusterreg import posterior as po
from clusterreg.cli import build_model_config, load_csv, smooth_derivative
from clusterreg.datagen import SimSpec, simulate
from clusterreg.model import Curve, Dataset
from clusterreg.sampler import McmcConfig, Workspace, initial_state, make_rng, run_chain, transition

from helpers import GEWEKE_STATS, canonical, ewens_logprob, geweke_samples, set_partitions, small_config
from study import run_study, summarize_study
import test_model
import test_sampler
import test_splines

pytestmark = pytest.mark.slow


def _passes(check, *args):
    try:
        check(*args)
    except AssertionError as exc:
        return False, str(exc).splitlines()[0] if str(exc) else "assertion failed"
    return True, ""


def test_criterion_1_spline_layer(record_criterion):
    ok_basis, why_b = _passes(test_splines.TestEvalBasis().test_partition_of_unity_and_oracle)
    ok_pen = []
    for order in (1, 2):
        ok, _ = _passes(test_splines.TestDifferencePenalty().test_quadratic_form_matches_increments, order)
        ok_pen.append(ok)
    passed = ok_basis and all(ok_pen)
    record_criterion(1, passed, "partition of unity + divided-difference oracle over 100 random "
                     f"configs at 1e-10: {ok_basis}; penalty forms at 1e-12: {all(ok_pen)} {why_b}")
    assert passed


def test_criterion_2_conjugacy_oracles(record_criterion):
    checks = {
        "log_marginal_q0 vs 1e6 Monte Carlo (2%)": (test_model.TestLogMarginal().test_monte_carlo,),
        "draw_eta_conditional grid KS < 0.02": (test_model.TestDrawEta().test_grid_oracle_ks, test_model.eta_toy()),
    }
    scalars = test_sampler.TestUpdateScalars()
    scalars.setup_method()
    checks["update_scalars level grid KS < 0.02"] = (scalars.test_level_grid_oracle,)
    checks["update_scalars amplitude grid KS < 0.02"] = (scalars.test_amplitude_grid_oracle_truncated,)
    results = {name: _passes(*call)[0] for name, call in checks.items()}
    passed = all(results.values())
    record_criterion(2, passed, "; ".join(f"{k}: {v}" for k, v in results.items()))
    assert passed


def test_criterion_3_sampler_correctness(record_criterion):
    forward, chain = geweke_samples(60_000, seed=7)
    z = {}
    for j, name in enumerate(GEWEKE_STATS):
        se = math.hypot(forward[:, j].std() / math.sqrt(len(forward)), test_sampler.batch_se(chain[:, j]))
        z[name] = (chain[:, j].mean() - forward[:, j].mean()) / se
    geweke_ok = all(abs(v) < 3 for v in z.values())

    cfg = small_config(likelihood=False)
    N, alpha, n_it = 5, 1.3, 60_000
    data = Dataset([Curve(str(i), np.linspace(0, 4, 5), np.zeros(5)) for i in range(N)])
    ws = Workspace(data, cfg)
    rng = make_rng(11)
    state = initial_state(data, cfg, rng, ws)
    state.hyper.alpha = alpha
    mcmc = McmcConfig(iterations=2, burn_in=1, fixed=("alpha",))
    steps = np.full(cfg.Q, 1.0)
    counts = Counter()
    for _ in range(n_it):
        transition(state, ws, rng, steps, mcmc)
        counts[canonical(state.labels)] += 1
    law = {p: math.exp(ewens_logprob(p, alpha)) for p in set_partitions(N)}
    tv = 0.5 * sum(abs(counts[p] / n_it - q) for p, q in law.items())
    crp_ok = tv < 0.03 and set(counts) <= set(law)

    passed = geweke_ok and crp_ok
    zs = ", ".join(f"{k} {v:+.2f}" for k, v in z.items())
    record_criterion(3, passed, f"Geweke z-scores (|z| < 3): {zs}; CRP N=5 over {len(law)} "
                     f"partitions TV = {tv:.4f} (< 0.03)")
    assert passed


@pytest.fixture(scope="module")
def study():
    results = run_study(n_replicates=10, iterations=20_000, burn_in=10_000)
    return results, summarize_study(results)


def test_criterion_4_replicate_study(study, record_criterion):
    results, s = study
    med = s["medians"]
    checks = {
        "K mode in {4,5} in >= 7/10": s["k_in_4_5"] >= 7,
        "MAP ARI median >= 0.7": s["ari_median"] >= 0.7,
        "joint LPML > clustering-only LPML": med["joint"]["lpml"] > med["clustering-only"]["lpml"],
        "joint MSE median below both ablations": med["joint"]["mse"] < min(
            med["clustering-only"]["mse"], med["registration-only"]["mse"]),
    }
    passed = all(checks.values())
    detail = (f"K modes {s['k_modes']} ({s['k_in_4_5']}/10 in {{4,5}}); ARI median "
              f"{s['ari_median']:.3f}; LPML medians joint {med['joint']['lpml']:.1f} vs "
              f"clustering-only {med['clustering-only']['lpml']:.1f}; MSE medians joint "
              f"{med['joint']['mse']:.4f}, clustering-only {med['clustering-only']['mse']:.4f}, "
              f"registration-only {med['registration-only']['mse']:.4f}; "
              + ", ".join(f"{k}: {v}" for k, v in checks.items()))
    record_criterion(4, passed, detail)
    assert passed


def test_criterion_5_shape_recovery(study, record_criterion):
    _, s = study
    shapes = s["shapes"]
    passed = all(r["rmse"] < 0.15 for r in shapes)
    detail = "; ".join(f"cluster {r['cluster']} (n={r['size']}) vs f_{r['true_shape']}: "
                       f"RMSE {r['rmse']:.3f}" for r in shapes)
    record_criterion(5, passed, detail + " (threshold 0.15)")
    assert passed


def test_criterion_6_band_calibration(study, record_criterion):
    _, s = study
    passed = s["coverage"] >= 0.90
    record_criterion(6, passed, f"95% simultaneous bands cover the whole true curve for "
                     f"{100 * s['coverage']:.1f}% of curves across replicates (>= 90%)")
    assert passed


def test_criterion_7_growth_benchmark(record_criterion):
    heights = os.environ.get("CLUSTERREG_GROWTH_DATA")
    labels_path = os.environ.get("CLUSTERREG_GROWTH_LABELS")
    if not (heights and labels_path and os.path.exists(heights) and os.path.exists(labels_path)):
        record_criterion(7, "SKIP", "optional: set CLUSTERREG_GROWTH_DATA (long CSV of heights) "
                         "and CLUSTERREG_GROWTH_LABELS (curve_id,label CSV) to run")
        pytest.skip("growth data not supplied")
    data = smooth_derivative(load_csv(heights))
    keep = [c for c in data if c.times[0] <= 2.0 and c.times[-1] >= 18.0]
    data = Dataset(Curve(c.id, c.times[(c.times >= 2) & (c.times <= 18)],
                         c.values[(c.times >= 2) & (c.times <= 18)]) for c in keep)
    sex = dict(row.split(",")[:2] for row in open(labels_path).read().split()[1:])
    config = build_model_config({"delta": 7.0, "shape_domain": [-5.0, 25.0],
                                 "shape_interior": list(np.linspace(-3, 23, 27)),
                                 "warp_interior": [5.2, 8.2, 11.6, 14.8]}, {}, (2.0, 18.0))
    trace = run_chain(data, config, McmcConfig(iterations=20_000, burn_in=10_000, seed=1))
    est = po.map_partition(trace, data, config)
    truth = np.array([sex[c.id] for c in data])
    correct = 0
    for k in np.unique(est.labels):
        _, counts = np.unique(truth[est.labels == k], return_counts=True)
        correct += counts.max()
    accuracy = correct / len(truth)
    passed = accuracy >= 0.75
    record_criterion(7, passed, f"MAP K = {est.K}; sex classification accuracy "
                     f"{100 * accuracy:.1f}% (>= 75%)")
    assert passed


def test_criterion_8_determinism(record_criterion):
    data, _ = simulate(SimSpec(seed=99))
    config = build_model_config({}, {}, (0.0, 20.0))

    def fit(parallel):
        mcmc = McmcConfig(iterations=1_000, burn_in=500, thin=5, seed=21, parallel_copies=parallel)
        trace = run_chain(data, config, mcmc)
        grid = np.linspace(0, 20, 41)
        map_est = po.map_partition(trace, data, config)
        summaries = {cid: po.curve_fit(trace, cid, grid, config=config) for cid in data.ids}
        summaries.update({f"warp_{cid}": po.warp_mean(trace, cid, grid, config=config)
                          for cid in data.ids})
        text = po.summary_csv(summaries) + po.partition_csv(data.ids, map_est.labels)
        return trace.block_hashes(), text

    first, second, parallel = fit(False), fit(False), fit(True)
    same_trace = first[0] == second[0] == parallel[0]
    same_summary = first[1] == second[1] == parallel[1]
    passed = same_trace and same_summary
    record_criterion(8, passed, f"repeat and per-curve parallel runs: trace blocks identical "
                     f"{same_trace}, summaries identical {same_summary}")
    assert passed
