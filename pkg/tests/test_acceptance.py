"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -s`` (or ``python3
tests/test_acceptance.py``). The fine-tuning criteria share one pretrained
reference and one distilled consistency model per session (see conftest).
"""

import math
from dataclasses import replace
import sys
import time

import numpy as np
import pytest

from sqdf_lab.baselines import BaselineConfig, baseline_run, draft_loss, pg_loss, refl_loss
from sqdf_lab.bbo import BboConfig, bbo_run, round_report
from sqdf_lab.consistency import eval_prediction_error, make_estimator, predict_x0, teacher_step
from sqdf_lab.diffcalc import Tape, backward, finite_diff_check, params_digest, seed_rng, spawn_rng, square, vmean, vsum
from sqdf_lab.diffusion import (
    AnalyticGmmDenoiser,
    ddim_multistep_x0,
    gmm_posterior_mean,
    noise_prediction_loss,
    q_sample,
    sample,
    sample_gmm,
    sample_trajectory,
    tweedie_x0,
)
from sqdf_lab.evalkit import average_curves, metric_at_reward, mode_coverage
from sqdf_lab.rewards import SurrogateEnsemble, TargetModeReward, surrogate_fit, surrogate_score
from sqdf_lab.softq_oracle import (
    SUITE_ALPHAS,
    brute_force_soft_value,
    check_bounds,
    oracle_suite,
    random_mdp,
    solve_soft,
)
from sqdf_lab.sqdf import ReplayBuffer, SqdfConfig, checkpoint_curve, finetune_run, make_graph_estimator, sqdf_loss, undiscounted_loss

from conftest import micro_consistency, micro_model

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
EVAL_N = 512
REPORT: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    REPORT.append(line)
    print("\n" + line)


# ---------------------------------------------------------------------------
# 1-3: tabular oracle
# ---------------------------------------------------------------------------


def test_criterion_1_soft_bellman_equivalence():
    t0 = time.perf_counter()
    rng = spawn_rng(0, "acceptance", "equivalence")
    worst = 0.0
    for i in range(200):
        mdp = random_mdp(rng, max_states=6, alpha=SUITE_ALPHAS[i % 3], reward_scale=float(rng.uniform(0.5, 5.0)))
        assert mdp.T <= 6 and mdp.gamma == 1.0
        for a, b in zip(solve_soft(mdp).V, brute_force_soft_value(mdp)):
            worst = max(worst, float(np.max(np.abs(a - b))))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-10 and secs < 30
    report(1, ok, f"max |DP - enumeration| = {worst:.2e} over 200 MDPs (tol 1e-10), {secs:.1f}s (< 30s)")
    assert ok


def test_criterion_2_sandwich_bounds():
    rng = spawn_rng(0, "acceptance", "bounds")
    violations, margin = 0, math.inf
    for i in range(100):
        base = random_mdp(rng, alpha=SUITE_ALPHAS[i % 3], reward_scale=float(rng.uniform(0.5, 5.0)))
        for g in (0.5, 0.9):
            rep = check_bounds(replace(base, gamma=g), slack=1e-9)
            violations += rep.violations
            margin = min(margin, rep.min_margin)
    collapse = 0.0
    for i in range(100):
        rep = check_bounds(random_mdp(rng, alpha=SUITE_ALPHAS[i % 3]))
        for row in rep.rows:
            collapse = max(collapse, abs(row["margin_lower"]), abs(row["margin_upper"]))
    ok = violations == 0 and margin >= -1e-9 and collapse <= 1e-10
    report(2, ok, f"{violations} violations (min margin {margin:.2e}, slack -1e-9); "
                  f"gamma=1 max gap {collapse:.2e} (tol 1e-10)")
    assert ok


def test_criterion_3_optimal_policy():
    res = oracle_suite(seed=0, n_equiv=0, n_bounds=0, n_policy=50, n_perturb=100)
    ok = res.policy_min_margin >= -1e-10 and res.identity_residual <= 1e-10
    report(3, ok, f"min objective margin {res.policy_min_margin:.2e} (>= -1e-10), "
                  f"soft-value identity residual {res.identity_residual:.2e} (<= 1e-10)")
    assert ok


# ---------------------------------------------------------------------------
# 4: gradients of every loss path
# ---------------------------------------------------------------------------


def test_criterion_4_gradient_fidelity(sched, spec):
    rng = seed_rng(40)
    ref = micro_model(sched, seed=0, hidden=3)
    pol = micro_model(sched, seed=1, hidden=3, role="trainable-policy")
    pol.prefix = "policy."
    cm = micro_consistency(sched, spec)
    reward = TargetModeReward(c=0.0)
    errs = {}

    x0 = sample_gmm(spec, 10, rng)
    t = rng.integers(1, sched.T + 1, size=10)
    eps = rng.standard_normal((10, 2))
    errs["pretrain"] = finite_diff_check(ref.params(), lambda tape: noise_prediction_loss(ref, x0, t, eps, tape))

    ema = micro_consistency(sched, spec, seed=6)
    x_t = q_sample(x0, t, eps, sched)
    target = predict_x0(ema, teacher_step(ref, x_t, t), t - 1)
    errs["distill"] = finite_diff_check(
        cm.params(), lambda tape: vmean(vsum(square(predict_x0(cm, x_t, t, tape, True) - target), axis=1)))

    xb = rng.standard_normal((10, 2)) * 2
    tb = rng.integers(4, sched.T + 1, size=10)
    tb[0] = 1
    for tag in ("consistency", "tweedie", "ddim-3"):
        est = make_graph_estimator(tag, ref, cm)
        tt = np.maximum(tb, 4) if tag == "ddim-3" else tb
        errs[f"sqdf/{tag}"] = finite_diff_check(
            pol.params(), lambda tape: sqdf_loss(xb, tt, pol, ref, est, reward, 2.0, 0.9, eps, tape).loss)

    traj = sample_trajectory(pol, seed_rng(41), 4)
    scores = seed_rng(42).standard_normal(4)
    errs["pg"] = finite_diff_check(pol.params(), lambda tape: pg_loss(pol, ref, traj, scores, 0.0, tape))
    errs["pg+kl"] = finite_diff_check(pol.params(), lambda tape: pg_loss(pol, ref, traj, scores, 0.2, tape))
    errs["draft-3"] = finite_diff_check(pol.params(), lambda tape: draft_loss(pol, ref, traj, 3, reward, 0.0, tape))
    errs["draft-3+kl"] = finite_diff_check(pol.params(), lambda tape: draft_loss(pol, ref, traj, 3, reward, 0.5, tape))
    t_rows = np.array([40, 44, 50, 47])
    errs["refl"] = finite_diff_check(pol.params(), lambda tape: refl_loss(pol, traj, t_rows, reward, tape))

    X = rng.uniform(-5, 5, (40, 2))
    ens = surrogate_fit(SurrogateEnsemble(n_heads=3, seeds=[1, 2, 3]), X, TargetModeReward()(X), steps=100)
    xq = rng.uniform(-4, 4, (6, 2))
    for mode in ("mean", "bootstrap-UCB", "feature-UCB"):
        errs[f"surrogate/{mode}"] = finite_diff_check(
            {"x": xq}, lambda tape: vsum(surrogate_score(ens, tape.param(xq, "x"), mode, tape)))

    worst = max(errs, key=errs.get)
    ok = all(e < 1e-4 for e in errs.values())
    report(4, ok, f"{len(errs)} loss paths, max relative FD error {errs[worst]:.2e} ({worst}) (tol 1e-4)")
    assert ok, errs


# ---------------------------------------------------------------------------
# 5-6: toy GMM figure and analytic score
# ---------------------------------------------------------------------------


def test_criterion_5_toy_gmm_figure(trained):
    t0 = time.perf_counter()
    x = sample(trained.model, 500, spawn_rng(0, "acceptance", "coverage"))
    covered = round(mode_coverage(x, trained.spec, 1.0) * 9)
    grid = list(range(5, 50, 5))
    ests = {"tweedie": make_estimator("tweedie", trained.model), "consistency": make_estimator("consistency", cm=trained.cm)}
    rows = eval_prediction_error(ests, trained.spec, trained.sched, grid, 2000, spawn_rng(0, "acceptance", "pred-err"))
    err = {(r["estimator"], r["t"]): r["mean_err"] for r in rows}
    ratio_tw = err["tweedie", 35] / err["tweedie", 5]
    spread = {k: max(err[k, t] for t in grid) / min(err[k, t] for t in grid) for k in ests}
    secs = time.perf_counter() - t0 + trained.build_seconds
    clauses = {
        "coverage >= 8/9": covered >= 8,
        "tweedie err(35)/err(5) >= 3": ratio_tw >= 3,
        "consistency err(35) < tweedie err(35)": err["consistency", 35] < err["tweedie", 35],
        "consistency max/min < tweedie max/min": spread["consistency"] < spread["tweedie"],
        "runtime < 20 min": secs < 1200,
    }
    ok = all(clauses.values())
    failed = [k for k, v in clauses.items() if not v]
    report(5, ok, f"coverage {covered}/9; tweedie err t=5 {err['tweedie', 5]:.3f}, t=35 {err['tweedie', 35]:.3f} "
                  f"(ratio {ratio_tw:.1f}); consistency err t=35 {err['consistency', 35]:.3f}; "
                  f"max/min tweedie {spread['tweedie']:.1f}, consistency {spread['consistency']:.1f}; "
                  f"{secs:.0f}s" + (f"; failing: {', '.join(failed)}" if failed else ""))
    assert ok, failed


def test_criterion_6_analytic_score(sched, spec):
    rng = spawn_rng(0, "acceptance", "analytic")
    den = AnalyticGmmDenoiser(spec, sched)
    t = rng.integers(1, sched.T + 1, size=1000)
    x_t = q_sample(sample_gmm(spec, 1000, rng), t, rng.standard_normal((1000, 2)), sched)
    worst = float(np.max(np.abs(tweedie_x0(den, x_t, t) - gmm_posterior_mean(spec, x_t, t, sched))))
    ok = worst <= 1e-8
    report(6, ok, f"max |tweedie(analytic eps) - posterior mean| = {worst:.2e} over 1000 points (tol 1e-8)")
    assert ok


# ---------------------------------------------------------------------------
# 7-9: fine-tuning behaviour
# ---------------------------------------------------------------------------

_RUNS: dict = {}


def run_sqdf(trained, seed, **kw):
    """Final-checkpoint metrics (fresh samples) of a cached fine-tuning run."""
    key = (seed, tuple(sorted(kw.items())))
    if key not in _RUNS:
        cfg = SqdfConfig(**{"epochs": 200, "checkpoint_every": 200, **kw})
        t0 = time.perf_counter()
        res = finetune_run(cfg, trained.model, TargetModeReward(), trained.spec, seed, cm=trained.cm)
        secs = time.perf_counter() - t0
        curve = checkpoint_curve(res, trained.model, TargetModeReward(), trained.spec, EVAL_N, seed)
        _RUNS[key] = (curve, secs)
    return _RUNS[key]


def seed_mean(trained, **kw):
    curves, secs = zip(*(run_sqdf(trained, s, **kw) for s in SEEDS))
    avg = average_curves(curves)
    return avg[0], avg[-1], sum(secs)


def test_criterion_7_alpha_sweep(trained):
    res = {a: seed_mean(trained, alpha=a, gamma=0.9) for a in (0.5, 2.0, 8.0)}
    start, final_2, _ = res[2.0]
    improved = final_2["reward"] > start["reward"]
    kl = [res[a][1]["kl_sum"] for a in (0.5, 2.0, 8.0)]
    rw = [res[a][1]["reward"] for a in (0.5, 2.0, 8.0)]
    dv = [res[a][1]["diversity"] for a in (0.5, 2.0, 8.0)]
    kl_mono = kl[0] > kl[1] > kl[2]
    pareto = all(rw[j] <= rw[i] for i in range(3) for j in range(i + 1, 3))
    slowest = max(r[2] for r in res.values()) / len(SEEDS)
    ok = improved and kl_mono and pareto and slowest < 1800
    report(7, ok, f"alpha=2 reward {start['reward']:.2f} -> {final_2['reward']:.2f}; alpha 0.5/2/8: "
                  f"KL-sum {kl[0]:.2f}/{kl[1]:.2f}/{kl[2]:.2f}, reward {rw[0]:.2f}/{rw[1]:.2f}/{rw[2]:.2f}, "
                  f"diversity {dv[0]:.2f}/{dv[1]:.2f}/{dv[2]:.2f}; {slowest:.0f}s per run")
    assert ok


def test_criterion_8_gamma_ablation(trained):
    _, g09, _ = seed_mean(trained, alpha=2.0, gamma=0.9)
    _, g1, _ = seed_mean(trained, alpha=2.0, gamma=1.0)
    ok = g1["reward"] >= g09["reward"] and g09["diversity"] >= g1["diversity"] and g09["coverage"] >= g1["coverage"]
    report(8, ok, f"gamma=1 vs 0.9: reward {g1['reward']:.2f} vs {g09['reward']:.2f}, diversity "
                  f"{g1['diversity']:.2f} vs {g09['diversity']:.2f}, coverage {g1['coverage']:.2f} vs {g09['coverage']:.2f}")
    assert ok


def test_criterion_9_buffer_ablation(trained):
    # "no buffer" keeps exactly one epoch of on-policy states; compare at the first checkpoint
    # where each seed-averaged curve reaches the lower of the two final rewards
    caps = {"none": 64 * 50, "buffer": 64000}
    avg = {}
    for name, cap in caps.items():
        curves = []
        for s in SEEDS:
            res = finetune_run(SqdfConfig(epochs=30, checkpoint_every=3, buffer_capacity=cap), trained.model,
                               TargetModeReward(), trained.spec, s, cm=trained.cm)
            curves.append(checkpoint_curve(res, trained.model, TargetModeReward(), trained.spec, EVAL_N, s))
        avg[name] = average_curves(curves)
    level = min(a[-1]["reward"] for a in avg.values())
    div = {k: metric_at_reward(v, level) for k, v in avg.items()}
    pre = avg["none"][0]["reward"]
    sweep = "; ".join(f"{f:.1f}: {metric_at_reward(avg['none'], pre + f * (level - pre)):.2f}/"
                      f"{metric_at_reward(avg['buffer'], pre + f * (level - pre)):.2f}" for f in (0.5, 0.7, 0.9))

    buf = ReplayBuffer(10, "prioritized")
    buf.push(np.zeros((5, 2)), 3, priority=[1.0, 2.0, 3.0, 4.0, 0.0])
    freq = np.bincount(buf.sample_indices(1_000_000, spawn_rng(0, "acceptance", "priority")), minlength=5) / 1e6
    rel = float(np.max(np.abs(freq[:4] / np.array([0.1, 0.2, 0.3, 0.4]) - 1)))
    ok = div["none"] <= div["buffer"] and rel <= 0.01 and freq[4] == 0
    report(9, ok, f"diversity at matched reward {level:.2f}: no-buffer {div['none']:.3f} <= buffer {div['buffer']:.3f}"
                  f" (fraction-of-gain none/buffer {sweep}); priority freq max rel err {rel:.4f} (tol 0.01)")
    assert ok


# ---------------------------------------------------------------------------
# 10: black-box optimisation
# ---------------------------------------------------------------------------


def test_criterion_10_bbo(trained):
    t0 = time.perf_counter()
    cfg = BboConfig()
    hist, totals = [], []
    for s in SEEDS:
        res = bbo_run(cfg, trained.model, TargetModeReward(), trained.spec, s, cm=trained.cm)
        hist.append(res.rows)
        totals.append(res.oracle.budget.total_used)
    secs = (time.perf_counter() - t0) / len(SEEDS)
    rep = round_report(hist)
    r0, rk = rep[0]["oracle_mean_reward_mean"], rep[-1]["oracle_mean_reward_mean"]
    mae = [r["surrogate_mae_mean"] for r in rep[1:]]
    ok = all(t == 960 for t in totals) and rk > r0 and all(np.isfinite(mae)) and secs < 2700
    report(10, ok, f"queries per seed {totals}; oracle mean reward round 0 {r0:.2f} -> round {len(rep) - 1} {rk:.2f}; "
                   f"surrogate MAE by round {', '.join(f'{m:.2f}' for m in mae)}; {secs:.0f}s per run")
    assert ok


# ---------------------------------------------------------------------------
# 11: degenerate cases
# ---------------------------------------------------------------------------


def test_criterion_11_degenerations(sched, spec):
    ref = micro_model(sched, seed=0, hidden=4)
    pol = micro_model(sched, seed=1, hidden=4, role="trainable-policy")
    pol.prefix = "policy."
    rng = seed_rng(110)
    x = rng.standard_normal((16, 2))
    t = rng.integers(1, sched.T + 1, size=16)
    eps = rng.standard_normal((16, 2))
    r = TargetModeReward()
    ta, tb = Tape(), Tape()
    a = sqdf_loss(x, t, pol, ref, make_graph_estimator("tweedie", ref), r, 1.0, 1.0, eps, ta).loss
    b = undiscounted_loss(x, t, pol, ref, r, 1.0, eps, tb).loss
    ga, gb = backward(ta, a), backward(tb, b)
    loss_eq = a.value == b.value and all(np.array_equal(ga[k], gb[k]) for k in ga)

    kl_eq = {}
    for base in ("pg", "draft", "draft-3"):
        kw = dict(epochs=3, batch_size=8)
        d0 = baseline_run(BaselineConfig(base, **kw), ref, r, spec, 0).checkpoints[3]
        d1 = baseline_run(BaselineConfig(base + "+kl", alpha=0.0, **kw), ref, r, spec, 0).checkpoints[3]
        kl_eq[base] = params_digest(d0) == params_digest(d1)

    ddim_eq = all(np.array_equal(ddim_multistep_x0(ref, x, s, 1), tweedie_x0(ref, x, s)) for s in range(0, sched.T + 1))
    ok = loss_eq and all(kl_eq.values()) and ddim_eq
    report(11, ok, f"gamma=1 tweedie loss == undiscounted loss (value and grads bitwise): {loss_eq}; "
                   f"+kl with alpha=0 == base: {kl_eq}; DDIM n=1 == Tweedie for every t: {ddim_eq}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-v"]))
