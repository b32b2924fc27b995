"""End-to-end acceptance checks, one test (or pair) per criterion.

Each check records a PASS/FAIL line that is printed in the terminal summary. Criteria
that do not hold for this implementation are marked ``xfail(strict=True)`` with the
assertion kept at the stated tolerance.
"""

import math
from functools import lru_cache

import numpy as np
import pytest

from conftest import ACCEPTANCE, centralized_npg, random_instance
from fedmtrl import analysis
from fedmtrl.evaluation import Exact, NoisyExact
from fedmtrl.fednac import (NAC_CSV_FIELDS, FedNacConfig, FeatureMap, approximation_loss, critic_solve_batch,
                            log_linear_policy, run_fednac, sample_batch, weighted_least_squares)
from fedmtrl.fednpg import CSV_FIELDS, RunConfig, average_policy, init_state, run, step, tracking_gap
from fedmtrl.graph import fully_connected, k_neighbor_equal, metropolis_from_edges, standard_ring
from fedmtrl.gridworld import GridWorldSpec, build
from fedmtrl.harness.io import write_csv
from fedmtrl.harness.problems import random_mdp
from fedmtrl.mdp import Policy, exact_q, optimal_values, state_action_visitation

GRID_SIZES = (10, 20, 30)
GRID_BUDGET = 1000


def report(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def csv_bytes(tmp_path, name, fields, metrics):
    path = tmp_path / name
    write_csv(path, fields, [m.row() for m in metrics])
    return path.read_bytes()


def first_below(values, level):
    idx = np.flatnonzero(np.asarray(values) < level)
    return int(idx[0]) if idx.size else None


# -- shared runs -----------------------------------------------------------------------------------------

def grid_run(K, N, tracking=True, eps=0.0):
    return _grid_run(K, N, bool(tracking), float(eps))


@lru_cache(maxsize=None)
def _grid_run(K, N, tracking, eps):
    mdp, rewards, rho = build(GridWorldSpec(K, N, gamma=0.99))
    cfg = RunConfig(eta=0.1, iterations=GRID_BUDGET, mixing=standard_ring(N), tau=0.005, tracking=tracking,
                    eval_mode=NoisyExact(eps) if eps else Exact(), seed=0)
    return run(mdp, rewards, cfg, rho=rho)


def reduction_runs():
    """Federated and centralized trajectories for the fully connected oracle."""
    for seed in range(10):
        mdp, r = random_instance(5, 3, n_agents=4, seed=1000 + seed)
        for tau in (0.0, 0.05):
            cfg = RunConfig(eta=0.2, iterations=50, mixing=fully_connected(4), tau=tau)
            s = init_state(mdp, r, cfg)
            fed = [average_policy(s).probs]
            gaps = [tracking_gap(s)]
            for _ in range(50):
                s = step(s, mdp, r, cfg)
                fed.append(average_policy(s).probs)
                gaps.append(tracking_gap(s))
            yield seed, tau, fed, centralized_npg(mdp, r.mean, 0.2, tau, 50), max(gaps)


def linear_rate_case(topology, seed):
    N, gamma, tau = 3, 0.9, 0.1
    W = standard_ring(N) if topology == "ring" else fully_connected(N)
    mdp, r = random_instance(4, 3, n_agents=N, seed=100 + seed, gamma=gamma)
    eta = min(analysis.eta0(analysis.AnalysisParams(N, gamma, tau, W.sigma, 3, 0.0)), 0.9 * (1 - gamma) / tau)
    cfg = RunConfig(eta=eta, iterations=200, mixing=W, tau=tau)
    return mdp, r, cfg


def consensus_topologies():
    return [standard_ring(3), standard_ring(5), k_neighbor_equal(6, 1),
            metropolis_from_edges(4, [(0, 1), (1, 2), (2, 3)])]


def consensus_case(W, seed):
    p = analysis.AnalysisParams(W.n_agents, 0.9, 0.0, W.sigma, 3, 0.0)
    eta = analysis.eta1(p)
    mdp, r = random_instance(4, 3, n_agents=W.n_agents, seed=200 + seed, gamma=0.9)
    cfg = RunConfig(eta=eta, iterations=300, mixing=W)
    bound = analysis.consensus_bound(analysis.AnalysisParams(W.n_agents, 0.9, 0.0, W.sigma, 3, eta))
    return mdp, r, cfg, bound


def recursion_cases():
    for W in (standard_ring(3), fully_connected(3)):
        for seed in range(5):
            mdp, r = random_instance(3, 2, n_agents=3, seed=300 + seed, gamma=0.9)
            eta0 = analysis.eta0(analysis.AnalysisParams(3, 0.9, 0.1, W.sigma, 2, 0.0))
            yield mdp, r, RunConfig(eta=eta0, iterations=100, mixing=W, tau=0.1, diagnostics={"recursion"})
            yield mdp, r, RunConfig(eta=0.1, iterations=100, mixing=W, diagnostics={"recursion"})


def nac_problem():
    mdp, rewards = random_mdp(3, 2, 3, seed=0, gamma=0.8)
    cfg = FedNacConfig(actor_iterations=200, critic_iterations=10**4, actor_lr=0.2, mixing=standard_ring(3),
                       seed=0, critic_diagnostics=False)
    return mdp, rewards, FeatureMap.one_hot(3, 2), cfg


@lru_cache(maxsize=None)
def nac_run():
    mdp, rewards, features, cfg = nac_problem()
    return run_fednac(mdp, rewards, features, cfg)


# -- 1 ------------------------------------------------------------------------------------------------------------

def test_criterion_01_centralized_reduction():
    worst = 0.0
    for _, _, fed, cen, _ in reduction_runs():
        worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in zip(fed, cen)))
    ok = report(1, worst <= 1e-10, f"fully connected vs centralized NPG, max sup-norm diff {worst:.2e} (<= 1e-10)")
    assert ok


# -- 3 ------------------------------------------------------------------------------------------------------------

def test_criterion_03_gridworld_convergence():
    hits = {K: first_below(grid_run(K, 10).normalized_gaps, 1e-2) for K in GRID_SIZES}
    reached = all(h is not None for h in hits.values())
    spread = max(hits.values()) / max(min(hits.values()), 1) if reached else math.inf
    ok = report(3, reached and spread < 2,
                f"iterations to normalized gap < 1e-2 per K {hits}, spread {spread:.2f}x (< 2x)")
    assert ok


# -- 4 ------------------------------------------------------------------------------------------------------------

@pytest.mark.xfail(strict=True, reason="the ablation converges on this GridWorld: every agent's local Q "
                                       "already favours the shared path, so dropping tracking does not stall it")
def test_criterion_04_no_tracking_ablation():
    rows = {}
    for N in (5, 10):
        for K in GRID_SIZES:
            with_t = float(np.min(grid_run(K, N).normalized_gaps))
            without = float(np.min(grid_run(K, N, tracking=False).normalized_gaps))
            rows[(K, N)] = (with_t, without)
    tracking_ok = all(w < 1e-1 for w, _ in rows.values())
    ablation_stalls = all(wo >= 1e-1 for _, wo in rows.values())
    worst = min(wo for _, wo in rows.values())
    report(4, tracking_ok and ablation_stalls,
           f"tracking reaches < 1e-1: {tracking_ok}; no-tracking best normalized gap {worst:.2e} "
           f"(needs >= 1e-1 for every K, N)")
    assert tracking_ok and ablation_stalls


# -- 5 ------------------------------------------------------------------------------------------------------------

def test_criterion_05_linear_convergence():
    details, ok = [], True
    for topology in ("ring", "full"):
        for seed in range(5):
            mdp, r, cfg = linear_rate_case(topology, seed)
            opt = optimal_values(mdp, r.mean, cfg.tau)
            s = init_state(mdp, r, cfg)
            gaps = []
            for _ in range(cfg.iterations + 1):
                gaps.append(float(np.max(np.abs(opt.pi_star.log_prob - average_policy(s).log_prob))))
                s = step(s, mdp, r, cfg)
            gaps = np.array(gaps)
            burn = 2
            end = int(np.flatnonzero(gaps > 1e-10)[-1]) + 1  # stop at the rounding floor
            t = np.arange(burn, end)
            slope = np.polyfit(t, np.log(gaps[burn:end]), 1)[0]
            bound = max(1 - cfg.tau * cfg.eta / 2, (3 + cfg.mixing.sigma) / 4) + 0.05
            ok &= bool(slope < 0 and math.exp(slope) <= bound)
            details.append(f"{topology}:{slope:.3g}")
    report(5, ok, "log-gap slope per instance, all negative with ratio within bound; " + " ".join(details))
    assert ok


# -- 6 ------------------------------------------------------------------------------------------------------------

def test_criterion_06_consensus_bound():
    ratios = []
    for W in consensus_topologies():
        for seed in range(3):
            mdp, r, cfg, bound = consensus_case(W, seed)
            res = run(mdp, r, cfg)
            ratios.append(max(m.consensus_err for m in res.metrics) / bound)
    ok = report(6, max(ratios) <= 1, f"max consensus error / bound = {max(ratios):.2e} over {len(ratios)} runs")
    assert ok


# -- 7 ------------------------------------------------------------------------------------------------------------

def test_criterion_07_error_recursion():
    violations = [run(mdp, r, cfg).recursion_violation for mdp, r, cfg in recursion_cases()]
    worst = max(violations)
    ok = report(7, worst <= 1e-8, f"max elementwise excess over the recursion bound {worst:.2e} "
                                  f"(<= 1e-8, {len(violations)} runs)")
    assert ok


# -- 8 ------------------------------------------------------------------------------------------------------------

def test_criterion_08_inexact_robustness():
    exact = grid_run(10, 10).metrics[-1].avg_gap
    noisy = grid_run(10, 10, eps=1e-4).metrics[-1].avg_gap
    ratio = noisy / exact
    ok = report(8, 0.5 <= ratio <= 2, f"final average gap noisy/exact = {ratio:.4f} (within 2x)")
    assert ok


# -- 9 ------------------------------------------------------------------------------------------------------------

def test_criterion_09_sampler_statistics():
    mdp, r = random_instance(3, 2, seed=9, gamma=0.5)
    nu = np.full((3, 2), 1 / 6)
    pi = Policy.uniform(3, 2)
    _, _, _, h = sample_batch(mdp, nu, pi, r[0], 10**5, np.random.default_rng(90))
    mean_len = float(np.mean(h + 1))

    mdp8, r8 = random_instance(3, 2, seed=9, gamma=0.8)
    pi8 = log_linear_policy(np.random.default_rng(91).standard_normal(6), FeatureMap.one_hot(3, 2))
    s, a, q, _ = sample_batch(mdp8, nu, pi8, r8[0], 10**5, np.random.default_rng(92))
    freq = np.zeros((3, 2))
    np.add.at(freq, (s, a), 1)
    freq /= freq.sum()
    tv = 0.5 * float(np.abs(freq - state_action_visitation(mdp8, pi8, nu)).sum())
    q_true = exact_q(mdp8, pi8, r8[0])
    z = []
    for i in range(3):
        for j in range(2):
            sel = q[(s == i) & (a == j)]
            z.append(abs(sel.mean() - q_true[i, j]) / (sel.std(ddof=1) / math.sqrt(sel.size)))
    ok = report(9, 1.95 <= mean_len <= 2.05 and tv <= 0.02 and max(z) <= 3,
                f"mean(h+1)={mean_len:.4f}, TV={tv:.4f}, max |z| of Q means={max(z):.2f}")
    assert ok


# -- 10 ------------------------------------------------------------------------------------------------------------

def critic_loss_gaps(K, seeds=20):
    mdp, r = random_instance(3, 2, seed=7, gamma=0.8)
    f = FeatureMap.one_hot(3, 2)
    pi = Policy.uniform(3, 2)
    nu = np.full((3, 2), 1 / 6)
    d = state_action_visitation(mdp, pi, nu)
    q = exact_q(mdp, pi, r[0])
    best = approximation_loss(weighted_least_squares(q, d, f), q, d, f)
    rngs = [np.random.default_rng([123, K, s]) for s in range(seeds)]
    w = critic_solve_batch(mdp, nu, [pi] * seeds, [r[0]] * seeds, f, K, 0.5, rngs)
    return np.array([approximation_loss(wi, q, d, f) - best for wi in w])


def test_criterion_10_critic_rate():
    Ks = np.array([10**2, 10**3, 10**4, 10**5])
    med = np.array([np.median(critic_loss_gaps(int(K))) for K in Ks])
    slope = float(np.polyfit(np.log(Ks), np.log(med), 1)[0])
    ok = report(10, -1.3 <= slope <= -0.7, f"log-log slope of median loss gap {slope:.3f} (in [-1.3, -0.7])")
    assert ok


# -- 11 ------------------------------------------------------------------------------------------------------------

def nac_summary():
    res = nac_run()
    gaps = np.array([m.gap for m in res.metrics])
    cons = np.array([m.actor_consensus for m in res.metrics])
    peak_at = int(np.argmax(cons))
    gap_ok = bool(np.min(gaps) < 0.1 * res.v_star_rho)
    cons_ratio = float(np.min(cons[peak_at:]) / cons[peak_at])
    cons_ok = cons_ratio < 1e-2
    report(11, gap_ok and cons_ok,
           f"best gap {np.min(gaps) / res.v_star_rho:.4f} V* (< 0.1 V*: {gap_ok}); actor consensus "
           f"min-after-peak / peak = {cons_ratio:.3f} (< 1e-2: {cons_ok})")
    return gap_ok, cons_ok


def test_criterion_11_fednac_value_gap():
    gap_ok, _ = nac_summary()
    assert gap_ok


@pytest.mark.xfail(strict=True, reason="with K=1e4 samples per critic the agents' critic noise keeps the "
                                       "actor disagreement at a floor near 0.1 of its peak")
def test_criterion_11_fednac_actor_consensus():
    _, cons_ok = nac_summary()
    assert cons_ok


# -- 2 ------------------------------------------------------------------------------------------------------------

def test_criterion_02_tracking_invariant():
    gaps = [g for *_, g in reduction_runs()]
    gaps += [grid_run(K, N, tr).tracking_gap for K in GRID_SIZES for N in (5, 10) for tr in (True, False)]
    gaps.append(grid_run(10, 10, eps=1e-4).tracking_gap)
    for mdp, r, cfg in recursion_cases():
        gaps.append(run(mdp, r, cfg).tracking_gap)
    gaps.append(nac_run().tracking_gap)
    worst = max(gaps)
    ok = report(2, worst <= 1e-9, f"max |mean tracker - mean Q| = {worst:.2e} over {len(gaps)} runs (<= 1e-9)")
    assert ok


# -- 12 ------------------------------------------------------------------------------------------------------------

def test_criterion_12_determinism(tmp_path):
    same = {}
    # 1: reduction trajectories
    same[1] = all(np.array_equal(a, b) for x, y in zip(reduction_runs(), reduction_runs())
                  for a, b in zip(x[2], y[2]))
    # 3, 4, 8: GridWorld runs rerun from scratch and compared with the cached ones
    for key, args in ((3, (10, 10)), (4, (10, 10, False)), (8, (10, 10, True, 1e-4))):
        first = csv_bytes(tmp_path, f"a{key}.csv", CSV_FIELDS, grid_run(*args).metrics)
        fresh = _grid_run.__wrapped__(*args[:2], *(args[2:] + (True, 0.0)[len(args) - 2:]))
        again = csv_bytes(tmp_path, f"b{key}.csv", CSV_FIELDS, fresh.metrics)
        same[key] = first == again
    # 5, 6, 7: random-MDP runs
    mdp, r, cfg = linear_rate_case("full", 0)
    same[5] = (csv_bytes(tmp_path, "a5.csv", CSV_FIELDS, run(mdp, r, cfg).metrics)
               == csv_bytes(tmp_path, "b5.csv", CSV_FIELDS, run(mdp, r, cfg).metrics))
    mdp, r, cfg, _ = consensus_case(standard_ring(3), 0)
    same[6] = (csv_bytes(tmp_path, "a6.csv", CSV_FIELDS, run(mdp, r, cfg).metrics)
               == csv_bytes(tmp_path, "b6.csv", CSV_FIELDS, run(mdp, r, cfg).metrics))
    mdp, r, cfg = next(recursion_cases())
    same[7] = (csv_bytes(tmp_path, "a7.csv", CSV_FIELDS, run(mdp, r, cfg).metrics)
               == csv_bytes(tmp_path, "b7.csv", CSV_FIELDS, run(mdp, r, cfg).metrics))
    # 9, 10: sampler and critic outputs
    mdp, r = random_instance(3, 2, seed=9, gamma=0.8)
    draws = [sample_batch(mdp, np.full((3, 2), 1 / 6), Policy.uniform(3, 2), r[0], 1000,
                          np.random.default_rng(92)) for _ in range(2)]
    same[9] = all(np.array_equal(x, y) for x, y in zip(*draws))
    same[10] = np.array_equal(critic_loss_gaps(1000), critic_loss_gaps(1000))
    # 11: FedNAC rerun
    mdp, rewards, features, cfg = nac_problem()
    same[11] = (csv_bytes(tmp_path, "a11.csv", NAC_CSV_FIELDS, nac_run().metrics)
                == csv_bytes(tmp_path, "b11.csv", NAC_CSV_FIELDS, run_fednac(mdp, rewards, features, cfg).metrics))
    ok = report(12, all(same.values()), "identical reruns per criterion " +
                " ".join(f"{k}:{'yes' if v else 'NO'}" for k, v in sorted(same.items())))
    assert ok
