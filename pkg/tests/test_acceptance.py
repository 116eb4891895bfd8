"""Acceptance suite: one test per shipped criterion, each printing a
PASS/FAIL line (run with -s to see them)."""

import itertools
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from indiff.binomial import BinomialModel, completeness_check, replicate
from indiff.dynamics import evolve, indifference_step
from indiff.pareto import (MarketMakerPanel, UtilitySpec, conditional_utility_floor,
                           envelope_bounds)
from indiff.superrep import (SearchConfig, cash_ratio_asymptotics, counterexample_run,
                             superreplication_price)
from indiff.tails import (BNSParams, LevyTriplet, bns_laplace, bns_tails_check,
                          decreasing_tails_check, levy_exponent, levy_tails_check)
from indiff.tree import binomial_tree

from helpers import (bns_mc_terminal, brute_replication_solvable, cond_exp_recursive,
                     random_panel, random_strategy, random_tree, random_utility)


@contextmanager
def criterion(num, text):
    try:
        yield
    except BaseException:
        print(f"[criterion {num:2d}] FAIL  {text}")
        raise
    print(f"[criterion {num:2d}] PASS  {text}")


def test_criterion_01_counterexample_reproduction():
    with criterion(1, "two-period counterexample limits and non-attainment"):
        start = time.time()
        rep = counterexample_run(0.5, 0.6, 0.4, 1.0, 1.0, 0.0,
                                 q_schedule=(1.0, 10.0, 100.0, 1000.0))
        eng = rep["engine_at_max_q"]
        assert eng["q1"] == 1000.0
        assert abs(eng["u1_up"] - (-0.8)) <= 1e-3
        assert abs(eng["x2_up"] - math.log(1.25)) <= 1e-3
        sweep = rep["superreplication"]
        prices = [p for _, p in sweep.price_curve]
        assert all(a >= b for a, b in zip(prices, prices[1:]))
        assert min(prices) < 1e-2
        assert sweep.attained == "not-attained-evidence"
        elapsed = time.time() - start
        assert elapsed < 10.0, f"runtime {elapsed:.1f}s exceeds 10s"


def test_criterion_02_martingale_and_weight_band():
    with criterion(2, "martingale and weight-band invariants on 100 random trees"):
        start = time.time()
        rng = np.random.default_rng(2024)
        for _ in range(100):
            tree = binomial_tree(int(rng.integers(2, 5)), float(rng.uniform(0.3, 0.7)),
                                 lambda p: 0.4 * sum(p))
            panel = random_panel(rng, max_makers=2, allow_mixture=True)
            strat = random_strategy(rng, tree, scale=0.7)
            path = evolve(tree, panel, panel.initial_utilities(), strat)
            for n in range(tree.n_nodes):
                if not tree.children[n]:
                    continue
                exp_next = sum(tree.prob[c] * path.u[c] for c in tree.children[n])
                assert np.max(np.abs(exp_next - path.u[n])) <= 1e-9
            lo, hi = path.weight_band_range(panel)
            c = panel.risk_bound
            assert lo >= 1.0 / c - 1e-9 and hi <= c + 1e-9
        elapsed = time.time() - start
        assert elapsed < 60.0, f"runtime {elapsed:.1f}s exceeds 60s"


def test_criterion_03_closed_form_vs_generic_solver():
    with criterion(3, "single-maker closed form matches the generic solver to 1e-9"):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            alpha = float(rng.uniform(0.5, 2.0))
            panel = MarketMakerPanel.of([UtilitySpec.exponential(alpha)],
                                        endowment_base=float(rng.uniform(-0.3, 0.3)),
                                        endowment_position=(float(rng.uniform(-0.5, 0.5)),))
            tree = random_tree(rng, max_depth=3, lattice=0.5)
            q = float(rng.uniform(-1.5, 1.5))
            u_prev = [-float(np.exp(rng.uniform(-0.5, 0.5)))]
            closed = indifference_step(tree, panel, 0, u_prev, [q], method="closed_form")
            generic = indifference_step(tree, panel, 0, u_prev, [q], method="generic")
            assert abs(closed.x - generic.x) <= 1e-9
            assert np.max(np.abs(closed.u_children - generic.u_children)) <= 1e-9


def test_criterion_04_completeness_equivalence_sweep():
    with criterion(4, "completeness criterion matches replication solvability on all "
                      "256 two-period payoff assignments"):
        tree_probs = {(): 0.6, (1,): 0.55, (-1,): 0.45}
        agree = 0
        total = 0
        for values in itertools.product((0.0, 1.0, 2.0, 3.0), repeat=4):
            seq = iter(values)
            tree = binomial_tree(2, lambda p: tree_probs[p], lambda p: next(seq))
            model = BinomialModel.of(tree, alpha=1.0)
            total += 1
            if brute_replication_solvable(model) == completeness_check(model).complete:
                agree += 1
        assert agree == total == 256


def test_criterion_05_replication_pricing():
    with criterion(5, "complete one-period model prices by exact replication"):
        coin = binomial_tree(1, 0.5, lambda p: float(p[-1]))
        model = BinomialModel.of(coin, alpha=1.0)
        claim = coin.psi[coin.leaves, 0]
        sol = replicate(model, claim)
        assert abs(sol["pi"] - math.log(math.cosh(1.0))) <= 1e-9
        assert abs(sol["Q"].positions[0, 0] - (-1.0)) <= 1e-9
        panel = MarketMakerPanel.of([UtilitySpec.exponential(1.0)])
        search = superreplication_price(coin, panel, claim, SearchConfig())
        assert abs(search.price_upper - sol["pi"]) <= 1e-3


def test_criterion_06_cash_ratio_asymptotics():
    with criterion(6, "cash per unit approaches the conditional payoff bounds at |Q|=1e3"):
        rng = np.random.default_rng(12)
        for _ in range(20):
            tree = random_tree(rng, max_depth=2, prob_floor=0.6, lattice=0.5)
            alpha = float(rng.uniform(1.0, 2.0))
            panel = MarketMakerPanel.of([UtilitySpec.exponential(alpha)])
            for t in range(1, tree.horizon + 1):
                for sign in (+1, -1):
                    rep = cash_ratio_asymptotics(tree, panel, t, sign, [1000.0],
                                                 u_levels=[-1.0])
                    assert rep["max_error"] <= 5e-3


def test_criterion_07_tail_criterion_cross_validation():
    with criterion(7, "exact extremal-atom criterion agrees with the numeric ray "
                      "criterion on 100 random trees"):
        rng = np.random.default_rng(77)
        for _ in range(100):
            tree = random_tree(rng, max_depth=3, lattice=0.5)
            for t in range(1, tree.horizon + 1):
                exact = decreasing_tails_check(tree, t, mode="exact")
                numeric = decreasing_tails_check(tree, t, mode="numeric", q_max=200.0)
                assert exact["per_node"] == numeric["per_node"]


def test_criterion_08_levy_checks():
    with criterion(8, "Levy exponent decay: diffusion, two-sided jumps, drift-only set"):
        brownian = LevyTriplet.of(diffusion=1.0)
        for d in np.linspace(-1.0, 1.0, 9):
            for q in (100.0, -100.0):
                e = q * d - 1.0 * levy_exponent(brownian, q)
                assert e <= -4.9e3
        two_sided = LevyTriplet.of(jumps=[(1.0, 0.5), (-0.7, 0.3)])
        rep = levy_tails_check(two_sided, 0.0, 1.0, 1.0, [-2.0, 0.0, 2.0],
                               q_schedule=(1.0, 10.0, 50.0))
        for s in rep["samples"]:
            assert s["decays_pos"] and s["decays_neg"]
        neg_only = LevyTriplet.of(drift=0.0, jumps=[(-2.0, 1.0)])
        h = 1.0
        rep = levy_tails_check(neg_only, 0.0, h, 1.0, [-0.5, 0.5], q_schedule=(1.0, 10.0, 50.0))
        assert rep["case_positive_ray"] == "drift-linear"
        small, large = rep["samples"]
        assert small["decays_pos"] and small["decays_pos_expected"] is True
        assert not large["decays_pos"] and large["decays_pos_expected"] is False
        assert rep["linear_rate_bound_positive"] == pytest.approx(2.0)


def test_criterion_09_bns_monte_carlo_and_brackets():
    with criterion(9, "volatility-model transform matches 1e6-path Monte Carlo; decay "
                      "brackets and sixth-power coefficient"):
        start = time.time()
        params = BNSParams.of(m=0.0, beta=-0.5, lam=1.0, rho=-0.3, sigma0_sq=0.04,
                              subordinator=[(0.1, 1.0)])
        rng = np.random.default_rng(90210)
        x_t = bns_mc_terminal(params, 1.0, 1_000_000, rng)
        for q in (-2.0, -1.0, 1.0, 2.0):
            sample = np.exp(q * x_t)
            est = float(sample.mean())
            se = float(sample.std()) / math.sqrt(len(sample))
            analytic = math.exp(bns_laplace(params, 0.0, 1.0, q, 0.0, params.sigma0_sq))
            assert abs(est - analytic) <= 3.0 * se, f"q={q}: {est} vs {analytic} (se {se})"
        rep = bns_tails_check(params, 0.0, 0.5, 1.0, [(0.05, -0.012), (-0.1, -0.02)],
                              q_schedule=(1.0, 5.0, 25.0, 50.0))
        assert rep["q6_positive"] and rep["q6_coefficient"] > 0
        for s in rep["samples"]:
            assert s["trace"][-1][1] < -1e3 and s["trace"][-1][2] < -1e3
        elapsed = time.time() - start
        assert elapsed < 120.0, f"runtime {elapsed:.1f}s exceeds 120s"


def test_criterion_10_envelope_and_floor():
    with criterion(10, "envelope sandwich on [-50, 50] and conditional utility floor "
                       "below the exact expectation on 100 random trees"):
        rng = np.random.default_rng(55)
        grid = np.linspace(-50.0, 50.0, 2001)
        for _ in range(20):
            spec = random_utility(rng, allow_mixture=True, max_rate=3.0)
            c1, c2 = envelope_bounds(spec, grid)
            assert c1 <= c2
            lo, hi = spec.stabilization
            env = -np.exp(-lo * grid) - np.exp(-hi * grid)
            u = spec.u(grid)
            assert np.all(c2 * env <= u * (1 - 1e-12))
            assert np.all(u <= c1 * env * (1 - 1e-12))
        for _ in range(100):
            tree = random_tree(rng, max_depth=2, lattice=0.5, value_range=5)
            while tree.horizon != 2:
                tree = random_tree(rng, max_depth=2, lattice=0.5, value_range=5)
            spec = random_utility(rng, allow_mixture=True)
            x = float(rng.uniform(-2.0, 2.0))
            sigma = tree.psi[tree.leaves, 0]
            u_leaf = spec.u(x + sigma)
            for parent in range(tree.n_nodes):
                for child in tree.children[parent]:
                    floor = conditional_utility_floor(spec, x, sigma, tree, child, parent)
                    exact = cond_exp_recursive(tree, child, u_leaf)
                    assert floor <= exact + 1e-10 * abs(exact)
