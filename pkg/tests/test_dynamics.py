import io
import math

import numpy as np
import pytest

from indiff.dynamics import conjugacy_check, evolve, indifference_step, investor_pnl
from indiff.errors import InvalidParams, NonConvergence
from indiff.pareto import MarketMakerPanel, UtilitySpec
from indiff.superrep import counterexample_tree
from indiff.tree import ScenarioTree, Strategy, binomial_tree

from helpers import (cond_exp_recursive, indifference_cash_oracle, random_panel,
                     random_strategy, random_tree)

COIN = binomial_tree(1, 0.5, lambda p: float(p[-1]))
ONE_MAKER = MarketMakerPanel.of([UtilitySpec.exponential(1.0)])


def paper_u1(q, A, B, alpha=1.0, gap=1.0):
    e = math.exp(-alpha * q * gap)
    return -(A * e + (1 - A)) / (B * e + (1 - B))


class TestIndifferenceStep:
    def test_no_trade_leaves_state_alone(self):
        step = indifference_step(COIN, ONE_MAKER, 0, [-1.0], [0.0])
        assert step.x == 0.0
        assert step.u_children == pytest.approx(np.full((2, 1), -1.0))

    def test_unit_position_cash_balance(self):
        step = indifference_step(COIN, ONE_MAKER, 0, [-1.0], [1.0])
        assert step.x == pytest.approx(math.log(math.cosh(1.0)), rel=1e-12)
        oracle = indifference_cash_oracle(COIN, ONE_MAKER, 0, [-1.0], 1.0)
        assert step.x == pytest.approx(oracle, abs=1e-10)

    def test_second_period_utilities_match_direct_formula(self):
        tree = counterexample_tree(0.5, 0.6, 0.4, 1.0, 0.0)
        B = 0.5
        for q in (0.5, 2.0, 7.0):
            step = indifference_step(tree, ONE_MAKER, 0, [-1.0], [q])
            up, down = step.children
            assert step.u_children[0, 0] == pytest.approx(paper_u1(q, 0.6, B), rel=1e-12)
            assert step.u_children[1, 0] == pytest.approx(paper_u1(q, 0.4, B), rel=1e-12)

    def test_generic_solver_matches_closed_form(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            alphas = rng.uniform(0.5, 2.0, size=int(rng.integers(1, 3)))
            panel = MarketMakerPanel.of([UtilitySpec.exponential(a) for a in alphas],
                                        endowment_base=float(rng.uniform(-0.3, 0.3)),
                                        endowment_position=(float(rng.uniform(-0.5, 0.5)),))
            tree = random_tree(rng, max_depth=3)
            node = 0
            u_prev = -np.exp(rng.uniform(-0.5, 0.5, size=len(alphas)))
            q = float(rng.uniform(-1.0, 1.0))
            a = indifference_step(tree, panel, node, u_prev, [q], method="closed_form")
            b = indifference_step(tree, panel, node, u_prev, [q], method="generic")
            assert b.x == pytest.approx(a.x, abs=1e-9)
            assert b.u_children == pytest.approx(a.u_children, rel=1e-9)
            assert b.v == pytest.approx(a.v, rel=1e-8)

    def test_indifference_consistency(self):
        rng = np.random.default_rng(14)
        for _ in range(10):
            panel = random_panel(rng)
            tree = random_tree(rng, max_depth=3)
            u_prev = -np.exp(rng.uniform(-0.4, 0.4, size=panel.n_makers))
            q = float(rng.uniform(-1.0, 1.0))
            step = indifference_step(tree, panel, 0, u_prev, [q])
            # tower over the returned children reproduces the input levels
            mix = np.zeros(panel.n_makers)
            for ch, uch in zip(step.children, step.u_children):
                mix += tree.prob[ch] * uch
            assert mix == pytest.approx(u_prev, rel=1e-9)

    def test_extreme_position_raises(self):
        panel = MarketMakerPanel.of([UtilitySpec.mixture([(1.0, 1.0), (2.0, 1.0)])])
        with pytest.raises(NonConvergence):
            indifference_step(COIN, panel, 0, [-1.0], [1e4])

    def test_rejects_bad_utility_levels(self):
        with pytest.raises(InvalidParams):
            indifference_step(COIN, ONE_MAKER, 0, [0.5], [0.0])


class TestEvolve:
    def test_zero_strategy_zero_endowment(self):
        # utilities consistent with the (zero) endowment stay frozen
        tree = random_tree(np.random.default_rng(0), max_depth=3)
        panel = MarketMakerPanel.of([UtilitySpec.exponential(1.3)])
        u0 = panel.initial_utilities()
        path = evolve(tree, panel, u0, Strategy.zero(tree))
        evolved = ~np.isnan(path.u[:, 0])
        assert np.allclose(path.u[evolved], u0[0])
        steps = ~np.isnan(path.x)
        assert np.allclose(path.x[steps], 0.0, atol=1e-14)

    def test_liquidation_cash_limit(self):
        tree = counterexample_tree(0.5, 0.6, 0.4, 1.0, 0.0)
        strat = Strategy.zero(tree)
        strat.positions[0, 0] = 1000.0
        path = evolve(tree, ONE_MAKER, [-1.0], strat)
        up, down = tree.children[0]
        assert path.x[up] == pytest.approx(math.log(1.25), abs=1e-6)
        assert path.x[down] == pytest.approx(math.log(5.0 / 6.0), abs=1e-6)

    def test_martingale_property_random_models(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            tree = binomial_tree(3, float(rng.uniform(0.3, 0.7)),
                                 lambda p: 0.5 * sum(p))
            panel = random_panel(rng)
            strat = random_strategy(rng, tree)
            path = evolve(tree, panel, panel.initial_utilities(), strat)
            assert path.martingale_residual() <= 1e-10
            # cross-check one interior node against the recursive oracle
            n = int(tree.children[0][0])
            for m in range(panel.n_makers):
                vals = path.u[tree.leaves, m]
                assert cond_exp_recursive(tree, n, vals) == pytest.approx(path.u[n, m], rel=1e-9)

    def test_weight_band(self):
        rng = np.random.default_rng(13)
        for _ in range(8):
            tree = random_tree(rng, max_depth=3)
            panel = random_panel(rng)
            strat = random_strategy(rng, tree, scale=0.8)
            path = evolve(tree, panel, panel.initial_utilities(), strat)
            lo, hi = path.weight_band_range(panel)
            c = panel.risk_bound
            assert lo >= 1.0 / c - 1e-9
            assert hi <= c + 1e-9

    def test_time_one_utility_monotone_in_position(self):
        tree = counterexample_tree(0.5, 0.6, 0.4, 1.0, 0.0)
        up, down = tree.children[0]
        h = 1e-6
        for q in np.linspace(-3.0, 3.0, 20):
            plus = indifference_step(tree, ONE_MAKER, 0, [-1.0], [q + h]).u_children
            minus = indifference_step(tree, ONE_MAKER, 0, [-1.0], [q - h]).u_children
            assert plus[0, 0] > minus[0, 0]  # up node increasing (p2 > p3)
            assert plus[1, 0] < minus[1, 0]  # down node decreasing

    def test_csv_export(self):
        tree = counterexample_tree(0.5, 0.6, 0.4, 1.0, 0.0)
        strat = Strategy.zero(tree)
        strat.positions[0, 0] = 1.0
        path = evolve(tree, ONE_MAKER, [-1.0], strat)
        buf = io.StringIO()
        path.to_csv(buf)
        lines = buf.getvalue().strip().splitlines()
        assert lines[0] == "node_id,time,U^1,V^1,X,Q^1"
        assert len(lines) == tree.n_nodes + 1


class TestInvestorPnl:
    def test_zero_strategy_zero_pnl(self):
        tree = random_tree(np.random.default_rng(1), max_depth=3)
        panel = MarketMakerPanel.of([UtilitySpec.exponential(0.8)])
        path = evolve(tree, panel, [-1.0], Strategy.zero(tree))
        assert investor_pnl(tree, path, Strategy.zero(tree)) == pytest.approx(np.zeros(len(tree.leaves)))

    def test_single_period_unit_position(self):
        strat = Strategy.zero(COIN)
        strat.positions[0, 0] = 1.0
        path = evolve(COIN, ONE_MAKER, [-1.0], strat)
        pnl = investor_pnl(COIN, path, strat)
        lc = math.log(math.cosh(1.0))
        assert sorted(pnl) == pytest.approx([lc - 1.0, lc + 1.0], rel=1e-12)

    def test_liquidated_position_pnl_is_predictable(self):
        tree = counterexample_tree(0.5, 0.6, 0.4, 1.0, 0.0)
        strat = Strategy.zero(tree)
        strat.positions[0, 0] = 3.0
        path = evolve(tree, ONE_MAKER, [-1.0], strat)
        pnl = investor_pnl(tree, path, strat)
        for k, leaf in enumerate(tree.leaves):
            assert pnl[k] == pytest.approx(path.x[tree.parent[leaf]], rel=1e-12)


class TestConjugacy:
    def test_exponential_closed_form(self):
        res = conjugacy_check(COIN, ONE_MAKER, 0, [(np.array([1.0]), 0.0, np.array([0.0]))])
        assert res < 1e-8

    def test_two_maker_numeric_samples(self):
        rng = np.random.default_rng(5)
        panel = MarketMakerPanel.of([UtilitySpec.exponential(1.0), UtilitySpec.exponential(2.0)])
        samples = [(rng.uniform(0.5, 2.0, size=2), float(rng.uniform(-1, 1)),
                    rng.uniform(-1, 1, size=1)) for _ in range(10)]
        res = conjugacy_check(COIN, panel, 0, samples, method="numeric")
        assert res < 1e-6

    def test_degenerate_single_leaf_tree(self):
        tree = ScenarioTree([0, 1], [-1, 0], [1.0, 1.0], [0.0, 2.0])
        res = conjugacy_check(tree, ONE_MAKER, 0, [(np.array([1.0]), 0.3, np.array([0.5]))],
                              method="numeric")
        assert res < 1e-10
