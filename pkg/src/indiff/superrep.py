"""Superreplication price search, friction probes and the two-period
non-attainment example.

The superreplication price of a claim H is the least initial capital pi
for which some predictable position process keeps the market makers'
terminal gain below pi - H on every leaf.  The search minimizes

    max over leaves of (X_T + <Q_T, psi> + H)

by coordinate-wise golden-section refinement over per-node positions with
interval shrinking, boundary expansion, and a warm start from the exact
replication solution whenever the binomial module reports completeness.

Exact ties in the line search are broken toward the larger position, and
a tied move of a coordinate's center is only accepted when the tie is
one-sided (the mirrored move strictly worsens the objective).  In models
without efficient friction every sufficiently extreme position becomes
optimal to float precision with the objective still strictly worse on the
inward side, so the optimizer runs away exactly when the infimum is
approached but never attained; flat plateaus of inactive coordinates tie
on both sides and are left alone.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dynamics import evolve, indifference_step, investor_pnl
from .errors import BudgetExceeded, Infeasible, InvalidParams, NonConvergence, NotBinomial
from .tree import Strategy, binomial_tree, extrema_processes

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def max_threads():
    """Parallelism cap from the INDIFF_THREADS environment variable."""
    try:
        return max(1, int(os.environ.get("INDIFF_THREADS", "1")))
    except ValueError:
        return 1


def _pmap(fn, items):
    items = list(items)
    n = max_threads()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class SearchConfig:
    """Knobs of the superreplication search."""

    q_bound: float = 2.0  # initial half-width of every position interval
    refinements: int = 10  # coordinate passes over the tree
    line_evals: int = 24  # objective evaluations per line search
    max_evals: int = 500_000  # grid cap; exceeding it raises BudgetExceeded
    shrink: float = 0.5
    expand: float = 2.0
    edge_frac: float = 0.05  # landing this close to an edge expands the interval
    q_cap: float = 1e6
    divergence_q: float = 1e2  # runaway threshold on the best position
    significant_decrease: float = 1e-4  # relative per-refinement price drop
    not_attained_consecutive: int = 5


@dataclass
class SuperrepResult:
    price_upper: float
    price_curve: list  # (cumulative evaluations, best certified price)
    attained: str  # attained | not-attained-evidence | unknown
    best_strategy: Strategy
    evaluations: int
    max_position: float
    feasible: bool

    def to_json(self):
        return {
            "price_upper": self.price_upper,
            "attained": self.attained,
            "evaluations": self.evaluations,
            "max_position": self.max_position,
            "feasible": self.feasible,
            "price_curve": [[int(n), float(p)] for n, p in self.price_curve],
        }


def _objective(tree, panel, u0, claim):
    """Worst leafwise shortfall of a candidate strategy; inf if the
    dynamics leave the numeric range."""
    counter = {"evals": 0}

    def fn(positions):
        counter["evals"] += 1
        try:
            strat = Strategy(tree, positions)
            path = evolve(tree, panel, u0, strat)
        except NonConvergence:
            return math.inf
        pnl = investor_pnl(tree, path, strat)
        return float(np.max(pnl + claim))

    return fn, counter


def _line_search(f1d, lo, hi, evals):
    """Golden-section minimum with ties broken toward the larger |q|."""
    a, b = lo, hi
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = _pmap(f1d, [x1, x2])
    best_x, best_f = (x1, f1) if (f1 < f2 or (f1 == f2 and abs(x1) > abs(x2))) else (x2, f2)
    for _ in range(max(evals - 2, 0)):
        keep_left = f1 < f2 or (f1 == f2 and abs(x1) > abs(x2))
        if keep_left:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = f1d(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = f1d(x2)
        for x, fx in ((x1, f1), (x2, f2)):
            if fx < best_f or (fx == best_f and abs(x) > abs(best_x)):
                best_x, best_f = x, fx
    return best_x, best_f


def _warm_start(tree, panel, claim):
    from .binomial import BinomialModel, completeness_check, replicate

    try:
        model = BinomialModel(tree, panel)
    except NotBinomial:
        return None
    if not completeness_check(model).complete:
        return None
    try:
        return replicate(model, claim)["Q"].positions
    except Infeasible:
        return None


def superreplication_price(tree, panel, claim, search=None, u_start=None):
    """Certified upper bound on the superreplication price of ``claim``.

    The returned price is attained by ``best_strategy`` (re-verified by a
    fresh simulation).  The price curve is non-increasing in spent budget.
    The attainment verdict is evidence, not proof: "not-attained-evidence"
    is reported when refinements keep lowering the price while the best
    position runs beyond the divergence threshold.
    """
    search = search or SearchConfig()
    claim = np.asarray(claim, dtype=float)
    if claim.shape != (len(tree.leaves),):
        raise InvalidParams("claim must be indexed by the tree leaves")
    u0 = panel.initial_utilities() if u_start is None else np.asarray(u_start, dtype=float)
    coords = [(n, j) for n in range(tree.n_nodes) if tree.children[n] for j in range(tree.securities)]
    planned = search.refinements * len(coords) * search.line_evals + 1
    if planned > search.max_evals:
        raise BudgetExceeded(f"search would need {planned} evaluations, cap is {search.max_evals}")
    fn, counter = _objective(tree, panel, u0, claim)

    positions = np.zeros((tree.n_nodes, tree.securities))
    warm = _warm_start(tree, panel, claim)
    if warm is not None:
        positions = warm.copy()
    widths = {c: float(search.q_bound) for c in coords}
    current = fn(positions)
    best_positions = positions.copy()
    best = current
    curve = [(counter["evals"], best)]
    streak = longest = 0
    for _ in range(search.refinements):
        for n, j in coords:
            center = positions[n, j]
            w = widths[(n, j)]
            lo, hi = center - w, center + w

            def f1d(qv):
                positions[n, j] = qv
                val = fn(positions)
                positions[n, j] = center
                return val

            x_new, f_new = _line_search(f1d, lo, hi, search.line_evals)
            accept = f_new < current
            if not accept and f_new == current and abs(x_new) > abs(center):
                # move on an exact tie only if the plateau is one-sided
                accept = f1d(2.0 * center - x_new) > current
            if accept:
                positions[n, j] = x_new
                current = f_new
                if min(x_new - lo, hi - x_new) < search.edge_frac * (hi - lo):
                    widths[(n, j)] = min(w * search.expand, search.q_cap)
                else:
                    widths[(n, j)] = max(w * search.shrink, 1e-9)
            else:
                widths[(n, j)] = max(w * search.shrink, 1e-9)
        prev = best
        # current never increases, so the latest positions always certify it
        best = current
        best_positions = positions.copy()
        curve.append((counter["evals"], best))
        if prev - best > search.significant_decrease * max(abs(prev), 1e-300):
            streak += 1
            longest = max(longest, streak)
        else:
            streak = 0

    best_strategy = Strategy(tree, best_positions.copy())
    verify_path = evolve(tree, panel, u0, best_strategy)
    verify = float(np.max(investor_pnl(tree, verify_path, best_strategy) + claim))
    feasible = verify <= best + 1e-9
    max_pos = float(np.max(np.abs(best_positions[[n for n, _ in coords]])) if coords else 0.0)

    diverged = max_pos > search.divergence_q
    if diverged and longest >= search.not_attained_consecutive:
        attained = "not-attained-evidence"
    elif not diverged and feasible and streak == 0:
        attained = "attained"
    else:
        attained = "unknown"
    return SuperrepResult(price_upper=best, price_curve=curve, attained=attained,
                          best_strategy=best_strategy, evaluations=counter["evals"],
                          max_position=max_pos, feasible=feasible)


def efficient_friction_probe(tree, panel, t, u_levels, scale_schedule, direction=None,
                             growth_margin=10.0):
    """Losses from ever larger positions at period t, liquidated afterwards.

    For each scale the position scale * direction is taken at every node
    at t-1 and nothing is held later; the system restarts at ``u_levels``
    on those nodes.  Efficient friction predicts the per-leaf losses
    X_T + <Q_T, psi> to blow up somewhere; the report flags leaves whose
    losses keep growing through the top of the schedule.
    """
    if not 1 <= t <= tree.horizon:
        raise InvalidParams(f"period t must lie in 1..{tree.horizon}")
    u_levels = np.asarray(u_levels, dtype=float)
    scale_schedule = [float(s) for s in scale_schedule]
    start_nodes = list(tree.nodes_at(t - 1))
    J = tree.securities
    if direction is None:
        direction = {n: np.ones(J) for n in start_nodes}
    elif not isinstance(direction, dict):
        direction = {n: np.atleast_1d(np.asarray(direction, dtype=float)) for n in start_nodes}
    losses = np.full((len(scale_schedule), len(tree.leaves)), np.nan)
    failed = []
    for k, scale in enumerate(scale_schedule):
        strat = Strategy.zero(tree)
        try:
            for n in start_nodes:
                strat.positions[n] = scale * direction[n]
                path = evolve(tree, panel, u_levels, strat, start_node=n)
                for leaf_idx in tree.reachable_leaves(n):
                    leaf = tree.leaves[leaf_idx]
                    parent = tree.parent[leaf]
                    losses[k, leaf_idx] = path.x[parent] + float(strat.positions[parent] @ tree.psi[leaf])
        except NonConvergence:
            failed.append(scale)
            losses[k] = np.nan
    ok_rows = [k for k in range(len(scale_schedule)) if not np.any(np.isnan(losses[k]))]
    per_leaf = []
    for i in range(len(tree.leaves)):
        seq = losses[ok_rows, i]
        if len(seq) >= 3:
            diverges = bool(seq[-1] - seq[len(seq) // 2] > growth_margin and seq[-1] > seq[-2] > seq[-3])
        else:
            diverges = False
        per_leaf.append(diverges)
    return {
        "t": t,
        "scales": scale_schedule,
        "failed_scales": failed,
        "losses": losses,
        "diverging_leaves": [int(tree.leaves[i]) for i, d in enumerate(per_leaf) if d],
        "efficient_friction_evidence": bool(any(per_leaf)),
    }


def cash_ratio_asymptotics(tree, panel, t, sign, scale_schedule, u_levels=None):
    """Per-node estimates of the cash-per-unit limit for extreme positions.

    As the position at period t grows to +inf the cash balance per unit
    converges to minus the conditional payoff infimum at the t-1 node (the
    supremum for -inf); the report compares the last schedule entry to
    that target.
    """
    if tree.securities != 1:
        raise InvalidParams("cash ratio asymptotics are defined for J = 1")
    if sign not in (+1, -1, +1.0, -1.0):
        raise InvalidParams("sign must be +1 or -1")
    u_levels = panel.initial_utilities() if u_levels is None else np.asarray(u_levels, dtype=float)
    lo, hi = extrema_processes(tree)
    out = {}
    worst = 0.0
    for n in tree.nodes_at(t - 1):
        if not tree.children[n]:
            continue
        ratios = []
        for scale in scale_schedule:
            q = float(sign) * float(scale)
            step = indifference_step(tree, panel, n, u_levels, [q])
            ratios.append((scale, step.x / q))
        target = -lo[n] if sign > 0 else -hi[n]
        est = ratios[-1][1]
        out[tree.node_ids[n]] = {
            "ratios": ratios,
            "limit_estimate": est,
            "target": target,
            "error": abs(est - target),
        }
        worst = max(worst, abs(est - target))
    return {"t": t, "sign": int(sign), "per_node": out, "max_error": worst}


def counterexample_tree(p1, p2, p3, psi_u, psi_d):
    """Two-period binomial tree whose payoff depends on the second move only."""
    def up_prob(prefix):
        if not prefix:
            return p1
        return p2 if prefix[0] == +1 else p3

    return binomial_tree(2, up_prob, lambda path: psi_u if path[1] == +1 else psi_d)


def counterexample_run(p1, p2, p3, alpha, psi_u, psi_d, q_schedule=None, search=None):
    """Two-period, one-maker model where the superreplication price of the
    claim -X_2 is zero but no strategy attains it.

    Reports the mixture weight B, the per-node utility and cash limits for
    runaway first-period positions, the sign-definite sensitivity of the
    time-1 utility to that position, and the price search for the claim.
    """
    from .pareto import MarketMakerPanel, UtilitySpec

    for name, p in (("p1", p1), ("p2", p2), ("p3", p3)):
        if not 0.0 < p < 1.0:
            raise InvalidParams(f"{name} must lie in (0, 1)")
    if p2 == p3:
        raise InvalidParams("p2 and p3 must differ")
    if not psi_u > psi_d:
        raise InvalidParams("psi_u must exceed psi_d")
    if alpha <= 0:
        raise InvalidParams("alpha must be positive")
    if q_schedule is None:
        q_schedule = (1.0, 10.0, 100.0, 1000.0)
    q_schedule = [float(q) for q in q_schedule]
    tree = counterexample_tree(p1, p2, p3, psi_u, psi_d)
    panel = MarketMakerPanel.of([UtilitySpec.exponential(alpha)])
    up, down = tree.children[0]
    B = p1 * p2 + (1 - p1) * p3
    limits = {}
    for label, node, A in (("up", up, p2), ("down", down, p3)):
        limits[label] = {
            "node": tree.node_ids[node],
            "A": A,
            "u1_limit": -(1 - A) / (1 - B),
            "x2_limit": math.log((1 - B) / (1 - A)) / alpha,
        }

    def u1_at(q):
        strat = Strategy.zero(tree)
        strat.positions[0, 0] = q
        path = evolve(tree, panel, [-1.0], strat)
        return path.u[up, 0], path.u[down, 0], path

    trace = []
    for q in q_schedule:
        uu, ud, path = u1_at(q)
        trace.append({"q1": q, "u1_up": uu, "u1_down": ud,
                      "x2_up": path.x[up], "x2_down": path.x[down]})
    # sensitivity of the time-1 utilities to the first-period position
    h = 1e-5
    deriv_up, deriv_down = [], []
    for q in np.linspace(0.0, 5.0, 20):
        up_p, dn_p, _ = u1_at(q + h)
        up_m, dn_m, _ = u1_at(q - h)
        deriv_up.append((up_p - up_m) / (2 * h))
        deriv_down.append((dn_p - dn_m) / (2 * h))
    claim = np.empty(len(tree.leaves))
    for k, leaf in enumerate(tree.leaves):
        side = "up" if tree.parent[leaf] == up else "down"
        claim[k] = -limits[side]["x2_limit"]
    if search is None:
        search = SearchConfig(refinements=12)
    sweep = superreplication_price(tree, panel, claim, search=search, u_start=[-1.0])
    engine = trace[-1]
    return {
        "params": {"p1": p1, "p2": p2, "p3": p3, "alpha": alpha, "psi_u": psi_u, "psi_d": psi_d},
        "B": B,
        "limits": limits,
        "trace": trace,
        "engine_at_max_q": {
            "q1": q_schedule[-1],
            "u1_up": engine["u1_up"], "u1_down": engine["u1_down"],
            "x2_up": engine["x2_up"], "x2_down": engine["x2_down"],
        },
        "u1_derivative_sign": {
            "up": "increasing" if all(d > 0 for d in deriv_up) else
                  "decreasing" if all(d < 0 for d in deriv_up) else "mixed",
            "down": "increasing" if all(d > 0 for d in deriv_down) else
                    "decreasing" if all(d < 0 for d in deriv_down) else "mixed",
        },
        "superreplication": sweep,
        "price_attained": sweep.attained != "not-attained-evidence",
        "conclusion": ("superreplication price approaches zero but no finite strategy attains it"
                       if sweep.attained == "not-attained-evidence"
                       else "search did not certify non-attainment"),
    }
