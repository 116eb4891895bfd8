"""Indifference cash balances, Pareto weights and utility evolution.

One trading step works as follows.  Before the step the market makers sit
at conditional expected utilities U (all negative).  The investor asks them
to hold the position Q over the next period.  The makers quote the unique
cash balance X and Pareto weights V such that re-allocating the total
endowment  Sigma_0 + X + <Q, psi>  with weights V leaves every maker's
conditional expected utility unchanged.  After the step each maker's
utility is the conditional expectation of its allocated utility given the
finer information.

For panels of scaled exponential utilities the step is closed form: with
S = sum_m 1/a_m the utilities update by the ratio of conditional
exponential moments at rate 1/S and

    X = sum_m (log(w_m) - log(-U_m)) / a_m + S log E[exp(-(Sigma_0+<Q,psi>)/S) | F].

For mixtures the pair (V, X) solves an M-dimensional system: a damped
Newton iteration on (log v_2..log v_M, X) with an analytic Jacobian, a
hybrid-root fallback, and for two makers a nested bisection as a final
resort.

Weights are stored in the canonical scale with E[marginal value | F] = 1,
under which  1/c <= -U_m V_m <= c  holds at every node for the panel's
risk-aversion bound c.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, root
from scipy.special import logsumexp

from .errors import InvalidParams, NonConvergence
from .pareto import _MAX_EXP, _allocate_leaves
from .tree import ScenarioTree

_NEWTON_RTOL = 1e-12
_NEWTON_ITER = 200


@dataclass
class StepResult:
    """Outcome of one indifference step at a node."""

    x: float  # cash balance for the coming period
    v: np.ndarray  # canonical Pareto weights for the coming period
    children: np.ndarray  # child node indices
    u_children: np.ndarray  # (n_children, M) utilities after the step


@dataclass
class SystemPath:
    """Per-node system state produced by ``evolve``.

    ``u[n]`` is the utility vector at node n.  ``x[n]``, ``v[n]`` and
    ``q[n]`` describe the step leaving node n (predictable quantities are
    stored on the node where they become known).  Entries are NaN outside
    the evolved subtree and at leaves for the step quantities.
    """

    tree: ScenarioTree
    u: np.ndarray
    x: np.ndarray
    v: np.ndarray
    q: np.ndarray
    start_node: int = 0

    def martingale_residual(self):
        """max over evolved non-leaf nodes of |U_n - E[U_child | n]|_inf."""
        worst = 0.0
        for n in range(self.tree.n_nodes):
            if not self.tree.children[n] or np.any(np.isnan(self.u[n])):
                continue
            exp_next = np.zeros_like(self.u[n])
            for ch in self.tree.children[n]:
                exp_next += self.tree.prob[ch] * self.u[ch]
            worst = max(worst, float(np.max(np.abs(exp_next - self.u[n]))))
        return worst

    def weight_band_range(self, panel):
        """Extremes of -U_m V_m over all evolved steps (should sit in [1/c, c])."""
        lo, hi = np.inf, -np.inf
        for n in range(self.tree.n_nodes):
            if not self.tree.children[n] or np.any(np.isnan(self.v[n])):
                continue
            band = -self.u[n] * self.v[n]
            lo = min(lo, float(band.min()))
            hi = max(hi, float(band.max()))
        return lo, hi

    def to_csv(self, fh):
        M = self.u.shape[1]
        J = self.q.shape[1]
        cols = (["node_id", "time"] + [f"U^{m+1}" for m in range(M)]
                + [f"V^{m+1}" for m in range(M)] + ["X"] + [f"Q^{j+1}" for j in range(J)])
        fh.write(",".join(cols) + "\n")
        for n in range(self.tree.n_nodes):
            if np.all(np.isnan(self.u[n])):
                continue
            parent = self.tree.parent[n]
            if parent >= 0 and not np.any(np.isnan(self.u[self.tree.parent[n]])):
                v_in, x_in, q_in = self.v[parent], self.x[parent], self.q[parent]
            else:
                v_in, x_in, q_in = [np.nan] * M, np.nan, [np.nan] * J
            row = [str(self.tree.node_ids[n]), str(int(self.tree.times[n]))]
            row += [f"{u:.15g}" for u in self.u[n]]
            row += ["" if np.isnan(v) else f"{v:.15g}" for v in np.atleast_1d(v_in)]
            row += ["" if np.isnan(x_in) else f"{x_in:.15g}"]
            row += ["" if np.isnan(qq) else f"{qq:.15g}" for qq in np.atleast_1d(q_in)]
            fh.write(",".join(row) + "\n")


def _check_u(u, M):
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape != (M,) or np.any(u >= 0) or not np.all(np.isfinite(u)):
        raise InvalidParams("utility levels must be finite and strictly negative")
    return u


def _sigma_exponents(tree, panel, node, q_next):
    """Per-leaf total endowment Sigma_0 + <Q, psi> (position part only)."""
    q_next = np.atleast_1d(np.asarray(q_next, dtype=float))
    if q_next.shape != (tree.securities,):
        raise InvalidParams(f"position must have {tree.securities} components")
    sigma0 = panel.endowment_on(tree)
    return sigma0 + tree.psi[tree.leaves] @ q_next


def _step_exponential(tree, panel, node, u_prev, q_next):
    """Closed-form step for panels of scaled exponential utilities."""
    rates = np.array([m.rates[0] for m in panel.makers])
    lw = np.array([math.log(m.weights[0]) for m in panel.makers])
    S = float(np.sum(1.0 / rates))
    base = _sigma_exponents(tree, panel, node, q_next)  # Sigma_0 + Q psi per leaf
    exps = -base / S
    log_e_node = _log_cond(tree, node, exps)
    x = float(np.sum((lw - np.log(-u_prev)) / rates)) + S * log_e_node
    children = np.array(tree.children[node], dtype=int)
    u_ch = np.empty((len(children), len(rates)))
    for k, ch in enumerate(children):
        u_ch[k] = u_prev * math.exp(_log_cond(tree, ch, exps) - log_e_node)
    v = 1.0 / (rates * (-u_prev))  # canonical scale: E[lam | node] = 1
    return StepResult(x=x, v=v, children=children, u_children=u_ch)


def _log_cond(tree, node, exponents):
    r = tree.reachable_leaves(node)
    return float(logsumexp(exponents[r], b=tree.leaf_weights(node)))


class _GenericStep:
    """Newton solve of the indifference system in (log v_2.., X)."""

    def __init__(self, tree, panel, node, u_prev, q_next):
        self.tree = tree
        self.panel = panel
        self.node = node
        self.u_prev = u_prev
        self.makers = panel.makers
        self.M = len(self.makers)
        base = _sigma_exponents(tree, panel, node, q_next)
        self.reach = tree.reachable_leaves(node)
        self.base = base[self.reach]
        self.weights = tree.leaf_weights(node)
        self.a_hi = max(m.risk_bound for m in self.makers)
        self.children = np.array(tree.children[node], dtype=int)
        # per-child masks into self.reach
        self.child_rows = []
        pos = {int(l): i for i, l in enumerate(self.reach)}
        for ch in self.children:
            rows = np.array([pos[int(l)] for l in tree.reachable_leaves(ch)], dtype=int)
            self.child_rows.append(rows)

    def residual(self, theta, need_jac=False):
        v = np.concatenate([[1.0], np.exp(theta[:-1])])
        x = theta[-1]
        totals = self.base + x
        if np.max(np.abs(totals)) * self.a_hi > _MAX_EXP:
            return None
        shares, log_lam = _allocate_leaves(self.makers, v, totals)
        u_vals = np.stack([m.u(shares[i]) for i, m in enumerate(self.makers)])  # (M, n)
        if not np.all(np.isfinite(u_vals)):
            return None
        R = u_vals @ self.weights - self.u_prev
        out = {"R": R, "shares": shares, "log_lam": log_lam, "u_vals": u_vals, "v": v, "x": x}
        if need_jac:
            a_vals = np.stack([m.a(shares[i]) for i, m in enumerate(self.makers)])  # (M, n)
            inv_a = 1.0 / a_vals
            S_a = inv_a.sum(axis=0)
            w_frac = inv_a / S_a  # (M, n)
            du = np.exp(log_lam)[None, :] / v[:, None]  # u'_m at shares
            J = np.empty((self.M, self.M))
            for j in range(1, self.M):
                delta = np.zeros((self.M, 1))
                delta[j, 0] = 1.0
                dphi = du * (delta - w_frac[j][None, :]) * inv_a
                J[:, j - 1] = dphi @ self.weights
            J[:, -1] = (du * w_frac) @ self.weights
            out["J"] = J
        return out

    def initial_guess(self):
        # exponential proxy at reference allocations: assumes each maker's
        # local risk aversion is representative
        a_ref = np.array([float(m.a(0.0)) for m in self.makers])
        v0 = (a_ref[0] * (-self.u_prev[0])) / (a_ref * (-self.u_prev))
        S = float(np.sum(1.0 / a_ref))
        log_e = float(logsumexp(-self.base / S, b=self.weights))
        x0 = float(np.sum(-np.log(-self.u_prev) / a_ref)) + S * log_e
        return np.concatenate([np.log(v0[1:]), [x0]])

    def solve(self):
        scale = np.maximum(np.abs(self.u_prev), 1e-300)
        theta = self.initial_guess()
        res = self.residual(theta, need_jac=True)
        if res is None:
            raise NonConvergence("indifference step out of numeric range", node=self.node)
        best = res
        for _ in range(_NEWTON_ITER):
            err = np.max(np.abs(best["R"]) / scale)
            if err <= _NEWTON_RTOL:
                return self._finish(best)
            try:
                step = np.linalg.solve(best["J"], -best["R"])
            except np.linalg.LinAlgError:
                break
            stepped = False
            damp = 1.0
            for _ in range(40):
                cand = self.residual(theta + damp * step, need_jac=True)
                if cand is not None and np.max(np.abs(cand["R"]) / scale) < err:
                    theta = theta + damp * step
                    best = cand
                    stepped = True
                    break
                damp *= 0.5
            if not stepped:
                break
        return self._fallback(theta, scale)

    def _fallback(self, theta, scale):
        def fun(th):
            res = self.residual(th)
            if res is None:
                return np.full(self.M, 1e6)
            return res["R"] / scale

        sol = root(fun, theta, method="hybr", options={"xtol": 1e-13, "maxfev": 4000})
        res = self.residual(sol.x)
        if res is not None and np.max(np.abs(res["R"]) / scale) <= 1e-9:
            return self._finish(self.residual(sol.x, need_jac=False))
        if self.M == 2:
            out = self._nested_bisection(scale)
            if out is not None:
                return out
        raise NonConvergence("indifference step did not converge", node=self.node)

    def _nested_bisection(self, scale):
        # outer root on X for maker 1, inner root on log v_2 for maker 2
        def inner(x):
            def g(lv):
                res = self.residual(np.array([lv, x]))
                return np.inf if res is None else res["R"][1]

            lo, hi, w = -1.0, 1.0, 1.0
            for _ in range(60):
                glo, ghi = g(lo), g(hi)
                if np.isfinite(glo) and np.isfinite(ghi) and glo * ghi < 0:
                    return brentq(g, lo, hi, xtol=1e-14)
                w *= 2.0
                lo, hi = lo - w, hi + w
            return None

        def outer(x):
            lv = inner(x)
            if lv is None:
                return np.inf, None
            res = self.residual(np.array([lv, x]))
            return (np.inf, None) if res is None else (res["R"][0], lv)

        lo, hi, w = -1.0, 1.0, 1.0
        for _ in range(60):
            flo, _ = outer(lo)
            fhi, _ = outer(hi)
            if np.isfinite(flo) and np.isfinite(fhi) and flo * fhi < 0:
                break
            w *= 2.0
            lo, hi = lo - w, hi + w
        else:
            return None
        x = brentq(lambda xx: outer(xx)[0], lo, hi, xtol=1e-14)
        _, lv = outer(x)
        res = self.residual(np.array([lv, x]))
        if res is None or np.max(np.abs(res["R"]) / scale) > 1e-9:
            return None
        return self._finish(res)

    def _finish(self, res):
        lam = np.exp(res["log_lam"])
        mean_lam = float(lam @ self.weights)
        v_canonical = res["v"] / mean_lam
        u_ch = np.empty((len(self.children), self.M))
        for k, rows in enumerate(self.child_rows):
            w = self.weights[rows]
            w = w / w.sum()
            u_ch[k] = res["u_vals"][:, rows] @ w
        return StepResult(x=float(res["x"]), v=v_canonical, children=self.children, u_children=u_ch)


def indifference_step(tree, panel, node, u_prev, q_next, method="auto"):
    """Cash balance, weights and updated utilities for one trading step.

    Solves the utility-indifference conditions at ``node`` for the position
    ``q_next`` held over the coming period, starting from utility levels
    ``u_prev``.  ``method`` forces the "closed_form" exponential path or
    the "generic" solver; "auto" picks the closed form when available.
    """
    u_prev = _check_u(u_prev, panel.n_makers)
    if not tree.children[node]:
        raise InvalidParams("indifference step needs a non-leaf node")
    if method not in ("auto", "closed_form", "generic"):
        raise InvalidParams(f"unknown method {method!r}")
    if method == "closed_form" and not panel.all_exponential:
        raise InvalidParams("closed form requires exponential makers")
    if method in ("auto", "closed_form") and panel.all_exponential:
        return _step_exponential(tree, panel, node, u_prev, q_next)
    return _GenericStep(tree, panel, node, u_prev, q_next).solve()


def evolve(tree, panel, u_start, strategy, start_node=0, method="auto"):
    """Run the indifference dynamics from ``start_node`` to the horizon.

    The strategy must be defined on every non-leaf node of the subtree.
    Raises NonConvergence tagged with the node where a step failed.
    """
    u_start = _check_u(u_start, panel.n_makers)
    M = panel.n_makers
    J = tree.securities
    u = np.full((tree.n_nodes, M), np.nan)
    x = np.full(tree.n_nodes, np.nan)
    v = np.full((tree.n_nodes, M), np.nan)
    q = np.full((tree.n_nodes, J), np.nan)
    u[start_node] = u_start
    frontier = [start_node]
    while frontier:
        nxt = []
        for n in frontier:
            if not tree.children[n]:
                continue
            qn = strategy.positions[n]
            step = indifference_step(tree, panel, n, u[n], qn, method=method)
            x[n] = step.x
            v[n] = step.v
            q[n] = qn
            for ch, uch in zip(step.children, step.u_children):
                u[ch] = uch
                nxt.append(int(ch))
        frontier = nxt
    return SystemPath(tree=tree, u=u, x=x, v=v, q=q, start_node=start_node)


def investor_pnl(tree, path, strategy):
    """Market makers' terminal gain X_T + <Q_T, psi> per leaf.

    This is the investor's loss; superreplication of a claim H with capital
    pi requires it to stay below pi - H on every leaf.
    """
    out = np.empty(len(tree.leaves))
    for k, leaf in enumerate(tree.leaves):
        parent = tree.parent[leaf]
        out[k] = path.x[parent] + float(strategy.positions[parent] @ tree.psi[leaf])
    return out


# -- conjugacy ------------------------------------------------------------


def _repr_value_expect(tree, panel, node, v, x, q_vec):
    """E[r(v, Sigma(x, q)) | node] plus the gradient pieces in (v, x)."""
    base = _sigma_exponents(tree, panel, node, q_vec)
    reach = tree.reachable_leaves(node)
    w = tree.leaf_weights(node)
    totals = base[reach] + x
    shares, log_lam = _allocate_leaves(panel.makers, np.asarray(v, dtype=float), totals)
    u_vals = np.stack([m.u(shares[i]) for i, m in enumerate(panel.makers)])
    F = float(np.asarray(v) @ (u_vals @ w))
    du_v = u_vals @ w  # dF/dv_m = E[u_m(share_m)]
    du_x = float(np.exp(log_lam) @ w)  # dF/dx = E[lam]
    return F, du_v, du_x


def _conjugate_closed_form(panel, tree, node, u, y, q_vec):
    rates = np.array([m.rates[0] for m in panel.makers])
    lw = np.array([math.log(m.weights[0]) for m in panel.makers])
    S = float(np.sum(1.0 / rates))
    base = _sigma_exponents(tree, panel, node, q_vec)
    log_e = _log_cond(tree, node, -base / S)
    return y * (S * log_e + float(np.sum((lw - np.log(-np.asarray(u))) / rates)))


def _conjugate_numeric(panel, tree, node, u, y, q_vec):
    """G(u, y, q) = sup_v inf_x { <u,v> + x y - F(v, x, q) } by nested solves.

    The inner infimum is a bracketed root of E[marginal value] = y; the
    outer supremum solves its first-order system (envelope theorem) in the
    log weights.
    """
    u = np.asarray(u, dtype=float)
    M = len(u)
    state = {"x": 0.0}

    def inner_x(v):
        def g(x):
            return _repr_value_expect(tree, panel, node, v, x, q_vec)[2] - y

        lo, hi, w = state["x"] - 1.0, state["x"] + 1.0, 1.0
        for _ in range(80):
            if g(lo) > 0 and g(hi) < 0:  # E[lam] decreasing in x
                break
            w *= 2.0
            lo, hi = lo - w, hi + w
        else:
            raise NonConvergence("conjugate inner solve failed to bracket")
        state["x"] = brentq(g, lo, hi, xtol=1e-11)
        return state["x"]

    def grad(log_v):
        v = np.exp(log_v)
        xs = inner_x(v)
        _, du_v, _ = _repr_value_expect(tree, panel, node, v, xs, q_vec)
        return du_v - u  # stationarity of <u,v> - F in v at the optimum

    sol = root(grad, np.zeros(M), method="hybr", options={"xtol": 1e-13})
    if not np.all(np.isfinite(sol.x)):
        raise NonConvergence("conjugate outer solve failed")
    v = np.exp(sol.x)
    xs = inner_x(v)
    F = _repr_value_expect(tree, panel, node, v, xs, q_vec)[0]
    return float(u @ v) + xs * y - F


def conjugacy_check(tree, panel, node, samples, method="auto"):
    """Worst relative Fenchel residual of the value-function pair.

    For each sample (v, x, q) the gradient point (u*, y*) of the expected
    representative utility is computed and the conjugate transform is
    evaluated there independently; conjugacy demands
    F(v,x,q) + G(u*,y*,q) = <u*, v> + x y*.
    """
    worst = 0.0
    for v, x, q_vec in samples:
        v = np.asarray(v, dtype=float)
        F, u_star, y_star = _repr_value_expect(tree, panel, node, v, x, q_vec)
        if method == "closed_form" or (method == "auto" and panel.all_exponential):
            G = _conjugate_closed_form(panel, tree, node, u_star, y_star, q_vec)
        else:
            G = _conjugate_numeric(panel, tree, node, u_star, y_star, q_vec)
        fenchel = float(u_star @ v) + x * y_star - F
        worst = max(worst, abs(G - fenchel) / max(1.0, abs(F)))
    return worst
