"""Completeness and exact replication in binomial models.

One market maker with exponential utility, one asset, two children per
node.  Such a model is complete exactly when every one-period evolution
tightens the conditional payoff bounds: each node must see a strictly
better conditional infimum or a strictly better conditional supremum than
its parent.

Replication solves, node by node, the one-period ratio equation

    E[e^{a H} | child] / E[e^{a H} | node]
        = E[e^{-a Q psi} | child] / E[e^{-a Q psi} | node]

on the designated "up" child; the equation then holds on the sibling
automatically because both sides average to one.  As Q runs to +-inf the
right side tends to the conditional mass ratios of the extremal payoff
atoms, but in between it need not be monotone and may leave the interval
bounded by those limits, so the solve scans a graded grid for a sign
change and finishes with a bracketed root.

A nonzero initial endowment is folded away by an explicit change of
measure with density proportional to exp(-a Sigma_0), after which the
zero-endowment formulas are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .dynamics import evolve, investor_pnl
from .errors import Infeasible, NotBinomial
from .pareto import _MAX_EXP, MarketMakerPanel, UtilitySpec
from .tree import ScenarioTree, Strategy, extrema_processes

_ENDPOINT_RTOL = 1e-9


@dataclass
class BinomialModel:
    """Binomial tree plus a single exponential market maker."""

    tree: ScenarioTree
    panel: MarketMakerPanel

    def __post_init__(self):
        if self.tree.securities != 1:
            raise NotBinomial("binomial model requires a single asset")
        for n in range(self.tree.n_nodes):
            if self.tree.children[n] and len(self.tree.children[n]) != 2:
                raise NotBinomial(f"node {self.tree.node_ids[n]} has {len(self.tree.children[n])} children")
        if self.panel.n_makers != 1 or not self.panel.makers[0].is_exponential_atom:
            raise NotBinomial("binomial model requires one exponential market maker")
        self._prime = self._tilted_masses()

    @classmethod
    def of(cls, tree, alpha=1.0, endowment_base=0.0, endowment_position=0.0):
        panel = MarketMakerPanel.of([UtilitySpec.exponential(alpha)],
                                    endowment_base=endowment_base,
                                    endowment_position=(endowment_position,))
        return cls(tree, panel)

    @property
    def alpha(self):
        return self.panel.makers[0].rates[0]

    def up_child(self, node):
        """First-listed child; the node where the ratio equation is solved."""
        return self.tree.children[node][0]

    def _tilted_masses(self):
        """Node masses under dP'/dP = e^{-a Sigma_0} / E e^{-a Sigma_0}."""
        tree = self.tree
        sigma0 = self.panel.endowment_on(tree)
        log_w = -self.alpha * sigma0 + np.log(tree.path_prob[tree.leaves])
        log_w -= logsumexp(log_w)
        mass = np.full(tree.n_nodes, -np.inf)
        for n in range(tree.n_nodes):
            r = tree.reachable_leaves(n)
            mass[n] = logsumexp(log_w[r])
        return {"log_leaf": log_w, "log_node": mass}

    def log_cond_prime(self, node, exponents):
        """log E'[exp(e_leaf) | node] under the tilted measure.

        ``exponents`` is a per-leaf vector or a (k, n_leaves) batch.
        """
        r = self.tree.reachable_leaves(node)
        lw = self._prime["log_leaf"][r] - self._prime["log_node"][node]
        exponents = np.asarray(exponents)
        if exponents.ndim == 2:
            return logsumexp(exponents[:, r] + lw[None, :], axis=1)
        return float(logsumexp(exponents[r] + lw))

    def atom_mass_prime(self, node, value):
        """P'[psi = value | node] for a canonical payoff value."""
        tree = self.tree
        r = tree.reachable_leaves(node)
        hit = tree.psi_canonical[tree.leaves[r], 0] == value
        if not np.any(hit):
            return 0.0
        lw = self._prime["log_leaf"][r] - self._prime["log_node"][node]
        return float(np.exp(logsumexp(lw[hit])))


@dataclass
class CompletenessReport:
    complete: bool
    violations: list  # (node_id, reason)
    weak_union_nonempty: dict  # per time t: some node improves a bound

    def to_json(self):
        return {
            "complete": self.complete,
            "violations": [{"node": n, "reason": r} for n, r in self.violations],
            "superreplication_hint": {str(t): bool(v) for t, v in self.weak_union_nonempty.items()},
        }


def completeness_check(model):
    """Nodewise test that each one-period evolution improves a payoff bound.

    A violating node is one where neither the conditional infimum rose nor
    the conditional supremum fell relative to its parent.  The report also
    carries, per period, the weaker flag that at least one node improves a
    bound, which hints at existence of superreplicating strategies even
    when exact completeness fails.
    """
    tree = model.tree
    lo, hi = extrema_processes(tree)
    violations = []
    weak = {t: False for t in range(1, tree.horizon + 1)}
    for n in range(tree.n_nodes):
        p = tree.parent[n]
        if p < 0:
            continue
        improves = lo[n] > lo[p] or hi[n] < hi[p]
        t = int(tree.times[n])
        weak[t] = weak[t] or improves
        if not improves:
            violations.append((tree.node_ids[n], "neither conditional extremum improves"))
    return CompletenessReport(complete=not violations, violations=violations, weak_union_nonempty=weak)


def attainable_ratio_interval(model, node, child=None):
    """Tail limits of the one-period moment ratio at ``node``.

    Returns (P_lower, P_upper): the conditional-mass ratios of the node's
    extremal payoff atoms, reached in the limits of extreme long and short
    positions respectively.  The ratio sweeps everything strictly between
    them; for some payoffs it also exceeds them at finite positions.
    """
    tree = model.tree
    if child is None:
        child = model.up_child(node)
    lo, hi = extrema_processes(tree)
    p_lo_child = model.atom_mass_prime(child, lo[node])
    p_lo_node = model.atom_mass_prime(node, lo[node])
    p_hi_child = model.atom_mass_prime(child, hi[node])
    p_hi_node = model.atom_mass_prime(node, hi[node])
    return p_lo_child / p_lo_node, p_hi_child / p_hi_node


def _graded_grid(cap, points=129):
    """Symmetric grid on [-cap, cap], dense near zero, stretched tails."""
    u = np.linspace(-3.0, 3.0, points)
    return cap * np.tanh(u) / math.tanh(3.0)


def replicate(model, claim):
    """Exact replication price and strategy for a leaf-indexed claim.

    The price is log-moment pricing under the endowment-tilted measure;
    each position solves the one-period ratio equation by a sign-change
    scan refined with a bracketed root.  Raises Infeasible at the first
    node whose target ratio is never crossed (a target within relative
    tolerance 1e-9 of a tail limit counts as infeasible: the sweep onto
    the limits is open).
    """
    tree = model.tree
    alpha = model.alpha
    claim = np.asarray(claim, dtype=float)
    if claim.shape != (len(tree.leaves),):
        raise NotBinomial("claim must be indexed by the tree leaves")
    log_mgf = {n: model.log_cond_prime(n, alpha * claim) for n in range(tree.n_nodes)}
    pi = log_mgf[0] / alpha
    lo_all, hi_all = extrema_processes(tree)
    cap0 = _MAX_EXP / (alpha * max(hi_all[0] - lo_all[0], 1e-12))
    strategy = Strategy.zero(tree)
    psi_leaf = tree.psi[tree.leaves, 0]
    for n in range(tree.n_nodes):
        if not tree.children[n]:
            continue
        up = model.up_child(n)
        target = log_mgf[up] - log_mgf[n]
        p_lo, p_hi = attainable_ratio_interval(model, n, up)
        z = math.exp(target)
        for endpoint in (p_lo, p_hi):
            if abs(z - endpoint) <= _ENDPOINT_RTOL * max(1.0, endpoint):
                raise Infeasible(tree.node_ids[n])

        def g(q):
            e = -alpha * q * psi_leaf
            return model.log_cond_prime(up, e) - model.log_cond_prime(n, e) - target

        bracket = None
        cap = cap0
        for _ in range(3):
            qs = _graded_grid(cap)
            batch = -alpha * np.outer(qs, psi_leaf)
            vals = model.log_cond_prime(up, batch) - model.log_cond_prime(n, batch) - target
            signs = np.sign(vals)
            hits = np.flatnonzero(signs[:-1] * signs[1:] <= 0)
            if hits.size:
                k = hits[0]
                bracket = (qs[k], qs[k + 1])
                break
            cap *= 2.0
        if bracket is None:
            raise Infeasible(tree.node_ids[n])
        strategy.positions[n, 0] = brentq(g, *bracket, xtol=1e-13, maxiter=300)
    return {"pi": float(pi), "Q": strategy}


def replication_verify(model, claim, pi, strategy):
    """Max leafwise error |pi - X_T - Q_T psi - H| of a candidate solution.

    Runs the actual market dynamics under the original measure with the
    model's endowment, starting from the endowment's expected utility.
    """
    tree = model.tree
    claim = np.asarray(claim, dtype=float)
    sigma0 = model.panel.endowment_on(tree)
    log_z0 = float(logsumexp(-model.alpha * sigma0, b=tree.path_prob[tree.leaves]))
    u0 = [-math.exp(log_z0)]
    path = evolve(tree, model.panel, u0, strategy)
    pnl = investor_pnl(tree, path, strategy)
    return float(np.max(np.abs(pi - pnl - claim)))
