"""Finite filtered probability spaces as scenario trees.

A tree node at time t is an atom of the sigma-field F_t.  Every non-leaf
node carries strictly positive transition probabilities to its children
summing to one, and every leaf sits at the common horizon T and carries a
payoff vector in R^J.  Conditional expectations, conditional essential
extrema and conditional payoff distributions are all finite sums over the
leaves reachable from a node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidParams, MultiAssetUnsupported

_PROB_TOL = 1e-12


def _canonical(x):
    """Round to 12 significant digits so equal payoff atoms merge reliably."""
    x = np.asarray(x, dtype=float)
    out = np.array([float(f"{v:.12g}") for v in x.ravel()])
    return out.reshape(x.shape)


class ScenarioTree:
    """Scenario tree with per-node arrays and precomputed leaf reach sets.

    Nodes are stored in nondecreasing time order, root first.  ``prob`` is
    the transition probability from the parent (1.0 at the root) and
    ``path_prob`` the product along the path from the root.
    """

    def __init__(self, times, parent, prob, psi, node_ids=None):
        self.times = np.asarray(times, dtype=int)
        self.parent = np.asarray(parent, dtype=int)  # -1 at root
        self.prob = np.asarray(prob, dtype=float)
        psi = np.asarray(psi, dtype=float)
        if psi.ndim == 1:
            psi = psi[:, None]
        self.psi = psi  # (n_nodes, J); meaningful at leaves only
        n = len(self.times)
        self.node_ids = list(range(n)) if node_ids is None else list(node_ids)
        self.children = [[] for _ in range(n)]
        for i in range(n):
            if self.parent[i] >= 0:
                self.children[self.parent[i]].append(i)
        self.horizon = int(self.times.max())
        self.securities = self.psi.shape[1]
        self._validate()
        self.path_prob = np.ones(n)
        for i in range(n):
            if self.parent[i] >= 0:
                self.path_prob[i] = self.path_prob[self.parent[i]] * self.prob[i]
        self.leaves = np.array([i for i in range(n) if self.times[i] == self.horizon], dtype=int)
        self.leaf_index = {int(l): k for k, l in enumerate(self.leaves)}
        self.psi_canonical = _canonical(self.psi)
        # reachable leaves per node, as indices into self.leaves
        self._reach = [None] * n
        for k, l in enumerate(self.leaves):
            self._reach[l] = [k]
        for i in range(n - 1, -1, -1):
            if self.children[i]:
                acc = []
                for ch in self.children[i]:
                    acc.extend(self._reach[ch])
                self._reach[i] = acc
        self._reach = [np.array(r, dtype=int) for r in self._reach]
        # conditional leaf weights per node
        leaf_pp = self.path_prob[self.leaves]
        self._leaf_weights = [leaf_pp[r] / self.path_prob[i] for i, r in enumerate(self._reach)]

    def _validate(self):
        n = len(self.times)
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != 1 or roots[0] != 0 or self.times[0] != 0:
            raise InvalidParams("tree must have a single root at time 0, stored first")
        if self.horizon < 1:
            raise InvalidParams("horizon must be >= 1")
        for i in range(n):
            p = self.parent[i]
            if p >= 0:
                if self.times[i] != self.times[p] + 1:
                    raise InvalidParams(f"node {self.node_ids[i]}: time must be parent time + 1")
                if not (self.prob[i] > _PROB_TOL):
                    raise InvalidParams(f"node {self.node_ids[i]}: transition probability must be positive")
        for i in range(n):
            if self.times[i] < self.horizon:
                if not self.children[i]:
                    raise InvalidParams(f"node {self.node_ids[i]}: interior node without children")
                s = sum(self.prob[c] for c in self.children[i])
                if abs(s - 1.0) > 1e-9:
                    raise InvalidParams(f"node {self.node_ids[i]}: child probabilities sum to {s}, not 1")
            elif self.children[i]:
                raise InvalidParams(f"node {self.node_ids[i]}: leaf at horizon has children")

    @property
    def n_nodes(self):
        return len(self.times)

    def nodes_at(self, t):
        return np.flatnonzero(self.times == t)

    def reachable_leaves(self, node):
        """Indices (into ``leaves``) of the leaves reachable from ``node``."""
        return self._reach[node]

    def leaf_weights(self, node):
        """Conditional probabilities of the reachable leaves given ``node``."""
        return self._leaf_weights[node]

    # -- serialization ----------------------------------------------------

    @classmethod
    def from_json(cls, obj):
        try:
            nodes = obj["nodes"]
            horizon = int(obj["horizon"])
            securities = int(obj["securities"])
            payoff = obj["payoff"]
        except (KeyError, TypeError) as exc:
            raise InvalidParams(f"malformed tree object: missing {exc}") from exc
        order = sorted(range(len(nodes)), key=lambda k: (nodes[k]["time"], k))
        ids = [nodes[k]["id"] for k in order]
        pos = {nid: i for i, nid in enumerate(ids)}
        times = [int(nodes[k]["time"]) for k in order]
        parent, prob = [], []
        for k in order:
            nd = nodes[k]
            if nd.get("parent") is None:
                parent.append(-1)
                prob.append(1.0)
            else:
                parent.append(pos[nd["parent"]])
                prob.append(float(nd["prob"]))
        psi = np.zeros((len(ids), securities))
        for nid, vec in payoff.items():
            try:
                key = int(nid)
            except (TypeError, ValueError):
                key = nid
            if key not in pos:
                raise InvalidParams(f"payoff refers to unknown leaf id {nid!r}")
            vec = np.atleast_1d(np.asarray(vec, dtype=float))
            if vec.shape != (securities,):
                raise InvalidParams(f"payoff for leaf {nid!r} must have {securities} components")
            psi[pos[key]] = vec
        tree = cls(times, parent, prob, psi, node_ids=ids)
        if tree.horizon != horizon:
            raise InvalidParams(f"declared horizon {horizon} != leaf depth {tree.horizon}")
        return tree

    def to_json(self):
        nodes = []
        for i in range(self.n_nodes):
            nd = {"id": self.node_ids[i], "time": int(self.times[i])}
            if self.parent[i] < 0:
                nd["parent"] = None
                nd["prob"] = 1.0
            else:
                nd["parent"] = self.node_ids[self.parent[i]]
                nd["prob"] = float(self.prob[i])
            nodes.append(nd)
        payoff = {str(self.node_ids[int(l)]): [float(v) for v in self.psi[int(l)]] for l in self.leaves}
        return {"horizon": self.horizon, "securities": self.securities, "nodes": nodes, "payoff": payoff}

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass
class Strategy:
    """Predictable position process: the J-vector held over the next period.

    ``positions[node]`` is the position acquired at the node's time and held
    until the next one, so it must be set on every non-leaf node.
    """

    tree: ScenarioTree
    positions: np.ndarray = None

    def __post_init__(self):
        J = self.tree.securities
        if self.positions is None:
            self.positions = np.zeros((self.tree.n_nodes, J))
        else:
            self.positions = np.asarray(self.positions, dtype=float)
            if self.positions.ndim == 1:
                self.positions = self.positions[:, None]
            if self.positions.shape != (self.tree.n_nodes, J):
                raise InvalidParams(f"strategy must be ({self.tree.n_nodes}, {J}), got {self.positions.shape}")

    @classmethod
    def zero(cls, tree):
        return cls(tree)

    @classmethod
    def from_dict(cls, tree, mapping):
        s = cls(tree)
        pos = {nid: i for i, nid in enumerate(tree.node_ids)}
        for nid, q in mapping.items():
            try:
                key = int(nid)
            except (TypeError, ValueError):
                key = nid
            s.positions[pos[key]] = np.atleast_1d(np.asarray(q, dtype=float))
        return s

    def copy(self):
        return Strategy(self.tree, self.positions.copy())


@dataclass
class ConditionalDistribution:
    """Finite-support conditional law of the terminal payoff at a node."""

    values: np.ndarray  # (k, J)
    probs: np.ndarray  # (k,)
    node: int | None = None

    @classmethod
    def from_atoms(cls, values, probs, node=None):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        probs = np.asarray(probs, dtype=float)
        if np.any(probs <= 0):
            raise InvalidParams("atom probabilities must be positive")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise InvalidParams("atom probabilities must sum to 1")
        return cls(values, probs, node)

    @property
    def support(self):
        """List of (value, probability); value is a scalar when J == 1."""
        if self.values.shape[1] == 1:
            return [(float(v[0]), float(p)) for v, p in zip(self.values, self.probs)]
        return [(tuple(map(float, v)), float(p)) for v, p in zip(self.values, self.probs)]


def conditional_expectation(tree, node, leaf_values):
    """Probability-weighted average of per-leaf values given ``node``."""
    leaf_values = np.asarray(leaf_values, dtype=float)
    r = tree.reachable_leaves(node)
    return float(np.dot(tree.leaf_weights(node), leaf_values[r]))


def log_conditional_exp(tree, node, exponents):
    """log E[exp(e_leaf) | node] for per-leaf exponents, overflow-free."""
    r = tree.reachable_leaves(node)
    e = np.asarray(exponents, dtype=float)[r]
    return float(logsumexp(e, b=tree.leaf_weights(node)))


def conditional_extrema(tree, node):
    """Min and max of the payoff over the leaves reachable from ``node``.

    On a finite tree these are the conditional essential infimum and
    supremum processes evaluated at the node.
    """
    if tree.securities != 1:
        raise MultiAssetUnsupported("conditional extrema are defined for J = 1 only")
    r = tree.reachable_leaves(node)
    vals = tree.psi_canonical[tree.leaves[r], 0]
    return float(vals.min()), float(vals.max())


def extrema_processes(tree):
    """Per-node arrays (psi_lower, psi_upper) of the conditional extrema."""
    if tree.securities != 1:
        raise MultiAssetUnsupported("conditional extrema are defined for J = 1 only")
    lo = np.empty(tree.n_nodes)
    hi = np.empty(tree.n_nodes)
    for i in range(tree.n_nodes):
        r = tree.reachable_leaves(i)
        vals = tree.psi_canonical[tree.leaves[r], 0]
        lo[i], hi[i] = vals.min(), vals.max()
    return lo, hi


def conditional_distribution(tree, node):
    """Conditional law of the payoff given ``node``, equal atoms merged."""
    r = tree.reachable_leaves(node)
    vals = tree.psi_canonical[tree.leaves[r]]
    w = tree.leaf_weights(node)
    merged = {}
    for v, p in zip(vals, w):
        key = tuple(v)
        merged[key] = merged.get(key, 0.0) + p
    keys = sorted(merged)
    values = np.array(keys, dtype=float)
    probs = np.array([merged[k] for k in keys])
    return ConditionalDistribution(values, probs, node=node)


# -- builders -------------------------------------------------------------


def binomial_tree(horizon, up_prob, payoff):
    """Binomial tree on {-1,+1}^T moves; children stored up first.

    ``up_prob`` is a scalar or a callable on the move prefix (tuple of +-1)
    giving P[next move = +1 | prefix]; ``payoff`` is a callable on the full
    move path returning the scalar terminal payoff.
    """
    times, parent, prob, paths = [0], [-1], [1.0], [()]
    frontier = [0]
    for t in range(horizon):
        nxt = []
        for i in frontier:
            p_up = up_prob(paths[i]) if callable(up_prob) else float(up_prob)
            if not 0.0 < p_up < 1.0:
                raise InvalidParams("up probabilities must lie in (0, 1)")
            for move, pr in ((+1, p_up), (-1, 1.0 - p_up)):
                times.append(t + 1)
                parent.append(i)
                prob.append(pr)
                paths.append(paths[i] + (move,))
                nxt.append(len(times) - 1)
        frontier = nxt
    psi = np.zeros(len(times))
    for i in frontier:
        psi[i] = float(payoff(paths[i]))
    return ScenarioTree(times, parent, prob, psi)


def single_period_tree(values, probs):
    """One-period tree whose payoff has the given atoms."""
    values = np.asarray(values, dtype=float)
    probs = np.asarray(probs, dtype=float)
    n = len(values)
    times = [0] + [1] * n
    parent = [-1] + [0] * n
    prob = [1.0] + list(probs)
    psi = np.concatenate([[0.0], values])
    return ScenarioTree(times, parent, prob, psi)
