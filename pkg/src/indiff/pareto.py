"""Market maker utilities, the representative agent and Pareto allocations.

Every market maker has a strictly concave, strictly increasing utility with
u(x) -> 0 as x -> +inf and absolute risk aversion a(x) = -u''(x)/u'(x)
pinned inside [1/c, c].  The representative agent's utility

    r(v, x) = sup { sum_m v_m u_m(x^m) : sum_m x^m = x }

is solved by parametrizing the first-order conditions with the common
marginal value lam = v_m u_m'(x^m) and inverting each marginal utility,
then closing the budget on lam.  All solves run on log-marginals, so they
stay finite far outside the range where the utilities themselves overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .errors import InvalidParams, NonConvergence, StabilizationMissing
from .tree import conditional_expectation, log_conditional_exp

_MAX_EXP = 700.0  # exp beyond this overflows float64
_SOLVE_RTOL = 1e-13
_MAX_ITER = 200


@dataclass(frozen=True)
class UtilitySpec:
    """One market maker's utility function.

    ``kind`` is "exponential", "mixture" or "custom".  Exponential and
    mixture utilities are stored through their atoms (rate, weight), with
    u(x) = -sum_k w_k exp(-a_k x); a plain exponential is the single atom
    (alpha, 1).  Custom utilities supply u, u' and u'' as callables plus an
    explicit risk-aversion bound and stabilization levels.
    """

    kind: str
    rates: tuple = ()
    weights: tuple = ()
    fn: Callable = None
    dfn: Callable = None
    d2fn: Callable = None
    risk_bound: float = 0.0  # the constant c with 1/c <= a(x) <= c
    stabilization: tuple | None = None  # (a_lower, a_upper)
    domain_bound: float = field(default=0.0)

    @classmethod
    def exponential(cls, alpha):
        if alpha <= 0:
            raise InvalidParams("risk aversion must be positive")
        c = max(alpha, 1.0 / alpha)
        return cls(kind="exponential", rates=(float(alpha),), weights=(1.0,),
                   risk_bound=c, stabilization=(float(alpha), float(alpha)),
                   domain_bound=_MAX_EXP / alpha)

    @classmethod
    def mixture(cls, atoms):
        atoms = [(float(a), float(w)) for a, w in atoms]
        if not atoms or any(a <= 0 or w <= 0 for a, w in atoms):
            raise InvalidParams("mixture atoms need positive rates and weights")
        rates = tuple(a for a, _ in atoms)
        weights = tuple(w for _, w in atoms)
        lo, hi = min(rates), max(rates)
        c = max(hi, 1.0 / lo)
        return cls(kind="mixture", rates=rates, weights=weights,
                   risk_bound=c, stabilization=(lo, hi), domain_bound=_MAX_EXP / hi)

    @classmethod
    def custom(cls, fn, dfn, d2fn, risk_bound, stabilization=None, domain_bound=None):
        if risk_bound <= 0:
            raise InvalidParams("risk bound c must be positive")
        if domain_bound is None:
            domain_bound = _MAX_EXP / risk_bound
        return cls(kind="custom", fn=fn, dfn=dfn, d2fn=d2fn, risk_bound=risk_bound,
                   stabilization=tuple(stabilization) if stabilization else None,
                   domain_bound=float(domain_bound))

    def __post_init__(self):
        if self.stabilization is not None:
            lo, hi = self.stabilization
            if not 0 < lo <= hi:
                raise InvalidParams("stabilization needs 0 < a_lower <= a_upper")

    @property
    def is_exponential_atom(self):
        """True when u(x) = -w exp(-a x), the closed-form family."""
        return self.kind in ("exponential", "mixture") and len(self.rates) == 1

    # -- evaluation (vectorized over x) ------------------------------------

    def u(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "custom":
            return np.vectorize(self.fn, otypes=[float])(x)
        e = -np.multiply.outer(np.asarray(self.rates), x)
        with np.errstate(over="ignore"):
            out = -np.tensordot(np.asarray(self.weights), np.exp(np.minimum(e, _MAX_EXP)), axes=1)
        return out

    def du(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "custom":
            return np.vectorize(self.dfn, otypes=[float])(x)
        return np.exp(self.log_du(x))

    def d2u(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "custom":
            return np.vectorize(self.d2fn, otypes=[float])(x)
        return -self.a(x) * self.du(x)

    def log_du(self, x):
        """log u'(x), finite for every float x in the exponential family."""
        x = np.asarray(x, dtype=float)
        if self.kind == "custom":
            return np.log(np.vectorize(self.dfn, otypes=[float])(x))
        rates = np.asarray(self.rates)
        logs = np.log(np.asarray(self.weights) * rates)
        e = logs[:, None] - np.multiply.outer(rates, np.atleast_1d(x))
        out = logsumexp(e, axis=0)
        return out.reshape(np.shape(x)) if np.shape(x) else float(out[0])

    def a(self, x):
        """Absolute risk aversion -u''/u'."""
        x = np.asarray(x, dtype=float)
        if self.kind == "custom":
            return -np.vectorize(self.d2fn, otypes=[float])(x) / np.vectorize(self.dfn, otypes=[float])(x)
        rates = np.asarray(self.rates)
        w = np.asarray(self.weights)
        e = -np.multiply.outer(rates, np.atleast_1d(x))
        e -= e.max(axis=0, keepdims=True)
        ew = w[:, None] * np.exp(e)
        out = (rates @ (rates[:, None] * ew)) / (rates @ ew)
        return out.reshape(np.shape(x)) if np.shape(x) else float(out[0])

    def inv_marginal(self, y):
        """Solve u'(x) = y for x (vectorized); y must be positive."""
        y = np.asarray(y, dtype=float)
        logy = np.log(y)
        if self.kind in ("exponential", "mixture"):
            rates = np.asarray(self.rates)
            w = np.asarray(self.weights)
            if len(rates) == 1:
                return (math.log(w[0] * rates[0]) - logy) / rates[0]
            # bracket from the two-sided exponential envelope of u'
            logW = math.log(float(w @ rates))
            lo_r, hi_r = rates.min(), rates.max()
            ends = np.stack([(logW - logy) / hi_r, (logW - logy) / lo_r])
            lo, hi = ends.min(axis=0), ends.max(axis=0)
            x = 0.5 * (lo + hi)
            for _ in range(_MAX_ITER):
                g = self.log_du(x) - logy
                lo = np.where(g > 0, x, lo)  # log u' decreasing
                hi = np.where(g > 0, hi, x)
                step = g / self.a(x)
                x_new = x + step
                bad = (x_new <= lo) | (x_new >= hi) | ~np.isfinite(x_new)
                x_new = np.where(bad, 0.5 * (lo + hi), x_new)
                if np.all(np.abs(x_new - x) <= 1e-14 * (1 + np.abs(x_new))):
                    x = x_new
                    break
                x = x_new
            return x
        # custom: expanding bracket then brentq on the log marginal
        def solve_one(ly):
            g = lambda x: math.log(self.dfn(x)) - ly
            lo, hi, w = -1.0, 1.0, 1.0
            for _ in range(_MAX_ITER):
                if g(lo) > 0 and g(hi) < 0:
                    break
                w *= 2.0
                lo, hi = lo - w, hi + w
            else:
                raise NonConvergence("could not bracket inverse marginal utility")
            return brentq(g, lo, hi, xtol=1e-14, rtol=8.9e-16, maxiter=_MAX_ITER)

        return np.vectorize(solve_one, otypes=[float])(logy)


@dataclass(frozen=True)
class MarketMakerPanel:
    """The market makers, their initial wealths and the total endowment.

    The total endowment is  endowment_base + <endowment_position, psi>,
    a bounded part plus a static position in the traded payoffs.
    """

    makers: tuple
    initial_allocation: tuple
    endowment_base: float = 0.0
    endowment_position: tuple = (0.0,)

    @classmethod
    def of(cls, makers, initial_allocation=None, endowment_base=0.0, endowment_position=None):
        makers = tuple(makers)
        if not makers:
            raise InvalidParams("panel needs at least one market maker")
        if initial_allocation is None:
            initial_allocation = (0.0,) * len(makers)
        initial_allocation = tuple(float(x) for x in initial_allocation)
        if len(initial_allocation) != len(makers):
            raise InvalidParams("initial allocation length must match the number of makers")
        if endowment_position is None:
            endowment_position = (0.0,)
        return cls(makers, initial_allocation, float(endowment_base),
                   tuple(float(q) for q in np.atleast_1d(endowment_position)))

    @property
    def n_makers(self):
        return len(self.makers)

    @property
    def risk_bound(self):
        return max(m.risk_bound for m in self.makers)

    @property
    def all_exponential(self):
        return all(m.is_exponential_atom for m in self.makers)

    def endowment_on(self, tree):
        """Per-leaf total initial endowment Sigma_0."""
        q0 = np.zeros(tree.securities)
        q0[: len(self.endowment_position)] = self.endowment_position[: tree.securities]
        return self.endowment_base + tree.psi[tree.leaves] @ q0

    def initial_utilities(self):
        """Starting expected-utility levels, one per maker."""
        return np.array([float(m.u(x)) for m, x in zip(self.makers, self.initial_allocation)])


@dataclass
class ParetoAllocation:
    """Maximizer of the representative agent's utility at (v, x)."""

    shares: np.ndarray
    multiplier: float  # common marginal value, equals d r / d x
    value: float


def _allocate_leaves(makers, v, x):
    """Pareto shares for each total in ``x`` (vectorized over totals).

    Returns (shares with shape (M, n), log_lam with shape (n,)).
    """
    x = np.asarray(x, dtype=float)
    M = len(makers)
    if M == 1:
        return x[None, :].copy(), np.log(v[0]) + makers[0].log_du(x)
    logv = np.log(v)
    if M == 2:
        # one share is free; close the budget exactly by construction
        u1, u2 = makers
        g = lambda s: logv[0] + u1.log_du(s) - logv[1] - u2.log_du(x - s)
        s = x / 2.0
        g0 = g(s)
        # g is decreasing with |g'| >= 1/c1 + 1/c2, bounding the root's distance
        slope_min = 1.0 / u1.risk_bound + 1.0 / u2.risk_bound
        lo = s + np.minimum(g0, 0.0) / slope_min - 1e-9
        hi = s + np.maximum(g0, 0.0) / slope_min + 1e-9
        for _ in range(_MAX_ITER):
            gs = g(s)
            lo = np.where(gs > 0, s, lo)  # g decreasing in s
            hi = np.where(gs > 0, hi, s)
            ds = gs / (u1.a(s) + u2.a(x - s))
            s_new = s + ds
            bad = (s_new <= lo) | (s_new >= hi) | ~np.isfinite(s_new)
            s_new = np.where(bad, 0.5 * (lo + hi), s_new)
            if np.all(np.abs(s_new - s) <= 1e-15 * (1.0 + np.abs(s_new))):
                s = s_new
                break
            s = s_new
        shares = np.stack([s, x - s])
        return shares, logv[0] + u1.log_du(s)
    # general M: bisect the budget residual on log lam leaf by leaf
    shares = np.empty((M, len(x)))
    log_lam = np.empty(len(x))
    for j, xj in enumerate(x):
        def budget(t):
            return sum(m.inv_marginal(math.exp(min(t - lv, _MAX_EXP))) for m, lv in zip(makers, logv)) - xj

        lo, hi, w = -1.0, 1.0, 1.0
        for _ in range(_MAX_ITER):
            if budget(lo) > 0 and budget(hi) < 0:  # decreasing in t
                break
            w *= 2.0
            lo, hi = lo - w, hi + w
        else:
            raise NonConvergence("could not bracket the budget equation")
        t = brentq(budget, lo, hi, xtol=1e-14, rtol=8.9e-16, maxiter=_MAX_ITER)
        sh = np.array([float(m.inv_marginal(math.exp(t - lv))) for m, lv in zip(makers, logv)])
        sh[-1] += xj - sh.sum()  # close the budget exactly
        shares[:, j] = sh
        log_lam[j] = t
    return shares, log_lam


def representative_utility(v, x, panel):
    """Representative agent's value, Pareto shares and marginal value.

    Raises NonConvergence if the budget solve stalls, which signals an
    ill-conditioned utility spec.
    """
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0):
        raise InvalidParams("weights must be strictly positive")
    shares, log_lam = _allocate_leaves(panel.makers, v, np.array([float(x)]))
    shares = shares[:, 0]
    lam = math.exp(log_lam[0])
    budget_err = abs(shares.sum() - x)
    foc_err = max(abs(vm * float(m.du(s)) - lam) for m, vm, s in zip(panel.makers, v, shares))
    if budget_err > 1e-9 * max(1.0, abs(x)) or foc_err > 1e-8 * lam:
        raise NonConvergence("Pareto allocation solve did not meet tolerance")
    value = float(sum(vm * float(m.u(s)) for m, vm, s in zip(panel.makers, v, shares)))
    return ParetoAllocation(shares=shares, multiplier=lam, value=value)


def representative_risk_aversion(v, x, panel):
    """Risk aversion of r(v, .): the harmonic sum of the makers' aversions
    evaluated at their Pareto shares."""
    alloc = representative_utility(v, x, panel)
    inv = sum(1.0 / float(m.a(s)) for m, s in zip(panel.makers, alloc.shares))
    return 1.0 / inv


def initial_weights(panel):
    """Weights v0 with v0_m u_m'(alpha0_m) equal across makers, v0_1 = 1."""
    log_du = np.array([float(m.log_du(a)) for m, a in zip(panel.makers, panel.initial_allocation)])
    return np.exp(log_du[0] - log_du)


def envelope_bounds(spec, grid=None):
    """Sandwich constants against the two-exponential envelope.

    With env(x) = -exp(-a_lower x) - exp(-a_upper x) < 0, returns the
    extremes (C1, C2) of the ratio u/env over the grid, C1 <= C2.  Since
    the envelope is negative the larger constant bounds from below:
    C2 * env(x) <= u(x) <= C1 * env(x) at every grid point, both tight.
    """
    if spec.stabilization is None:
        raise StabilizationMissing("utility spec has no stabilization levels")
    lo, hi = spec.stabilization
    if grid is None:
        grid = np.linspace(-60.0, 60.0, 4801)
    grid = np.asarray(grid, dtype=float)
    if grid.min() > -50.0 or grid.max() < 50.0:
        raise InvalidParams("grid must span at least [-50, 50]")
    log_env = logsumexp(np.stack([-lo * grid, -hi * grid]), axis=0)
    if spec.kind == "custom":
        log_u = np.log(-spec.u(grid))
    else:
        log_u = logsumexp(np.log(spec.weights)[:, None] - np.outer(spec.rates, grid), axis=0)
    ratio = np.exp(log_u - log_env)
    return float(ratio.min()), float(ratio.max())


def conditional_utility_floor(spec, x, sigma, tree, node_t, node_parent):
    """Deterministic lower bound for E[u(x + Sigma) | F_t] built from
    F_{t-1} information and the upper-tail exponential moment ratio.

    The bound is C * f(z) with f(y) = y - (-y)^(a_lower/a_upper),
    z = E[u(x + Sigma) | parent] * E[e^(-a_upper Sigma) | node] /
    E[e^(-a_upper Sigma) | parent], and C derived from the envelope
    constants.  It never exceeds the exact conditional expectation.
    """
    if spec.stabilization is None:
        raise StabilizationMissing("utility spec has no stabilization levels")
    a_lo, a_hi = spec.stabilization
    c1, c2 = envelope_bounds(spec)
    # c2 carries the lower envelope bound, c1 the upper one
    kappa = a_lo / a_hi
    C = max(c2 / c1, c2 / c1**kappa)
    sigma = np.asarray(sigma, dtype=float)
    u_leaf = spec.u(x + sigma)
    y = conditional_expectation(tree, node_parent, u_leaf)
    log_ratio = log_conditional_exp(tree, node_t, -a_hi * sigma) - log_conditional_exp(
        tree, node_parent, -a_hi * sigma
    )
    z = y * math.exp(log_ratio)
    return C * (z - (-z) ** kappa)
