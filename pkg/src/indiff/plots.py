"""Figure rendering for the CLI report path.

Each helper takes already-computed report data and writes one PNG next to
the delimited output.  Rendering is headless and carries fixed metadata.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_META = {"Software": "indiff"}


def _save(fig, path):
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
    return str(path)


def price_curve_figure(curve, path):
    budgets = [n for n, _ in curve]
    prices = [p for _, p in curve]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(budgets, prices, marker="o", lw=1.2)
    if min(prices) > 0:
        ax.set_yscale("log")
    ax.set_xlabel("objective evaluations")
    ax.set_ylabel("best certified price")
    ax.set_title("superreplication price refinement")
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def utility_vs_position_figure(trace, limits, path):
    qs = [row["q1"] for row in trace]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(qs, [row["u1_up"] for row in trace], marker="o", label="up node")
    ax.plot(qs, [row["u1_down"] for row in trace], marker="s", label="down node")
    ax.axhline(limits["up"]["u1_limit"], ls="--", c="C0", alpha=0.6)
    ax.axhline(limits["down"]["u1_limit"], ls="--", c="C1", alpha=0.6)
    ax.set_xscale("log")
    ax.set_xlabel("first-period position")
    ax.set_ylabel("time-1 utility")
    ax.set_title("utility levels vs position")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def friction_losses_figure(report, tree, path):
    losses = np.asarray(report["losses"], dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, leaf in enumerate(tree.leaves):
        ax.plot(report["scales"], losses[:, i], marker="o", label=f"leaf {tree.node_ids[int(leaf)]}")
    ax.set_xscale("log")
    ax.set_xlabel("position scale")
    ax.set_ylabel("terminal loss")
    ax.set_title("losses under growing positions")
    if len(tree.leaves) <= 10:
        ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def ratio_traces_figure(traces, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ray in traces:
        ax.plot([q for q, _ in ray], [max(r, 1e-300) for _, r in ray], marker="o", label=label)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("|q|")
    ax.set_ylabel("moment ratio")
    ax.set_title("exponential moment ratios")
    if len(traces) <= 12:
        ax.legend(fontsize=7)
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def levy_exponent_figure(report, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for sample in report["samples"]:
        qs = [q for q, _, _ in sample["trace"]]
        ax.plot(qs, [e for _, e, _ in sample["trace"]], marker="o",
                label=f"d={sample['increment']:+.3g}, +ray")
        ax.plot(qs, [e for _, _, e in sample["trace"]], marker="s", ls="--",
                label=f"d={sample['increment']:+.3g}, -ray")
    ax.set_xscale("log")
    ax.set_xlabel("|q|")
    ax.set_ylabel("log moment ratio")
    ax.set_title("one-step ratio exponents")
    if len(report["samples"]) <= 5:
        ax.legend(fontsize=7)
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def bns_bracket_figure(report, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for sample in report["samples"]:
        qs = [q for q, _, _ in sample["trace"]]
        ax.plot(qs, [b for _, b, _ in sample["trace"]], marker="o")
        ax.plot(qs, [b for _, _, b in sample["trace"]], marker="s", ls="--")
    ax.set_xscale("log")
    ax.set_yscale("symlog")
    ax.set_xlabel("|q|")
    ax.set_ylabel("log Laplace ratio bound")
    ax.set_title("volatility-model decay brackets")
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def system_path_figure(tree, path_obj, path):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    M = path_obj.u.shape[1]
    for leaf in tree.leaves:
        chain = []
        n = int(leaf)
        while n >= 0:
            chain.append(n)
            n = tree.parent[n]
        chain.reverse()
        for m in range(M):
            axes[0].plot(tree.times[chain], path_obj.u[chain, m], alpha=0.6, lw=1.0)
    axes[0].set_xlabel("time")
    axes[0].set_ylabel("utility level")
    axes[0].set_title("utility paths")
    axes[0].grid(True, alpha=0.3)
    steps = [n for n in range(tree.n_nodes) if not np.isnan(path_obj.x[n])]
    axes[1].bar(range(len(steps)), path_obj.x[steps],
                tick_label=[str(tree.node_ids[n]) for n in steps])
    axes[1].set_xlabel("node of the step")
    axes[1].set_ylabel("cash balance")
    axes[1].set_title("per-step cash balances")
    axes[1].grid(True, alpha=0.3, axis="y")
    if len(steps) > 12:
        axes[1].set_xticks([])
    fig.tight_layout()
    return _save(fig, path)
