"""Command-line front end.

Subcommands cover simulation, superreplication search, binomial
completeness and replication, the two-period non-attainment example,
friction probes and the tail checks.  Each run prints a JSON summary to
stdout; with --out it also writes the summary, CSV tables and rendered
figures into the output directory.  Exit codes: 0 success, 2 model
infeasibility, 1 configuration or numeric errors.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as iomod
from . import plots
from .binomial import completeness_check, replicate, replication_verify
from .dynamics import evolve, investor_pnl
from .errors import ConfigError, Infeasible, IndiffError
from .superrep import (SearchConfig, counterexample_run, efficient_friction_probe,
                       superreplication_price)
from .tails import (bns_laplace, bns_sample_paths, bns_tails_check,
                    decreasing_tails_check, levy_tails_check, tail_dominance)
from .tree import conditional_distribution


@dataclass
class RunConfig:
    """Parsed invocation: subcommand, input paths and knobs."""

    command: str
    tree: str | None = None
    panel: str | None = None
    claim: str | None = None
    model: str | None = None
    strategy: str | None = None
    triplet: str | None = None
    params: str | None = None
    samples: str | None = None
    out: str | None = None
    budget: int = 10
    seed: int = 0
    tol: float = 1e-9
    t: int = 1
    h: float = 0.1
    horizon: float = 1.0
    scales: tuple = (1.0, 10.0, 100.0, 1000.0)
    extra: dict = field(default_factory=dict)


def _out_dir(config):
    if config.out is None:
        return None
    path = Path(config.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _finish(config, summary, tables=(), figures=()):
    """Emit the summary and optional artifacts; returns exit code 0."""
    out = _out_dir(config)
    text = iomod.dumps_json(summary)
    sys.stdout.write(text)
    if out is not None:
        (out / "summary.json").write_text(text)
        for name, header, rows in tables:
            iomod.write_csv(out / name, header, rows)
        for render in figures:
            render(out)
    return 0


def _cmd_simulate(config):
    tree = iomod.load_tree(config.tree)
    panel = iomod.load_panel(config.panel)
    strategy = iomod.load_strategy(config.strategy, tree)
    path = evolve(tree, panel, panel.initial_utilities(), strategy)
    pnl = investor_pnl(tree, path, strategy)
    resid = path.martingale_residual()
    band = path.weight_band_range(panel)
    summary = {
        "command": "simulate",
        "martingale_residual": resid,
        "martingale_ok": bool(resid <= config.tol * max(1.0, float(np.nanmax(-path.u)))),
        "weight_band": list(band),
        "weight_band_ok": bool(1.0 / panel.risk_bound - config.tol <= band[0]
                               and band[1] <= panel.risk_bound + config.tol),
        "terminal_gain": {str(tree.node_ids[int(l)]): float(g) for l, g in zip(tree.leaves, pnl)},
    }
    out = _out_dir(config)
    if out is not None:
        with open(out / "system_path.csv", "w") as fh:
            path.to_csv(fh)
    return _finish(config, summary,
                   figures=[lambda o: plots.system_path_figure(tree, path, o / "fig_system_path.png")])


def _cmd_superreplicate(config):
    tree = iomod.load_tree(config.tree)
    panel = iomod.load_panel(config.panel)
    claim = iomod.load_claim(config.claim, tree)
    search = SearchConfig(refinements=config.budget)
    result = superreplication_price(tree, panel, claim, search=search)
    summary = {"command": "superreplicate", **result.to_json()}
    summary["strategy"] = {str(tree.node_ids[n]): [float(v) for v in result.best_strategy.positions[n]]
                           for n in range(tree.n_nodes) if tree.children[n]}
    tables = [("price_curve.csv", ["evaluations", "price"], result.price_curve)]
    return _finish(config, summary, tables,
                   figures=[lambda o: plots.price_curve_figure(result.price_curve, o / "fig_price_curve.png")])


def _cmd_completeness(config):
    model = iomod.load_binomial_model(config.model)
    report = completeness_check(model)
    return _finish(config, {"command": "completeness", **report.to_json()})


def _cmd_replicate(config):
    model = iomod.load_binomial_model(config.model)
    claim = iomod.load_claim(config.claim, model.tree)
    sol = replicate(model, claim)
    resid = replication_verify(model, claim, sol["pi"], sol["Q"])
    tree = model.tree
    summary = {
        "command": "replicate",
        "pi": sol["pi"],
        "residual": resid,
        "exact": bool(resid <= config.tol),
        "Q": {str(tree.node_ids[n]): float(sol["Q"].positions[n, 0])
                     for n in range(tree.n_nodes) if tree.children[n]},
    }
    return _finish(config, summary)


def _cmd_counterexample(config):
    e = config.extra
    report = counterexample_run(e["p1"], e["p2"], e["p3"], e["alpha"], e["psi_u"], e["psi_d"],
                                search=SearchConfig(refinements=config.budget))
    sweep = report["superreplication"]
    summary = {k: v for k, v in report.items() if k != "superreplication"}
    summary = {"command": "counterexample", **summary, "superreplication": sweep.to_json()}
    tables = [("price_curve.csv", ["evaluations", "price"], sweep.price_curve),
              ("utility_trace.csv", ["q1", "u1_up", "u1_down", "x2_up", "x2_down"],
               [[r["q1"], r["u1_up"], r["u1_down"], r["x2_up"], r["x2_down"]] for r in report["trace"]])]
    figures = [lambda o: plots.price_curve_figure(sweep.price_curve, o / "fig_price_curve.png"),
               lambda o: plots.utility_vs_position_figure(report["trace"], report["limits"],
                                                          o / "fig_utility_vs_position.png")]
    return _finish(config, summary, tables, figures)


def _cmd_friction_probe(config):
    tree = iomod.load_tree(config.tree)
    panel = iomod.load_panel(config.panel)
    u_levels = panel.initial_utilities()
    report = efficient_friction_probe(tree, panel, config.t, u_levels, list(config.scales))
    losses = report["losses"]
    summary = {
        "command": "friction-probe",
        "t": report["t"],
        "scales": list(report["scales"]),
        "failed_scales": report["failed_scales"],
        "diverging_leaves": report["diverging_leaves"],
        "efficient_friction_evidence": report["efficient_friction_evidence"],
    }
    header = ["scale"] + [f"leaf_{tree.node_ids[int(l)]}" for l in tree.leaves]
    rows = [[s] + [losses[k, i] for i in range(len(tree.leaves))]
            for k, s in enumerate(report["scales"])]
    return _finish(config, summary, [("losses.csv", header, rows)],
                   figures=[lambda o: plots.friction_losses_figure(report, tree, o / "fig_losses.png")])


def _cmd_tails_tree(config):
    tree = iomod.load_tree(config.tree)
    exact = decreasing_tails_check(tree, config.t, mode="exact")
    numeric = decreasing_tails_check(tree, config.t, mode="numeric")
    traces = []
    rows = []
    for n in tree.nodes_at(config.t - 1):
        parent_dist = conditional_distribution(tree, n)
        for ch in tree.children[n]:
            rep = tail_dominance(conditional_distribution(tree, ch), parent_dist)
            for label, ray in rep.traces.items():
                traces.append((f"n{tree.node_ids[ch]}|{label}", ray))
                for q, r in ray:
                    rows.append([tree.node_ids[n], tree.node_ids[ch], label, q, r])
    summary = {
        "command": "tails-tree",
        "t": config.t,
        "exact": exact,
        "numeric": numeric,
        "agreement": bool(
            {k: v for k, v in exact["per_node"].items()} == {k: v for k, v in numeric["per_node"].items()}
        ),
    }
    return _finish(config, summary,
                   [("ratio_traces.csv", ["node", "child", "ray", "q", "ratio"], rows)],
                   figures=[lambda o: plots.ratio_traces_figure(traces, o / "fig_ratio_traces.png")])


def _cmd_tails_levy(config):
    triplet = iomod.load_levy(config.triplet)
    if config.samples:
        raw = Path(config.samples).read_text().strip().splitlines()
        start = 1 if raw and any(c.isalpha() for c in raw[0]) else 0
        increments = [float(line.split(",")[0]) for line in raw[start:] if line.strip()]
    else:
        increments = list(np.linspace(-2.0, 2.0, 9))
    report = levy_tails_check(triplet, config.t, config.h, config.horizon, increments)
    rows = [[s["increment"], q, ep, en] for s in report["samples"] for q, ep, en in s["trace"]]
    summary = {
        "command": "tails-levy",
        "case_positive_ray": report["case_positive_ray"],
        "case_negative_ray": report["case_negative_ray"],
        "linear_rate_bound_positive": report["linear_rate_bound_positive"],
        "linear_rate_bound_negative": report["linear_rate_bound_negative"],
        "samples": [{k: v for k, v in s.items() if k != "trace"} for s in report["samples"]],
    }
    return _finish(config, summary,
                   [("exponent_traces.csv", ["increment", "q", "exponent_pos", "exponent_neg"], rows)],
                   figures=[lambda o: plots.levy_exponent_figure(report, o / "fig_exponents.png")])


def _cmd_tails_bns(config):
    params = iomod.load_bns(config.params)
    rng = np.random.default_rng(config.seed)
    t = float(config.extra.get("t_start", 0.0))
    h, T = config.h, config.horizon
    pairs = bns_sample_paths(params, t, h, T, 8, rng)
    report = bns_tails_check(params, t, h, T, [tuple(p) for p in pairs])
    laplace = {f"{q:+g}": bns_laplace(params, t, T, q, 0.0, params.sigma0_sq * np.exp(-params.lam * t))
               for q in (-2.0, -1.0, 1.0, 2.0)}
    rows = [[s["dx"], s["d_eps_var"], q, bp, bn] for s in report["samples"] for q, bp, bn in s["trace"]]
    summary = {
        "command": "tails-bns",
        "q6_coefficient": report["q6_coefficient"],
        "q6_positive": report["q6_positive"],
        "all_samples_diverge": bool(all(s["diverges"] for s in report["samples"])),
        "log_laplace_at": laplace,
        "n_samples": len(report["samples"]),
    }
    return _finish(config, summary,
                   [("bracket_traces.csv", ["dx", "d_eps_var", "q", "bracket_pos", "bracket_neg"], rows)],
                   figures=[lambda o: plots.bns_bracket_figure(report, o / "fig_brackets.png")])


_HANDLERS = {
    "simulate": _cmd_simulate,
    "superreplicate": _cmd_superreplicate,
    "completeness": _cmd_completeness,
    "replicate": _cmd_replicate,
    "counterexample": _cmd_counterexample,
    "friction-probe": _cmd_friction_probe,
    "tails-tree": _cmd_tails_tree,
    "tails-levy": _cmd_tails_levy,
    "tails-bns": _cmd_tails_bns,
}


def run(config):
    """Dispatch a parsed run configuration; returns the process exit code."""
    try:
        return _HANDLERS[config.command](config)
    except Infeasible as exc:
        sys.stdout.write(iomod.dumps_json({"command": config.command, "infeasible_at": exc.node,
                                           "error": str(exc)}))
        return 2
    except IndiffError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


def build_parser():
    parser = argparse.ArgumentParser(prog="indiff",
                                     description="Superreplication engine for trading at market indifference prices")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *names):
        if "tree" in names:
            p.add_argument("--tree", required=True, help="scenario tree JSON")
        if "panel" in names:
            p.add_argument("--panel", required=True, help="market maker panel TOML/JSON")
        if "claim" in names:
            p.add_argument("--claim", required=True, help="leaf-indexed claim JSON")
        if "model" in names:
            p.add_argument("--model", required=True, help="binomial model JSON")
        p.add_argument("--out", help="output directory for JSON/CSV/figures")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--tol", type=float, default=1e-9)
        p.add_argument("--budget", type=int, default=10, help="search refinement passes")

    p = sub.add_parser("simulate", help="evolve the system under a given strategy")
    common(p, "tree", "panel")
    p.add_argument("--strategy", required=True, help="node-indexed positions JSON")

    p = sub.add_parser("superreplicate", help="search the superreplication price of a claim")
    common(p, "tree", "panel", "claim")

    p = sub.add_parser("completeness", help="binomial completeness verdict")
    common(p, "model")

    p = sub.add_parser("replicate", help="exact replication in a binomial model")
    common(p, "model", "claim")

    p = sub.add_parser("counterexample", help="two-period non-attainment example")
    common(p)
    p.add_argument("--p1", type=float, required=True)
    p.add_argument("--p2", type=float, required=True)
    p.add_argument("--p3", type=float, required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--psi-u", type=float, required=True)
    p.add_argument("--psi-d", type=float, required=True)

    p = sub.add_parser("friction-probe", help="losses under ever larger positions")
    common(p, "tree", "panel")
    p.add_argument("--t", type=int, default=1)
    p.add_argument("--scales", default="1,10,100,1000")

    p = sub.add_parser("tails-tree", help="decreasing-tails probability on a tree")
    common(p, "tree")
    p.add_argument("--t", type=int, default=1)

    p = sub.add_parser("tails-levy", help="per-sample decay for a Levy terminal payoff")
    common(p)
    p.add_argument("--triplet", required=True, help="Levy triplet TOML/JSON")
    p.add_argument("--h", type=float, default=0.1)
    p.add_argument("--T", type=float, default=1.0, dest="horizon")
    p.add_argument("--t", type=float, default=0.0)
    p.add_argument("--samples", help="CSV of increment samples (first column)")

    p = sub.add_parser("tails-bns", help="decay brackets for the stochastic-volatility model")
    common(p)
    p.add_argument("--params", required=True, help="model parameters TOML/JSON")
    p.add_argument("--h", type=float, default=0.5)
    p.add_argument("--T", type=float, default=1.0, dest="horizon")
    p.add_argument("--t-start", type=float, default=0.0)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    known = {
        "command", "tree", "panel", "claim", "model", "strategy", "triplet",
        "params", "samples", "out", "budget", "seed", "tol", "t", "h", "horizon",
    }
    kwargs, extra = {}, {}
    for key, val in vars(args).items():
        if val is None:
            continue
        if key in known:
            kwargs[key] = val
        elif key == "scales":
            kwargs["scales"] = tuple(float(s) for s in str(val).split(","))
        else:
            extra[key] = val
    config = RunConfig(**kwargs, extra=extra)
    try:
        return run(config)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
