"""Config ingestion and deterministic output emission.

Human-authored inputs (panels, process parameters) are TOML, machine
artifacts (trees, claims, results) are JSON.  Every numeric written to
JSON or CSV is rendered with 15 significant digits so identical runs
produce identical bytes.
"""

from __future__ import annotations

import json
import math
import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .binomial import BinomialModel
from .errors import ConfigError
from .pareto import MarketMakerPanel, UtilitySpec
from .tails import BNSParams, LevyTriplet
from .tree import ScenarioTree, Strategy


def _load_structured(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError("file not found", path=str(path))
    try:
        if path.suffix.lower() == ".toml":
            with open(path, "rb") as fh:
                return tomllib.load(fh)
        with open(path) as fh:
            return json.load(fh)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"parse error: {exc}", path=str(path)) from exc


def utility_from_dict(obj, path=None):
    kind = obj.get("kind")
    if kind == "exponential":
        return UtilitySpec.exponential(float(obj["alpha"]))
    if kind == "mixture":
        return UtilitySpec.mixture([(float(a), float(w)) for a, w in obj["atoms"]])
    raise ConfigError(f"unknown utility kind {kind!r}", path=path)


def utility_to_dict(spec):
    if spec.kind == "exponential":
        return {"kind": "exponential", "alpha": spec.rates[0]}
    if spec.kind == "mixture":
        return {"kind": "mixture", "atoms": [[a, w] for a, w in zip(spec.rates, spec.weights)]}
    raise ConfigError("custom utilities have no file form")


def load_panel(path):
    obj = _load_structured(path)
    try:
        makers = [utility_from_dict(m, path=str(path)) for m in obj["makers"]]
        return MarketMakerPanel.of(
            makers,
            initial_allocation=obj.get("initial_allocation"),
            endowment_base=float(obj.get("endowment_base", 0.0)),
            endowment_position=obj.get("endowment_position"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad panel: {exc}", path=str(path)) from exc


def load_tree(path):
    obj = _load_structured(path)
    try:
        return ScenarioTree.from_json(obj)
    except Exception as exc:
        raise ConfigError(f"bad tree: {exc}", path=str(path)) from exc


def load_claim(path, tree):
    """Leaf-indexed claim from a flat {leaf_id: value} JSON mapping."""
    obj = _load_structured(path)
    if isinstance(obj, dict) and "values" in obj:
        obj = obj["values"]
    if not isinstance(obj, dict):
        raise ConfigError("claim must be a {leaf_id: value} mapping", path=str(path))
    pos = {}
    for i, nid in enumerate(tree.node_ids):
        pos[str(nid)] = i
    claim = np.zeros(len(tree.leaves))
    seen = set()
    for nid, val in obj.items():
        if str(nid) not in pos:
            raise ConfigError(f"claim refers to unknown node {nid!r}", path=str(path))
        node = pos[str(nid)]
        if node not in tree.leaf_index:
            raise ConfigError(f"claim node {nid!r} is not a leaf", path=str(path))
        claim[tree.leaf_index[node]] = float(val)
        seen.add(node)
    missing = [tree.node_ids[int(l)] for l in tree.leaves if int(l) not in seen]
    if missing:
        raise ConfigError(f"claim misses leaves {missing}", path=str(path))
    return claim


def load_strategy(path, tree):
    obj = _load_structured(path)
    if isinstance(obj, dict) and "positions" in obj:
        obj = obj["positions"]
    if not isinstance(obj, dict):
        raise ConfigError("strategy must be a {node_id: position} mapping", path=str(path))
    try:
        return Strategy.from_dict(tree, obj)
    except KeyError as exc:
        raise ConfigError(f"strategy refers to unknown node {exc}", path=str(path)) from exc


def load_binomial_model(path):
    obj = _load_structured(path)
    try:
        tree = ScenarioTree.from_json(obj["tree"])
        return BinomialModel.of(
            tree,
            alpha=float(obj.get("alpha", 1.0)),
            endowment_base=float(obj.get("endowment_base", 0.0)),
            endowment_position=float(obj.get("endowment_position", 0.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad binomial model: {exc}", path=str(path)) from exc


def load_levy(path):
    obj = _load_structured(path)
    try:
        return LevyTriplet.of(
            drift=float(obj.get("drift", obj.get("b", 0.0))),
            diffusion=float(obj.get("diffusion", obj.get("c", 0.0))),
            jumps=[(float(x), float(m)) for x, m in obj.get("jumps", obj.get("atoms", []))],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad triplet: {exc}", path=str(path)) from exc


def load_bns(path):
    obj = _load_structured(path)
    try:
        return BNSParams.of(
            m=float(obj.get("m", 0.0)),
            beta=float(obj.get("beta", 0.0)),
            lam=float(obj.get("lambda", obj.get("lam", 1.0))),
            rho=float(obj.get("rho", -0.5)),
            sigma0_sq=float(obj.get("sigma0_sq", 0.04)),
            subordinator=[(float(y), float(m_)) for y, m_ in obj.get("subordinator", [])],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad parameter set: {exc}", path=str(path)) from exc


# -- deterministic emission -------------------------------------------------


def _fmt_float(x):
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return f"{x:.15g}"


def _emit(obj, out, indent):
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        for i, (k, v) in enumerate(obj.items()):
            out.append(f'{pad}  {json.dumps(str(k))}: ')
            _emit(v, out, indent + 1)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(pad + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        obj = list(obj)
        if not obj:
            out.append("[]")
            return
        out.append("[")
        for i, v in enumerate(obj):
            _emit(v, out, indent + 1)
            if i < len(obj) - 1:
                out.append(", ")
        out.append("]")
    elif isinstance(obj, bool) or isinstance(obj, np.bool_):
        out.append("true" if obj else "false")
    elif obj is None:
        out.append("null")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_fmt_float(float(obj)))
    else:
        out.append(json.dumps(str(obj)))


def dumps_json(obj):
    """Deterministic JSON text with 15-significant-digit floats."""
    out = []
    _emit(obj, out, 0)
    return "".join(out) + "\n"


def dump_json(obj, path):
    text = dumps_json(obj)
    Path(path).write_text(text)
    return text


def write_csv(path, header, rows):
    """CSV with 15-significant-digit floats; returns the text written."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for cell in row:
            if isinstance(cell, (float, np.floating)):
                cells.append(_fmt_float(float(cell)))
            elif isinstance(cell, (int, np.integer)):
                cells.append(str(int(cell)))
            else:
                cells.append(str(cell))
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    Path(path).write_text(text)
    return text
