"""Config-driven experiment runner.

Usage::

    marketrl run CONFIG [--steps N] [--seed S] [--out DIR] [--format csv|jsonl] [--runners K]
    marketrl validate CONFIG
    marketrl compile-mlp MLP_FILE --verify INPUTS_FILE

Configs are YAML mappings; see ``configs/`` and the README for the schema.
Every run writes ``metrics.csv`` (or ``metrics.jsonl``), ``ledger.txt`` and
``summary.json`` into the output directory.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from marketrl.core import AUCTION_KINDS, AgentSpec, GoodsBundle, MarketConfig
from marketrl.deep_market import (
    METRIC_COLUMNS,
    Consumer,
    Economy,
    bid_grid,
    run_parallel,
    run_training,
    tabular_constant_agents,
    winning_policy,
)
from marketrl.environment import BUILTIN_ENVIRONMENTS
from marketrl.equilibrium import EquilibriumConfig, QuadraticValuation
from marketrl.nn_bridge import (
    DimensionMismatch,
    MlpSpec,
    compile_mlp_to_market,
    load_inputs,
    market_forward_equals_network,
)
from marketrl.wide_market import (
    HOLD,
    RAISE,
    WIDE_METRIC_COLUMNS,
    WideEconomy,
    WorldGoodEnv,
    equilibrium_solver,
    run_wide_training,
    world_good_agents,
    world_good_economy,
)

log = logging.getLogger("marketrl")

MARKET_KINDS = ("deep", "wide", "mlp")
FORMATS = ("csv", "jsonl")
MLP_METRIC_COLUMNS = ("t", "input", "layer", "winner_id", "price")

TOP_FIELDS = {"seed", "steps", "environment", "market", "agents", "consumers", "output", "mlp", "equilibrium"}
MARKET_FIELDS = {"kind", "auction_kind", "rent_epsilon", "enumeration_rate", "endowment",
                 "episode_horizon", "fallback"}
ENV_FIELDS = {"name", "params"}
OUTPUT_FIELDS = {"dir", "format"}
AGENT_FAMILIES = ("tabular_constant", "explicit")
TABULAR_FIELDS = {"family", "bid_grid", "repeat"}
EXPLICIT_FIELDS = {"family", "list"}
EXPLICIT_AGENT_FIELDS = {"policy", "valuation", "wealth", "holding"}
MLP_FIELDS = {"file", "widths", "seed", "inputs_file", "num_inputs", "decoys", "endowment"}
EQ_FIELDS = {"step_size", "max_iters", "tol", "patience"}


class ConfigError(ValueError):
    """Raised with every problem found; ``errors`` holds one message per field."""

    def __init__(self, errors: List[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class ExperimentConfig:
    raw: Dict[str, Any]
    base_dir: str = "."
    seed: int = 0
    steps: int = 0
    market_kind: str = "deep"
    market: Optional[MarketConfig] = None
    output_dir: str = "runs"
    output_format: str = "csv"
    extras: Dict[str, Any] = field(default_factory=dict)

    @property
    def environment(self) -> dict:
        return self.raw.get("environment") or {}


def _unknown(section: dict, allowed: set, where: str) -> List[str]:
    return [f"{where}.{k}: unknown field" if where else f"{k}: unknown field"
            for k in section if k not in allowed]


def _load_yaml(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc.strerror or exc}"]) from exc
    except yaml.YAMLError as exc:
        raise ConfigError([f"parse error in {path}: {exc}"]) from exc
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return data


def parse_config(data: dict, base_dir: str = ".") -> ExperimentConfig:
    """Validate ``data`` structurally and referentially; raises :class:`ConfigError`."""
    errors = _unknown(data, TOP_FIELDS, "")
    market = data.get("market") or {}
    if not isinstance(market, dict):
        errors.append("market: must be a mapping")
        market = {}
    errors += _unknown(market, MARKET_FIELDS, "market")
    kind = market.get("kind", "deep")
    if kind not in MARKET_KINDS:
        errors.append(f"market.kind: must be one of {MARKET_KINDS}, got {kind!r}")

    steps = data.get("steps", 0)
    if not isinstance(steps, int) or isinstance(steps, bool) or steps < 0:
        errors.append(f"steps: must be a nonnegative integer, got {steps!r}")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        errors.append(f"seed: must be an integer, got {seed!r}")

    mc = None
    mc_args = {k: market[k] for k in ("auction_kind", "rent_epsilon", "enumeration_rate",
                                      "endowment", "episode_horizon") if k in market}
    try:
        mc = MarketConfig(seed=seed if isinstance(seed, int) else 0, **mc_args)
    except (ValueError, TypeError) as exc:
        errors.append(f"market.{_field_from_message(str(exc))}: {exc}")
    if market.get("fallback", HOLD) not in (HOLD, RAISE):
        errors.append(f"market.fallback: must be {HOLD!r} or {RAISE!r}")

    if kind in ("deep", "wide"):
        env = data.get("environment")
        if not isinstance(env, dict) or "name" not in env:
            errors.append("environment.name: required")
        else:
            errors += _unknown(env, ENV_FIELDS, "environment")
            if env["name"] not in BUILTIN_ENVIRONMENTS:
                errors.append(f"environment.name: unknown environment {env['name']!r} "
                              f"(known: {', '.join(sorted(BUILTIN_ENVIRONMENTS))})")
            elif not isinstance(env.get("params", {}) or {}, dict):
                errors.append("environment.params: must be a mapping")
            else:
                try:
                    BUILTIN_ENVIRONMENTS[env["name"]](**(env.get("params") or {}))
                except TypeError as exc:
                    errors.append(f"environment.params: {exc}")
        errors += _validate_agents(data.get("agents"), kind)
        errors += _validate_consumers(data.get("consumers"), kind)
    else:
        errors += _validate_mlp(data.get("mlp"), base_dir)

    eq = data.get("equilibrium") or {}
    if not isinstance(eq, dict):
        errors.append("equilibrium: must be a mapping")
    else:
        errors += _unknown(eq, EQ_FIELDS, "equilibrium")
        for key in ("step_size", "tol"):
            if key in eq and not (isinstance(eq[key], (int, float)) and eq[key] > 0):
                errors.append(f"equilibrium.{key}: must be positive")
        if "max_iters" in eq and not (isinstance(eq["max_iters"], int) and eq["max_iters"] > 0):
            errors.append("equilibrium.max_iters: must be a positive integer")
        patience = eq.get("patience")
        if patience is not None and not (isinstance(patience, int) and patience > 0):
            errors.append("equilibrium.patience: must be a positive integer or null")

    out = data.get("output") or {}
    if not isinstance(out, dict):
        errors.append("output: must be a mapping")
        out = {}
    errors += _unknown(out, OUTPUT_FIELDS, "output")
    fmt = out.get("format", "csv")
    if fmt not in FORMATS:
        errors.append(f"output.format: must be one of {FORMATS}, got {fmt!r}")

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(data, base_dir, seed, steps, kind, mc,
                            str(out.get("dir", "runs")), fmt)


def _field_from_message(msg: str) -> str:
    for name in ("auction_kind", "rent_epsilon", "enumeration_rate", "endowment", "episode_horizon"):
        if name in msg:
            return name
    return "?"


def _validate_agents(agents, kind) -> List[str]:
    if agents is None:
        return ["agents: required"]
    if not isinstance(agents, dict):
        return ["agents: must be a mapping"]
    family = agents.get("family")
    if family not in AGENT_FAMILIES:
        return [f"agents.family: unknown generator family {family!r} (known: {', '.join(AGENT_FAMILIES)})"]
    errors = []
    if family == "tabular_constant":
        errors += _unknown(agents, TABULAR_FIELDS, "agents")
        grid = agents.get("bid_grid")
        if not isinstance(grid, dict) or not {"start", "stop", "step"} <= set(grid):
            errors.append("agents.bid_grid: needs start, stop and step")
        elif not grid["step"] > 0 or grid["stop"] < grid["start"]:
            errors.append("agents.bid_grid: need step > 0 and stop >= start")
    else:
        errors += _unknown(agents, EXPLICIT_FIELDS, "agents")
        if kind != "wide":
            errors.append("agents.family: 'explicit' agents are only supported in wide markets")
        items = agents.get("list")
        if not isinstance(items, list) or not items:
            errors.append("agents.list: must be a nonempty list")
        else:
            for i, item in enumerate(items):
                if not isinstance(item, dict):
                    errors.append(f"agents.list[{i}]: must be a mapping")
                    continue
                errors += _unknown(item, EXPLICIT_AGENT_FIELDS, f"agents.list[{i}]")
                if "policy" not in item:
                    errors.append(f"agents.list[{i}].policy: required")
                val = item.get("valuation", {})
                if not isinstance(val, dict) or "linear" not in val:
                    errors.append(f"agents.list[{i}].valuation: needs linear (and optional quadratic)")
                if "wealth" in item and not item["wealth"] >= 0:
                    errors.append(f"agents.list[{i}].wealth: must be nonnegative")
    return errors


def _validate_consumers(consumers, kind) -> List[str]:
    if not consumers:
        return []
    if kind != "deep":
        return ["consumers: only supported in deep markets"]
    if not isinstance(consumers, list):
        return ["consumers: must be a list"]
    errors = []
    for i, c in enumerate(consumers):
        if not isinstance(c, dict) or "budget" not in c or "bids" not in c:
            errors.append(f"consumers[{i}]: needs bids and budget")
        elif not c["budget"] >= 0:
            errors.append(f"consumers[{i}].budget: must be nonnegative")
    return errors


def _validate_mlp(mlp, base_dir) -> List[str]:
    if not isinstance(mlp, dict):
        return ["mlp: required for market.kind 'mlp'"]
    errors = _unknown(mlp, MLP_FIELDS, "mlp")
    if "file" in mlp:
        path = os.path.join(base_dir, mlp["file"])
        if not os.path.exists(path):
            errors.append(f"mlp.file: no such file {path}")
    elif not isinstance(mlp.get("widths"), list) or len(mlp["widths"]) < 2:
        errors.append("mlp.widths: need a list of at least two layer widths (or mlp.file)")
    elif any(not isinstance(w, int) or w < 1 for w in mlp["widths"]):
        errors.append("mlp.widths: widths must be positive integers")
    if "inputs_file" in mlp and not os.path.exists(os.path.join(base_dir, mlp["inputs_file"])):
        errors.append(f"mlp.inputs_file: no such file {mlp['inputs_file']}")
    if "num_inputs" in mlp and not (isinstance(mlp["num_inputs"], int) and mlp["num_inputs"] > 0):
        errors.append("mlp.num_inputs: must be a positive integer")
    return errors


def load_config(path: str) -> ExperimentConfig:
    return parse_config(_load_yaml(path), os.path.dirname(os.path.abspath(path)))


def validate_config(path: str) -> List[str]:
    """Every problem with the config at ``path``; empty when it is valid."""
    try:
        load_config(path)
    except ConfigError as exc:
        return exc.errors
    return []


# --- building and running -------------------------------------------------------


def _plain(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _state_label(s) -> str:
    return str(s)


def _build_env(cfg: ExperimentConfig):
    env = cfg.environment
    return BUILTIN_ENVIRONMENTS[env["name"]](**(env.get("params") or {}))


def _tabular_generator(cfg: ExperimentConfig, env):
    agents = cfg.raw["agents"]
    g = agents["bid_grid"]
    return tabular_constant_agents(env.observations(), env.action_names,
                                   bid_grid(g["start"], g["stop"], g["step"]),
                                   repeat=bool(agents.get("repeat", False)))


def _eq_config(cfg: ExperimentConfig) -> EquilibriumConfig:
    return EquilibriumConfig(**(cfg.raw.get("equilibrium") or {}))


def _obs_from_config(key, env):
    for o in env.observations():
        if str(o) == str(key):
            return o
    raise ConfigError([f"consumers: unknown observation {key!r}"])


def _run_deep(cfg: ExperimentConfig, steps: int, seed: int, runners: int):
    env = _build_env(cfg)
    consumers = []
    for i, c in enumerate(cfg.raw.get("consumers") or []):
        table = {_obs_from_config(k, env): float(v) for k, v in c["bids"].items()}
        consumers.append(Consumer(i, lambda o, _t=table: _t.get(o, 0.0), float(c["budget"])))
    economy = Economy(cfg.market, consumers=consumers)
    gen = _tabular_generator(cfg, env)
    if runners > 1:
        metrics = run_parallel(env, economy, gen, steps, runners, seed)
    else:
        economy, metrics = run_training(env, economy, gen, steps, seed)
    rows = [m.as_row() for m in metrics]
    summary = {"final_total_wealth": economy.ledger.total(),
               "expected_total_wealth": economy.ledger.expected_total(),
               "agents": len(economy.agents)}
    try:
        policy = winning_policy(env, economy) if economy.agents else {}
        summary["winning_policy"] = {_state_label(s): {"winner": w, "action": str(a), "price": p}
                                     for s, (w, a, p) in policy.items()}
    except NotImplementedError:
        pass
    return list(METRIC_COLUMNS), rows, economy.ledger, summary


def _run_wide(cfg: ExperimentConfig, steps: int, seed: int):
    env = _build_env(cfg)
    agents = cfg.raw["agents"]
    fallback = cfg.raw["market"].get("fallback", HOLD)
    if agents["family"] == "tabular_constant":
        # a deep environment traded as one indivisible good per state
        wenv = WorldGoodEnv(env)
        economy = world_good_economy(wenv, cfg.market)
        gen = world_good_agents(wenv, _tabular_generator(cfg, env))
    else:
        wenv = env
        economy = WideEconomy(env.goods, cfg.market, equilibrium_solver(_eq_config(cfg)), fallback)
        for item in agents["list"]:
            val = item["valuation"]
            lin = np.asarray(val["linear"], dtype=np.float64)
            quad = np.asarray(val.get("quadratic", np.zeros((lin.size, lin.size))), dtype=np.float64)
            holding = item.get("holding")
            bundle = None if holding is None else GoodsBundle(env.goods, [holding.get(g, 0.0) for g in env.goods])
            policy = item["policy"]
            economy.enroll(AgentSpec(-1, lambda b, _p=policy: _p, QuadraticValuation(lin, quad),
                                     meta={"policy": policy}),
                           wealth=item.get("wealth"), holding=bundle)
        gen = None
    economy, metrics = run_wide_training(wenv, economy, gen, steps, seed)
    rows = [m.as_row() for m in metrics]
    columns = list(WIDE_METRIC_COLUMNS) + [f"price_{g}" for g in economy.goods]
    res = [r["eq_residual"] for r in rows]
    summary = {"final_total_wealth": economy.ledger.total(),
               "expected_total_wealth": economy.ledger.expected_total(),
               "agents": len(economy.agents),
               "equilibrium_residual": {"mean": float(np.mean(res)) if res else 0.0,
                                        "max": float(np.max(res)) if res else 0.0,
                                        "untraded_steps": sum(1 for r in rows if not r["traded"])},
               "final_holdings": {str(i): h.as_dict() for i, h in enumerate(economy.holdings)}}
    return columns, rows, economy.ledger, summary


def _load_mlp(cfg: ExperimentConfig, seed: int):
    spec = cfg.raw["mlp"]
    rng = np.random.default_rng(spec.get("seed", seed))
    if "file" in spec:
        with open(os.path.join(cfg.base_dir, spec["file"]), encoding="utf-8") as fh:
            mlp = MlpSpec.from_text(fh.read())
    else:
        mlp = MlpSpec.random(spec["widths"], rng)
    if "inputs_file" in spec:
        with open(os.path.join(cfg.base_dir, spec["inputs_file"]), encoding="utf-8") as fh:
            inputs = load_inputs(fh.read())
    else:
        inputs = rng.normal(size=(spec.get("num_inputs", 20), mlp.widths[0]))
    return mlp, inputs, spec


def _run_mlp(cfg: ExperimentConfig, seed: int):
    mlp, inputs, spec = _load_mlp(cfg, seed)
    env, economy = compile_mlp_to_market(mlp, endowment=float(spec.get("endowment", 10.0)),
                                         decoys=int(spec.get("decoys", 0)), rng=seed)
    report = market_forward_equals_network(mlp, inputs, env, economy)
    rows, t = [], 0
    for i, seq in enumerate(report.winners):
        for layer, w in enumerate(seq, start=1):
            rows.append({"t": t, "input": i, "layer": layer, "winner_id": w, "price": 1.0})
            t += 1
    summary = {"max_deviation": report.max_deviation, "winners_match": report.winners_match,
               "inputs": int(len(inputs)), "widths": mlp.widths, "agents": len(economy.agents)}
    return list(MLP_METRIC_COLUMNS), rows, economy.ledger, summary


def _fmt(v) -> str:
    v = _plain(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(path: str, columns: List[str], rows: List[dict], fmt: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([_fmt(r.get(c, "")) for c in columns])
        else:
            for r in rows:
                fh.write(json.dumps({c: _plain(r.get(c)) for c in columns}) + "\n")


def run_experiment(cfg: ExperimentConfig, steps: Optional[int] = None, seed: Optional[int] = None,
                   out_dir: Optional[str] = None, fmt: Optional[str] = None, runners: int = 1) -> dict:
    """Run ``cfg`` and write its artifacts; returns the summary record."""
    steps = cfg.steps if steps is None else steps
    seed = cfg.seed if seed is None else seed
    out_dir = cfg.output_dir if out_dir is None else out_dir
    fmt = cfg.output_format if fmt is None else fmt
    if steps < 0:
        raise ConfigError(["steps: must be nonnegative"])
    if cfg.market_kind == "deep":
        columns, rows, ledger, summary = _run_deep(cfg, steps, seed, runners)
    elif cfg.market_kind == "wide":
        columns, rows, ledger, summary = _run_wide(cfg, steps, seed)
    else:
        columns, rows, ledger, summary = _run_mlp(cfg, seed)
    summary = {"market_kind": cfg.market_kind, "seed": seed, "steps": len(rows), **summary}
    os.makedirs(out_dir, exist_ok=True)
    write_metrics(os.path.join(out_dir, f"metrics.{fmt}"), columns, rows, fmt)
    with open(os.path.join(out_dir, "ledger.txt"), "w", encoding="utf-8") as fh:
        fh.write(ledger.to_text())
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_plain)
        fh.write("\n")
    return summary


def compile_and_verify(mlp_path: str, inputs_path: str) -> dict:
    with open(mlp_path, encoding="utf-8") as fh:
        mlp = MlpSpec.from_text(fh.read())
    with open(inputs_path, encoding="utf-8") as fh:
        inputs = load_inputs(fh.read())
    if inputs.shape[1] != mlp.widths[0]:
        raise DimensionMismatch(f"inputs have width {inputs.shape[1]}, network expects {mlp.widths[0]}")
    report = market_forward_equals_network(mlp, inputs)
    return {"max_deviation": report.max_deviation, "winners_match": report.winners_match,
            "inputs": int(len(inputs)), "widths": mlp.widths, "ok": report.ok}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="marketrl", description="Market-based RL experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--steps", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--format", choices=FORMATS)
    r.add_argument("--runners", type=int, default=1,
                   help="parallel episode runners sharing one ledger (deep markets only)")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    c = sub.add_parser("compile-mlp", help="compile a ReLU network into a market and check it")
    c.add_argument("mlp")
    c.add_argument("--verify", required=True, metavar="INPUTS")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "validate":
            errors = validate_config(args.config)
            for e in errors:
                print(f"error: {e}", file=sys.stderr)
            if not errors:
                print("ok")
            return 0 if not errors else 2
        if args.command == "compile-mlp":
            report = compile_and_verify(args.mlp, args.verify)
            print(json.dumps(report, sort_keys=True, default=_plain))
            return 0 if report["ok"] else 1
        cfg = load_config(args.config)
        if args.runners > 1 and cfg.market_kind != "deep":
            raise ConfigError(["--runners: parallel runners need a deep market"])
        summary = run_experiment(cfg, args.steps, args.seed, args.out, args.format, args.runners)
        print(json.dumps({k: summary[k] for k in ("market_kind", "seed", "steps")}, sort_keys=True))
        return 0
    except ConfigError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
