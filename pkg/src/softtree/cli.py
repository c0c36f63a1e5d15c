"""Command line front end: synth, train, eval, export, oracle, compare.

All commands read one JSON run configuration (every key optional, unknown
keys rejected, all validation problems reported at once) and write JSON
results under the configured output directory. Result files are
byte-identical across reruns with the same config and seeds; wall-clock
metadata goes to a separate ``*.meta.json`` sidecar so it never perturbs
the payload. Verbosity is controlled by the SOFTTREE_LOG environment
variable (error, info or debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import agents, ddt, oracle
from .agents import AgentConfig, EvalReport, evaluate, make_rbc_policy, train
from .critic import MlpParams, load_mlp, save_mlp
from .ddt import TreeParams, load_tree, save_tree
from .hems import BatteryConfig, HemsEnv, TariffConfig
from .profiles import (
    FEATURE_NAMES,
    NormStats,
    ProfileSet,
    SynthConfig,
    load_csv,
    norm_fit,
    save_csv,
    synthesize,
)

logger = logging.getLogger(__name__)

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class ConfigError(ValueError):
    """Raised with every configuration problem joined into one message."""


# --------------------------------------------------------------------------
# run configuration


_BATTERY_KEYS = {"e_max": float, "p_max": float, "eta_rt": float, "action_grid": list}
_TARIFF_KEYS = {"lambda_cap": float, "p_agg_min": float, "injection_ratio": float}
_SYNTH_KEYS = {
    "n_days": int,
    "seed": int,
    "price_base": float,
    "price_morning_amp": float,
    "price_morning_hour": float,
    "price_morning_width": float,
    "price_evening_amp": float,
    "price_evening_hour": float,
    "price_evening_width": float,
    "price_noise": float,
    "price_floor": float,
    "load_base": float,
    "load_morning_amp": float,
    "load_morning_hour": float,
    "load_morning_width": float,
    "load_evening_amp": float,
    "load_evening_hour": float,
    "load_evening_width": float,
    "load_noise": float,
    "pv_peak": float,
    "pv_sunrise": float,
    "pv_sunset": float,
    "cloudiness_min": float,
    "cloudiness_max": float,
    "eval_fraction": float,
}
_AGENT_KEYS = {
    "depth": int,
    "actor_kind": str,
    "actor_hidden": list,
    "critic_hidden": list,
    "gamma": float,
    "tau": float,
    "lr_actor": float,
    "lr_critic": float,
    "batch_size": int,
    "buffer_capacity": int,
    "episodes": int,
    "warmup": int,
    "update_every": int,
    "epsilon": float,
    "train_e0_fraction": float,
    "eval_every": int,
}
_TOP_KEYS = ("battery", "tariff", "synthesis", "csv_path", "agent", "seeds", "output_dir")


def _check_section(name, section, allowed, problems):
    if section is None:
        return {}
    if not isinstance(section, dict):
        problems.append(f"{name}: expected an object, got {type(section).__name__}")
        return {}
    out = {}
    for key, value in section.items():
        if key not in allowed:
            problems.append(f"{name}.{key}: unknown key")
            continue
        want = allowed[key]
        if want is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            out[key] = float(value)
        elif want is int and isinstance(value, int) and not isinstance(value, bool):
            out[key] = value
        elif want is str and isinstance(value, str):
            out[key] = value
        elif want is list and isinstance(value, list):
            out[key] = value
        else:
            problems.append(
                f"{name}.{key}: expected {want.__name__}, got {type(value).__name__}"
            )
    return out


class RunConfig:
    """Validated run configuration with defaults for every omitted key."""

    def __init__(self, raw: dict | None = None):
        raw = {} if raw is None else raw
        problems: list = []
        if not isinstance(raw, dict):
            raise ConfigError(f"configuration root must be an object, got {type(raw).__name__}")
        for key in raw:
            if key not in _TOP_KEYS:
                problems.append(f"{key}: unknown key")
        battery_kw = _check_section("battery", raw.get("battery"), _BATTERY_KEYS, problems)
        tariff_kw = _check_section("tariff", raw.get("tariff"), _TARIFF_KEYS, problems)
        synth_kw = _check_section("synthesis", raw.get("synthesis"), _SYNTH_KEYS, problems)
        agent_kw = _check_section("agent", raw.get("agent"), _AGENT_KEYS, problems)

        csv_path = raw.get("csv_path")
        if csv_path is not None and not isinstance(csv_path, str):
            problems.append(f"csv_path: expected str, got {type(csv_path).__name__}")
            csv_path = None
        seeds = raw.get("seeds", [0, 1, 2, 3, 4])
        if not (
            isinstance(seeds, list)
            and seeds
            and all(isinstance(s, int) and not isinstance(s, bool) for s in seeds)
        ):
            problems.append("seeds: expected a non-empty list of integers")
            seeds = [0]
        output_dir = raw.get("output_dir", "runs")
        if not isinstance(output_dir, str):
            problems.append(f"output_dir: expected str, got {type(output_dir).__name__}")
            output_dir = "runs"

        self.n_days = int(synth_kw.pop("n_days", 37))
        self.synth_seed = int(synth_kw.pop("seed", 123))
        if self.n_days < 1:
            problems.append(f"synthesis.n_days: must be >= 1, got {self.n_days}")
        if "actor_hidden" in agent_kw:
            agent_kw["actor_hidden"] = tuple(agent_kw["actor_hidden"])
        if "critic_hidden" in agent_kw:
            agent_kw["critic_hidden"] = tuple(agent_kw["critic_hidden"])
        if "action_grid" in battery_kw:
            battery_kw["action_grid"] = tuple(battery_kw["action_grid"])

        def build(factory, kwargs, section):
            try:
                return factory(**kwargs)
            except (TypeError, ValueError) as exc:
                problems.append(f"{section}: {exc}")
                return factory()

        self.battery = build(BatteryConfig, battery_kw, "battery")
        self.tariff = build(TariffConfig, tariff_kw, "tariff")
        self.synth = build(SynthConfig, synth_kw, "synthesis")
        self.agent = build(AgentConfig, {**agent_kw, "seeds": tuple(seeds)}, "agent")
        self.csv_path = csv_path
        self.seeds = tuple(seeds)
        self.output_dir = Path(output_dir)
        if problems:
            raise ConfigError("; ".join(problems))

    def profile_set(self) -> ProfileSet:
        if self.csv_path is not None:
            return load_csv(self.csv_path, eval_fraction=self.synth.eval_fraction)
        return synthesize(self.synth, self.n_days, self.synth_seed)

    def env(self, profile_set: ProfileSet) -> HemsEnv:
        return HemsEnv(profile_set, self.battery, self.tariff)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig({})
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return RunConfig(raw)


# --------------------------------------------------------------------------
# output helpers


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_jsonl(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _write_meta(path: Path, started: float) -> None:
    _write_json(
        path,
        {"started_unix": started, "duration_s": time.time() - started},
    )


def _action_labels(battery: BatteryConfig) -> list:
    return [f"u={g:g}" for g in battery.action_grid]


def _eval_payload(report: EvalReport) -> dict:
    payload = {
        "mean_daily_cost": report.mean_daily_cost,
        "per_day_costs": report.per_day_costs,
    }
    if report.soft_greedy_mean is not None:
        payload["soft_greedy_mean"] = report.soft_greedy_mean
        payload["soft_greedy_per_day"] = report.soft_greedy_per_day
    return payload


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out: str | None) -> int:
    started = time.time()
    profile_set = synthesize(cfg.synth, cfg.n_days, cfg.synth_seed)
    path = Path(out) if out else cfg.output_dir / "profiles.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_csv(profile_set, path)
    _write_meta(path.with_suffix(".meta.json"), started)
    print(f"wrote {len(profile_set)} days to {path}")
    return 0


def cmd_train(cfg: RunConfig, out: str | None, seed_override: int | None) -> int:
    started = time.time()
    out_dir = Path(out) if out else cfg.output_dir / "train"
    profile_set = cfg.profile_set()
    env = cfg.env(profile_set)
    seeds = (seed_override,) if seed_override is not None else cfg.seeds
    for seed in seeds:
        result = train(cfg.agent, env, profile_set, seed)
        run_dir = out_dir / f"seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        if isinstance(result.actor, TreeParams):
            save_tree(result.actor, run_dir / "actor.json")
        else:
            save_mlp(result.actor, run_dir / "actor.json")
        save_mlp(result.critic, run_dir / "critic.json")
        _write_jsonl(run_dir / "curve.jsonl", result.curve)
        final = result.curve[-1]["eval_cost"] if result.curve else float("nan")
        print(f"seed {seed}: final eval cost {final:.4f} EUR, artifacts in {run_dir}")
    _write_meta(out_dir / "train.meta.json", started)
    return 0


def _load_checkpoint(path: str):
    payload = json.loads(Path(path).read_text())
    kind = payload.get("kind")
    if kind == "ddt":
        return load_tree(path)
    if kind == "mlp":
        return load_mlp(path)
    raise ValueError(f"checkpoint {path} has unsupported kind {kind!r}")


def cmd_eval(cfg: RunConfig, checkpoint: str, out: str | None, trace: bool) -> int:
    started = time.time()
    profile_set = cfg.profile_set()
    env = cfg.env(profile_set)
    stats = norm_fit(profile_set)
    policy = _load_checkpoint(checkpoint)
    report = evaluate(
        policy, env, profile_set.eval_indices, stats=stats, collect_trace=trace
    )
    out_dir = Path(out) if out else cfg.output_dir / "eval"
    _write_json(out_dir / "eval_report.json", _eval_payload(report))
    if trace:
        _write_jsonl(
            out_dir / "eval_trace.jsonl",
            (step for day in report.traces for step in day),
        )
    _write_meta(out_dir / "eval.meta.json", started)
    print(f"mean daily cost {report.mean_daily_cost:.4f} EUR over "
          f"{len(report.per_day_costs)} days -> {out_dir}")
    return 0


def cmd_export(
    cfg: RunConfig, checkpoint: str, out: str | None, fmt: str, raw_units: bool
) -> int:
    started = time.time()
    tree = _load_checkpoint(checkpoint)
    if not isinstance(tree, TreeParams):
        raise ValueError(f"checkpoint {checkpoint} is not a tree policy")
    profile_set = cfg.profile_set()
    stats = norm_fit(profile_set)
    crisp_norm = ddt.crispify(tree)
    crisp_out = ddt.crispify(tree, norm=stats) if raw_units else crisp_norm
    rendering = ddt.export_tree(
        crisp_out, list(FEATURE_NAMES), _action_labels(cfg.battery), format=fmt
    )
    # reachability is judged in the tree's own input space, where every
    # scaled feature lives in [0, 1]
    unreachable = ddt.analyze_reachability(
        crisp_norm, [(0.0, 1.0)] * crisp_norm.n_features
    )
    out_dir = Path(out) if out else cfg.output_dir / "export"
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = "dot" if fmt == "dot" else "txt"
    (out_dir / f"tree.{suffix}").write_text(rendering)
    _write_json(
        out_dir / "reachability.json",
        {
            "unreachable_leaves": unreachable,
            "n_leaves": crisp_norm.n_leaves,
            "bounds": {name: [0.0, 1.0] for name in FEATURE_NAMES},
            "threshold_units": crisp_out.threshold_units,
        },
    )
    _write_meta(out_dir / "export.meta.json", started)
    print(rendering, end="")
    if unreachable:
        print(f"unreachable leaves: {unreachable}")
    return 0


def cmd_oracle(cfg: RunConfig, day: int, out: str | None, method: str, horizon: int | None) -> int:
    started = time.time()
    profile_set = cfg.profile_set()
    if not 0 <= day < len(profile_set):
        raise ValueError(f"--day {day} outside 0..{len(profile_set) - 1}")
    profile_day = profile_set.days[day]
    if method == "exhaustive":
        if horizon is None:
            raise ValueError("--horizon is required for the exhaustive method")
        plan = oracle.exhaustive_optimal(
            profile_day, horizon, cfg.battery, cfg.tariff
        )
    else:
        plan = oracle.dp_optimal(profile_day, cfg.battery, cfg.tariff, horizon=horizon)
    out_dir = Path(out) if out else cfg.output_dir / "oracle"
    _write_json(
        out_dir / f"plan_day{day}.json",
        {
            "day": day,
            "date": profile_day.date,
            "method": method,
            "total_cost": plan.total_cost,
            "actions": plan.actions,
            "energies": plan.energies,
        },
    )
    _write_meta(out_dir / "oracle.meta.json", started)
    print(f"day {day} ({profile_day.date}): optimal cost {plan.total_cost:.4f} EUR")
    return 0


def run_comparison(cfg: RunConfig) -> dict:
    """Train and score every arm; returns the comparison table as a dict.

    Arms: the rule-based controller, tree actors of depth 2 and 3, the
    softmax-headed network actor, and the perfect-foresight optimum. Policy
    arms report per-seed eval costs plus their mean and spread; the oracle
    reports the mean optimal cost over the eval days.
    """
    profile_set = cfg.profile_set()
    env = cfg.env(profile_set)
    stats = norm_fit(profile_set)
    eval_days = profile_set.eval_indices

    rbc_report = evaluate(make_rbc_policy(cfg.battery), env, eval_days)
    oracle_costs = [
        oracle.dp_optimal(profile_set.days[d], cfg.battery, cfg.tariff).total_cost
        for d in eval_days
    ]
    no_battery = [
        oracle.no_battery_cost(profile_set.days[d], cfg.tariff, cfg.battery)
        for d in eval_days
    ]

    from dataclasses import replace

    arms = {
        "ddt_depth2": replace(cfg.agent, actor_kind="ddt", depth=2),
        "ddt_depth3": replace(cfg.agent, actor_kind="ddt", depth=3),
        "ddpg_mlp": replace(cfg.agent, actor_kind="mlp"),
    }
    table: dict = {
        "rbc": {"mean": rbc_report.mean_daily_cost, "per_day": rbc_report.per_day_costs},
        "oracle": {"mean": float(np.mean(oracle_costs)), "per_day": oracle_costs},
        "extras": {"no_battery_mean": float(np.mean(no_battery))},
    }
    for name, agent_cfg in arms.items():
        per_seed = []
        for seed in cfg.seeds:
            result = train(agent_cfg, env, profile_set, seed)
            report = evaluate(
                ddt.crispify(result.actor)
                if isinstance(result.actor, TreeParams)
                else result.actor,
                env,
                eval_days,
                stats=result.stats,
            )
            per_seed.append(report.mean_daily_cost)
            logger.info("%s seed %d: eval cost %.4f", name, seed, report.mean_daily_cost)
        table[name] = {
            "per_seed": per_seed,
            "mean": float(np.mean(per_seed)),
            "min": float(np.min(per_seed)),
            "max": float(np.max(per_seed)),
        }
    return table


def cmd_compare(cfg: RunConfig, out: str | None) -> int:
    started = time.time()
    table = run_comparison(cfg)
    out_dir = Path(out) if out else cfg.output_dir / "compare"
    _write_json(out_dir / "compare.json", table)
    _write_meta(out_dir / "compare.meta.json", started)
    rows = [
        ("rbc", table["rbc"]["mean"], ""),
        ("ddt_depth2", table["ddt_depth2"]["mean"],
         f"seeds {table['ddt_depth2']['min']:.3f}..{table['ddt_depth2']['max']:.3f}"),
        ("ddt_depth3", table["ddt_depth3"]["mean"],
         f"seeds {table['ddt_depth3']['min']:.3f}..{table['ddt_depth3']['max']:.3f}"),
        ("ddpg_mlp", table["ddpg_mlp"]["mean"],
         f"seeds {table['ddpg_mlp']['min']:.3f}..{table['ddpg_mlp']['max']:.3f}"),
        ("oracle", table["oracle"]["mean"], "perfect foresight"),
    ]
    width = max(len(r[0]) for r in rows)
    print(f"{'arm':<{width}}  mean daily cost (EUR)")
    for name, mean, note in rows:
        print(f"{name:<{width}}  {mean:>8.4f}  {note}")
    return 0


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="softtree",
        description="train, inspect and benchmark explainable battery-dispatch policies",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", default=None, help="JSON run configuration")
        p.add_argument("--out", default=None, help="output directory or file")
        if checkpoint:
            p.add_argument("checkpoint", help="policy checkpoint JSON")

    common(sub.add_parser("synth", help="generate a synthetic profile CSV"))
    p_train = sub.add_parser("train", help="train one agent per configured seed")
    common(p_train)
    p_train.add_argument("--seed", type=int, default=None, help="train this seed only")
    p_eval = sub.add_parser("eval", help="score a checkpoint on the eval days")
    common(p_eval, checkpoint=True)
    p_eval.add_argument("--trace", action="store_true", help="write a per-step trace")
    p_export = sub.add_parser("export", help="render a tree checkpoint as text or DOT")
    common(p_export, checkpoint=True)
    p_export.add_argument("--format", choices=("text", "dot"), default="text")
    p_export.add_argument(
        "--raw-units", action="store_true",
        help="report thresholds in raw feature units instead of scaled ones",
    )
    p_oracle = sub.add_parser("oracle", help="optimal dispatch for one day")
    common(p_oracle)
    p_oracle.add_argument("--day", type=int, default=0, help="day index")
    p_oracle.add_argument("--method", choices=("dp", "exhaustive"), default="dp")
    p_oracle.add_argument("--horizon", type=int, default=None)
    common(sub.add_parser("compare", help="benchmark every arm on the eval days"))
    return parser


def main(argv=None) -> int:
    level = os.environ.get("SOFTTREE_LOG", "error").lower()
    if level not in LOG_LEVELS:
        print(
            f"error: SOFTTREE_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}",
            file=sys.stderr,
        )
        return 2
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "synth":
            return cmd_synth(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out, args.seed)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.out, args.trace)
        if args.command == "export":
            return cmd_export(cfg, args.checkpoint, args.out, args.format, args.raw_units)
        if args.command == "oracle":
            return cmd_oracle(cfg, args.day, args.out, args.method, args.horizon)
        if args.command == "compare":
            return cmd_compare(cfg, args.out)
        raise ValueError(f"unknown command {args.command!r}")
    except (ConfigError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
