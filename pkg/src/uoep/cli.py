"""Command-line front end: ``uoep <subcommand> [flags]``.

Every run writes into ``--out``: the resolved config (``config.txt``), a seed
record, ``metrics.jsonl``, ``curves.csv`` and ``checkpoints/``. Exit status is
0 on success, 2 on usage errors and 3 when a run fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .bandit import BanditState
from .critic import CriticNet, quantile_curve
from .env import (EnvConfig, RecEnv, gen_population, load_interaction_log, load_population,
                  save_population)
from .experiments import (ABLATIONS, GROUP_ALPHAS, NOISE_LEVELS, ablation_config,
                          final_evaluation, group_noise_study, m_config)
from .population import Actor, Population, PopulationConfig
from .trainer import (TrainConfig, TrainingAborted, TrainResult, config_dict, empty_record,
                      evaluate, train)

log = logging.getLogger("uoep")

SUBCOMMANDS = ("gen-data", "train", "evaluate", "ablate", "sweep-m", "group-noise-study",
               "probe-quantiles", "dump-actions")


class UsageError(ValueError):
    """Bad config key or value; reported with exit status 2."""


# ---------------------------------------------------------------------------
# experiment config: a flat key = value map

_ENV_DEFAULTS = {
    "env": "synthetic",
    "data_seed": 0,
    "num_users": 200,
    "num_items": 300,
    "dim": 8,
    "heterogeneity": 1.0,
    "population_file": "",
    "list_size": 10,
    "max_depth": 20,
    "recency": 0.8,
    "final_eval_episodes": 200,
    "final_eval_seed": 10_007,
}
_TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name not in ("population", "user_pool")]
_POP_KEYS = ["m", "alphas", "beta", "horizon", "length_scale", "grouping", "jitter"]


def default_config() -> dict:
    cfg = {k: v for k, v in config_dict(TrainConfig()).items() if k in _TRAIN_KEYS}
    pop = PopulationConfig()
    cfg.update({k: getattr(pop, k) for k in _POP_KEYS})
    cfg["ablation"] = "none"
    cfg.update(_ENV_DEFAULTS)
    return cfg


def _coerce(key: str, raw: str, default):
    text = raw.strip()
    try:
        if key == "horizon":
            return None if text.lower() in ("", "none") else int(text)
        if isinstance(default, bool):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in text.replace(",", " ").split() if p]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {raw!r}") from exc
    return text


def parse_config_text(text: str, base: dict | None = None, source: str = "<config>") -> dict:
    """Merge ``key = value`` lines into ``base``; ``#`` starts a comment."""
    cfg = dict(default_config() if base is None else base)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in cfg:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        cfg[key] = _coerce(key, value, default_config()[key])
    return cfg


def format_config(cfg: dict) -> str:
    def fmt(v):
        if v is None:
            return "none"
        if isinstance(v, tuple):
            return ", ".join(repr(x) for x in v)
        return repr(v) if isinstance(v, float) else str(v)
    return "".join(f"{k} = {fmt(v)}\n" for k, v in cfg.items())


def resolve_train_config(cfg: dict) -> TrainConfig:
    try:
        m = cfg["m"]
        alphas = cfg["alphas"]
        if len(alphas) != m and alphas == PopulationConfig().alphas:
            alphas = tuple((k + 1) / m for k in range(m))  # --m alone -> uniform grid
        pop = PopulationConfig(m=m, alphas=alphas, beta=cfg["beta"], horizon=cfg["horizon"],
                               length_scale=cfg["length_scale"], grouping=cfg["grouping"],
                               jitter=cfg["jitter"])
        tc = TrainConfig(population=pop, **{k: cfg[k] for k in _TRAIN_KEYS})
        if cfg["ablation"] != "none":
            tc = ablation_config(tc, cfg["ablation"])
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return tc


def build_env(cfg: dict) -> RecEnv:
    env_cfg = EnvConfig(list_size=cfg["list_size"], max_depth=cfg["max_depth"],
                        recency=cfg["recency"])
    spec = cfg["env"]
    if spec == "synthetic":
        if cfg["population_file"]:
            users, catalog = load_population(cfg["population_file"])
        else:
            users, catalog = gen_population(cfg["data_seed"], cfg["num_users"],
                                            cfg["num_items"], cfg["dim"], cfg["heterogeneity"])
        return RecEnv(users, catalog, config=env_cfg)
    if spec.startswith("csv:"):
        fitted = load_interaction_log(spec[4:], dim=cfg["dim"], seed=cfg["data_seed"])
        return fitted.to_env(env_cfg)
    raise UsageError(f"--env must be 'synthetic' or 'csv:<path>', got {spec!r}")


# ---------------------------------------------------------------------------
# outputs

def emit_metrics(records, path, m: int) -> None:
    """Write ``metrics.jsonl`` and ``curves.csv`` into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            full = empty_record()
            full.update(rec)
            fh.write(json.dumps(full, sort_keys=False, allow_nan=False) + "\n")
    with open(out / "curves.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"actor_{i}" for i in range(m)])
        for rec in records:
            per = rec.get("per_actor_return") or [None] * m
            w.writerow([rec["step"]] + ["" if v is None else repr(float(v)) for v in per])


def save_checkpoints(result: TrainResult, cfg: dict, path) -> None:
    ck = Path(path)
    ck.mkdir(parents=True, exist_ok=True)
    result.critic.save(ck / "critic.bin")
    for actor in result.population:
        actor.save(ck / f"actor_{actor.index}.bin")
    (ck / "bandit.json").write_text(json.dumps(result.bandit.to_dict(), indent=2) + "\n")
    (ck / "config.txt").write_text(format_config(cfg))


def load_run(run_dir) -> tuple[dict, Population, CriticNet, BanditState]:
    run = Path(run_dir)
    cfg = parse_config_text((run / "config.txt").read_text(), source=str(run / "config.txt"))
    ck = run / "checkpoints"
    critic = CriticNet.load(ck / "critic.bin")
    actors = [Actor.load(ck / f"actor_{i}.bin") for i in range(cfg["m"])]
    pop = Population(actors, PopulationConfig(m=cfg["m"], alphas=tuple(a.alpha for a in actors)))
    bandit = BanditState.from_dict(json.loads((ck / "bandit.json").read_text()))
    return cfg, pop, critic, bandit


def _write_run(out: Path, cfg: dict, tc: TrainConfig, result: TrainResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    (out / "seed.json").write_text(json.dumps(
        {"seed": tc.seed, "data_seed": cfg["data_seed"],
         "streams": "SeedSequence(seed).spawn(6)"}, indent=2) + "\n")
    emit_metrics(result.records, out, len(result.population))
    save_checkpoints(result, cfg, out / "checkpoints")


def _train_run(cfg: dict, out: Path, env: RecEnv | None = None) -> TrainResult:
    tc = resolve_train_config(cfg)
    env = build_env(cfg) if env is None else env
    log.info("training %d steps, m=%d, seed=%d -> %s", tc.total_steps, tc.population.m,
             tc.seed, out)
    try:
        result = train(tc, env, callback=lambda r: log.info(
            "step %d: return %.3f", r["step"], r["total_reward_mean"]))
    except TrainingAborted as exc:
        _write_run(out, cfg, tc, exc.result)
        raise
    _write_run(out, cfg, tc, result)
    return result


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    users, catalog = gen_population(cfg["data_seed"], cfg["num_users"], cfg["num_items"],
                                    cfg["dim"], cfg["heterogeneity"])
    save_population(out / "population.bin", users, catalog)
    (out / "config.txt").write_text(format_config(cfg))
    print(out / "population.bin")


def cmd_train(args, cfg):
    _train_run(cfg, Path(args.out))


def cmd_ablate(args, cfg):
    if cfg["ablation"] == "none":
        raise UsageError("ablate needs --ablation (or 'ablation = ...' in the config)")
    _train_run(cfg, Path(args.out))


def cmd_evaluate(args, cfg):
    run_cfg, pop, critic, _ = load_run(args.run)
    env = build_env(run_cfg)
    episodes = args.episodes or run_cfg["final_eval_episodes"]
    rep = evaluate(pop, critic, env, episodes, np.random.default_rng(run_cfg["final_eval_seed"]),
                   n_samples=run_cfg["n_inference_samples"])
    rec = empty_record()
    rec.update(rep.metrics)
    rec["step"] = run_cfg["total_steps"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "evaluation.json").write_text(json.dumps(rec, indent=2) + "\n")
    print(json.dumps({k: rec[k] for k in ("total_reward_mean", "depth_mean", "cvar_0.3",
                                          "gini")}))


def cmd_sweep_m(args, cfg):
    out = Path(args.out)
    env = build_env(cfg)
    rows = []
    for m in range(2, 7):
        sub = dict(cfg, m=m, alphas=tuple((k + 1) / m for k in range(m)))
        res = _train_run(sub, out / f"m{m}", env)
        rep = final_evaluation(res, env, cfg["final_eval_episodes"], cfg["final_eval_seed"])
        rows.append((m, rep.metrics["total_reward_mean"], rep.metrics["depth_mean"]))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "total_reward", "depth"])
        w.writerows(rows)


def cmd_group_noise_study(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    env = build_env(cfg)
    tc = resolve_train_config(cfg)
    study = group_noise_study(tc, env, alphas=GROUP_ALPHAS, noises=NOISE_LEVELS,
                              seeds=tuple(cfg["seed"] + k for k in range(4)),
                              eval_episodes=cfg["final_eval_episodes"],
                              eval_seed=cfg["final_eval_seed"],
                              progress=lambda a, s, k, r: log.info(
                                  "group %.1f noise %.1f seed %d: %.3f", a, s, k, r))
    (out / "config.txt").write_text(format_config(cfg))
    with open(out / "matrix.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group_alpha"] + [f"noise_{s}" for s in study.noises])
        for a, row in zip(study.alphas, study.matrix):
            w.writerow([a] + [repr(float(v)) for v in row])
    with open(out / "cells.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group_alpha", "noise", "seed", "total_reward"])
        for g, a in enumerate(study.alphas):
            for j, s in enumerate(study.noises):
                for k, seed in enumerate(study.seeds):
                    w.writerow([a, s, seed, repr(float(study.returns[g, j, k]))])
    print(json.dumps({str(a): s for a, s in study.best_noise().items()}))


def _probe_states(env: RecEnv, users) -> np.ndarray:
    return np.stack([env.encode_state(env.reset(int(u))) for u in users])


def cmd_probe_quantiles(args, cfg):
    run_cfg, pop, critic, _ = load_run(args.run)
    if critic.deterministic:
        raise UsageError("probe-quantiles needs a distributional critic")
    env = build_env(run_cfg)
    state = _probe_states(env, [args.user])[0]
    taus = np.linspace(0.01, 0.99, args.points)
    curves = [quantile_curve(critic, state, actor(state)[None], taus) for actor in pop]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "quantiles.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau"] + [f"actor_{a.index}" for a in pop])
        for k, t in enumerate(taus):
            w.writerow([repr(float(t))] + [repr(float(c[k])) for c in curves])


def cmd_dump_actions(args, cfg):
    run_cfg, pop, _, _ = load_run(args.run)
    env = build_env(run_cfg)
    states = _probe_states(env, range(env.num_users))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "actions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["actor_id", "user_id"] + [f"a_{k}" for k in range(env.action_dim)])
        for actor in pop:
            for u, a in enumerate(actor(states)):
                w.writerow([actor.index, u] + [repr(float(x)) for x in a])


_HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate,
    "ablate": cmd_ablate, "sweep-m": cmd_sweep_m, "group-noise-study": cmd_group_noise_study,
    "probe-quantiles": cmd_probe_quantiles, "dump-actions": cmd_dump_actions,
}


_HELP = {
    "gen-data": "draw a synthetic population and save it",
    "train": "train the actor population",
    "evaluate": "evaluate a trained run",
    "ablate": "train with one component switched off",
    "sweep-m": "train one run per population size 2..6",
    "group-noise-study": "baseline return per activity group and exploration noise",
    "probe-quantiles": "dump the critic's quantile curve for each actor",
    "dump-actions": "dump every actor's action on each user's opening state",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="runs/latest", help="output directory")
    common.add_argument("--steps", type=int, help="total training steps")
    common.add_argument("--m", type=int, help="number of actors")
    common.add_argument("--alphas", help="comma-separated quantile levels")
    common.add_argument("--beta", type=float)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--noise", type=float)
    common.add_argument("--ablation", choices=[a for a in ABLATIONS if a != "no-both"])
    common.add_argument("--env", help="'synthetic' or 'csv:<path>'")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="uoep",
        description="Train and evaluate a CVaR actor population on a simulated recommender.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common], help=_HELP[name])
        if name in ("evaluate", "probe-quantiles", "dump-actions"):
            p.add_argument("--run", required=True, help="run directory written by train")
        if name == "evaluate":
            p.add_argument("--episodes", type=int)
        if name == "probe-quantiles":
            p.add_argument("--user", type=int, default=0)
            p.add_argument("--points", type=int, default=99)
    return parser


def resolve_args(args) -> dict:
    cfg = default_config()
    if args.config:
        cfg = parse_config_text(Path(args.config).read_text(encoding="utf-8"), cfg, args.config)
    overrides = list(args.set)
    for key, val in (("seed", args.seed), ("total_steps", args.steps), ("m", args.m),
                     ("alphas", args.alphas), ("beta", args.beta), ("lam", args.lam),
                     ("noise", args.noise), ("ablation", args.ablation), ("env", args.env)):
        if val is not None:
            overrides.append(f"{key} = {val}")
    return parse_config_text("\n".join(overrides), cfg, "<command line>")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_args(args)
        _HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"uoep: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAborted, OSError, ValueError, FloatingPointError) as exc:
        print(f"uoep: run failed: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
