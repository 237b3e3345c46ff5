"""Experiment presets: ablation variants, the population-size sweep and the group-noise study."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .env import RecEnv
from .population import uniform_alphas
from .trainer import EvalReport, TrainConfig, TrainResult, ddpg_baseline, evaluate, train

ABLATIONS = ("det-critic", "no-div", "no-sta", "no-both", "disjoint")
GROUP_ALPHAS = (0.2, 0.4, 0.6, 0.8, 1.0)
NOISE_LEVELS = (0.1, 0.2, 0.3, 0.4)


def ablation_config(config: TrainConfig, variant: str) -> TrainConfig:
    """Apply one named ablation to ``config``; ``"full"`` returns it unchanged.

    The base config must not already carry an ablation flag, so two variants
    can never be stacked by accident.
    """
    if variant != "full" and variant not in ABLATIONS:
        raise ValueError(f"unknown ablation {variant!r}; choose from {ABLATIONS}")
    flags = [name for name, on in (("deterministic_critic", config.deterministic_critic),
                                   ("no_div", config.no_div), ("no_sta", config.no_sta),
                                   ("disjoint", config.population.grouping == "disjoint"))
             if on]
    if variant == "full":
        return config
    if flags:
        raise ValueError(f"config already sets {flags}; ablations do not stack")
    if variant == "det-critic":
        return replace(config, deterministic_critic=True)
    if variant == "no-div":
        return replace(config, no_div=True)
    if variant == "no-sta":
        return replace(config, no_sta=True)
    if variant == "no-both":
        return replace(config, no_div=True, no_sta=True)
    return replace(config, population=replace(config.population, grouping="disjoint"))


def run_ablation(config: TrainConfig, env: RecEnv, variant: str, callback=None) -> TrainResult:
    return train(ablation_config(config, variant), env, callback)


def m_config(config: TrainConfig, m: int) -> TrainConfig:
    """Same config with ``m`` actors on the uniform quantile grid ``1/m, ..., 1``."""
    return replace(config, population=replace(config.population, m=m, alphas=uniform_alphas(m)))


def sweep_m(config: TrainConfig, env: RecEnv, ms=(2, 3, 4, 5, 6), callback=None):
    """Train one run per population size; yields ``(m, result)`` as each finishes."""
    for m in ms:
        yield m, train(m_config(config, m), env, callback)


def final_evaluation(result: TrainResult, env: RecEnv, episodes: int, seed: int,
                     users=None) -> EvalReport:
    """Noise-free evaluation of a trained run on a fixed, run-independent seed."""
    return evaluate(result.population, result.critic, env, episodes,
                    np.random.default_rng(seed), n_samples=result.config.n_inference_samples,
                    users=users, step=result.config.total_steps)


def activity_groups(env: RecEnv, alphas=GROUP_ALPHAS) -> dict:
    """Bottom-``alpha`` user groups by simulated activity (expected CTR), least active first."""
    order = np.argsort(env.activity(), kind="stable")
    groups = {}
    for alpha in alphas:
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"group fraction must lie in (0, 1], got {alpha}")
        size = max(1, int(round(alpha * order.size)))
        groups[float(alpha)] = np.sort(order[:size])
    return groups


@dataclass
class NoiseStudy:
    alphas: tuple
    noises: tuple
    seeds: tuple
    returns: np.ndarray  # (groups, noises, seeds)

    @property
    def matrix(self) -> np.ndarray:
        """Seed-mean return per (group, noise) cell."""
        return self.returns.mean(axis=2)

    def best_noise(self) -> dict:
        """Noise level with the highest seed-mean return for each group (first on ties)."""
        m = self.matrix
        return {a: self.noises[int(np.argmax(m[g]))] for g, a in enumerate(self.alphas)}


def group_noise_study(config: TrainConfig, env: RecEnv, *, alphas=GROUP_ALPHAS,
                      noises=NOISE_LEVELS, seeds=(0, 1, 2, 3), eval_episodes: int = 100,
                      eval_seed: int = 10_007, progress=None) -> NoiseStudy:
    """Train the single-actor baseline on each bottom-alpha group under each noise level.

    Each cell's return is a final noise-free evaluation restricted to the
    group's users.
    """
    groups = activity_groups(env, alphas)
    base = ddpg_baseline(config)
    out = np.zeros((len(alphas), len(noises), len(seeds)))
    for g, alpha in enumerate(alphas):
        users = groups[float(alpha)]
        for j, sigma in enumerate(noises):
            for k, seed in enumerate(seeds):
                cfg = replace(base, noise=float(sigma), seed=int(seed),
                              user_pool=tuple(int(u) for u in users))
                res = train(cfg, env)
                rep = final_evaluation(res, env, eval_episodes, eval_seed, users)
                out[g, j, k] = rep.metrics["total_reward_mean"]
                if progress is not None:
                    progress(alpha, sigma, seed, out[g, j, k])
    return NoiseStudy(tuple(alphas), tuple(noises), tuple(seeds), out)


def pooled_se(a, b) -> float:
    """Standard error of ``mean(a) - mean(b)`` from the two sample variances."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size))
