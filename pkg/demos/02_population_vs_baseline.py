"""
A population of risk-aware actors against a single DDPG-style actor
===================================================================

Both learners face the same synthetic recommender: 200 users whose click
rates vary widely, 300 items, sessions that end when the user loses patience.

The population trains five actors, each aimed at a different lower quantile
of the return distribution. At serving time the critic picks whichever
actor's proposal it expects to earn the most. The baseline has one actor and
a scalar critic.

Short runs are noisy; the full comparison uses 20k steps and five seeds.

Usage: python demos/02_population_vs_baseline.py [steps] [seed]
"""
import sys

import numpy as np

from uoep.env import RecEnv, gen_population
from uoep.experiments import final_evaluation
from uoep.trainer import TrainConfig, ddpg_baseline, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 4000
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

users, catalog = gen_population(0, 200, 300, 8, 1.0)
env = RecEnv(users, catalog)
print(f"{env.num_users} users, {len(catalog)} items, state width {env.state_dim}")


def progress(rec):
    print(f"  step {rec['step']:>6}: mean return {rec['total_reward_mean']:.2f}")


config = TrainConfig(total_steps=steps, seed=seed, eval_interval=max(steps // 4, 1))
print("\npopulation (m = 5):")
pop = train(config, env, progress)
print("baseline (m = 1):")
base = train(ddpg_baseline(config), env, progress)

# both are scored on the same fixed evaluation sessions
keys = ["total_reward_mean", "depth_mean", "cvar_0.3", "atr_0.4", "gini", "coverage"]
rows = {name: final_evaluation(res, env, 200, 10_007) for name, res in
        (("population", pop), ("baseline", base))}
print(f"\n{'metric':<18}" + "".join(f"{n:>12}" for n in rows))
for k in keys:
    vals = [rows[n].metrics[k] for n in rows]
    print(f"{k:<18}" + "".join("        None" if v is None else f"{v:12.4g}" for v in vals))

# how often the critic trusted each actor
choices = np.array(rows["population"].actor_choices)
print("\nactor chosen by the critic:",
      ", ".join(f"alpha={a.alpha:.1f}: {c / choices.sum():.0%}" for a, c in
                zip(pop.population, choices)))
