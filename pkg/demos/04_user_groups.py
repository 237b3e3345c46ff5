"""
Low-activity users and the exploration noise that suits them
============================================================

Users are ranked by their expected click rate. The bottom 20% click far less
than everyone else, so their sessions end sooner and their returns are the
lower tail of the population's distribution.

This demo shows the gap under a random policy, then trains the single-actor
baseline on each group at a few exploration noise levels. The full study uses
20k steps and four seeds per cell; the defaults here are much shorter.

Usage: python demos/04_user_groups.py [steps]
"""
import sys

import numpy as np

from uoep.env import RecEnv, gen_population
from uoep.experiments import activity_groups, group_noise_study
from uoep.trainer import TrainConfig

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000

users, catalog = gen_population(0, 200, 300, 8, 1.0)
env = RecEnv(users, catalog)
groups = activity_groups(env, (0.2, 1.0))

# random lists: what each group's sessions look like before any learning
rng = np.random.default_rng(1)
for alpha, members in groups.items():
    totals, depths = [], []
    for u in rng.choice(members, 100):
        s, total = env.reset(int(u)), 0.0
        while not s.done:
            out = env.respond(s, rng.choice(len(catalog), 10, replace=False), rng)
            total, s = total + out.reward, out.state
        totals.append(total)
        depths.append(s.depth)
    print(f"bottom-{alpha:.1f} group ({len(members)} users): expected CTR "
          f"{env.activity()[members].mean():.3f}, random-policy return {np.mean(totals):.2f}, "
          f"depth {np.mean(depths):.1f}")

print(f"\ntraining the baseline for {steps} steps per cell ...")
study = group_noise_study(TrainConfig(total_steps=steps), env, alphas=(0.2, 1.0),
                          noises=(0.1, 0.2, 0.3, 0.4), seeds=(0, 1), eval_episodes=100)
print(f"{'group':<8}" + "".join(f"{'noise ' + str(s):>11}" for s in study.noises))
for alpha, row in zip(study.alphas, study.matrix):
    print(f"{alpha:<8}" + "".join(f"{v:11.3f}" for v in row))
print("best noise per group:", study.best_noise())
