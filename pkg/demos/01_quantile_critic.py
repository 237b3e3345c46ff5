"""
What the quantile critic learns
===============================

A single state, a single action and a return that is 0 or 1 with equal
probability. The true quantile function is a step: 0 below tau = 0.5, 1 above.

We fit the implicit-quantile critic twice. With a small Huber threshold kappa
the loss is plain quantile regression and the step is recovered. With
kappa = 1 every TD error lies inside the quadratic band, so the fit lands on
the tau-expectile instead, which for this return is the straight line Z = tau.

Usage: python demos/01_quantile_critic.py [steps]
"""
import sys

import numpy as np

from uoep.critic import CriticNet, CriticOptimizer, critic_loss
from uoep.replay import TransitionBatch

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 10_000
batch_size = 64
ones = np.ones((batch_size, 1))
filler = np.zeros((batch_size, 1), dtype=np.int64)


def fit(kappa, deterministic=False, seed=0):
    rng = np.random.default_rng(seed)
    net = CriticNet(1, 1, deterministic=deterministic, seed=seed)
    opt = CriticOptimizer(net, 1e-3)
    for _ in range(steps):
        rewards = rng.integers(0, 2, batch_size).astype(float)
        # gamma = 0 and terminal transitions: the target is the reward alone
        batch = TransitionBatch(ones, ones, filler, filler, rewards, ones,
                                np.ones(batch_size, bool), filler[:, 0])
        res = critic_loss(net, batch, ones, gamma=0.0, kappa=kappa, rng=rng)
        opt.step(net, res.grads)
        net.soft_update(0.01)
    return net


taus = np.array([0.05, 0.1, 0.3, 0.45, 0.55, 0.7, 0.9, 0.95])
print(f"training three critics for {steps} steps each ...")
sharp = fit(kappa=0.01)
smooth = fit(kappa=1.0)
scalar = fit(kappa=1.0, deterministic=True)

print(f"\n{'tau':>6} {'true':>6} {'kappa=0.01':>11} {'kappa=1':>8}")
for t, a, b in zip(taus, sharp.z_value([1.0], [1.0], taus), smooth.z_value([1.0], [1.0], taus)):
    print(f"{t:6.2f} {float(t > 0.5):6.1f} {a:11.3f} {b:8.3f}")

# the scalar critic ignores tau and settles on the mean
print(f"\nscalar critic estimate: {scalar.z_value([1.0], [1.0], [0.5])[0]:.3f} (mean 0.5)")
