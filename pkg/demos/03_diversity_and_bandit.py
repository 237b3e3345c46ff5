"""
The two regularizers and the bandit that switches between them
==============================================================

Diversity is scored by -log det of a squared-exponential kernel over the
actors' normalized actions: identical actors make the kernel singular and the
score blows up, spread-out actors drive it down.

Stability ties each actor to the logged clicks through a cross-entropy term.
A Thompson-sampling bandit decides, at each evaluation, which of the two gets
the full weight lambda.
"""
import numpy as np

from uoep.bandit import ARM_NAMES, BanditState
from uoep.population import diversity_loss, normalize_rows

rng = np.random.default_rng(0)
states = rng.normal(size=(16, 8))

# behavior embeddings: each actor's unit-length actions on a shared state batch
base = rng.normal(size=(16, 4))
print("diversity score (lower means more diverse):")
for spread in (0.0, 0.05, 0.3, 1.0, 3.0):
    actions = [base + spread * rng.normal(size=base.shape) for _ in range(5)]
    emb = np.stack([normalize_rows(a)[0].ravel() for a in actions])
    res = diversity_loss(emb, 1.0, 1e-4)
    note = f" (jitter raised {res.escalations}x)" if res.escalations else ""
    print(f"  spread {spread:4.2f}: {res.loss:8.3f}{note}")

# the bandit under fixed success rates: it should settle on the better arm
print("\nbandit with P(improvement) = 0.9 for stability, 0.1 for diversity:")
bandit = BanditState(lam=16.0)
picks = []
for t in range(2000):
    arm, (lam1, lam2) = bandit.select_arm(rng)
    picks.append(arm)
    bandit.update(rng.random() < (0.9 if arm == 0 else 0.1))
    if t + 1 in (10, 100, 500, 2000):
        share = np.mean(np.array(picks) == 0)
        print(f"  after {t + 1:>4} rounds: stability chosen {share:.0%}, posterior a = {bandit.a}")
print(f"last pick: {ARM_NAMES[picks[-1]]} with (lambda1, lambda2) = ({lam1}, {lam2})")
