"""Two-armed Thompson sampler that picks which regularizer is switched on."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STABILITY, DIVERSITY = 0, 1
ARM_NAMES = ("stability", "diversity")


class NoPendingArmError(RuntimeError):
    pass


@dataclass
class BanditState:
    """Beta posteriors for the stability (0) and diversity (1) arms.

    Only successes are counted: a pull that is not followed by an improvement
    leaves both posteriors as they were.
    """
    lam: float = 16.0
    a: list = field(default_factory=lambda: [1, 1])
    b: list = field(default_factory=lambda: [1, 1])
    pending: int | None = None
    last_arm: int | None = None
    last_return: float | None = None

    def coefficients(self, arm: int | None) -> tuple[float, float]:
        if arm is None:
            return 0.0, 0.0
        return (self.lam, 0.0) if arm == STABILITY else (0.0, self.lam)

    def select_arm(self, rng: np.random.Generator) -> tuple[int, tuple[float, float]]:
        draws = rng.beta(self.a, self.b)
        arm = STABILITY if draws[STABILITY] >= draws[DIVERSITY] else DIVERSITY
        self.pending = self.last_arm = arm
        return arm, self.coefficients(arm)

    def update(self, success: bool) -> None:
        """Credit the pending arm with a Bernoulli outcome."""
        if self.pending is None:
            raise NoPendingArmError("no arm selected since the last observation")
        if success:
            self.a[self.pending] += 1
        self.pending = None

    def observe(self, new_return: float) -> int:
        """Reward ``1(new_return > previous return)``; the first call only records."""
        if self.pending is None:
            raise NoPendingArmError("no arm selected since the last observation")
        reward = int(self.last_return is not None and new_return > self.last_return)
        self.update(bool(reward))
        self.last_return = float(new_return)
        return reward

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "a": list(self.a), "b": list(self.b),
                "last_arm": None if self.last_arm is None else ARM_NAMES[self.last_arm],
                "last_return": self.last_return}

    @classmethod
    def from_dict(cls, d: dict) -> "BanditState":
        arm = d.get("last_arm")
        return cls(lam=d["lambda"], a=list(d["a"]), b=list(d["b"]),
                   last_arm=None if arm is None else ARM_NAMES.index(arm),
                   last_return=d.get("last_return"))
