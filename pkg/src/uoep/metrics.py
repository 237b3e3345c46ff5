"""Statistics over simulated session outcomes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OutcomeSet:
    total_rewards: list = field(default_factory=list)
    depths: list = field(default_factory=list)
    exposed: list = field(default_factory=list)  # every shown list, as item-id arrays

    def __len__(self) -> int:
        return len(self.total_rewards)


def _values(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("need at least one value")
    return v


def _tail_count(n: int, alpha: float) -> int:
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    # guard against alpha * n landing a hair above an integer
    return max(1, math.ceil(round(alpha * n, 9)))


def empirical_cvar(values, alpha: float) -> float:
    """Mean of the lowest ``ceil(alpha * n)`` values."""
    v = _values(values)
    k = _tail_count(v.size, alpha)
    return float(np.sort(v, kind="stable")[:k].mean())


def atr_top(values, alpha: float) -> float:
    """Mean of the highest ``ceil(alpha * n)`` values."""
    v = _values(values)
    k = _tail_count(v.size, alpha)
    return float(np.sort(v, kind="stable")[v.size - k:].mean())


def gini_defined(values) -> bool:
    """True when the total is positive beyond rounding of the summands."""
    v = _values(values)
    return math.fsum(v) > 1e-12 * math.fsum(np.abs(v))


def gini(values) -> float:
    """``sum_{x,y} |f(x) - f(y)| / (2 n sum f)`` via sorted prefix sums."""
    v = np.sort(_values(values))
    if not gini_defined(v):
        raise ValueError(f"Gini is undefined for a nonpositive total ({math.fsum(v):g})")
    total = v.sum()
    n = v.size
    # each sorted value v_k exceeds the k smaller ones: contributes (2k - n + 1) * v_k
    ranks = 2.0 * np.arange(n) - n + 1.0
    return float(2.0 * np.dot(ranks, v) / (2.0 * n * total))


def gini_bruteforce(values) -> float:
    v = _values(values)
    return float(np.abs(v[:, None] - v[None, :]).sum() / (2.0 * v.size * v.sum()))


def distinct_exposed(lists) -> int:
    seen = set()
    for lst in lists:
        seen.update(int(i) for i in np.asarray(lst).ravel())
    return len(seen)


def coverage(lists, catalog_size: int, session_count: int | None = None) -> float:
    """Distinct items shown divided by ``catalog_size * total exposed positions``.

    ``session_count`` is accepted for interface symmetry; the normalization is
    per exposed position.
    """
    if catalog_size <= 0:
        raise ValueError("catalog size must be positive")
    positions = sum(np.asarray(lst).size for lst in lists)
    if positions == 0:
        return 0.0
    return distinct_exposed(lists) / (catalog_size * positions)


def ils(items, categories) -> float:
    """Share of unordered item pairs in the list that share a category."""
    items = np.asarray(items).ravel()
    k = items.size
    if k < 2:
        raise ValueError("intra-list similarity needs at least two items")
    cats = np.asarray(categories)[items]
    same = (cats[:, None] == cats[None, :]).sum() - k
    return float(same / (k * (k - 1)))


def mean_ils(lists, categories) -> float | None:
    vals = [ils(lst, categories) for lst in lists if np.asarray(lst).size >= 2]
    return float(np.mean(vals)) if vals else None


def summarize(outcomes: OutcomeSet, catalog_size: int, categories) -> dict:
    """Aggregate record; metrics that cannot be computed come back as ``None``."""
    rewards = np.asarray(outcomes.total_rewards, dtype=np.float64)
    depths = np.asarray(outcomes.depths, dtype=np.float64)
    rec = dict.fromkeys(["total_reward_mean", "total_reward_std", "depth_mean", "cvar_0.3",
                         "cvar_0.4", "atr_0.4", "atr_0.5", "gini", "coverage", "ils"])
    if rewards.size:
        rec.update({
            "total_reward_mean": float(rewards.mean()),
            "total_reward_std": float(rewards.std()),
            "depth_mean": float(depths.mean()),
            "cvar_0.3": empirical_cvar(rewards, 0.3),
            "cvar_0.4": empirical_cvar(rewards, 0.4),
            "atr_0.4": atr_top(rewards, 0.4),
            "atr_0.5": atr_top(rewards, 0.5),
        })
        if gini_defined(rewards):
            rec["gini"] = gini(rewards)
    if outcomes.exposed:
        rec["coverage"] = coverage(outcomes.exposed, catalog_size, len(outcomes))
        rec["ils"] = mean_ils(outcomes.exposed, categories)
    return rec
