"""The actor population and every loss term that shapes it."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit

from .critic import CriticNet, sample_taus
from .nn import (MlpSpec, init_params, mlp_backward, mlp_forward, read_params, soft_update,
                 write_params)


@dataclass
class PopulationConfig:
    m: int = 5
    alphas: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    beta: float = 0.5
    horizon: int | None = None  # decay horizon in steps; None -> half the training run
    length_scale: float = 1.0
    grouping: str = "nested"
    jitter: float = 1e-4

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        if self.m != len(self.alphas):
            raise ValueError(f"m={self.m} but {len(self.alphas)} quantile levels given")
        if any(not 0.0 < a <= 1.0 for a in self.alphas):
            raise ValueError("quantile levels must lie in (0, 1]")
        if list(self.alphas) != sorted(self.alphas):
            raise ValueError("quantile levels must be sorted ascending")
        if self.grouping == "disjoint" and len(set(self.alphas)) != len(self.alphas):
            raise ValueError("disjoint grouping needs distinct quantile levels")
        if self.beta <= 0 or self.length_scale <= 0:
            raise ValueError("beta and length_scale must be positive")
        if self.grouping not in ("nested", "disjoint"):
            raise ValueError(f"unknown grouping mode {self.grouping!r}")


def uniform_alphas(m: int) -> tuple:
    """Quantile levels ``1/m, 2/m, ..., 1``."""
    return tuple((k + 1) / m for k in range(m))


class Actor:
    """Deterministic policy ``state -> action vector`` plus its target copy."""

    def __init__(self, index: int, alpha: float, state_dim: int, action_dim: int, *,
                 hidden=(64, 64), output: str = "identity", seed: int = 0):
        self.index = index
        self.alpha = float(alpha)
        self.spec = MlpSpec.build((state_dim, *hidden, action_dim), output=output, seed=seed)
        self.params = init_params(self.spec)
        self.target = self.params.copy()

    @property
    def action_dim(self) -> int:
        return self.spec.out_dim

    def forward(self, states, target: bool = False):
        return mlp_forward(self.spec, self.target if target else self.params, states)

    def backward(self, tape, d_actions) -> np.ndarray:
        grad, _ = mlp_backward(tape, d_actions)
        return grad

    def __call__(self, states, target: bool = False) -> np.ndarray:
        return self.forward(states, target)[0]

    def soft_update(self, mu: float) -> None:
        self.target = soft_update(self.target, self.params, mu)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(b"UOEPACT1")
            fh.write(struct.pack("<Id", self.index, self.alpha))
            fh.write(struct.pack("<I", len(self.spec.activations)))
            for act in self.spec.activations:
                fh.write(act.encode().ljust(8, b" "))
            write_params(fh, self.params)
            write_params(fh, self.target)

    @classmethod
    def load(cls, path) -> "Actor":
        with open(path, "rb") as fh:
            if fh.read(8) != b"UOEPACT1":
                raise ValueError(f"{path} is not an actor checkpoint")
            index, alpha = struct.unpack("<Id", fh.read(12))
            (n,) = struct.unpack("<I", fh.read(4))
            acts = [fh.read(8).decode().strip() for _ in range(n)]
            params, target = read_params(fh), read_params(fh)
        dims = [i for i, _ in params.shapes] + [params.shapes[-1][1]]
        actor = cls(index, alpha, dims[0], dims[-1], hidden=tuple(dims[1:-1]), output=acts[-1])
        actor.spec = MlpSpec(tuple(dims), tuple(acts))
        actor.params, actor.target = params, target
        return actor


def top_n(scores, n: int) -> np.ndarray:
    """Indices of the ``n`` largest scores; ties go to the smaller index.

    Accepts one score vector or a batch of rows.
    """
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :n]


def act(actor: Actor, s, item_embeddings: np.ndarray, n: int):
    """Action vector for state ``s`` and the top-``n`` items by dot-product score."""
    a = actor(np.asarray(s, dtype=np.float64))
    return a, top_n(a @ item_embeddings.T, n)


def decayed_alpha(alpha: float, beta: float, t_step: int, horizon: float) -> float:
    """``max(alpha, 1 - beta * (1 - alpha) * t)`` with ``t = t_step / horizon``."""
    if horizon <= 0:
        raise ValueError("decay horizon must be positive")
    t = t_step / horizon
    return max(alpha, 1.0 - beta * (1.0 - alpha) * t)


# ---------------------------------------------------------------------------
# CVaR actor loss

def actor_loss_from_actions(critic: CriticNet, states, actions, taus):
    """``-mean Z(s, a; tau)`` over the batch and the given tau grid, with d/d(actions).

    Critic parameters are read, never updated.
    """
    z, tape = critic.forward(states, actions, taus)
    b, k = z.shape
    _, d_actions = critic.backward(tape, np.full_like(z, -1.0 / (b * k)), param_grad=False)
    return -float(z.mean()), d_actions


def population_actor_losses(critic: CriticNet, states, actions: list, taus: list):
    """:func:`actor_loss_from_actions` for several actors on one shared state batch.

    All actors go through the critic in a single stacked pass; each loss is
    still the mean over its own ``B * K`` block.
    """
    m, b = len(actions), states.shape[0]
    k = taus[0].shape[1]
    z, tape = critic.forward(np.tile(states, (m, 1)), np.concatenate(actions),
                             np.concatenate(taus))
    _, d_all = critic.backward(tape, np.full_like(z, -1.0 / (b * k)), param_grad=False)
    losses = [-float(z[i * b:(i + 1) * b].mean()) for i in range(m)]
    return losses, [d_all[i * b:(i + 1) * b] for i in range(m)]


def quantile_window(grouping: str, alpha_t: float, alpha_lo: float = 0.0) -> tuple:
    """Sampling interval for the actor's taus: ``(0, alpha_t)`` or ``(alpha_lo, alpha_t)``."""
    return (0.0, alpha_t) if grouping == "nested" else (alpha_lo, alpha_t)


def actor_loss(actor: Actor, critic: CriticNet, states, n_samples: int,
               rng: np.random.Generator, grouping: str = "nested", alpha_t: float = 1.0,
               alpha_lo: float = 0.0, taus=None):
    """Negative Monte-Carlo CVaR of the actor's own actions; returns (loss, param grad)."""
    if n_samples < 1:
        raise ValueError("need at least one tau sample")
    states = np.asarray(states, dtype=np.float64)
    if taus is None:
        lo, hi = quantile_window(grouping, alpha_t, alpha_lo)
        taus = sample_taus(rng, lo, hi, (states.shape[0], n_samples))
    actions, tape = actor.forward(states)
    loss, d_actions = actor_loss_from_actions(critic, states, actions, taus)
    return loss, actor.backward(tape, d_actions)


# ---------------------------------------------------------------------------
# diversity

def normalize_rows(x):
    """Row-wise L2 normalization; zero rows stay zero."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return x / safe, norms


def normalize_rows_backward(unit, norms, grad_unit):
    """Pull a gradient on the normalized rows back to the raw rows."""
    radial = np.sum(unit * grad_unit, axis=-1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return np.where(norms > 0.0, (grad_unit - unit * radial) / safe, 0.0)


def behavior_embedding(actor: Actor, states) -> np.ndarray:
    """The actor's L2-normalized actions on a shared state batch, flattened."""
    unit, _ = normalize_rows(actor(np.atleast_2d(states)))
    return unit.ravel()


def se_kernel(x1, x2, length_scale: float = 1.0) -> float:
    if length_scale <= 0:
        raise ValueError("length scale must be positive")
    x1, x2 = np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError("kernel arguments differ in shape")
    d = x1 - x2
    return float(np.exp(-np.dot(d, d) / (2.0 * length_scale ** 2)))


def kernel_matrix(embeddings, length_scale: float = 1.0) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    sq = np.sum(e * e, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * e @ e.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.exp(-d2 / (2.0 * length_scale ** 2))


@dataclass
class DiversityResult:
    loss: float
    grad: np.ndarray
    jitter: float
    skipped: bool = False
    escalations: int = 0


def diversity_loss(embeddings, length_scale: float = 1.0, jitter: float = 1e-4,
                   max_escalations: int = 3) -> DiversityResult:
    """``-log det(K + jitter * I)`` over the SE-kernel matrix of the embeddings.

    On a failed Cholesky the jitter is multiplied by 10, at most
    ``max_escalations`` times; after that the result is flagged ``skipped`` with
    an infinite loss and a zero gradient.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    m = e.shape[0]
    k0 = kernel_matrix(e, length_scale)
    j = float(jitter)
    for attempt in range(max_escalations + 1):
        try:
            factor = cho_factor(k0 + j * np.eye(m), lower=True)
            diag = np.diag(factor[0])
            if np.any(diag <= 0.0) or not np.all(np.isfinite(diag)):
                raise LinAlgError("non-positive pivot")
        except LinAlgError:
            if attempt == max_escalations:
                break
            j *= 10.0
            continue
        loss = -2.0 * float(np.sum(np.log(diag)))
        w = cho_solve(factor, np.eye(m)) * k0
        grad = (2.0 / length_scale ** 2) * (w.sum(axis=1)[:, None] * e - w @ e)
        return DiversityResult(loss, grad, j, False, attempt)
    return DiversityResult(float("inf"), np.zeros_like(e), j, True, max_escalations)


# ---------------------------------------------------------------------------
# supervision

def supervision_loss_from_actions(actions, items, feedback, item_embeddings):
    """Binary cross-entropy of ``sigmoid(a . v_item)`` against clicks, with d/d(actions).

    Averaged over the ``n`` exposed items and the batch.
    """
    actions = np.asarray(actions, dtype=np.float64)
    v = item_embeddings[np.asarray(items)]  # (B, n, d)
    logits = np.einsum("bnd,bd->bn", v, actions)
    y = np.asarray(feedback, dtype=np.float64)
    loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
    d_logits = (expit(logits) - y) / y.size
    return loss, np.einsum("bn,bnd->bd", d_logits, v)


def supervision_loss(actor: Actor, batch, item_embeddings):
    actions, tape = actor.forward(batch.states)
    loss, d_actions = supervision_loss_from_actions(actions, batch.items, batch.feedback,
                                                    item_embeddings)
    return loss, actor.backward(tape, d_actions)


def total_loss(actor_losses, sup_losses, div_loss: float, lam1: float, lam2: float) -> float:
    if lam1 < 0 or lam2 < 0:
        raise ValueError("loss coefficients must be nonnegative")
    total = float(np.sum(actor_losses)) + lam1 * float(np.sum(sup_losses))
    if lam2 != 0.0:
        total += lam2 * div_loss
    return total


@dataclass
class Population:
    actors: list
    config: PopulationConfig = field(default_factory=PopulationConfig)

    def __len__(self) -> int:
        return len(self.actors)

    def __iter__(self):
        return iter(self.actors)

    def __getitem__(self, i) -> Actor:
        return self.actors[i]


def make_population(config: PopulationConfig, state_dim: int, action_dim: int, *,
                    hidden=(64, 64), output: str = "identity", seed: int = 0) -> Population:
    actors = [Actor(i, a, state_dim, action_dim, hidden=hidden, output=output,
                    seed=seed + 101 * (i + 1))
              for i, a in enumerate(config.alphas)]
    return Population(actors, config)
