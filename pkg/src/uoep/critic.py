"""Implicit-quantile critic ``Z(s, a; tau)`` and the estimators built on it."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .nn import (AdamState, MlpSpec, ParamSet, adam_step, init_params, mlp_backward,
                 mlp_forward, read_params, soft_update, write_params)


class QuantileFunction(Protocol):
    def z_value(self, s, a, taus) -> np.ndarray: ...


def sample_taus(rng: np.random.Generator, lo: float, hi: float, shape) -> np.ndarray:
    """Uniform draws strictly inside ``(lo, hi)``."""
    u = rng.integers(1, 2 ** 53, size=shape) / float(2 ** 53)
    return lo + (hi - lo) * u


def _check_taus(taus: np.ndarray) -> None:
    if np.any(taus <= 0.0) or np.any(taus >= 1.0):
        raise ValueError("quantile fractions must lie strictly inside (0, 1)")


@dataclass
class CriticTape:
    trunk: object
    embed: object
    head: object
    features: np.ndarray
    quantile_emb: np.ndarray | None
    shape: tuple[int, int]
    state_dim: int


class CriticNet:
    """``head(trunk(s + a) * embed(tau))`` with target copies of every part.

    ``trunk`` maps the concatenated state/action to a ``feature_dim`` vector,
    ``embed`` is one affine+relu layer on the raw scalar tau, ``head`` maps the
    elementwise product to a scalar. With ``deterministic=True`` the tau path is
    dropped and the network is a plain Q-function.
    """

    def __init__(self, state_dim: int, action_dim: int, *, trunk_hidden=(256, 64),
                 feature_dim: int = 16, head_hidden: int = 32, deterministic: bool = False,
                 seed: int = 0):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.deterministic = deterministic
        self.specs = {
            "trunk": MlpSpec.build((state_dim + action_dim, *trunk_hidden, feature_dim),
                                   output="relu", seed=seed),
            "head": MlpSpec.build((feature_dim, head_hidden, 1), seed=seed + 2),
        }
        if not deterministic:
            self.specs["embed"] = MlpSpec.build((1, feature_dim), output="relu", seed=seed + 1)
        self.params = {k: init_params(spec) for k, spec in self.specs.items()}
        self.target = {k: p.copy() for k, p in self.params.items()}

    # -- evaluation ------------------------------------------------------

    def forward(self, s, a, taus, target: bool = False) -> tuple[np.ndarray, CriticTape]:
        """Batched evaluation: ``s (B, ds)``, ``a (B, da)``, ``taus (B, N)`` -> ``z (B, N)``."""
        params = self.target if target else self.params
        taus = np.asarray(taus, dtype=np.float64)
        _check_taus(taus)
        b, n = taus.shape
        x = np.concatenate([s, a], axis=1)
        feats, t_trunk = mlp_forward(self.specs["trunk"], params["trunk"], x)
        if self.deterministic:
            emb, t_emb = None, None
            prod = np.repeat(feats, n, axis=0)
        else:
            emb, t_emb = mlp_forward(self.specs["embed"], params["embed"], taus.reshape(-1, 1))
            prod = (feats[:, None, :] * emb.reshape(b, n, -1)).reshape(b * n, -1)
        z, t_head = mlp_forward(self.specs["head"], params["head"], prod)
        return z.reshape(b, n), CriticTape(t_trunk, t_emb, t_head, feats, emb, (b, n),
                                           self.state_dim)

    def backward(self, tape: CriticTape, dz, param_grad: bool = True) -> tuple[dict, np.ndarray]:
        """Gradients of ``sum(dz * z)`` wrt the online params and wrt the action input.

        ``param_grad=False`` skips the parameter gradients (the dict comes back empty).
        """
        b, n = tape.shape
        g_head, d_prod = mlp_backward(tape.head, np.asarray(dz).reshape(-1, 1), param_grad)
        d_prod = d_prod.reshape(b, n, -1)
        grads = {"head": g_head}
        if self.deterministic:
            d_feats = d_prod.sum(axis=1)
        else:
            emb = tape.quantile_emb.reshape(b, n, -1)
            d_feats = np.einsum("bnf,bnf->bf", d_prod, emb)
            if param_grad:
                d_emb = (d_prod * tape.features[:, None, :]).reshape(b * n, -1)
                grads["embed"], _ = mlp_backward(tape.embed, d_emb)
        grads["trunk"], dx = mlp_backward(tape.trunk, d_feats, param_grad)
        return (grads if param_grad else {}), dx[:, tape.state_dim:]

    def z_value(self, s, a, taus, target: bool = False) -> np.ndarray:
        """Quantile values for one ``(s, a)`` (taus 1-D) or a batch (taus 2-D)."""
        taus = np.asarray(taus, dtype=np.float64)
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        if s.ndim == 1:
            z, _ = self.forward(s[None], a[None], taus.reshape(1, -1), target)
            return z[0]
        z, _ = self.forward(s, a, taus, target)
        return z

    # -- parameter plumbing ----------------------------------------------

    def soft_update(self, mu: float) -> None:
        self.target = {k: soft_update(self.target[k], p, mu) for k, p in self.params.items()}

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(b"UOEPCRT1")
            fh.write(struct.pack("<III", self.state_dim, self.action_dim, int(self.deterministic)))
            for group in (self.params, self.target):
                for key in sorted(group):
                    write_params(fh, group[key])

    @classmethod
    def load(cls, path) -> "CriticNet":
        with open(path, "rb") as fh:
            if fh.read(8) != b"UOEPCRT1":
                raise ValueError(f"{path} is not a critic checkpoint")
            ds, da, det = struct.unpack("<III", fh.read(12))
            keys = ["head", "trunk"] if det else ["embed", "head", "trunk"]
            online = {k: read_params(fh) for k in keys}
            target = {k: read_params(fh) for k in keys}
        trunk_dims = [i for i, _ in online["trunk"].shapes] + [online["trunk"].shapes[-1][1]]
        head_hidden = online["head"].shapes[0][1]
        net = cls(ds, da, trunk_hidden=tuple(trunk_dims[1:-1]), feature_dim=trunk_dims[-1],
                  head_hidden=head_hidden, deterministic=bool(det))
        net.params, net.target = online, target
        return net


class CriticOptimizer:
    """One Adam state per parameter group of a :class:`CriticNet`."""

    def __init__(self, net: CriticNet, lr: float = 1e-3):
        self.states = {k: AdamState.zeros(len(p), lr=lr) for k, p in net.params.items()}

    def step(self, net: CriticNet, grads: dict) -> None:
        for k, g in grads.items():
            net.params[k], self.states[k] = adam_step(self.states[k], net.params[k], g)


class AnalyticQuantile:
    """A state-free stand-in for the critic: ``z = fn(tau)``."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn

    def z_value(self, s, a, taus) -> np.ndarray:
        taus = np.asarray(taus, dtype=np.float64)
        _check_taus(taus)
        return np.asarray(self.fn(taus), dtype=np.float64)


# ---------------------------------------------------------------------------
# distributional TD learning

def td_errors(r, gamma: float, z_target, z_online, done) -> np.ndarray:
    """``delta[..., i, j] = r + gamma * (1 - done) * z_target[j] - z_online[i]``.

    Works for one transition (1-D quantile vectors) or a batch (leading axis B).
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    r = np.asarray(r, dtype=np.float64)
    live = 1.0 - np.asarray(done, dtype=np.float64)
    target = r[..., None] + gamma * live[..., None] * np.asarray(z_target, dtype=np.float64)
    return target[..., None, :] - np.asarray(z_online, dtype=np.float64)[..., :, None]


def quantile_huber(delta, tau, kappa: float = 1.0):
    """Asymmetric Huber loss ``|tau - 1{delta < 0}| * huber_kappa(delta)``."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    delta = np.asarray(delta, dtype=np.float64)
    abs_d = np.abs(delta)
    huber = np.where(abs_d <= kappa, 0.5 * delta * delta / kappa, abs_d - 0.5 * kappa)
    out = np.abs(tau - (delta < 0.0)) * huber
    return float(out) if out.ndim == 0 else out


def quantile_huber_grad(delta, tau, kappa: float = 1.0) -> np.ndarray:
    """Derivative of :func:`quantile_huber` wrt ``delta``."""
    delta = np.asarray(delta, dtype=np.float64)
    slope = np.where(np.abs(delta) <= kappa, delta / kappa, np.sign(delta))
    return np.abs(tau - (delta < 0.0)) * slope


def _quantile_huber_sum(delta: np.ndarray, tau, kappa: float) -> tuple[float, np.ndarray]:
    """Summed quantile Huber loss and its elementwise gradient in one pass."""
    weight = np.abs(tau - (delta < 0.0))
    abs_d = np.abs(delta)
    clipped = np.clip(abs_d, 0.0, kappa)
    # clipped * (|d| - clipped / 2) equals d^2/2 inside the kappa band and kappa(|d| - kappa/2) outside
    huber = clipped * (abs_d - 0.5 * clipped)
    loss = float(np.sum(weight * huber)) / kappa
    return loss, weight * np.clip(delta, -kappa, kappa) / kappa


@dataclass
class CriticLossResult:
    loss: float
    grads: dict
    taus: np.ndarray
    target_taus: np.ndarray


def critic_loss(net: CriticNet, batch, next_actions, *, n_quantiles: int = 32,
                n_target_quantiles: int = 32, kappa: float = 1.0, gamma: float = 0.9,
                rng: np.random.Generator | None = None, taus=None,
                target_taus=None) -> CriticLossResult:
    """Sampled quantile-regression loss over a minibatch, averaged over ``B * N * N'``.

    ``next_actions`` are the target-policy actions at ``batch.next_states``.
    Target values carry no gradient. A deterministic critic falls back to the
    squared TD error ``0.5 * delta**2`` with a single sample per side.
    """
    b = len(batch)
    if net.deterministic:
        n_quantiles = n_target_quantiles = 1
    if taus is None:
        taus = sample_taus(rng, 0.0, 1.0, (b, n_quantiles))
    if target_taus is None:
        target_taus = sample_taus(rng, 0.0, 1.0, (b, n_target_quantiles))
    z_next, _ = net.forward(batch.next_states, next_actions, target_taus, target=True)
    z, tape = net.forward(batch.states, batch.actions, taus)
    delta = td_errors(batch.rewards, gamma, z_next, z, batch.dones)
    n, n_t = taus.shape[1], target_taus.shape[1]
    scale = 1.0 / (b * n * n_t)
    if net.deterministic:
        loss = 0.5 * float(np.sum(delta * delta)) * scale
        d_delta = delta * scale
    else:
        loss, d_delta = _quantile_huber_sum(delta, taus[:, :, None], kappa)
        loss *= scale
        d_delta *= scale
    # delta = target - z, so dL/dz_i = -sum_j dL/d delta_ij
    grads, _ = net.backward(tape, -d_delta.sum(axis=2))
    return CriticLossResult(loss, grads, taus, target_taus)


# ---------------------------------------------------------------------------
# risk measures read off the quantile function

def interval_cvar_estimate(net: QuantileFunction, s, a, alpha_lo: float, alpha_hi: float,
                           n_samples: int, rng: np.random.Generator) -> float:
    """Monte-Carlo mean of ``Z(s, a; tau)`` with ``tau ~ U(alpha_lo, alpha_hi)``."""
    if not 0.0 <= alpha_lo < alpha_hi <= 1.0:
        raise ValueError(f"need 0 <= lo < hi <= 1, got ({alpha_lo}, {alpha_hi})")
    if n_samples < 1:
        raise ValueError("need at least one sample")
    taus = sample_taus(rng, alpha_lo, alpha_hi, n_samples)
    return float(np.mean(net.z_value(s, a, taus)))


def cvar_estimate(net: QuantileFunction, s, a, alpha: float, n_samples: int,
                  rng: np.random.Generator) -> float:
    """CVaR at level ``alpha`` as the mean of ``Z`` over ``tau ~ U(0, alpha)``."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    return interval_cvar_estimate(net, s, a, 0.0, alpha, n_samples, rng)


def q_expectation(net: QuantileFunction, s, a, n_samples: int,
                  rng: np.random.Generator) -> float:
    return interval_cvar_estimate(net, s, a, 0.0, 1.0, n_samples, rng)


def quantile_curve(net: CriticNet, state, actions, taus) -> np.ndarray:
    """Average over ``actions`` of ``Z(state, a; tau)`` for each tau in ``taus``."""
    actions = np.asarray(actions, dtype=np.float64)
    taus = np.asarray(taus, dtype=np.float64)
    s = np.repeat(np.asarray(state, dtype=np.float64)[None], len(actions), axis=0)
    z, _ = net.forward(s, actions, np.repeat(taus[None], len(actions), axis=0))
    return z.mean(axis=0)
