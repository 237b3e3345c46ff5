"""Central-difference gradient checks shared by the unit and acceptance tests.

Errors are reported as ``max|analytic - numeric| / max(max|numeric|, floor)``:
a relative error normalized by the gradient's scale, so entries that are
exactly zero do not blow the ratio up.
"""
import numpy as np

from uoep.critic import CriticNet, critic_loss
from uoep.nn import ParamSet
from uoep.population import (Actor, actor_loss, diversity_loss, normalize_rows,
                             normalize_rows_backward, supervision_loss_from_actions)
from uoep.replay import TransitionBatch

H = 1e-6


def rel_error(analytic, numeric, floor=1e-8) -> float:
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    return float(np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), floor))


def numeric_grad(f, x, h=H):
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def toy_batch(rng, b, sd, ad, n=4, n_items=12):
    return TransitionBatch(rng.normal(size=(b, sd)), rng.normal(size=(b, ad)),
                           np.stack([rng.choice(n_items, n, replace=False) for _ in range(b)]),
                           rng.integers(0, 2, size=(b, n)), rng.uniform(-0.2, 1.0, b),
                           rng.normal(size=(b, sd)), rng.random(b) < 0.3,
                           np.zeros(b, dtype=np.int64))


def small_critic(seed, sd=3, ad=2, deterministic=False):
    return CriticNet(sd, ad, trunk_hidden=(6, 5), feature_dim=4, head_hidden=5,
                     deterministic=deterministic, seed=seed)


def critic_loss_error(seed: int, deterministic: bool = False) -> float:
    rng = np.random.default_rng(seed)
    net = small_critic(seed, deterministic=deterministic)
    # zero-initialized biases put relu inputs exactly on the kink; jitter both nets off it
    for group in (net.params, net.target):
        for k, p in group.items():
            group[k] = ParamSet(p.flat + 0.1 * rng.normal(size=p.flat.size), p.shapes)
    batch = toy_batch(rng, 5, 3, 2)
    nxt = rng.normal(size=(5, 2))
    n, n_t = (1, 1) if deterministic else (3, 4)
    taus = rng.uniform(0.01, 0.99, (5, n))
    target_taus = rng.uniform(0.01, 0.99, (5, n_t))
    kw = dict(n_quantiles=n, n_target_quantiles=n_t, kappa=1.0, gamma=0.9, taus=taus,
              target_taus=target_taus)
    res = critic_loss(net, batch, nxt, **kw)
    worst = 0.0
    for key, params in list(net.params.items()):
        def f(flat, key=key, shapes=params.shapes):
            saved = net.params[key]
            net.params[key] = ParamSet(flat, shapes)
            try:
                return critic_loss(net, batch, nxt, **kw).loss
            finally:
                net.params[key] = saved
        worst = max(worst, rel_error(res.grads[key], numeric_grad(f, params.flat)))
    return worst


def actor_loss_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    critic = small_critic(seed + 1000)
    actor = Actor(0, 0.4, 3, 2, hidden=(5,), seed=seed)
    for p in critic.params.values():
        p.assign_(p.flat + 0.1 * rng.normal(size=p.flat.size))
    actor.params.assign_(actor.params.flat + 0.1 * rng.normal(size=actor.params.flat.size))
    states = rng.normal(size=(4, 3))
    taus = rng.uniform(0.01, 0.4, (4, 3))
    loss, grad = actor_loss(actor, critic, states, 3, rng, taus=taus)
    shapes = actor.params.shapes

    def f(flat):
        saved = actor.params
        actor.params = ParamSet(flat, shapes)
        try:
            return actor_loss(actor, critic, states, 3, rng, taus=taus)[0]
        finally:
            actor.params = saved
    return rel_error(grad, numeric_grad(f, actor.params.flat))


def diversity_loss_error(seed: int) -> float:
    """Gradient of -log det through row normalization, wrt the raw action matrices."""
    rng = np.random.default_rng(seed)
    m, b, d = 3, 4, 2
    raw = rng.normal(size=(m, b, d))

    def f(x):
        units = np.stack([normalize_rows(a)[0].ravel() for a in x])
        return diversity_loss(units, 1.0, 1e-4).loss

    units, norms = zip(*(normalize_rows(a) for a in raw))
    res = diversity_loss(np.stack([u.ravel() for u in units]), 1.0, 1e-4)
    analytic = np.stack([normalize_rows_backward(units[i], norms[i], res.grad[i].reshape(b, d))
                         for i in range(m)])
    return rel_error(analytic, numeric_grad(f, raw))


def supervision_loss_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(12, 3))
    batch = toy_batch(rng, 5, 3, 3)
    actions = rng.normal(size=(5, 3))
    _, grad = supervision_loss_from_actions(actions, batch.items, batch.feedback, emb)
    num = numeric_grad(lambda a: supervision_loss_from_actions(a, batch.items, batch.feedback,
                                                               emb)[0], actions)
    return rel_error(grad, num)
