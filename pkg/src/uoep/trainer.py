"""Training loop, critic-trusted inference and evaluation rollouts."""
from __future__ import annotations

import copy
import logging
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .bandit import ARM_NAMES, BanditState
from .critic import CriticNet, CriticOptimizer, critic_loss, sample_taus
from .env import RecEnv, SessionState
from .metrics import OutcomeSet, summarize
from .nn import AdamState, NonFiniteGradientError, adam_step
from .population import (Population, PopulationConfig, decayed_alpha, diversity_loss,
                         make_population, normalize_rows, normalize_rows_backward,
                         population_actor_losses, quantile_window,
                         supervision_loss_from_actions, top_n)
from .replay import ReplayBuffer, Transition

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    total_steps: int = 20_000
    batch_size: int = 64
    gamma: float = 0.9
    n_quantiles: int = 32
    n_target_quantiles: int = 32
    n_cvar_samples: int = 8
    n_inference_samples: int = 32
    kappa: float = 1.0
    mu: float = 0.01
    actor_lr: float = 5e-4
    critic_lr: float = 1e-3
    eval_interval: int = 500
    eval_episodes: int = 50
    seed: int = 0
    noise: float = 0.1
    lam: float = 16.0
    population: PopulationConfig = field(default_factory=PopulationConfig)
    deterministic_critic: bool = False
    no_div: bool = False
    no_sta: bool = False
    buffer_capacity: int = 100_000
    actor_hidden: tuple = (64, 64)
    critic_hidden: tuple = (256, 64)
    return_window: int = 10
    user_pool: tuple | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        counts = ("batch_size", "n_quantiles", "n_target_quantiles", "n_cvar_samples",
                  "n_inference_samples", "eval_interval", "eval_episodes", "buffer_capacity",
                  "return_window")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be nonnegative")
        if self.noise < 0 or self.lam < 0:
            raise ValueError("noise and lambda must be nonnegative")
        if self.deterministic_critic and self.population.grouping == "disjoint":
            raise ValueError("disjoint grouping needs a distributional critic")

    @property
    def horizon(self) -> float:
        h = self.population.horizon
        return float(h) if h else max(self.total_steps / 2.0, 1.0)

    @property
    def bandit_enabled(self) -> bool:
        return not (self.no_div or self.no_sta) and self.population.m > 1

    def fixed_coefficients(self) -> tuple[float, float]:
        """(lambda1, lambda2) when the bandit is off."""
        lam1 = 0.0 if self.no_sta else self.lam
        lam2 = 0.0 if (self.no_div or self.population.m < 2) else self.lam
        return lam1, lam2


def ddpg_baseline(config: TrainConfig) -> TrainConfig:
    """Single actor, scalar critic, no regularizers: a plain DDPG-style learner."""
    return replace(config, population=PopulationConfig(m=1, alphas=(1.0,)),
                   deterministic_critic=True, no_div=True, no_sta=True)


@dataclass
class EvalReport:
    step: int
    total_rewards: list
    depths: list
    metrics: dict
    per_actor_returns: list = field(default_factory=list)
    actor_choices: list = field(default_factory=list)


def _choose(population: Population, critic: CriticNet, states: np.ndarray, n_samples: int,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Critic-trusted pick among the actors' proposals for each row of ``states``."""
    m = len(population)
    if m == 1:
        return population[0](states), np.zeros(len(states), dtype=np.int64)
    proposals = np.stack([actor(states) for actor in population])  # (m, A, d)
    a_count = states.shape[0]
    taus = sample_taus(rng, 0.0, 1.0, (m * a_count, n_samples))
    z, _ = critic.forward(np.tile(states, (m, 1)), proposals.reshape(m * a_count, -1), taus)
    q = z.mean(axis=1).reshape(m, a_count)
    chosen = np.argmax(q, axis=0)  # first maximum -> lowest actor index
    return proposals[chosen, np.arange(a_count)], chosen


def infer_action(population: Population, critic: CriticNet, state, item_embeddings, n: int,
                 n_samples: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Top-``n`` list of whichever actor the critic expects to earn the most."""
    actions, chosen = _choose(population, critic, np.atleast_2d(state), n_samples, rng)
    return top_n(actions[0] @ item_embeddings.T, n), int(chosen[0])


def evaluate(population: Population, critic: CriticNet, env: RecEnv, episodes: int,
             rng: np.random.Generator, *, n_samples: int = 32, users=None, actor=None,
             step: int = 0) -> EvalReport:
    """Run ``episodes`` noise-free sessions in lockstep and collect their outcomes.

    ``actor`` restricts the rollout to a single population member; otherwise
    every step goes through critic-trusted selection. Users are a shuffled
    sweep over ``users`` (default: everyone), repeated as needed.
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    pool = np.arange(env.num_users) if users is None else np.asarray(users)
    order = pool[rng.permutation(pool.size)]
    user_ids = order[np.arange(episodes) % pool.size]
    ep_rngs = [np.random.default_rng(s) for s in rng.integers(0, 2 ** 63, size=episodes)]
    select_rng = np.random.default_rng(rng.integers(0, 2 ** 63))
    sessions = [env.reset(u) for u in user_ids]
    totals = np.zeros(episodes)
    outcomes = OutcomeSet()
    choices = np.zeros(len(population), dtype=np.int64)
    item_emb = env.catalog.embeddings
    n = env.config.list_size
    while True:
        live = [k for k, s in enumerate(sessions) if not s.done]
        if not live:
            break
        states = np.stack([env.encode_state(sessions[k]) for k in live])
        if actor is not None:
            actions = population[actor](states)
        else:
            actions, chosen = _choose(population, critic, states, n_samples, select_rng)
            choices += np.bincount(chosen, minlength=len(population))
        lists = top_n(actions @ item_emb.T, n)
        for row, k in enumerate(live):
            out = env.respond(sessions[k], lists[row], ep_rngs[k])
            totals[k] += out.reward
            sessions[k] = out.state
            outcomes.exposed.append(lists[row])
    outcomes.total_rewards = totals.tolist()
    outcomes.depths = [s.depth for s in sessions]
    metrics = summarize(outcomes, len(env.catalog), env.catalog.categories)
    return EvalReport(step, outcomes.total_rewards, outcomes.depths, metrics,
                      actor_choices=choices.tolist())


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


@dataclass
class TrainResult:
    population: Population
    critic: CriticNet
    bandit: BanditState
    reports: list
    records: list
    config: TrainConfig


_RECORD_KEYS = ("step", "per_actor_return", "total_reward_mean", "total_reward_std",
                "depth_mean", "cvar_0.3", "cvar_0.4", "atr_0.4", "atr_0.5", "gini",
                "coverage", "ils", "bandit", "arm", "lambda1", "lambda2", "alphas_t",
                "critic_loss", "actor_loss", "sup_loss", "div_loss", "diversity_skips",
                "target_check")


def empty_record() -> dict:
    return dict.fromkeys(_RECORD_KEYS)


class Trainer:
    """Owns every piece of mutable training state; :meth:`run` drives the loop."""

    def __init__(self, config: TrainConfig, env: RecEnv):
        self.config = config
        self.env = env
        seeds = np.random.SeedSequence(config.seed).spawn(6)
        init_rng, roll, samp, noise, band, self._eval_seq = (
            np.random.default_rng(s) if k < 5 else s for k, s in enumerate(seeds))
        self.rollout_rng, self.sample_rng, self.noise_rng, self.bandit_rng = roll, samp, noise, band
        net_seed = int(init_rng.integers(0, 2 ** 31))
        self.critic = CriticNet(env.state_dim, env.action_dim, trunk_hidden=config.critic_hidden,
                                deterministic=config.deterministic_critic, seed=net_seed)
        self.critic_opt = CriticOptimizer(self.critic, config.critic_lr)
        self.population = make_population(config.population, env.state_dim, env.action_dim,
                                          hidden=config.actor_hidden, seed=net_seed + 7)
        self.actor_opts = [AdamState.zeros(len(a.params), lr=config.actor_lr)
                           for a in self.population]
        self.buffer = ReplayBuffer(config.buffer_capacity)
        self.bandit = BanditState(lam=config.lam)
        self.pool = (np.arange(env.num_users) if config.user_pool is None
                     else np.asarray(config.user_pool, dtype=np.int64))
        self.sessions = [self._new_session() for _ in self.population]
        self.step_count = 0
        self.records: list[dict] = []
        self.reports: list[EvalReport] = []
        self._returns = deque(maxlen=config.return_window)
        self._loss_acc = {"critic_loss": [], "actor_loss": [], "sup_loss": [], "div_loss": []}
        self._div_skips = 0
        if config.bandit_enabled:
            self.arm, (self.lam1, self.lam2) = self.bandit.select_arm(self.bandit_rng)
        else:
            self.arm = None
            self.lam1, self.lam2 = config.fixed_coefficients()
        self._last_good = self._snapshot()

    # -- bookkeeping -----------------------------------------------------

    def _new_session(self) -> SessionState:
        return self.env.reset(int(self.rollout_rng.choice(self.pool)))

    def _snapshot(self):
        return copy.deepcopy((self.critic.params, self.critic.target,
                              [(a.params, a.target) for a in self.population]))

    def _restore(self, snap) -> None:
        self.critic.params, self.critic.target, actors = snap
        for actor, (p, t) in zip(self.population, actors):
            actor.params, actor.target = p, t

    def result(self) -> TrainResult:
        return TrainResult(self.population, self.critic, self.bandit, self.reports, self.records,
                           self.config)

    # -- one iteration ---------------------------------------------------

    def _rollout(self) -> None:
        env, cfg = self.env, self.config
        item_emb = env.catalog.embeddings
        for i, actor in enumerate(self.population):
            sess = self.sessions[i]
            s = env.encode_state(sess)
            a = actor(s) + cfg.noise * self.noise_rng.standard_normal(env.action_dim)
            items = top_n(a @ item_emb.T, env.config.list_size)
            out = env.respond(sess, items, self.rollout_rng)
            self.buffer.push(Transition(s, a, items, out.feedback, out.reward,
                                        env.encode_state(out.state), out.state.done, i))
            self.sessions[i] = self._new_session() if out.state.done else out.state

    def _update(self, check_target: bool) -> None:
        cfg = self.config
        rng = self.sample_rng
        batch = self.buffer.sample_minibatch(cfg.batch_size, rng)

        next_actions = np.empty_like(batch.actions)
        for i, actor in enumerate(self.population):
            rows = batch.actor_ids == i
            if rows.any():
                next_actions[rows] = actor(batch.next_states[rows], target=True)
        res = critic_loss(self.critic, batch, next_actions, n_quantiles=cfg.n_quantiles,
                          n_target_quantiles=cfg.n_target_quantiles, kappa=cfg.kappa,
                          gamma=cfg.gamma, rng=rng)
        if not np.isfinite(res.loss):
            raise NonFiniteGradientError(f"critic loss is {res.loss}")
        self.critic_opt.step(self.critic, res.grads)
        self._loss_acc["critic_loss"].append(res.loss)

        pcfg = cfg.population
        item_emb = self.env.catalog.embeddings
        outs = [actor.forward(batch.states) for actor in self.population]
        taus = []
        for i, actor in enumerate(self.population):
            if cfg.deterministic_critic:
                taus.append(np.full((cfg.batch_size, 1), 0.5))  # ignored by a scalar critic
                continue
            alpha_t = decayed_alpha(actor.alpha, pcfg.beta, self.step_count, cfg.horizon)
            lo, hi = quantile_window(pcfg.grouping, alpha_t, pcfg.alphas[i - 1] if i else 0.0)
            taus.append(sample_taus(rng, lo, hi, (cfg.batch_size, cfg.n_cvar_samples)))
        actor_losses, d_actions = population_actor_losses(self.critic, batch.states,
                                                          [a for a, _ in outs], taus)
        sup_losses = []
        if self.lam1 > 0:
            for i, (actions, _) in enumerate(outs):
                sup, d_sup = supervision_loss_from_actions(actions, batch.items, batch.feedback,
                                                           item_emb)
                sup_losses.append(sup)
                d_actions[i] = d_actions[i] + self.lam1 * d_sup
        grads = [actor.backward(tape, d) for actor, (_, tape), d
                 in zip(self.population, outs, d_actions)]

        if self.lam2 > 0 and len(self.population) > 1:
            states = self.buffer.sample_states(cfg.batch_size, rng)
            outs = [actor.forward(states) for actor in self.population]
            units = [normalize_rows(a) for a, _ in outs]
            div = diversity_loss(np.stack([u.ravel() for u, _ in units]), pcfg.length_scale,
                                 pcfg.jitter)
            if div.skipped:
                self._div_skips += 1
                log.warning("step %d: diversity kernel not factorizable, regularizer skipped",
                            self.step_count)
            else:
                self._loss_acc["div_loss"].append(div.loss)
                for i, actor in enumerate(self.population):
                    unit, norms = units[i]
                    g_unit = self.lam2 * div.grad[i].reshape(unit.shape)
                    grads[i] = grads[i] + actor.backward(
                        outs[i][1], normalize_rows_backward(unit, norms, g_unit))

        for i, actor in enumerate(self.population):
            actor.params, self.actor_opts[i] = adam_step(self.actor_opts[i], actor.params,
                                                         grads[i])
        self._loss_acc["actor_loss"].append(float(np.sum(actor_losses)))
        if sup_losses:
            self._loss_acc["sup_loss"].append(float(np.sum(sup_losses)))

        if check_target:
            prev = {k: p.flat.copy() for k, p in self.critic.target.items()}
        self.critic.soft_update(cfg.mu)
        for actor in self.population:
            actor.soft_update(cfg.mu)
        if check_target:
            self._target_ok = all(
                np.array_equal(self.critic.target[k].flat,
                               cfg.mu * self.critic.params[k].flat + (1 - cfg.mu) * prev[k])
                for k in prev)

    def _evaluate(self) -> None:
        cfg = self.config
        step = self.step_count
        seq = np.random.SeedSequence([self._eval_seq.entropy, step])
        report = evaluate(self.population, self.critic, self.env, cfg.eval_episodes,
                          np.random.default_rng(seq), n_samples=cfg.n_inference_samples,
                          users=self.pool, step=step)
        if len(self.population) == 1:
            per_actor = [report.metrics["total_reward_mean"]]
        else:
            per_actor = [evaluate(self.population, self.critic, self.env, cfg.eval_episodes,
                                  np.random.default_rng(seq), users=self.pool, actor=i,
                                  step=step).metrics["total_reward_mean"]
                         for i in range(len(self.population))]
        report.per_actor_returns = per_actor
        self.reports.append(report)

        rec = empty_record()
        rec.update(report.metrics)
        rec["step"] = step
        rec["per_actor_return"] = per_actor
        rec["arm"] = None if self.arm is None else ARM_NAMES[self.arm]
        rec["lambda1"], rec["lambda2"] = self.lam1, self.lam2
        rec["alphas_t"] = [decayed_alpha(a.alpha, cfg.population.beta, step, cfg.horizon)
                           for a in self.population]
        for key, vals in self._loss_acc.items():
            rec[key] = float(np.mean(vals)) if vals else None
            vals.clear()
        rec["diversity_skips"] = self._div_skips
        rec["target_check"] = getattr(self, "_target_ok", None)

        self._returns.append(report.metrics["total_reward_mean"])
        if cfg.bandit_enabled:
            self.bandit.observe(float(np.mean(self._returns)))
            self.arm, (self.lam1, self.lam2) = self.bandit.select_arm(self.bandit_rng)
            rec["bandit"] = self.bandit.to_dict()
        self.records.append(rec)

    def step(self) -> None:
        cfg = self.config
        self.step_count += 1
        self._rollout()
        at_eval = self.step_count % cfg.eval_interval == 0
        if len(self.buffer) >= cfg.batch_size:
            self._update(check_target=at_eval)
        if at_eval:
            self._evaluate()

    def run(self, callback=None) -> TrainResult:
        while self.step_count < self.config.total_steps:
            try:
                self.step()
            except (NonFiniteGradientError, FloatingPointError) as exc:
                self._restore(self._last_good)
                raise TrainingAborted(f"step {self.step_count}: {exc}", self.result()) from exc
            if self.step_count % self.config.eval_interval == 0:
                self._last_good = self._snapshot()
                if callback is not None:
                    callback(self.records[-1])
        return self.result()


def train(config: TrainConfig, env: RecEnv, callback=None) -> TrainResult:
    return Trainer(config, env).run(callback)


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["population"] = asdict(config.population)
    return d
