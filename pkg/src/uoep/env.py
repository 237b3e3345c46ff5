"""Session-based recommendation simulator.

A user sees a list of ``n`` items per round and clicks each one independently
with probability ``sigmoid(u . v + b_u)``. Every round costs temper; sessions
end when temper runs out or the depth cap is hit.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, softplus

CLICK_REWARD = 1.0
SKIP_REWARD = -0.2


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    latent: np.ndarray
    bias: float
    features: np.ndarray


@dataclass
class UserPopulation:
    latent: np.ndarray  # (U, d)
    bias: np.ndarray  # (U,)
    features: np.ndarray  # (U, f)

    def __len__(self) -> int:
        return self.latent.shape[0]

    def __getitem__(self, user_id: int) -> UserProfile:
        return UserProfile(int(user_id), self.latent[user_id], float(self.bias[user_id]),
                           self.features[user_id])


@dataclass
class ItemCatalog:
    embeddings: np.ndarray  # (I, d)
    categories: np.ndarray  # (I,) int

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def gen_population(seed: int, num_users: int, num_items: int, d: int, heterogeneity: float,
                   *, num_categories: int = 10, latent_scale: float = 0.7,
                   feature_noise: float = 0.3) -> tuple[UserPopulation, ItemCatalog]:
    """Draw a synthetic user population and item catalog.

    Activity biases are ``-softplus(E)`` with ``E ~ Exponential(scale=heterogeneity)``,
    which leaves a long tail of low-CTR users. Static user features are a noisy
    view of the latent taste vector. Items cluster around ``num_categories``
    centres, so same-category items are also close in embedding space.
    """
    if num_users < 1 or num_items < 1 or d < 1:
        raise ValueError("num_users, num_items and d must all be >= 1")
    if heterogeneity < 0:
        raise ValueError("heterogeneity must be nonnegative")
    rng = np.random.default_rng(seed)
    latent = rng.normal(0.0, latent_scale, size=(num_users, d))
    if heterogeneity > 0:
        raw = rng.exponential(heterogeneity, size=num_users)
    else:
        raw = np.zeros(num_users)
    bias = -softplus(raw)
    features = latent + rng.normal(0.0, feature_noise, size=latent.shape)
    centres = rng.normal(0.0, latent_scale, size=(num_categories, d))
    categories = rng.integers(0, num_categories, size=num_items)
    spread = latent_scale * 0.6
    embeddings = 0.8 * centres[categories] + rng.normal(0.0, spread, size=(num_items, d))
    return UserPopulation(latent, bias, features), ItemCatalog(embeddings, categories)


class ResponseModel(Protocol):
    def click_probs(self, user_id: int, items: np.ndarray) -> np.ndarray: ...


class GroundTruthResponse:
    def __init__(self, users: UserPopulation, catalog: ItemCatalog):
        self.users = users
        self.catalog = catalog

    def click_probs(self, user_id, items):
        v = self.catalog.embeddings[items]
        return expit(v @ self.users.latent[user_id] + self.users.bias[user_id])

    def prob_matrix(self) -> np.ndarray:
        return expit(self.users.latent @ self.catalog.embeddings.T + self.users.bias[:, None])


class TableResponse:
    """Fixed per-(user, item) click probabilities; handy for toy environments."""

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float64)

    def click_probs(self, user_id, items):
        return self.probs[user_id, items]

    def prob_matrix(self) -> np.ndarray:
        return self.probs


@dataclass(frozen=True)
class EnvConfig:
    list_size: int = 10
    max_depth: int = 20
    initial_temper: float = 10.0
    temper_base_cost: float = 0.2
    history_window: int = 10
    recency: float = 0.8


@dataclass(frozen=True)
class SessionState:
    user_id: int
    history: tuple = ()
    temper: float = 10.0
    depth: int = 0
    done: bool = False


@dataclass(frozen=True)
class StepOutcome:
    items: np.ndarray
    feedback: np.ndarray
    reward: float
    state: SessionState


class SessionDoneError(RuntimeError):
    pass


def list_reward(feedback) -> float:
    """Average of +1 per click and -0.2 per skip over the list."""
    y = np.asarray(feedback)
    return float(np.mean(np.where(y > 0, CLICK_REWARD, SKIP_REWARD)))


def history_embedding(history: Sequence[int], embeddings: np.ndarray, window: int,
                      recency: float) -> np.ndarray:
    """Recency-weighted mean of the last ``window`` clicked item embeddings.

    The newest click gets weight 1, the one before it ``recency``, and so on.
    """
    recent = list(history)[-window:]
    if not recent:
        return np.zeros(embeddings.shape[1])
    w = recency ** np.arange(len(recent) - 1, -1, -1, dtype=np.float64)
    return w @ embeddings[recent] / w.sum()


class RecEnv:
    def __init__(self, users: UserPopulation, catalog: ItemCatalog,
                 response: ResponseModel | None = None, config: EnvConfig = EnvConfig()):
        if len(catalog) < config.list_size:
            raise ValueError(f"catalog has {len(catalog)} items, lists need {config.list_size}")
        self.users = users
        self.catalog = catalog
        self.response = response if response is not None else GroundTruthResponse(users, catalog)
        self.config = config

    @property
    def state_dim(self) -> int:
        return self.catalog.dim + self.users.features.shape[1] + 2

    @property
    def action_dim(self) -> int:
        return self.catalog.dim

    @property
    def num_users(self) -> int:
        return len(self.users)

    def reset(self, user_id: int) -> SessionState:
        return SessionState(int(user_id), (), self.config.initial_temper, 0, False)

    def respond(self, state: SessionState, items, rng: np.random.Generator) -> StepOutcome:
        cfg = self.config
        if state.done:
            raise SessionDoneError(f"session of user {state.user_id} already ended")
        items = np.asarray(items, dtype=np.int64)
        if items.shape != (cfg.list_size,) or len(np.unique(items)) != cfg.list_size:
            raise ValueError(f"expected {cfg.list_size} distinct item ids, got {items}")
        probs = self.response.click_probs(state.user_id, items)
        y = (rng.random(cfg.list_size) < probs).astype(np.int8)
        click_frac = float(y.mean())
        temper = state.temper - (cfg.temper_base_cost + (1.0 - click_frac))
        depth = state.depth + 1
        history = (state.history + tuple(int(i) for i in items[y > 0]))[-cfg.history_window:]
        done = temper <= 0.0 or depth >= cfg.max_depth
        nxt = SessionState(state.user_id, history, temper, depth, done)
        return StepOutcome(items, y, list_reward(y), nxt)

    def encode_state(self, state: SessionState) -> np.ndarray:
        cfg = self.config
        hist = history_embedding(state.history, self.catalog.embeddings, cfg.history_window,
                                 cfg.recency)
        return np.concatenate([hist, self.users.features[state.user_id],
                               [state.depth / cfg.max_depth,
                                state.temper / cfg.initial_temper]])

    def activity(self) -> np.ndarray:
        """Expected per-user CTR when lists are drawn uniformly from the catalog."""
        return self.response.prob_matrix().mean(axis=1)


# ---------------------------------------------------------------------------
# population checkpoints

_POP_MAGIC = b"UOEPPOP1"


def _write_array(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    code = b"i" if arr.dtype.kind in "iu" else b"f"
    fh.write(code + struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<i8" if code == b"i" else "<f8").tobytes())


def _read_array(fh) -> np.ndarray:
    code = fh.read(1)
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    dtype = "<i8" if code == b"i" else "<f8"
    count = int(np.prod(shape))
    data = np.frombuffer(fh.read(8 * count), dtype=dtype)
    if data.size != count:
        raise ValueError("truncated population file")
    return data.reshape(shape).astype(np.int64 if code == b"i" else np.float64)


def save_population(path, users: UserPopulation, catalog: ItemCatalog) -> None:
    with open(path, "wb") as fh:
        fh.write(_POP_MAGIC)
        for arr in (users.latent, users.bias, users.features, catalog.embeddings,
                    catalog.categories):
            _write_array(fh, arr)


def load_population(path) -> tuple[UserPopulation, ItemCatalog]:
    with open(path, "rb") as fh:
        if fh.read(len(_POP_MAGIC)) != _POP_MAGIC:
            raise ValueError(f"{path} is not a population checkpoint")
        latent, bias, features, emb, cats = (_read_array(fh) for _ in range(5))
    return UserPopulation(latent, bias, features), ItemCatalog(emb, cats)


# ---------------------------------------------------------------------------
# interaction logs

class LogFormatError(ValueError):
    def __init__(self, problems: list[tuple[int, str]]):
        self.problems = problems
        shown = "; ".join(f"line {ln}: {msg}" for ln, msg in problems[:10])
        more = f" (+{len(problems) - 10} more)" if len(problems) > 10 else ""
        super().__init__(f"malformed interaction log: {shown}{more}")


@dataclass
class InteractionLog:
    user_ids: np.ndarray
    item_ids: np.ndarray
    labels: np.ndarray
    timestamps: np.ndarray
    features: np.ndarray  # (rows, k)

    def __len__(self) -> int:
        return self.labels.size


_REQUIRED = ["user_id", "item_id", "label", "timestamp"]


def read_interaction_log(path) -> InteractionLog:
    """Parse the CSV log, sorted chronologically (stable on ties)."""
    problems: list[tuple[int, str]] = []
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise LogFormatError([(1, "empty file, header row required")])
        header = [h.strip() for h in header]
        n_feat = len(header) - len(_REQUIRED)
        if header[:4] != _REQUIRED or header[4:] != [f"feat_{k}" for k in range(n_feat)]:
            raise LogFormatError([(1, f"bad header {header}")])
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                problems.append((line, f"expected {len(header)} fields, got {len(row)}"))
                continue
            try:
                uid, iid = int(row[0]), int(row[1])
                label = int(row[2])
                ts = float(row[3])
                feats = [float(c) for c in row[4:]]
            except ValueError as exc:
                problems.append((line, str(exc)))
                continue
            if label not in (0, 1):
                problems.append((line, f"label must be 0 or 1, got {label}"))
                continue
            if uid < 0 or iid < 0:
                problems.append((line, "ids must be nonnegative"))
                continue
            rows.append((uid, iid, label, ts, feats))
    if problems:
        raise LogFormatError(problems)
    rows.sort(key=lambda r: r[3])
    feats = np.array([r[4] for r in rows], dtype=np.float64).reshape(len(rows), n_feat)
    return InteractionLog(np.array([r[0] for r in rows], dtype=np.int64),
                          np.array([r[1] for r in rows], dtype=np.int64),
                          np.array([r[2] for r in rows], dtype=np.int64),
                          np.array([r[3] for r in rows], dtype=np.float64), feats)


@dataclass
class FittedResponse:
    """Logistic click model ``sigmoid(p_u . q_i + b_u + c_i)`` fitted to a log.

    Users and items are re-indexed densely; ``user_index``/``item_index`` map the
    raw ids from the file to rows.
    """
    user_emb: np.ndarray
    item_emb: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    user_index: dict = field(default_factory=dict)
    item_index: dict = field(default_factory=dict)
    user_features: np.ndarray | None = None

    def click_probs(self, user_id, items):
        items = np.asarray(items)
        return expit(self.item_emb[items] @ self.user_emb[user_id]
                     + self.user_bias[user_id] + self.item_bias[items])

    def predict(self, users, items) -> np.ndarray:
        users, items = np.asarray(users), np.asarray(items)
        logits = np.einsum("nd,nd->n", self.user_emb[users], self.item_emb[items])
        return expit(logits + self.user_bias[users] + self.item_bias[items])

    def prob_matrix(self) -> np.ndarray:
        return expit(self.user_emb @ self.item_emb.T + self.user_bias[:, None]
                     + self.item_bias[None, :])

    def to_env(self, config: EnvConfig = EnvConfig(), num_categories: int = 10) -> RecEnv:
        feats = self.user_features if self.user_features is not None else self.user_emb
        users = UserPopulation(self.user_emb, self.user_bias, feats)
        # coarse categories: dominant embedding coordinate and its sign
        dom = np.argmax(np.abs(self.item_emb), axis=1)
        sign = (self.item_emb[np.arange(len(dom)), dom] > 0).astype(np.int64)
        cats = (2 * dom + sign) % max(num_categories, 1)
        return RecEnv(users, ItemCatalog(self.item_emb, cats), self, config)


def fit_response(log: InteractionLog, *, dim: int = 8, l2: float = 1e-3, seed: int = 0,
                 max_iter: int = 500) -> FittedResponse:
    """Fit the logistic model by L-BFGS on the mean log-loss plus an L2 penalty."""
    uids, u_idx = np.unique(log.user_ids, return_inverse=True)
    iids, i_idx = np.unique(log.item_ids, return_inverse=True)
    nu, ni = uids.size, iids.size
    y = log.labels.astype(np.float64)
    rng = np.random.default_rng(seed)
    x0 = np.concatenate([rng.normal(0, 0.1, nu * dim), rng.normal(0, 0.1, ni * dim),
                         np.zeros(nu), np.zeros(ni)])
    n = y.size

    def unpack(x):
        p = x[:nu * dim].reshape(nu, dim)
        q = x[nu * dim:(nu + ni) * dim].reshape(ni, dim)
        bu = x[(nu + ni) * dim:(nu + ni) * dim + nu]
        bi = x[(nu + ni) * dim + nu:]
        return p, q, bu, bi

    def objective(x):
        p, q, bu, bi = unpack(x)
        logit = np.einsum("nd,nd->n", p[u_idx], q[i_idx]) + bu[u_idx] + bi[i_idx]
        loss = np.mean(np.logaddexp(0.0, logit) - y * logit)
        resid = (expit(logit) - y) / n
        gp = np.zeros_like(p)
        gq = np.zeros_like(q)
        np.add.at(gp, u_idx, resid[:, None] * q[i_idx])
        np.add.at(gq, i_idx, resid[:, None] * p[u_idx])
        gbu = np.bincount(u_idx, resid, minlength=nu)
        gbi = np.bincount(i_idx, resid, minlength=ni)
        loss += 0.5 * l2 * (np.sum(p * p) + np.sum(q * q))
        grad = np.concatenate([(gp + l2 * p).ravel(), (gq + l2 * q).ravel(), gbu, gbi])
        return loss, grad

    res = minimize(objective, x0, jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
    p, q, bu, bi = unpack(res.x)
    feats = None
    if log.features.shape[1] > 0:
        feats = np.zeros((nu, log.features.shape[1]))
        feats[u_idx] = log.features  # rows are chronological, so the latest row wins
    return FittedResponse(p, q, bu, bi, {int(u): k for k, u in enumerate(uids)},
                          {int(i): k for k, i in enumerate(iids)}, feats)


def load_interaction_log(path, *, min_rows: int = 10, **fit_kw) -> FittedResponse:
    log = read_interaction_log(path)
    if len(log) < min_rows:
        raise LogFormatError([(1, f"log has {len(log)} rows, at least {min_rows} required")])
    return fit_response(log, **fit_kw)


def write_interaction_log(path, user_ids, item_ids, labels, timestamps, features=None) -> None:
    features = np.zeros((len(labels), 0)) if features is None else np.asarray(features)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(_REQUIRED + [f"feat_{k}" for k in range(features.shape[1])])
        for row in zip(user_ids, item_ids, labels, timestamps, features):
            w.writerow([int(row[0]), int(row[1]), int(row[2]), repr(float(row[3]))]
                       + [repr(float(f)) for f in row[4]])


def with_config(env: RecEnv, **changes) -> RecEnv:
    return RecEnv(env.users, env.catalog, env.response, replace(env.config, **changes))
