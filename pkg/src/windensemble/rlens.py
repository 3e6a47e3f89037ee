"""
Actor-critic ensemble weighting
===============================

The actor maps a farm's state embedding to a weight vector on the
probability simplex (softmax over N logits, with Gaussian noise on the
logits while exploring). The ensemble forecast is the weighted combination
of the base forecasts. The reward is the negative absolute error,
optionally squared or divided by the pool's trailing mean absolute error
so that calm and volatile periods carry comparable signal.

Training follows a deterministic-policy-gradient scheme without target
networks:

* critic: one gradient step on the mean squared TD error with target
  ``r + gamma * Q(s', pi(s'))``, the target held constant;
* actor: one ascent step on ``mean Q(s, pi(s))`` through the critic.

Each farm's chronological stream is one episode. With a shared agent the
farms are visited round-robin.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .embedding import StateEmbedding
from .errors import DimensionError, WindEnsembleError

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9


def _vec(s):
    return s.vector if isinstance(s, StateEmbedding) else np.asarray(s, float)


@dataclass(frozen=True)
class Transition:
    s: StateEmbedding | np.ndarray
    a: np.ndarray
    r: float
    s_next: StateEmbedding | np.ndarray
    done: bool = False

    def __post_init__(self):
        a = np.asarray(self.a, float)
        if a.ndim != 1 or np.any(a < 0) or abs(a.sum() - 1.0) > SIMPLEX_TOL:
            raise WindEnsembleError("transition action must lie on the probability simplex")


@dataclass
class Batch:
    S: np.ndarray
    A: np.ndarray
    R: np.ndarray
    S2: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.R)

    @classmethod
    def from_transitions(cls, items: Sequence[Transition]):
        if not items:
            raise WindEnsembleError("empty batch")
        return cls(np.stack([_vec(t.s) for t in items]), np.stack([np.asarray(t.a, float) for t in items]),
                   np.array([t.r for t in items], float), np.stack([_vec(t.s_next) for t in items]),
                   np.array([t.done for t in items], float))


class ReplayBuffer:
    """Fixed-capacity FIFO ring with a seeded uniform sampler."""

    def __init__(self, capacity, seed=0):
        if capacity < 1:
            raise WindEnsembleError("replay capacity must be >= 1")
        self.capacity = int(capacity)
        self._items: list = []
        self._head = 0  # index of the oldest item once full
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self._items)

    def push(self, t: Transition):
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._head] = t
            self._head = (self._head + 1) % self.capacity

    def items(self):
        """Stored transitions, oldest first."""
        return self._items[self._head:] + self._items[:self._head]

    def sample_indices(self, batch_size):
        if batch_size > len(self._items):
            raise WindEnsembleError(f"insufficient transitions: need {batch_size}, buffer holds "
                                    f"{len(self._items)}")
        return self.rng.choice(len(self._items), size=batch_size, replace=False)

    def sample(self, batch_size):
        """Uniform sample without replacement as a list of transitions."""
        return [self._items[i] for i in self.sample_indices(batch_size)]

    def sample_batch(self, batch_size):
        return Batch.from_transitions(self.sample(batch_size))


@dataclass(frozen=True)
class ActorCriticConfig:
    state_dim: int
    n_models: int
    actor_hidden: tuple = (32,)
    critic_hidden: tuple = (64,)
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    gamma: float = 0.9
    batch_size: int = 32
    capacity: int = 4096
    total_steps: int = 20000
    noise_start: float = 0.3
    noise_end: float = 0.01
    warmup_factor: int = 4
    actor_delay: int = 0
    reward: str = "absolute"  # "absolute", "squared" or "relative"
    reward_scale: float = 1.0  # stored rewards are divided by this
    reward_window: int = 48    # trailing steps behind the relative reward's scale
    shared: bool = True
    optimizer: str = "adam"

    def __post_init__(self):
        if self.state_dim < 1 or self.n_models < 1:
            raise WindEnsembleError("state_dim and n_models must be >= 1")
        if not (self.actor_lr > 0 and self.critic_lr > 0):
            raise WindEnsembleError("learning rates must be > 0")
        if not 0.0 <= self.gamma < 1.0:
            raise WindEnsembleError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.batch_size < 1 or self.capacity < self.batch_size:
            raise WindEnsembleError("need 1 <= batch_size <= capacity")
        if self.total_steps < 0 or self.noise_start < 0 or self.noise_end < 0:
            raise WindEnsembleError("total_steps and noise scales must be >= 0")
        if self.warmup_factor < 1 or self.actor_delay < 0:
            raise WindEnsembleError("warmup_factor must be >= 1 and actor_delay >= 0")
        if self.reward_window < 1:
            raise WindEnsembleError(f"reward_window must be >= 1, got {self.reward_window}")
        if not self.reward_scale > 0:
            raise WindEnsembleError(f"reward_scale must be > 0, got {self.reward_scale}")
        if self.reward not in ("absolute", "squared", "relative"):
            raise WindEnsembleError(f"unknown reward {self.reward!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise WindEnsembleError(f"unknown optimizer {self.optimizer!r}")

    @property
    def warmup(self):
        return self.warmup_factor * self.batch_size

    def noise_at(self, step):
        if self.total_steps <= 1:
            return self.noise_start
        frac = min(step / (self.total_steps - 1), 1.0)
        return self.noise_start + (self.noise_end - self.noise_start) * frac


@dataclass(frozen=True)
class AgentParams:
    actor: dc.ParamSet
    critic: dc.ParamSet

    def equals(self, other):
        return self.actor.equals(other.actor) and self.critic.equals(other.critic)

    def as_paramset(self):
        return dc.ParamSet({}).merged(self.actor, "actor.").merged(self.critic, "critic.")

    @classmethod
    def from_paramset(cls, p: dc.ParamSet):
        return cls(p.subset("actor."), p.subset("critic."))


def _n_layers(p):
    n = 0
    while f"{n}.W" in p:
        n += 1
    return n


def init_agent(cfg: ActorCriticConfig, rng: np.random.Generator, zero=False) -> AgentParams:
    """Fresh actor and critic. The actor's output layer is scaled down so the
    initial policy is close to uniform; ``zero=True`` gives all-zero networks."""
    actor = dc.init_mlp(rng, [cfg.state_dim, *cfg.actor_hidden, cfg.n_models])
    last = len(cfg.actor_hidden)
    actor[f"{last}.W"] *= 0.1
    actor[f"{last}.b"] = np.zeros(cfg.n_models)
    critic = dc.init_mlp(rng, [cfg.state_dim + cfg.n_models, *cfg.critic_hidden, 1])
    params = AgentParams(dc.ParamSet(actor), dc.ParamSet(critic))
    if zero:
        params = AgentParams(params.actor.zeros_like(), params.critic.zeros_like())
    return params


# ---------------------------------------------------------------- forward passes

def tape_actor(p, S, noise=None):
    logits = dc.mlp(p, S, _n_layers(p))
    if noise is not None:
        logits = dc.add(logits, noise)
    return dc.softmax(logits)


def tape_critic(p, S, A):
    tape = p["0.W"].tape
    S, A = (x if isinstance(x, dc.Var) else tape.constant(x) for x in (S, A))
    q = dc.mlp(p, dc.concat([S, A], axis=-1), _n_layers(p))
    return dc.reshape(q, q.value.shape[:-1])


def _check_dim(what, expected, got):
    if expected != got:
        raise DimensionError(what, expected, got)


def actor_forward(s, actor: dc.ParamSet, noise_scale=0.0, rng: np.random.Generator | None = None):
    """Weights on the simplex for one state (or a batch of state vectors).

    Noise ``noise_scale * N(0, 1)`` is added to the logits; ``noise_scale=0``
    is the deterministic evaluation policy.
    """
    S = _vec(s)
    _check_dim("actor input", actor["0.W"].shape[1], S.shape[-1])
    n_out = actor[f"{_n_layers(actor) - 1}.b"].shape[0]
    tape = dc.Tape()
    noise = None
    if noise_scale > 0:
        if rng is None:
            raise WindEnsembleError("exploration noise needs an rng")
        noise = noise_scale * rng.standard_normal(S.shape[:-1] + (n_out,))
    return tape_actor(tape.params(actor), S, noise).value


def critic_forward(s, a, critic: dc.ParamSet):
    S, A = _vec(s), np.asarray(a, float)
    _check_dim("critic input", critic["0.W"].shape[1], S.shape[-1] + A.shape[-1])
    tape = dc.Tape()
    q = tape_critic(tape.params(critic), S, A).value
    return float(q) if q.ndim == 0 else q


def ensemble_predict(base_forecasts, a):
    """Weighted combination; works on single steps or broadcast batches."""
    f = np.asarray(base_forecasts, float)
    w = np.asarray(a, float)
    if f.shape[-1] != w.shape[-1]:
        raise DimensionError("ensemble weights vs forecasts", f.shape[-1], w.shape[-1])
    y = np.sum(f * w, axis=-1)
    # guard the convex-hull bound against last-ulp rounding
    y = np.clip(y, f.min(axis=-1), f.max(axis=-1))
    return float(y) if y.ndim == 0 else y


def compute_reward(y, truth, kind="absolute", scale=None):
    """Negative loss of the ensemble forecast ``y``.

    ``relative`` divides the absolute error by ``scale``, the pool's recent
    mean absolute error (see :func:`pool_loss_scale`), so calm and volatile
    periods weigh alike.
    """
    err = np.asarray(y, float) - np.asarray(truth, float)
    if kind == "squared":
        r = -(err * err)
    elif kind == "relative":
        if scale is None:
            raise WindEnsembleError("relative reward needs a loss scale")
        r = -np.abs(err) / np.maximum(np.asarray(scale, float), 1e-12)
    else:
        r = -np.abs(err)
    return float(r) if r.ndim == 0 else r


def pool_loss_scale(forecasts, truth, window):
    """Trailing mean, over the last ``window`` steps up to and including ``t``,
    of the pool's mean absolute error; shape ``(T,)``."""
    f = np.asarray(forecasts, float)
    per_step = np.mean(np.abs(f - np.asarray(truth, float)[:, None]), axis=-1)
    c = np.concatenate([[0.0], np.cumsum(per_step)])
    t = np.arange(len(per_step))
    lo = np.maximum(t + 1 - window, 0)
    return (c[t + 1] - c[lo]) / (t + 1 - lo)


def entropy(a):
    a = np.asarray(a, float)
    return float(-np.sum(np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0)), 0.0)))


@dataclass(frozen=True)
class StateScaler:
    """Per-feature standardization of state vectors.

    Embedding coordinates can differ in spread by orders of magnitude, which
    leaves the actor reading only the loudest ones. ``scale`` is floored so
    near-constant features are not blown up into noise.
    """

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, states, floor=1e-2):
        S = np.asarray(states, float).reshape(-1, np.shape(states)[-1])
        if S.shape[0] == 0:
            raise WindEnsembleError("cannot fit a state scaler on zero states")
        return cls(S.mean(axis=0), np.maximum(S.std(axis=0), floor))

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, states):
        return (np.asarray(states, float) - self.mean) / self.scale

    def as_paramset(self):
        return dc.ParamSet({"state.mean": self.mean, "state.scale": self.scale})

    @classmethod
    def from_paramset(cls, p):
        return cls(np.asarray(p["state.mean"]), np.asarray(p["state.scale"]))


# ---------------------------------------------------------------- updates

def td_targets(batch: Batch, params: AgentParams, gamma):
    A2 = actor_forward(batch.S2, params.actor)
    q2 = np.asarray(critic_forward(batch.S2, A2, params.critic))
    return batch.R + gamma * (1.0 - batch.done) * q2


def critic_grads(batch: Batch, params: AgentParams, gamma):
    """(TD loss, gradient w.r.t. the critic blocks); the target is a constant."""
    y = td_targets(batch, params, gamma)
    tape = dc.Tape()
    q = tape_critic(tape.params(params.critic), batch.S, batch.A)
    loss = dc.mean(dc.square(dc.sub(q, y)))
    return float(loss.value), dc.backward(tape, loss)


def critic_update(batch: Batch, params: AgentParams, cfg: ActorCriticConfig, optimizer: dc.Optimizer | None = None):
    """One descent step on the TD objective. Returns ``(critic', td_loss)``.

    Without an ``optimizer`` a plain gradient step with ``cfg.critic_lr`` is taken.
    """
    if len(batch) == 0:
        raise WindEnsembleError("critic_update on an empty batch")
    loss, g = critic_grads(batch, params, cfg.gamma)
    if optimizer is None:
        return dc.optimizer_step(params.critic, g, dc.OptimConfig(cfg.critic_lr, "sgd")), loss
    return optimizer.step(params.critic, g), loss


def actor_objective_grads(S, params: AgentParams):
    """(mean Q(s, pi(s)), gradient w.r.t. the actor blocks)."""
    tape = dc.Tape()
    a = tape_actor(tape.params(params.actor), np.asarray(S, float))
    crit = {k: tape.constant(v) for k, v in params.critic.items()}
    obj = dc.mean(tape_critic(crit, tape.constant(np.asarray(S, float)), a))
    g = dc.backward(tape, obj)
    return float(obj.value), {k: g[k] for k in params.actor}


def actor_update(batch: Batch, params: AgentParams, cfg: ActorCriticConfig, optimizer: dc.Optimizer | None = None):
    """One ascent step on ``mean Q(s, pi(s))``; the critic is untouched."""
    if len(batch) == 0:
        raise WindEnsembleError("actor_update on an empty batch")
    _, g = actor_objective_grads(batch.S, params)
    if optimizer is None:
        return dc.optimizer_step(params.actor, g, dc.OptimConfig(cfg.actor_lr, "sgd"), maximize=True)
    return optimizer.step(params.actor, g, maximize=True)


# ---------------------------------------------------------------- training loop

@dataclass
class FarmStream:
    """Aligned per-step inputs for one farm, chronological."""

    farm_id: str
    states: np.ndarray     # (T, state_dim)
    forecasts: np.ndarray  # (T, N)
    truth: np.ndarray      # (T,)
    t_index: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, float)
        self.forecasts = np.asarray(self.forecasts, float)
        self.truth = np.asarray(self.truth, float)
        T = len(self.truth)
        if self.t_index is None:
            self.t_index = np.arange(T)
        self.t_index = np.asarray(self.t_index, np.int64)
        for name, arr in (("states", self.states), ("forecasts", self.forecasts), ("t_index", self.t_index)):
            if len(arr) != T:
                raise WindEnsembleError(f"misaligned stream for farm {self.farm_id!r}: {name} has "
                                        f"{len(arr)} steps, truth has {T} (first unmatched index "
                                        f"{min(len(arr), T)})")
        for name, arr in (("states", self.states), ("forecasts", self.forecasts), ("truth", self.truth)):
            bad = np.flatnonzero(~np.isfinite(arr.reshape(T, -1)).all(axis=1)) if T else []
            if len(bad):
                raise WindEnsembleError(f"misaligned stream for farm {self.farm_id!r}: non-finite "
                                        f"{name} at index {int(bad[0])}")

    def __len__(self):
        return len(self.truth)


@dataclass
class TrainResult:
    params: AgentParams | dict
    log: list = field(default_factory=list)


def _check_streams(streams: Sequence[FarmStream], cfg: ActorCriticConfig):
    if not streams:
        raise WindEnsembleError("no training streams")
    for s in streams:
        if len(s) == 0:
            raise WindEnsembleError(f"empty stream for farm {s.farm_id!r}")
        _check_dim(f"state width of farm {s.farm_id!r}", cfg.state_dim, s.states.shape[1])
        _check_dim(f"forecast width of farm {s.farm_id!r}", cfg.n_models, s.forecasts.shape[1])
    ref = streams[0]
    for s in streams[1:]:
        n = min(len(s), len(ref))
        diff = np.flatnonzero(s.t_index[:n] != ref.t_index[:n])
        if len(diff) or len(s) != len(ref):
            i = int(diff[0]) if len(diff) else n
            raise WindEnsembleError(f"misaligned stream for farm {s.farm_id!r} at index {i} "
                                    f"(reference farm {ref.farm_id!r})")


def _train_agent(streams, cfg, params, rng, log, farm_label=None):
    buf = ReplayBuffer(cfg.capacity, seed=int(rng.integers(2 ** 63)))
    opt_a = dc.Optimizer(dc.OptimConfig(cfg.actor_lr, cfg.optimizer))
    opt_c = dc.Optimizer(dc.OptimConfig(cfg.critic_lr, cfg.optimizer))
    pos = [0] * len(streams)
    scales = None
    if cfg.reward == "relative":
        scales = [pool_loss_scale(st.forecasts, st.truth, cfg.reward_window) for st in streams]
    for step in range(cfg.total_steps):
        k = step % len(streams)
        s = streams[k]
        t = pos[k]
        sigma = cfg.noise_at(step)
        a = actor_forward(s.states[t], params.actor, sigma, rng)
        y = ensemble_predict(s.forecasts[t], a)
        r = compute_reward(y, s.truth[t], cfg.reward, None if scales is None else scales[k][t])
        done = t + 1 >= len(s)
        s_next = s.states[t] if done else s.states[t + 1]
        buf.push(Transition(s.states[t], a, r / cfg.reward_scale, s_next, done))
        pos[k] = 0 if done else t + 1
        td = math.nan
        if len(buf) >= cfg.warmup:
            batch = buf.sample_batch(cfg.batch_size)
            critic, td = critic_update(batch, params, cfg, opt_c)
            params = AgentParams(params.actor, critic)
            if step >= cfg.warmup + cfg.actor_delay:
                params = AgentParams(actor_update(batch, params, cfg, opt_a), params.critic)
        log.append({"step": len(log), "farm_id": farm_label or s.farm_id, "t_index": int(s.t_index[t]),
                    "reward": r, "td_loss": td, "entropy": entropy(a)})
    return params


def train(streams: Sequence[FarmStream], cfg: ActorCriticConfig, seed=0, init: AgentParams | None = None):
    """Run the actor-critic loop for ``cfg.total_steps`` steps.

    Returns a :class:`TrainResult` whose ``params`` is one
    :class:`AgentParams` (shared agent) or a dict ``farm_id -> AgentParams``.
    """
    streams = list(streams)
    _check_streams(streams, cfg)
    rng = np.random.default_rng(seed)
    start = init if init is not None else init_agent(cfg, rng)
    log: list = []
    if cfg.shared:
        params = _train_agent(streams, cfg, start, rng, log)
        return TrainResult(params, log)
    out = {}
    for s in streams:
        out[s.farm_id] = _train_agent([s], cfg, start, np.random.default_rng(rng.integers(2 ** 63)), log)
    return TrainResult(out, log)


def policy_weights(params: AgentParams | Mapping, streams: Sequence[FarmStream]):
    """Deterministic (noise-free) weights per farm, list of (T, N) arrays."""
    out = []
    for s in streams:
        p = params[s.farm_id] if isinstance(params, Mapping) else params
        out.append(actor_forward(s.states, p.actor))
    return out


LOG_FIELDS = ("step", "farm_id", "t_index", "reward", "td_loss", "entropy")


def write_log_csv(log, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in log:
            w.writerow([row["step"], row["farm_id"], row["t_index"], repr(float(row["reward"])),
                        repr(float(row["td_loss"])), repr(float(row["entropy"]))])


def save_agent(path, params: AgentParams, cfg: ActorCriticConfig | None = None):
    meta = {"format": "windensemble.agent/1"}
    if cfg is not None:
        meta["config"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
    dc.save_params(path, params.as_paramset(), meta)


def load_agent(path):
    p, meta = dc.load_params(path)
    cfg = None
    if "config" in meta:
        c = dict(meta["config"])
        c["actor_hidden"] = tuple(c["actor_hidden"])
        c["critic_hidden"] = tuple(c["critic_hidden"])
        cfg = ActorCriticConfig(**c)
    return AgentParams.from_paramset(p), cfg
