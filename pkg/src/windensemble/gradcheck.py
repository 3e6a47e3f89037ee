"""
Finite-difference gradient suite
================================

Compares reverse-mode gradients with central differences for every
differentiable building block of the pipeline. Each case draws fresh random
inputs and parameters per point and checks every input block, using the
normwise relative error ``||g - g_fd|| / max(||g||, ||g_fd||, floor)``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import embedding as emb
from . import rlens

EPS = 1e-5
FLOOR = 1e-8


@dataclass
class CaseResult:
    name: str
    points: int
    max_rel_error: float
    seconds: float


def _check(build: Callable[[dc.Tape, dict], dc.Var], inputs: dict):
    """Max relative error over all blocks of ``inputs`` for scalar ``build``."""
    tape = dc.Tape()
    vars_ = {k: tape.leaf(v, k) for k, v in inputs.items()}
    g = dc.backward(tape, build(tape, vars_))

    def f(vals):
        t = dc.Tape()
        return float(build(t, {k: t.leaf(v, k) for k, v in vals.items()}).value)

    num = dc.numeric_gradient(f, inputs, EPS)
    return max(dc.relative_error(g[k], num[k], FLOOR) for k in inputs)


def _weighted(out, rng):
    # random projection to a scalar so every output coordinate is exercised
    w = rng.normal(size=out.value.shape)
    return dc.sum(dc.mul(out, w))


def case_linear(rng):
    x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=2)
    return _check(lambda t, v: _weighted(dc.tanh(dc.linear(v["x"], v["W"], v["b"])), np.random.default_rng(1)),
                  {"x": x, "W": W, "b": b})


def case_dilated_conv(rng):
    d = int(rng.integers(1, 4))
    x = rng.normal(size=(2, 2, 10))
    K = rng.normal(size=(3, 2, 2)) * 0.5
    b = rng.normal(size=3)
    return _check(lambda t, v: _weighted(dc.conv1d_dilated(v["x"], v["K"], d, v["b"]), np.random.default_rng(2)),
                  {"x": x, "K": K, "b": b})


def case_softmax(rng):
    z = rng.normal(size=(3, 5)) * 2
    return _check(lambda t, v: _weighted(dc.softmax(v["z"]), np.random.default_rng(3)), {"z": z})


def case_gnn_layer(rng):
    d, n = 3, 6
    A = (rng.uniform(size=(n, n)) < 0.5).astype(float)
    np.fill_diagonal(A, 0.0)
    rows = A.sum(axis=1, keepdims=True)
    A = np.divide(A, rows, out=np.zeros_like(A), where=rows > 0)
    inputs = {"h": rng.normal(size=(n, d)), "gnn0.msg.W": rng.normal(size=(d, d)) * 0.7,
              "gnn0.msg.b": rng.normal(size=d), "gnn0.upd.W": rng.normal(size=(d, 2 * d)) * 0.7,
              "gnn0.upd.b": rng.normal(size=d)}

    def build(t, v):
        return _weighted(emb.tape_gnn(v, v["h"], A, 1), np.random.default_rng(4))

    return _check(build, inputs)


def case_encoder(rng):
    cfg = emb.EmbeddingConfig(window=9, channels=2, stse_dim=2, gnn_layers=0)
    p = emb.init_stse_params(cfg, rng, readout=False)
    inputs = dict(p)
    inputs["x"] = rng.uniform(size=(2, 9))

    def build(t, v):
        return _weighted(emb.tape_encode(v, v["x"], cfg), np.random.default_rng(5))

    return _check(build, inputs)


def case_mle_mlp(rng):
    cfg = emb.EmbeddingConfig(loss_horizon=4, mle_hidden=3, mle_dim=2)
    p = emb.init_mle_params(cfg, 2, rng, head=False)
    blocks = rng.uniform(size=(3, 4, 2))
    inputs = {k: v for k, v in p.items() if k != "input_scale"}
    inputs["blocks"] = blocks

    def build(t, v):
        v = dict(v, input_scale=t.constant(1.0))
        return _weighted(emb.tape_mle(v, v["blocks"], cfg), np.random.default_rng(6))

    return _check(build, inputs)


def _agent(rng, d=4, n=3):
    cfg = rlens.ActorCriticConfig(d, n, actor_hidden=(5,), critic_hidden=(5,))
    p = rlens.init_agent(cfg, rng)
    # full-scale output layer so the check does not sit near a flat region
    return cfg, rlens.AgentParams(p.actor.replace({"1.W": rng.normal(size=(n, 5))}), p.critic)


def case_actor(rng):
    cfg, p = _agent(rng)
    inputs = dict(p.actor)
    inputs["s"] = rng.normal(size=(3, cfg.state_dim))
    return _check(lambda t, v: _weighted(rlens.tape_actor(v, v["s"]), np.random.default_rng(7)), inputs)


def case_critic(rng):
    cfg, p = _agent(rng)
    inputs = dict(p.critic)
    inputs["s"] = rng.normal(size=(3, cfg.state_dim))
    inputs["a"] = rng.dirichlet(np.ones(cfg.n_models), size=3)
    return _check(lambda t, v: _weighted(rlens.tape_critic(v, v["s"], v["a"]), np.random.default_rng(8)), inputs)


def case_actor_through_critic(rng):
    """Gradient of mean Q(s, pi(s)) w.r.t. the actor, as used by actor updates."""
    cfg, p = _agent(rng)
    S = rng.normal(size=(4, cfg.state_dim))
    _, g = rlens.actor_objective_grads(S, p)

    def f(vals):
        q = rlens.critic_forward(S, rlens.actor_forward(S, dc.ParamSet(vals)), p.critic)
        return float(np.mean(q))

    num = dc.numeric_gradient(f, dict(p.actor), EPS)
    return max(dc.relative_error(g[k], num[k], FLOOR) for k in p.actor)


CASES = {
    "linear": case_linear,
    "dilated_conv": case_dilated_conv,
    "softmax": case_softmax,
    "gnn_layer": case_gnn_layer,
    "temporal_encoder": case_encoder,
    "mle_mlp": case_mle_mlp,
    "actor": case_actor,
    "critic": case_critic,
    "actor_through_critic": case_actor_through_critic,
}


def run_suite(points=100, seed=0, cases=None):
    """Run ``points`` random draws per case; returns a list of :class:`CaseResult`."""
    out = []
    names = list(cases or CASES)
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        worst = max(CASES[name](rng) for _ in range(points))
        out.append(CaseResult(name, points, worst, time.perf_counter() - t0))
    return out
