"""Finite-difference checks of the hand-written backward passes.

Each check builds a small model on a small world so that every parameter
coordinate can be probed, then reports the worst relative error.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import critic as critic_mod
from . import navigator as nav
from .learner import demonstration_trajectory
from .mathcore import grad_check
from .worldsim import (EpisodeConfig, Vocabulary, WorldConfig, generate_episode, generate_world,
                       observe)

TOLERANCE = 1e-4
EPSILON = 1e-5

_WORLD = WorldConfig(n_viewpoints=10, mean_degree=2.6, feature_dim=5, m=4, landmark_vocab=3,
                     noise_sigma=0.1, tile_factor=1)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_coords: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _fixture(seed: int, hops: int):
    world = generate_world(_WORLD, seed)
    vocab = Vocabulary(_WORLD.landmark_vocab)
    ep = generate_episode(world, vocab, seed, EpisodeConfig(min_hops=hops, max_hops=hops))
    ncfg = nav.NavigatorConfig(len(vocab), _WORLD.feature_dim, world.orientation_dim, word_dim=4,
                               hidden=4, action_dim=3, att_history=3, att_text=4, att_visual=3,
                               proj=3)
    ccfg = critic_mod.CriticConfig(len(vocab), _WORLD.feature_dim, world.orientation_dim, word_dim=4,
                                   hidden=4, action_dim=3, att_history=3, att_decoder=4, mlp=4)
    return world, ep, ncfg, ccfg


def _scaled(params, rng, scale=3.0):
    # Push weights away from the tiny init so every path carries a visible gradient.
    return {k: v + scale * 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}


def check_navigator_step(seed: int = 0) -> CheckResult:
    world, ep, ncfg, _ = _fixture(seed, 2)
    rng = np.random.default_rng([seed, 11])
    params = _scaled(nav.init_params(ncfg, rng), rng)
    H = ncfg.hidden
    h0, c0 = 0.5 * rng.standard_normal(H), 0.5 * rng.standard_normal(H)
    prev = rng.standard_normal(ncfg.feature_dim + ncfg.orientation_dim)
    obs = observe(world, ep.start, ep.noise_seed)
    mask = nav.step_dropout(123, 0, 2 * H + ncfg.feature_dim, 0.3)
    rh, rc = rng.standard_normal(H), rng.standard_normal(H)
    action = len(obs.candidates) - 1

    def loss(p):
        enc = nav.encode_instruction(ep.instruction.tokens, p)
        out = nav.navigator_step(h0, c0, prev, obs, enc, p, mask)
        return float(out.log_probs[action] + rh @ out.h + rc @ out.c)

    enc = nav.encode_instruction(ep.instruction.tokens, params)
    out = nav.navigator_step(h0, c0, prev, obs, enc, params, mask)
    grads = nav.zero_params(ncfg)
    dfeat = np.zeros_like(enc.features)
    nav.navigator_step_backward(out, obs, params, nav.logprob_dlogits(out, action, 1.0), rh, rc,
                                grads, dfeat)
    nav.encode_instruction_backward(enc, params, dfeat, grads)
    return _run("navigator_step", loss, params, grads)


def check_navigator_rollout(seed: int = 0) -> CheckResult:
    """Teacher-forced three-step rollout (two moves, then STOP), with dropout."""
    world, ep, ncfg, _ = _fixture(seed, 2)
    rng = np.random.default_rng([seed, 12])
    params = _scaled(nav.init_params(ncfg, rng), rng)
    demo = replace(demonstration_trajectory(world, ep), dropout_seed=99)
    assert len(demo) == 3
    weights = np.array([1.0, 0.7, 1.3])

    def loss(p):
        return nav.trajectory_logprob_backward(p, world, ep, demo, weights, 0.3)[0]

    _, grads = nav.trajectory_logprob_backward(params, world, ep, demo, weights, 0.3)
    return _run("navigator_rollout", loss, params, grads)


def check_critic(seed: int = 0) -> CheckResult:
    world, ep, _, ccfg = _fixture(seed, 2)
    rng = np.random.default_rng([seed, 13])
    params = _scaled(critic_mod.init_params(ccfg, rng), rng)
    demo = demonstration_trajectory(world, ep)
    masks = critic_mod.critic_dropout_masks(np.random.default_rng(5), len(ep.instruction.tokens),
                                            2 * ccfg.hidden, 0.3)

    def loss(p):
        return critic_mod.critic_mle_gradients(ep.instruction, demo, p, masks)[0]

    _, grads = critic_mod.critic_mle_gradients(ep.instruction, demo, params, masks)
    return _run("critic_mle", loss, params, grads)


def _run(name, loss, params, grads) -> CheckResult:
    t = time.perf_counter()
    err = grad_check(loss, params, grads, EPSILON)
    return CheckResult(name, err, sum(v.size for v in params.values()), time.perf_counter() - t)


def run_all(seed: int = 0) -> list:
    return [check_navigator_step(seed), check_navigator_rollout(seed), check_critic(seed)]
