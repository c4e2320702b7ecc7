"""Cross-modal reasoning navigator.

Per step: panoramic attention from the previous history state, a trajectory
LSTM over [attended view; previous action], textual attention from the new
history state, visual attention from the textual context, and a bilinear
score between the fused context and each candidate's action embedding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .mathcore import (AttentionParams, ParamSet, ShapeError, affine_backward, attention_backward,
                       dot_product_attention, dropout_mask, glorot, log_softmax, lstm_backward,
                       lstm_bias, lstm_step, zeros_like_params)
from .worldsim import AgentState, PanoramicObservation, WorldGraph, observe, transition


@dataclass(frozen=True)
class NavigatorConfig:
    vocab_size: int
    feature_dim: int = 32
    orientation_dim: int = 16
    word_dim: int = 32
    hidden: int = 64
    action_dim: int = 32
    att_history: int = 32
    att_text: int = 64
    att_visual: int = 32
    proj: int = 32
    dropout: float = 0.5

    @property
    def action_embed_dim(self) -> int:
        return self.feature_dim + self.orientation_dim

    @property
    def context_dim(self) -> int:
        return 2 * self.hidden + self.feature_dim


def param_shapes(cfg: NavigatorConfig) -> dict:
    H, F, U = cfg.hidden, cfg.feature_dim, cfg.action_embed_dim
    return {
        "word_emb": (cfg.vocab_size, cfg.word_dim),
        "lang_W": (cfg.word_dim + H, 4 * H),
        "lang_b": (4 * H,),
        "hist_q": (H, cfg.att_history),
        "hist_k": (F, cfg.att_history),
        "act_W": (U, cfg.action_dim),
        "act_b": (cfg.action_dim,),
        "traj_W": (F + cfg.action_dim + H, 4 * H),
        "traj_b": (4 * H,),
        "text_q": (H, cfg.att_text),
        "text_k": (H, cfg.att_text),
        "vis_q": (H, cfg.att_visual),
        "vis_k": (F, cfg.att_visual),
        "W_c": (cfg.context_dim, cfg.proj),
        "b_c": (cfg.proj,),
        "W_u": (U, cfg.proj),
        "stop_appearance": (F,),
        "stop_orientation": (cfg.orientation_dim,),
    }


def init_params(cfg: NavigatorConfig, rng: np.random.Generator) -> ParamSet:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name in ("lang_b", "traj_b"):
            params[name] = lstm_bias(cfg.hidden)
        elif len(shape) == 1:
            params[name] = np.zeros(shape) if name.startswith(("act_b", "b_c")) \
                else rng.uniform(-0.1, 0.1, size=shape)
        else:
            params[name] = glorot(rng, shape)
    return params


def zero_params(cfg: NavigatorConfig) -> ParamSet:
    return {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}


def _att(params, q, k):
    return AttentionParams(params[q], params[k])


# --------------------------------------------------------------------------
# instruction encoder


@dataclass
class EncodedInstruction:
    features: np.ndarray  # (n, hidden)
    tokens: tuple
    caches: list = field(default=None, repr=False)

    def __len__(self):
        return self.features.shape[0]


def encode_instruction(tokens, params: ParamSet) -> EncodedInstruction:
    tokens = tuple(int(t) for t in tokens)
    if not tokens:
        raise ValueError("empty instruction")
    emb = params["word_emb"]
    if min(tokens) < 0 or max(tokens) >= emb.shape[0]:
        raise KeyError(f"token id outside vocabulary of size {emb.shape[0]}")
    n_hidden = params["lang_b"].shape[0] // 4
    h = np.zeros(n_hidden)
    c = np.zeros(n_hidden)
    feats, caches = [], []
    for tok in tokens:
        h, c, cache = lstm_step(emb[tok], (h, c), params["lang_W"], params["lang_b"], return_cache=True)
        feats.append(h)
        caches.append(cache)
    return EncodedInstruction(np.array(feats), tokens, caches)


def encode_instruction_backward(encoded: EncodedInstruction, params: ParamSet, dfeatures, grads):
    n_hidden = params["lang_b"].shape[0] // 4
    dh_next = np.zeros(n_hidden)
    dc_next = np.zeros(n_hidden)
    for i in range(len(encoded.tokens) - 1, -1, -1):
        dx, dh_next, dc_next, dW, db = lstm_backward(
            encoded.caches[i], params["lang_W"], dfeatures[i] + dh_next, dc_next)
        grads["lang_W"] += dW
        grads["lang_b"] += db
        grads["word_emb"][encoded.tokens[i]] += dx


# --------------------------------------------------------------------------
# single step


def candidate_embeddings(observation: PanoramicObservation, params: ParamSet) -> np.ndarray:
    rows = []
    for cand in observation.candidates:
        if cand.is_stop:
            rows.append(np.concatenate([params["stop_appearance"], params["stop_orientation"]]))
        else:
            rows.append(np.concatenate([cand.appearance, cand.orientation]))
    return np.array(rows)


def stop_embedding(params: ParamSet) -> np.ndarray:
    return np.concatenate([params["stop_appearance"], params["stop_orientation"]])


@dataclass
class NavigatorStepOutput:
    h: np.ndarray
    c: np.ndarray
    c_text: np.ndarray
    c_visual: np.ndarray
    action_probs: np.ndarray
    log_probs: np.ndarray
    attention_weights: dict
    cache: Optional[dict] = field(default=None, repr=False)


def navigator_step(h_prev, c_prev, prev_action, observation: PanoramicObservation,
                   encoded: EncodedInstruction, params: ParamSet,
                   dropout: Optional[np.ndarray] = None) -> NavigatorStepOutput:
    """One decision. `prev_action` is the raw [appearance; orientation] of the
    previously chosen candidate; `dropout` is an inverted-dropout mask over the
    fused context (None in evaluation mode)."""
    if not observation.candidates:
        raise ShapeError("observation has no candidates")
    patches = observation.patches
    v_t, alpha, att_hist = dot_product_attention(h_prev, patches, _att(params, "hist_q", "hist_k"),
                                                 return_cache=True)
    a_prev = prev_action @ params["act_W"] + params["act_b"]
    x = np.concatenate([v_t, a_prev])
    h, c, lstm_cache = lstm_step(x, (h_prev, c_prev), params["traj_W"], params["traj_b"],
                                 return_cache=True)
    c_text, beta, att_text = dot_product_attention(h, encoded.features,
                                                   _att(params, "text_q", "text_k"), return_cache=True)
    c_vis, gamma, att_vis = dot_product_attention(c_text, patches, _att(params, "vis_q", "vis_k"),
                                                  return_cache=True)
    ctx = np.concatenate([h, c_text, c_vis])
    ctx_d = ctx * dropout if dropout is not None else ctx
    query = ctx_d @ params["W_c"] + params["b_c"]
    cand = candidate_embeddings(observation, params)
    keys = cand @ params["W_u"]
    logits = keys @ query
    logp = log_softmax(logits)
    probs = np.exp(logp)
    cache = dict(prev_action=prev_action, x=x, att_hist=att_hist, lstm=lstm_cache,
                 att_text=att_text, att_vis=att_vis, ctx_d=ctx_d, dropout=dropout,
                 query=query, cand=cand, keys=keys, probs=probs)
    return NavigatorStepOutput(h, c, c_text, c_vis, probs, logp,
                               {"panoramic": alpha, "textual": beta, "visual": gamma}, cache)


def navigator_step_backward(out: NavigatorStepOutput, observation: PanoramicObservation,
                            params: ParamSet, dlogits, dh_next, dc_next, grads, dfeatures):
    """Accumulates parameter grads for one step; returns (dh_prev, dc_prev, dprev_action)."""
    cache = out.cache
    H = out.h.shape[0]
    dquery = cache["keys"].T @ dlogits
    dkeys = np.outer(dlogits, cache["query"])
    grads["W_u"] += cache["cand"].T @ dkeys
    dcand = dkeys @ params["W_u"].T
    stop = observation.stop_index
    F = params["stop_appearance"].shape[0]
    grads["stop_appearance"] += dcand[stop, :F]
    grads["stop_orientation"] += dcand[stop, F:]

    dctx_d, dWc, dbc = affine_backward(cache["ctx_d"], params["W_c"], dquery)
    grads["W_c"] += dWc
    grads["b_c"] += dbc
    dctx = dctx_d * cache["dropout"] if cache["dropout"] is not None else dctx_d
    dh = dctx[:H] + dh_next
    dc_text = dctx[H:2 * H].copy()
    dc_vis = dctx[2 * H:]

    dq, _, dwq, dwk = attention_backward(cache["att_vis"], _att(params, "vis_q", "vis_k"), dc_vis)
    grads["vis_q"] += dwq
    grads["vis_k"] += dwk
    dc_text += dq

    dq, dW, dwq, dwk = attention_backward(cache["att_text"], _att(params, "text_q", "text_k"), dc_text)
    grads["text_q"] += dwq
    grads["text_k"] += dwk
    dfeatures += dW
    dh += dq

    dx, dh_prev, dc_prev, dW_lstm, db_lstm = lstm_backward(cache["lstm"], params["traj_W"], dh, dc_next)
    grads["traj_W"] += dW_lstm
    grads["traj_b"] += db_lstm
    dv = dx[:F]
    da = dx[F:]
    dprev, dWa, dba = affine_backward(cache["prev_action"], params["act_W"], da)
    grads["act_W"] += dWa
    grads["act_b"] += dba

    dq, _, dwq, dwk = attention_backward(cache["att_hist"], _att(params, "hist_q", "hist_k"), dv)
    grads["hist_q"] += dwq
    grads["hist_k"] += dwk
    dh_prev = dh_prev + dq
    return dh_prev, dc_prev, dprev


# --------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class TrajectoryStep:
    state: AgentState
    action: int
    log_prob: float
    observation: PanoramicObservation

    @property
    def candidate_targets(self) -> tuple:
        return tuple(c.target for c in self.observation.candidates)


@dataclass
class Trajectory:
    episode_id: int
    world_id: int
    steps: list
    final_state: AgentState
    stopped: bool  # False when cut off at the step limit
    dropout_seed: Optional[int] = None

    def __len__(self):
        return len(self.steps)

    @property
    def viewpoints(self) -> list:
        return [s.state.viewpoint for s in self.steps] + [self.final_state.viewpoint]

    @property
    def states(self) -> list:
        return [s.state for s in self.steps] + [self.final_state]

    @property
    def actions(self) -> list:
        return [s.action for s in self.steps]

    @property
    def total_log_prob(self) -> float:
        return float(sum(s.log_prob for s in self.steps))


def step_dropout(dropout_seed: Optional[int], t: int, size: int, rate: float):
    if dropout_seed is None or rate <= 0:
        return None
    return dropout_mask(np.random.default_rng([dropout_seed, t]), size, rate)


Chooser = Callable[[int, AgentState, PanoramicObservation, np.ndarray], int]


@dataclass
class Unrolled:
    trajectory: Trajectory
    encoded: EncodedInstruction
    outputs: list


def unroll(params: ParamSet, world: WorldGraph, episode, choose: Chooser, max_steps: int,
           dropout_rate: float = 0.0, dropout_seed: Optional[int] = None) -> Unrolled:
    """Runs the navigator from the episode start, asking `choose` for every action."""
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    encoded = encode_instruction(episode.instruction.tokens, params)
    H = params["traj_b"].shape[0] // 4
    h, c = np.zeros(H), np.zeros(H)
    prev = stop_embedding(params)
    state = episode.start
    steps, outputs = [], []
    stopped = False
    ctx_dim = params["W_c"].shape[0]
    for t in range(max_steps):
        obs = observe(world, state, episode.noise_seed)
        mask = step_dropout(dropout_seed, t, ctx_dim, dropout_rate)
        out = navigator_step(h, c, prev, obs, encoded, params, mask)
        k = choose(t, state, obs, out.action_probs)
        if not 0 <= k < len(obs.candidates):
            raise IndexError(f"action {k} out of range at step {t}")
        steps.append(TrajectoryStep(state, int(k), float(out.log_probs[k]), obs))
        outputs.append(out)
        cand = obs.candidates[k]
        if cand.is_stop:
            stopped = True
            break
        prev = np.concatenate([cand.appearance, cand.orientation])
        state = transition(world, state, cand)
        h, c = out.h, out.c
    traj = Trajectory(episode.episode_id, episode.world_id, steps, state, stopped, dropout_seed)
    return Unrolled(traj, encoded, outputs)


def greedy_choice(t, state, obs, probs) -> int:
    return int(np.argmax(probs))  # first maximum wins ties


def sampling_choice(rng: np.random.Generator) -> Chooser:
    def choose(t, state, obs, probs):
        return int(rng.choice(len(probs), p=probs))
    return choose


def rollout(params: ParamSet, world: WorldGraph, episode, mode: str = "greedy",
            rng: Optional[np.random.Generator] = None, max_steps: int = 10,
            dropout_rate: float = 0.0, dropout_seed: Optional[int] = None) -> Trajectory:
    if mode == "greedy":
        chooser = greedy_choice
    elif mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        chooser = sampling_choice(rng)
    else:
        raise ValueError(f"unknown rollout mode {mode!r}")
    return unroll(params, world, episode, chooser, max_steps, dropout_rate, dropout_seed).trajectory


def replay_choice(trajectory: Trajectory) -> Chooser:
    def choose(t, state, obs, probs):
        step = trajectory.steps[t]
        if state != step.state or tuple(c.target for c in obs.candidates) != step.candidate_targets:
            raise ValueError(f"trajectory does not replay at step {t}")
        return step.action
    return choose


def backward_unrolled(unrolled: Unrolled, params: ParamSet, per_step_dlogits) -> ParamSet:
    grads = zeros_like_params(params)
    H = params["traj_b"].shape[0] // 4
    dh, dc = np.zeros(H), np.zeros(H)
    dfeatures = np.zeros_like(unrolled.encoded.features)
    steps = unrolled.trajectory.steps
    for t in range(len(steps) - 1, -1, -1):
        out = unrolled.outputs[t]
        dh, dc, dprev = navigator_step_backward(out, steps[t].observation, params,
                                                per_step_dlogits[t], dh, dc, grads, dfeatures)
        if t == 0:
            F = params["stop_appearance"].shape[0]
            grads["stop_appearance"] += dprev[:F]
            grads["stop_orientation"] += dprev[F:]
    encode_instruction_backward(unrolled.encoded, params, dfeatures, grads)
    return grads


def logprob_dlogits(out: NavigatorStepOutput, action: int, weight: float) -> np.ndarray:
    d = -weight * out.action_probs
    d[action] += weight
    return d


def trajectory_logprob_backward(params: ParamSet, world: WorldGraph, episode, trajectory: Trajectory,
                                per_step_weights, dropout_rate: float = 0.0):
    """Gradient of Σ_t w_t log π(a_t|s_t) by exact replay of the trajectory.

    Returns (weighted log-likelihood, grads).
    """
    weights = np.asarray(per_step_weights, dtype=np.float64)
    if weights.shape != (len(trajectory),):
        raise ValueError(f"need {len(trajectory)} step weights, got {weights.shape}")
    unrolled = unroll(params, world, episode, replay_choice(trajectory), len(trajectory),
                      dropout_rate, trajectory.dropout_seed)
    replayed = unrolled.trajectory
    if len(replayed) != len(trajectory) or replayed.final_state != trajectory.final_state:
        raise ValueError("trajectory does not replay under this world/episode")
    dlogits = [logprob_dlogits(out, s.action, w)
               for out, s, w in zip(unrolled.outputs, replayed.steps, weights)]
    value = float(sum(w * s.log_prob for s, w in zip(replayed.steps, weights)))
    return value, backward_unrolled(unrolled, params, dlogits)
