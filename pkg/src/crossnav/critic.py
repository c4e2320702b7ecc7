"""Matching critic: a trajectory-to-instruction sequence model.

The intrinsic reward is how well the trajectory reconstructs its
instruction: the length-normalised probability of the instruction tokens
under a teacher-forced, attention-based decoder.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mathcore import (AttentionParams, ParamSet, affine_backward, attention_backward,
                       dot_product_attention, glorot, log_softmax, lstm_backward, lstm_bias,
                       lstm_step, zeros_like_params)
from .navigator import Trajectory


@dataclass(frozen=True)
class CriticConfig:
    vocab_size: int
    feature_dim: int = 32
    orientation_dim: int = 16
    word_dim: int = 32
    hidden: int = 64
    action_dim: int = 32
    att_history: int = 32
    att_decoder: int = 64
    mlp: int = 64
    dropout: float = 0.0
    # "geometric": exp(mean log p); "mean_logprob": mean log p
    reward_form: str = "geometric"

    @property
    def action_embed_dim(self) -> int:
        return self.feature_dim + self.orientation_dim


def param_shapes(cfg: CriticConfig) -> dict:
    H, F, U, E = cfg.hidden, cfg.feature_dim, cfg.action_embed_dim, cfg.word_dim
    return {
        "enc_hist_q": (H, cfg.att_history),
        "enc_hist_k": (F, cfg.att_history),
        "enc_act_W": (U, cfg.action_dim),
        "enc_act_b": (cfg.action_dim,),
        "enc_W": (F + cfg.action_dim + H, 4 * H),
        "enc_b": (4 * H,),
        "stop_appearance": (F,),
        "stop_orientation": (cfg.orientation_dim,),
        "word_emb": (cfg.vocab_size, E),
        "bos": (E,),
        "dec_W": (E + H, 4 * H),
        "dec_b": (4 * H,),
        "dec_q": (H, cfg.att_decoder),
        "dec_k": (H, cfg.att_decoder),
        "out1_W": (2 * H, cfg.mlp),
        "out1_b": (cfg.mlp,),
        "out2_W": (cfg.mlp, cfg.vocab_size),
        "out2_b": (cfg.vocab_size,),
    }


def init_params(cfg: CriticConfig, rng: np.random.Generator) -> ParamSet:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name in ("enc_b", "dec_b"):
            params[name] = lstm_bias(cfg.hidden)
        elif name in ("enc_act_b", "out1_b", "out2_b"):
            params[name] = np.zeros(shape)
        elif len(shape) == 1:
            params[name] = rng.uniform(-0.1, 0.1, size=shape)
        else:
            params[name] = glorot(rng, shape)
    return params


def zero_params(cfg: CriticConfig) -> ParamSet:
    return {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}


@dataclass
class IntrinsicReward:
    value: float
    per_token_logprobs: np.ndarray

    @classmethod
    def from_logprobs(cls, logprobs, form: str = "geometric") -> "IntrinsicReward":
        lp = np.asarray(logprobs, dtype=np.float64)
        if form == "geometric":
            return cls(float(np.exp(lp.mean())), lp)
        if form == "mean_logprob":
            return cls(float(lp.mean()), lp)
        raise ValueError(f"unknown reward form {form!r}")


def _action_embedding(step, params):
    cand = step.observation.candidates[step.action]
    if cand.is_stop:
        return np.concatenate([params["stop_appearance"], params["stop_orientation"]])
    return np.concatenate([cand.appearance, cand.orientation])


@dataclass
class EncodedTrajectory:
    features: np.ndarray  # (T, hidden)
    h: np.ndarray
    c: np.ndarray
    caches: list = field(default=None, repr=False)


def encode_trajectory(trajectory: Trajectory, params: ParamSet) -> EncodedTrajectory:
    """Per-step LSTM states over [attended panorama; executed action]."""
    if len(trajectory) == 0:
        raise ValueError("cannot encode an empty trajectory")
    H = params["enc_b"].shape[0] // 4
    h, c = np.zeros(H), np.zeros(H)
    att = AttentionParams(params["enc_hist_q"], params["enc_hist_k"])
    feats, caches = [], []
    for step in trajectory.steps:
        v, _, att_cache = dot_product_attention(h, step.observation.patches, att, return_cache=True)
        u = _action_embedding(step, params)
        a = u @ params["enc_act_W"] + params["enc_act_b"]
        h, c, lstm_cache = lstm_step(np.concatenate([v, a]), (h, c), params["enc_W"], params["enc_b"],
                                     return_cache=True)
        feats.append(h)
        caches.append((att_cache, u, lstm_cache, step.observation.candidates[step.action].is_stop))
    return EncodedTrajectory(np.array(feats), h, c, caches)


def _encode_backward(enc: EncodedTrajectory, params, dfeatures, dh_final, dc_final, grads):
    att = AttentionParams(params["enc_hist_q"], params["enc_hist_k"])
    F = params["enc_hist_k"].shape[0]
    dh, dc = dh_final.copy(), dc_final.copy()
    for t in range(len(enc.caches) - 1, -1, -1):
        att_cache, u, lstm_cache, is_stop = enc.caches[t]
        dx, dh, dc, dW, db = lstm_backward(lstm_cache, params["enc_W"], dfeatures[t] + dh, dc)
        grads["enc_W"] += dW
        grads["enc_b"] += db
        du, dWa, dba = affine_backward(u, params["enc_act_W"], dx[F:])
        grads["enc_act_W"] += dWa
        grads["enc_act_b"] += dba
        if is_stop:
            grads["stop_appearance"] += du[:F]
            grads["stop_orientation"] += du[F:]
        dq, _, dwq, dwk = attention_backward(att_cache, att, dx[:F])
        grads["enc_hist_q"] += dwq
        grads["enc_hist_k"] += dwk
        dh = dh + dq


@dataclass
class _Decoded:
    logprobs: np.ndarray
    encoded: EncodedTrajectory
    caches: list


def _decode(tokens, trajectory: Trajectory, params: ParamSet, masks=None) -> _Decoded:
    tokens = tuple(int(t) for t in tokens)
    if not tokens:
        raise ValueError("empty instruction")
    V = params["out2_b"].shape[0]
    if min(tokens) < 0 or max(tokens) >= V:
        raise KeyError(f"token id outside vocabulary of size {V}")
    enc = encode_trajectory(trajectory, params)
    att = AttentionParams(params["dec_q"], params["dec_k"])
    h, c = enc.h, enc.c
    logprobs = np.empty(len(tokens))
    caches = []
    for i, tok in enumerate(tokens):
        emb = params["bos"] if i == 0 else params["word_emb"][tokens[i - 1]]
        h, c, lstm_cache = lstm_step(emb, (h, c), params["dec_W"], params["dec_b"], return_cache=True)
        ctx, _, att_cache = dot_product_attention(h, enc.features, att, return_cache=True)
        hc = np.concatenate([h, ctx])
        mask = masks[i] if masks is not None else None
        hc_d = hc * mask if mask is not None else hc
        z = np.tanh(hc_d @ params["out1_W"] + params["out1_b"])
        lp = log_softmax(z @ params["out2_W"] + params["out2_b"])
        logprobs[i] = lp[tok]
        caches.append((lstm_cache, att_cache, hc_d, mask, z, np.exp(lp)))
    return _Decoded(logprobs, enc, caches)


def instruction_logprob(instruction, trajectory: Trajectory, params: ParamSet) -> np.ndarray:
    """Per-token log p(x_i | x_<i, trajectory)."""
    tokens = getattr(instruction, "tokens", instruction)
    return _decode(tokens, trajectory, params).logprobs


def intrinsic_reward(instruction, trajectory: Trajectory, params: ParamSet,
                     form: str = "geometric") -> IntrinsicReward:
    return IntrinsicReward.from_logprobs(instruction_logprob(instruction, trajectory, params), form)


def critic_mle_gradients(instruction, trajectory: Trajectory, params: ParamSet, masks=None):
    """Length-normalised negative log-likelihood and its gradient."""
    tokens = tuple(getattr(instruction, "tokens", instruction))
    dec = _decode(tokens, trajectory, params, masks)
    n = len(tokens)
    loss = float(-dec.logprobs.sum() / n)
    grads = zeros_like_params(params)
    att = AttentionParams(params["dec_q"], params["dec_k"])
    H = params["dec_b"].shape[0] // 4
    E = params["bos"].shape[0]
    dfeatures = np.zeros_like(dec.encoded.features)
    dh, dc = np.zeros(H), np.zeros(H)
    for i in range(n - 1, -1, -1):
        lstm_cache, att_cache, hc_d, mask, z, probs = dec.caches[i]
        dlogits = probs / n
        dlogits[tokens[i]] -= 1.0 / n
        dz, dW2, db2 = affine_backward(z, params["out2_W"], dlogits)
        grads["out2_W"] += dW2
        grads["out2_b"] += db2
        dpre = dz * (1.0 - z ** 2)
        dhc, dW1, db1 = affine_backward(hc_d, params["out1_W"], dpre)
        grads["out1_W"] += dW1
        grads["out1_b"] += db1
        if mask is not None:
            dhc = dhc * mask
        dq, dfeat, dwq, dwk = attention_backward(att_cache, att, dhc[H:])
        grads["dec_q"] += dwq
        grads["dec_k"] += dwk
        dfeatures += dfeat
        dx, dh, dc, dW, db = lstm_backward(lstm_cache, params["dec_W"], dhc[:H] + dq + dh, dc)
        grads["dec_W"] += dW
        grads["dec_b"] += db
        if i == 0:
            grads["bos"] += dx[:E]
        else:
            grads["word_emb"][tokens[i - 1]] += dx[:E]
    _encode_backward(dec.encoded, params, dfeatures, dh, dc, grads)
    return loss, grads


def critic_dropout_masks(rng: Optional[np.random.Generator], n_tokens: int, size: int, rate: float):
    if rng is None or rate <= 0:
        return None
    keep = rng.random((n_tokens, size)) >= rate
    return keep / (1.0 - rate)
