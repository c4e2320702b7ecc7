"""Differentiable building blocks with hand-written backward passes.

Everything is float64 numpy. Parameter sets are plain ordered dicts of
arrays; gradients come back as fresh dicts and are never written in place.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ParamSet = dict[str, np.ndarray]


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def as_tensor(values, shape=None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains non-finite values")
    return arr


def zeros_like_params(params: ParamSet) -> ParamSet:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: ParamSet) -> ParamSet:
    return {k: v.copy() for k, v in params.items()}


def add_into(acc: ParamSet, grads: ParamSet, scale: float = 1.0) -> None:
    for k, g in grads.items():
        acc[k] += scale * g


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax logits must be finite")
    e = np.exp(z - z.max())
    return e / e.sum()


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("log_softmax of an empty vector")
    s = z - z.max()
    return s - np.log(np.exp(s).sum())


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    return probs * (dprobs - probs @ dprobs)


# --------------------------------------------------------------------------
# affine


def affine(x, weight, bias) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return x @ weight + bias


def affine_backward(x, weight, dout):
    """Returns (dx, dweight, dbias)."""
    x = np.asarray(x)
    if x.ndim == 1:
        return weight @ dout, np.outer(x, dout), dout.copy()
    return dout @ weight.T, x.T @ dout, dout.sum(axis=0)


# --------------------------------------------------------------------------
# dot-product attention


@dataclass(frozen=True)
class AttentionParams:
    proj_query: np.ndarray
    proj_key: np.ndarray

    def __post_init__(self):
        if self.proj_query.shape[1] != self.proj_key.shape[1]:
            raise ShapeError(
                f"projected dims differ: {self.proj_query.shape} vs {self.proj_key.shape}")


@dataclass
class AttentionCache:
    query: np.ndarray
    features: np.ndarray
    q_proj: np.ndarray
    k_proj: np.ndarray
    weights: np.ndarray


def dot_product_attention(query, features, params: AttentionParams, return_cache: bool = False):
    """Bilinear attention: softmax((q Wq)(f_j Wk)^T) weighting the raw features."""
    q = np.asarray(query, dtype=np.float64)
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ShapeError("attention needs a non-empty (n, d) feature matrix")
    wq, wk = params.proj_query, params.proj_key
    if q.shape != (wq.shape[0],) or feats.shape[1] != wk.shape[0]:
        raise ShapeError(
            f"attention: query {q.shape} / Wq {wq.shape}, features {feats.shape} / Wk {wk.shape}")
    q_proj = q @ wq
    k_proj = feats @ wk
    weights = softmax(k_proj @ q_proj)
    context = weights @ feats
    if return_cache:
        return context, weights, AttentionCache(q, feats, q_proj, k_proj, weights)
    return context, weights


def attention_backward(cache: AttentionCache, params: AttentionParams, dcontext):
    """Returns (dquery, dfeatures, dproj_query, dproj_key)."""
    a = cache.weights
    da = cache.features @ dcontext
    dscores = a * (da - a @ da)
    dk_proj = np.outer(dscores, cache.q_proj)
    dq_proj = cache.k_proj.T @ dscores
    dfeatures = np.outer(a, dcontext) + dk_proj @ params.proj_key.T
    dwk = cache.features.T @ dk_proj
    dwq = np.outer(cache.query, dq_proj)
    dquery = params.proj_query @ dq_proj
    return dquery, dfeatures, dwq, dwk


# --------------------------------------------------------------------------
# LSTM cell, gate order (input, forget, candidate, output)


@dataclass
class LSTMCache:
    xh: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


def lstm_step(x, hidden, weight, bias, return_cache: bool = False):
    """One standard LSTM step. weight: (in + H, 4H), bias: (4H,)."""
    h, c = hidden
    x = np.asarray(x, dtype=np.float64)
    n_hidden = h.shape[0]
    if weight.shape != (x.shape[0] + n_hidden, 4 * n_hidden) or bias.shape != (4 * n_hidden,) \
            or c.shape != h.shape:
        raise ShapeError(
            f"lstm: x {x.shape}, h {h.shape}, c {c.shape}, weight {weight.shape}, bias {bias.shape}")
    xh = np.concatenate([x, h])
    z = xh @ weight + bias
    i = sigmoid(z[:n_hidden])
    f = sigmoid(z[n_hidden:2 * n_hidden])
    g = np.tanh(z[2 * n_hidden:3 * n_hidden])
    o = sigmoid(z[3 * n_hidden:])
    c_new = f * c + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    if return_cache:
        return h_new, c_new, LSTMCache(xh, c, i, f, g, o, tanh_c)
    return h_new, c_new


def lstm_backward(cache: LSTMCache, weight, dh, dc):
    """Returns (dx, dh_prev, dc_prev, dweight, dbias)."""
    i, f, g, o, tanh_c = cache.i, cache.f, cache.g, cache.o, cache.tanh_c
    do = dh * tanh_c
    dc_total = dc + dh * o * (1.0 - tanh_c ** 2)
    dz = np.concatenate([
        dc_total * g * i * (1.0 - i),
        dc_total * cache.c_prev * f * (1.0 - f),
        dc_total * i * (1.0 - g ** 2),
        do * o * (1.0 - o),
    ])
    dxh = weight @ dz
    n_in = cache.xh.shape[0] - dh.shape[0]
    return dxh[:n_in], dxh[n_in:], dc_total * f, np.outer(cache.xh, dz), dz


# --------------------------------------------------------------------------
# dropout


def dropout_mask(rng: np.random.Generator, size: int, rate: float) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by 1/(1-rate)."""
    if rate <= 0.0:
        return np.ones(size)
    keep = rng.random(size) >= rate
    return keep / (1.0 - rate)


# --------------------------------------------------------------------------
# initialisation


def glorot(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def lstm_bias(n_hidden: int) -> np.ndarray:
    b = np.zeros(4 * n_hidden)
    b[n_hidden:2 * n_hidden] = 1.0
    return b


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: ParamSet = field(default_factory=dict)
    v: ParamSet = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet) -> "AdamState":
        return cls(0, zeros_like_params(params), zeros_like_params(params))

    def copy(self) -> "AdamState":
        return AdamState(self.step, copy_params(self.m), copy_params(self.v))


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def adam_step(params: ParamSet, grads: ParamSet, state: AdamState, hyper: AdamHyper):
    """Bias-corrected Adam; L2 decay enters as an additive gradient term.

    Returns new (params, state); the inputs are left untouched.
    """
    if params.keys() != grads.keys():
        raise ShapeError(f"param/grad names differ: {sorted(set(params) ^ set(grads))}")
    if state.m and state.m.keys() != params.keys():
        raise ShapeError("optimizer state does not track these parameters")
    step = state.step + 1
    bc1 = 1.0 - hyper.beta1 ** step
    bc2 = 1.0 - hyper.beta2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad {g.shape} vs param {p.shape}")
        if hyper.weight_decay:
            g = g + hyper.weight_decay * p
        m_prev = state.m.get(name)
        v_prev = state.v.get(name)
        m = (1.0 - hyper.beta1) * g if m_prev is None else hyper.beta1 * m_prev + (1.0 - hyper.beta1) * g
        v = (1.0 - hyper.beta2) * g * g if v_prev is None else hyper.beta2 * v_prev + (1.0 - hyper.beta2) * g * g
        new_params[name] = p - hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(step, new_m, new_v)


# --------------------------------------------------------------------------
# finite-difference oracle


def grad_check(loss_fn: Callable[[ParamSet], float], params: ParamSet, analytic: ParamSet,
               epsilon: float = 1e-5, names=None) -> float:
    """Max relative error between `analytic` and central differences of `loss_fn`.

    relative error = |a - f| / max(|a|, |f|, 1e-8), taken over every coordinate
    of the selected parameters.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    worst = 0.0
    for name in (names if names is not None else params):
        base = params[name]
        flat = base.reshape(-1)
        grad = analytic[name].reshape(-1)
        for idx in range(flat.size):
            probe = dict(params)
            bumped = flat.copy()
            bumped[idx] += epsilon
            probe[name] = bumped.reshape(base.shape)
            up = loss_fn(probe)
            bumped[idx] -= 2 * epsilon
            probe[name] = bumped.reshape(base.shape)
            down = loss_fn(probe)
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while probing {name}[{idx}]")
            fd = (up - down) / (2 * epsilon)
            err = abs(grad[idx] - fd) / max(abs(grad[idx]), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
