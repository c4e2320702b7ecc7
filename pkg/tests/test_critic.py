import math

import numpy as np
import pytest

from conftest import make_world
from crossnav import critic as C
from crossnav.learner import demonstration_trajectory
from crossnav.mathcore import AttentionParams, dot_product_attention, grad_check, lstm_step, softmax
from crossnav.navigator import Trajectory
from crossnav.worldsim import EpisodeConfig, Vocabulary, generate_episode


@pytest.fixture
def pair():
    w = make_world([(0, 0), (4, 0), (8, 0)], [(0, 1), (1, 2)], landmarks=[0, 1, 2], noise_sigma=0.1)
    vocab = Vocabulary(3)
    ep = generate_episode(w, vocab, 0, EpisodeConfig(min_hops=1, max_hops=1))
    return w, vocab, ep, demonstration_trajectory(w, ep)


def cfg_for(w, vocab_size, **kw):
    base = dict(vocab_size=vocab_size, feature_dim=w.feature_dim, orientation_dim=w.orientation_dim,
                word_dim=4, hidden=4, action_dim=3, att_history=3, att_decoder=4, mlp=5)
    base.update(kw)
    return C.CriticConfig(**base)


def test_encode_shapes(pair):
    w, vocab, ep, demo = pair
    cfg = cfg_for(w, len(vocab))
    one = Trajectory(0, 0, demo.steps[:1], demo.steps[0].state, True)
    assert C.encode_trajectory(one, C.init_params(cfg, np.random.default_rng(0))).features.shape == (1, 4)
    assert np.all(C.encode_trajectory(demo, C.zero_params(cfg)).features == 0)
    with pytest.raises(ValueError):
        C.encode_trajectory(Trajectory(0, 0, [], demo.final_state, True), C.zero_params(cfg))


def test_vocab_of_one(pair):
    w, _, _, demo = pair
    cfg = cfg_for(w, 1)
    params = C.init_params(cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(C.instruction_logprob([0, 0, 0], demo, params), [0, 0, 0])
    loss, grads = C.critic_mle_gradients([0, 0], demo, params)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.values())


def test_uniform_head(pair):
    w, _, _, demo = pair
    params = C.zero_params(cfg_for(w, 8))
    for n in (1, 3, 17):
        toks = list(np.arange(n) % 8)
        np.testing.assert_allclose(C.instruction_logprob(toks, demo, params), -math.log(8), atol=1e-15)
        assert abs(C.intrinsic_reward(toks, demo, params).value - 0.125) <= 1e-12
        assert C.critic_mle_gradients(toks, demo, params)[0] == pytest.approx(math.log(8), abs=1e-12)


def test_unknown_token(pair):
    w, _, _, demo = pair
    with pytest.raises(KeyError):
        C.instruction_logprob([8], demo, C.zero_params(cfg_for(w, 8)))
    with pytest.raises(ValueError):
        C.instruction_logprob([], demo, C.zero_params(cfg_for(w, 8)))


def _stepwise_probability(tokens, traj, p):
    # independent re-evaluation: probabilities multiplied, logs taken once at the end
    H = p["enc_b"].shape[0] // 4
    h, c = np.zeros(H), np.zeros(H)
    feats = []
    for step in traj.steps:
        v, _ = dot_product_attention(h, step.observation.patches,
                                     AttentionParams(p["enc_hist_q"], p["enc_hist_k"]))
        cand = step.observation.candidates[step.action]
        u = (np.concatenate([p["stop_appearance"], p["stop_orientation"]]) if cand.is_stop
             else np.concatenate([cand.appearance, cand.orientation]))
        h, c = lstm_step(np.concatenate([v, u @ p["enc_act_W"] + p["enc_act_b"]]), (h, c),
                         p["enc_W"], p["enc_b"])
        feats.append(h)
    feats = np.array(feats)
    prob = 1.0
    prev = p["bos"]
    for tok in tokens:
        h, c = lstm_step(prev, (h, c), p["dec_W"], p["dec_b"])
        ctx, _ = dot_product_attention(h, feats, AttentionParams(p["dec_q"], p["dec_k"]))
        z = np.tanh(np.concatenate([h, ctx]) @ p["out1_W"] + p["out1_b"])
        prob *= softmax(z @ p["out2_W"] + p["out2_b"])[tok]
        prev = p["word_emb"][tok]
    return prob


def test_logprob_matches_stepwise_oracle(pair):
    w, vocab, ep, demo = pair
    params = C.init_params(cfg_for(w, len(vocab)), np.random.default_rng(5))
    toks = ep.instruction.tokens
    lp = C.instruction_logprob(toks, demo, params)
    assert lp.sum() == pytest.approx(math.log(_stepwise_probability(toks, demo, params)), rel=1e-12)
    r = C.intrinsic_reward(toks, demo, params)
    assert r.value == pytest.approx(math.exp(lp.mean()), rel=1e-15)
    assert 0 < r.value <= 1


def test_reward_forms():
    lp = np.log([0.5, 0.25])
    assert C.IntrinsicReward.from_logprobs(lp).value == pytest.approx(math.sqrt(0.125))
    assert C.IntrinsicReward.from_logprobs(lp, "mean_logprob").value == pytest.approx(lp.mean())
    assert C.IntrinsicReward.from_logprobs([0.0, 0.0]).value == 1.0
    with pytest.raises(ValueError):
        C.IntrinsicReward.from_logprobs(lp, "arith")


def test_reward_monotone_in_single_token():
    lp = np.log([0.3, 0.6, 0.2])
    base = C.IntrinsicReward.from_logprobs(lp).value
    for i in range(3):
        up = lp.copy()
        up[i] = np.log(np.exp(up[i]) + 0.05)
        assert C.IntrinsicReward.from_logprobs(up).value > base


def test_mle_gradient_fd(pair):
    w, vocab, ep, demo = pair
    rng = np.random.default_rng(6)
    cfg = cfg_for(w, len(vocab))
    params = {k: v + 0.2 * rng.standard_normal(v.shape) for k, v in C.init_params(cfg, rng).items()}
    toks = ep.instruction.tokens[:3]
    assert len(demo) == 2
    _, g = C.critic_mle_gradients(toks, demo, params)
    err = grad_check(lambda p: C.critic_mle_gradients(toks, demo, p)[0], params, g)
    assert err < 1e-4


def test_dropout_masks():
    assert C.critic_dropout_masks(None, 3, 4, 0.5) is None
    m = C.critic_dropout_masks(np.random.default_rng(0), 3, 4, 0.5)
    assert m.shape == (3, 4) and set(np.unique(m)) <= {0.0, 2.0}
