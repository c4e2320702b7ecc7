"""Rewards, the three training regimes, and the phase orchestrator."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import critic as critic_mod
from . import navigator as nav
from .evalmetrics import aggregate, evaluate_episode
from .mathcore import AdamHyper, AdamState, ParamSet, adam_step, add_into, zeros_like_params
from .worldsim import (Dataset, WorldError, demonstration_action, geodesic_distance,
                       observe, transition)

log = logging.getLogger(__name__)


class IntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    gamma: float = 0.95
    delta: float = 2.0
    d_success: float = 3.0
    success_indicator: bool = True

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.delta < 0 or self.d_success < 0:
            raise ValueError("delta and d_success must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    lr_sl: float = 1e-4
    lr_rl: float = 1e-5
    lr_sil: float = 1e-5
    lr_critic: float = 1e-4
    dropout: float = 0.5
    weight_decay: float = 0.0005
    sil_rollouts: int = 10
    max_path: int = 10
    max_instruction: int = 80
    critic_epochs: int = 10
    sl_epochs: int = 30
    rl_epochs: int = 0
    sil_epochs: int = 0
    sil_mode: str = "train"  # "train" | "unseen"
    sil_loss: str = "weighted"  # "weighted": -R_intr log pi; "plain": -log pi
    batch_size: int = 1
    patience: int = 5
    advantage_baseline: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("lr_sl", "lr_rl", "lr_sil", "lr_critic"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sil_rollouts < 1 or self.batch_size < 1 or self.max_path < 1:
            raise ValueError("sil_rollouts, batch_size and max_path must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.sil_mode not in ("train", "unseen"):
            raise ValueError("sil_mode must be 'train' or 'unseen'")
        if self.sil_loss not in ("weighted", "plain"):
            raise ValueError("sil_loss must be 'weighted' or 'plain'")

    def hyper(self, lr: float) -> AdamHyper:
        return AdamHyper(lr=lr, weight_decay=self.weight_decay)


# --------------------------------------------------------------------------
# rewards


def immediate_reward(world, target: int, state, next_state, is_final: bool, d: float) -> float:
    if is_final:
        return 1.0 if geodesic_distance(world, next_state.viewpoint, target) <= d else 0.0
    return geodesic_distance(world, state.viewpoint, target) - \
        geodesic_distance(world, next_state.viewpoint, target)


def immediate_rewards(world, target: int, trajectory: nav.Trajectory, cfg: RewardConfig) -> np.ndarray:
    """Distance reduction per step; the last step gets the success indicator.

    The last step's indicator is read at the final position. With the
    indicator disabled the last step keeps its distance-reduction term.
    """
    states = trajectory.states
    T = len(trajectory)
    out = np.empty(T)
    for t in range(T):
        if t < T - 1:
            out[t] = immediate_reward(world, target, states[t], states[t + 1], False, cfg.d_success)
        elif cfg.success_indicator:
            out[t] = immediate_reward(world, target, states[t], states[T], True, cfg.d_success)
        else:
            out[t] = immediate_reward(world, target, states[t], states[T], False, cfg.d_success)
    return out


def discounted_returns(immediate, gamma: float) -> np.ndarray:
    r = np.asarray(immediate, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty reward sequence")
    out = np.empty_like(r)
    running = 0.0
    for t in range(r.size - 1, -1, -1):
        running = r[t] + gamma * running
        out[t] = running
    return out


def advantages(returns, r_intr: float, delta: float) -> np.ndarray:
    return np.asarray(returns, dtype=np.float64) + delta * r_intr


@dataclass
class RewardRecord:
    immediate: np.ndarray
    returns: np.ndarray
    intrinsic: float
    advantages: np.ndarray


def reward_record(world, episode, trajectory, critic_params, cfg: RewardConfig,
                  reward_form: str = "geometric") -> RewardRecord:
    r = immediate_rewards(world, episode.target_viewpoint, trajectory, cfg)
    ret = discounted_returns(r, cfg.gamma)
    if cfg.delta > 0:
        r_intr = critic_mod.intrinsic_reward(episode.instruction, trajectory, critic_params,
                                             reward_form).value
    else:
        r_intr = 0.0
    return RewardRecord(r, ret, r_intr, advantages(ret, r_intr, cfg.delta))


# --------------------------------------------------------------------------
# demonstrations


def demonstration_trajectory(world, episode) -> nav.Trajectory:
    """The demonstration path as a trajectory ending in STOP (log-probs are 0)."""
    state = episode.start
    steps = []
    for _ in range(len(episode.demonstration) + 1):
        obs = observe(world, state, episode.noise_seed)
        k = demonstration_action(world, episode, state, obs)
        steps.append(nav.TrajectoryStep(state, k, 0.0, obs))
        cand = obs.candidates[k]
        if cand.is_stop:
            return nav.Trajectory(episode.episode_id, episode.world_id, steps, state, True)
        state = transition(world, state, cand)
    raise IntegrityError("demonstration does not terminate")


def _demo_chooser(world, episode):
    def choose(t, state, obs, probs):
        return demonstration_action(world, episode, state, obs)
    return choose


# --------------------------------------------------------------------------
# supervised warm start


def _scale(grads: ParamSet, s: float) -> ParamSet:
    return {k: s * v for k, v in grads.items()}


def sl_gradients(params, world, episode, cfg: TrainConfig, dropout_seed: Optional[int]):
    """Teacher-forced −Σ_t log π(a*_t|s_t) along the demonstration."""
    unrolled = nav.unroll(params, world, episode, _demo_chooser(world, episode),
                          len(episode.demonstration), cfg.dropout, dropout_seed)
    steps = unrolled.trajectory.steps
    if not unrolled.trajectory.stopped:
        raise IntegrityError("demonstration replay did not stop at the target")
    loss = -sum(s.log_prob for s in steps)
    dlogits = [nav.logprob_dlogits(out, s.action, -1.0) for out, s in zip(unrolled.outputs, steps)]
    return float(loss), nav.backward_unrolled(unrolled, params, dlogits)


def sl_step(params, opt: AdamState, world, episode, cfg: TrainConfig,
            rng: Optional[np.random.Generator] = None):
    seed = int(rng.integers(2 ** 63)) if rng is not None and cfg.dropout > 0 else None
    loss, grads = sl_gradients(params, world, episode, cfg, seed)
    new_params, new_opt = adam_step(params, grads, opt, cfg.hyper(cfg.lr_sl))
    return loss, new_params, new_opt


# --------------------------------------------------------------------------
# reinforcement learning with mixed reward


@dataclass
class RLSample:
    unrolled: nav.Unrolled
    record: RewardRecord
    success: int


def rl_sample(params, critic_params, world, episode, rng, reward_cfg: RewardConfig,
              cfg: TrainConfig, reward_form: str = "geometric") -> RLSample:
    seed = int(rng.integers(2 ** 63)) if cfg.dropout > 0 else None
    unrolled = nav.unroll(params, world, episode, nav.sampling_choice(rng), cfg.max_path,
                          cfg.dropout, seed)
    traj = unrolled.trajectory
    record = reward_record(world, episode, traj, critic_params, reward_cfg, reward_form)
    success = int(geodesic_distance(world, traj.final_state.viewpoint, episode.target_viewpoint)
                  <= reward_cfg.d_success)
    return RLSample(unrolled, record, success)


def rl_gradients(params, samples, baseline: bool = False) -> ParamSet:
    """−(1/B) Σ_episodes Σ_t A_t ∇ log π(a_t|s_t)."""
    offset = 0.0
    if baseline:
        offset = float(np.mean(np.concatenate([s.record.advantages for s in samples])))
    total = zeros_like_params(params)
    for s in samples:
        steps = s.unrolled.trajectory.steps
        w = s.record.advantages - offset
        dlogits = [nav.logprob_dlogits(out, st.action, -wt)
                   for out, st, wt in zip(s.unrolled.outputs, steps, w)]
        add_into(total, nav.backward_unrolled(s.unrolled, params, dlogits), 1.0 / len(samples))
    return total


def rl_step(params, opt: AdamState, critic_params, world, episode, rng, reward_cfg: RewardConfig,
            cfg: TrainConfig, reward_form: str = "geometric"):
    sample = rl_sample(params, critic_params, world, episode, rng, reward_cfg, cfg, reward_form)
    grads = rl_gradients(params, [sample], cfg.advantage_baseline)
    new_params, new_opt = adam_step(params, grads, opt, cfg.hyper(cfg.lr_rl))
    stats = {"return0": float(sample.record.returns[0]), "r_intr": sample.record.intrinsic,
             "success": sample.success, "steps": len(sample.unrolled.trajectory)}
    return stats, new_params, new_opt, sample


# --------------------------------------------------------------------------
# self-supervised imitation


@dataclass
class BufferEntry:
    episode: object
    trajectory: nav.Trajectory
    reward: float


class ReplayBuffer:
    """Best trajectory seen so far per episode, ranked by the critic."""

    def __init__(self):
        self.entries: dict = {}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, episode_id):
        return episode_id in self.entries

    def get(self, episode_id) -> Optional[BufferEntry]:
        return self.entries.get(episode_id)

    def offer(self, episode, trajectory, reward: float) -> bool:
        cur = self.entries.get(episode.episode_id)
        if cur is not None and not reward > cur.reward:
            return False
        self.entries[episode.episode_id] = BufferEntry(episode, trajectory, float(reward))
        return True

    def best_rewards(self) -> dict:
        return {k: e.reward for k, e in self.entries.items()}


def sil_collect(params, critic_params, world, episode, k: int, rng, buffer: ReplayBuffer,
                max_steps: int = 10, reward_form: str = "geometric"):
    """Samples k rollouts, keeps the critic's favourite (earliest on ties).

    Only the instruction, start state and world observations are used.
    Returns (rewards, chosen index, stored?).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    trajs, rewards = [], []
    for _ in range(k):
        traj = nav.rollout(params, world, episode, "sample", rng, max_steps)
        trajs.append(traj)
        rewards.append(critic_mod.intrinsic_reward(episode.instruction, traj, critic_params,
                                                   reward_form).value)
    best = int(np.argmax(rewards))
    stored = buffer.offer(episode, trajs[best], rewards[best])
    return rewards, best, stored


def validate_trajectory(world, trajectory: nav.Trajectory, episode) -> None:
    state = episode.start
    try:
        for step in trajectory.steps:
            if step.state != state:
                raise IntegrityError("stored states are not contiguous")
            obs = observe(world, state, episode.noise_seed)
            if tuple(c.target for c in obs.candidates) != step.candidate_targets:
                raise IntegrityError("stored candidates do not match the world")
            state = transition(world, state, obs.candidates[step.action])
    except (WorldError, IndexError) as exc:
        raise IntegrityError(str(exc)) from exc
    if state != trajectory.final_state:
        raise IntegrityError("stored final state does not match")


def sil_gradients(params, entry: BufferEntry, world, cfg: TrainConfig, dropout_seed):
    validate_trajectory(world, entry.trajectory, entry.episode)
    weight = entry.reward if cfg.sil_loss == "weighted" else 1.0
    unrolled = nav.unroll(params, world, entry.episode, nav.replay_choice(entry.trajectory),
                          len(entry.trajectory), cfg.dropout, dropout_seed)
    steps = unrolled.trajectory.steps
    loss = -weight * sum(s.log_prob for s in steps)
    dlogits = [nav.logprob_dlogits(out, s.action, -weight) for out, s in zip(unrolled.outputs, steps)]
    return float(loss), nav.backward_unrolled(unrolled, params, dlogits)


def sil_step(params, opt: AdamState, entry: BufferEntry, world, cfg: TrainConfig,
             rng: Optional[np.random.Generator] = None):
    seed = int(rng.integers(2 ** 63)) if rng is not None and cfg.dropout > 0 else None
    loss, grads = sil_gradients(params, entry, world, cfg, seed)
    new_params, new_opt = adam_step(params, grads, opt, cfg.hyper(cfg.lr_sil))
    return loss, new_params, new_opt


# --------------------------------------------------------------------------
# training state and phases


@dataclass
class TrainingState:
    nav_params: ParamSet
    critic_params: ParamSet
    nav_config: nav.NavigatorConfig
    critic_config: critic_mod.CriticConfig
    rng: np.random.Generator
    phase: str = "init"
    optimizer: AdamState = field(default_factory=AdamState)
    history: list = field(default_factory=list)


def init_state(dataset: Dataset, cfg: TrainConfig, nav_cfg: Optional[nav.NavigatorConfig] = None,
               critic_cfg: Optional[critic_mod.CriticConfig] = None) -> TrainingState:
    any_world = next(iter(dataset.worlds.values()))
    F, O, V = any_world.feature_dim, any_world.orientation_dim, len(dataset.vocab)
    nav_cfg = nav_cfg or nav.NavigatorConfig(vocab_size=V, feature_dim=F, orientation_dim=O,
                                             dropout=cfg.dropout)
    critic_cfg = critic_cfg or critic_mod.CriticConfig(vocab_size=V, feature_dim=F, orientation_dim=O)
    rng = np.random.default_rng(cfg.seed)
    nav_params = nav.init_params(nav_cfg, np.random.default_rng([cfg.seed, 1]))
    critic_params = critic_mod.init_params(critic_cfg, np.random.default_rng([cfg.seed, 2]))
    return TrainingState(nav_params, critic_params, nav_cfg, critic_cfg, rng)


def evaluate(params, dataset: Dataset, episodes, cfg: TrainConfig, d: float = 3.0):
    results, trajs = [], []
    for ep in episodes:
        world = dataset.world_of(ep)
        traj = nav.rollout(params, world, ep, "greedy", max_steps=cfg.max_path)
        trajs.append(traj)
        results.append(evaluate_episode(world, ep, traj, d))
    return aggregate(results), trajs


def critic_loss(params, dataset: Dataset, episodes) -> float:
    total = 0.0
    for ep in episodes:
        world = dataset.world_of(ep)
        lp = critic_mod.instruction_logprob(ep.instruction, demonstration_trajectory(world, ep), params)
        total += -lp.mean()
    return total / max(len(episodes), 1)


Hook = Optional[Callable[[dict], None]]


def _emit(state: TrainingState, hook: Hook, record: dict):
    state.history.append(record)
    if hook is not None:
        hook(record)


def critic_pretrain(state: TrainingState, dataset: Dataset, cfg: TrainConfig, hook: Hook = None,
                    epochs: Optional[int] = None):
    """MLE on demonstration pairs with early stopping on seen-val loss; the
    best parameters are kept and then frozen."""
    epochs = cfg.critic_epochs if epochs is None else epochs
    params = state.critic_params
    opt = AdamState.for_params(params)
    hyper = cfg.hyper(cfg.lr_critic)
    demos = [(dataset.world_of(ep), ep, demonstration_trajectory(dataset.world_of(ep), ep))
             for ep in dataset.train]
    best, best_loss, stale = params, critic_loss(params, dataset, dataset.seen_val), 0
    for epoch in range(epochs):
        order = state.rng.permutation(len(demos))
        total = 0.0
        for i in order:
            _, ep, traj = demos[i]
            loss, grads = critic_mod.critic_mle_gradients(ep.instruction, traj, params)
            params, opt = adam_step(params, grads, opt, hyper)
            total += loss
        val = critic_loss(params, dataset, dataset.seen_val)
        _emit(state, hook, {"phase": "critic", "epoch": epoch, "split": "seen_val",
                            "train_loss": total / len(demos), "val_loss": val})
        if val < best_loss:
            best, best_loss, stale = params, val, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    state.critic_params = best
    state.optimizer = opt
    state.phase = "critic"
    return state


def _eval_record(state, dataset, cfg, phase, epoch, split, reward_d, extra=None):
    eps = dataset.split(split)
    if not eps or not eps[0].has_supervision:
        return None
    report, _ = evaluate(state.nav_params, dataset, eps, cfg, reward_d)
    rec = {"phase": phase, "epoch": epoch, "split": split, **report.row()}
    if extra:
        rec.update(extra)
    return rec


def _batches(order, size):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def train_sl(state: TrainingState, dataset: Dataset, cfg: TrainConfig, hook: Hook = None,
             epochs: Optional[int] = None, eval_splits=("train", "seen_val"), d: float = 3.0):
    epochs = cfg.sl_epochs if epochs is None else epochs
    return _policy_phase(state, dataset, cfg, "sl", epochs, hook, eval_splits, d, None)


def train_rl(state: TrainingState, dataset: Dataset, cfg: TrainConfig, reward_cfg: RewardConfig,
             hook: Hook = None, epochs: Optional[int] = None, eval_splits=("seen_val",),
             reward_form: str = "geometric"):
    epochs = cfg.rl_epochs if epochs is None else epochs
    return _policy_phase(state, dataset, cfg, "rl", epochs, hook, eval_splits,
                         reward_cfg.d_success, (reward_cfg, reward_form))


def _policy_phase(state, dataset, cfg, phase, epochs, hook, eval_splits, d, rl):
    params = state.nav_params
    opt = AdamState.for_params(params)
    lr = cfg.lr_sl if phase == "sl" else cfg.lr_rl
    hyper = cfg.hyper(lr)
    episodes = dataset.train
    select_split = "seen_val"
    best, best_sr, stale = params, -1.0, 0
    for epoch in range(epochs):
        order = state.rng.permutation(len(episodes))
        losses, stats = [], []
        for batch in _batches(order, cfg.batch_size):
            if rl is None:
                grads = zeros_like_params(params)
                for i in batch:
                    ep = episodes[i]
                    seed = int(state.rng.integers(2 ** 63)) if cfg.dropout > 0 else None
                    loss, g = sl_gradients(params, dataset.world_of(ep), ep, cfg, seed)
                    add_into(grads, g, 1.0 / len(batch))
                    losses.append(loss)
            else:
                reward_cfg, form = rl
                samples = [rl_sample(params, state.critic_params, dataset.world_of(episodes[i]),
                                     episodes[i], state.rng, reward_cfg, cfg, form) for i in batch]
                grads = rl_gradients(params, samples, cfg.advantage_baseline)
                stats.extend((s.record.returns[0], s.record.intrinsic, s.success) for s in samples)
            params, opt = adam_step(params, grads, opt, hyper)
        state.nav_params = params
        extra = {"loss": float(np.mean(losses))} if losses else {
            "return0": float(np.mean([s[0] for s in stats])),
            "r_intr": float(np.mean([s[1] for s in stats])),
            "sample_sr": 100.0 * float(np.mean([s[2] for s in stats]))}
        sel = None
        for split in eval_splits:
            rec = _eval_record(state, dataset, cfg, phase, epoch, split, d, extra)
            if rec is not None:
                _emit(state, hook, rec)
                if split == select_split:
                    sel = rec["SR"]
        if sel is None:
            rec = _eval_record(state, dataset, cfg, phase, epoch, select_split, d, extra)
            sel = rec["SR"] if rec is not None else 0.0
        if sel > best_sr:
            best, best_sr, stale = params, sel, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    state.nav_params = best
    state.optimizer = opt
    state.phase = phase
    return state


def train_sil(state: TrainingState, dataset: Dataset, cfg: TrainConfig, hook: Hook = None,
              epochs: Optional[int] = None, mode: Optional[str] = None, iterations: int = 1,
              eval_splits=("seen_val",), d: float = 3.0, reward_form: str = "geometric",
              buffer: Optional[ReplayBuffer] = None):
    """Collect-then-imitate on the chosen split.

    In "unseen" mode the episodes are wrapped so that touching a target or a
    demonstration raises; only instruction, start and observations are used.
    Each epoch runs one collection pass followed by `iterations` imitation
    passes over the buffer.
    """
    epochs = cfg.sil_epochs if epochs is None else epochs
    mode = mode or cfg.sil_mode
    split = "train" if mode == "train" else "unseen_val"
    episodes = [ep.guarded() for ep in dataset.split(split)]
    buffer = buffer if buffer is not None else ReplayBuffer()
    params = state.nav_params
    opt = AdamState.for_params(params)
    hyper = cfg.hyper(cfg.lr_sil)
    for epoch in range(epochs):
        for ep in episodes:
            sil_collect(params, state.critic_params, dataset.world_of(ep), ep, cfg.sil_rollouts,
                        state.rng, buffer, cfg.max_path, reward_form)
        losses = []
        ids = sorted(buffer.entries)
        for _ in range(iterations):
            order = state.rng.permutation(len(ids))
            for batch in _batches(order, cfg.batch_size):
                grads = zeros_like_params(params)
                for i in batch:
                    entry = buffer.entries[ids[i]]
                    seed = int(state.rng.integers(2 ** 63)) if cfg.dropout > 0 else None
                    loss, g = sil_gradients(params, entry, dataset.world_of(entry.episode), cfg, seed)
                    add_into(grads, g, 1.0 / len(batch))
                    losses.append(loss)
                params, opt = adam_step(params, grads, opt, hyper)
        state.nav_params = params
        extra = {"loss": float(np.mean(losses)) if losses else 0.0,
                 "buffer_reward": float(np.mean(list(buffer.best_rewards().values())))}
        for s in eval_splits:
            rec = _eval_record(state, dataset, cfg, "sil", epoch, s, d, extra)
            if rec is not None:
                _emit(state, hook, rec)
    state.optimizer = opt
    state.phase = "sil"
    return state


def train(dataset: Dataset, cfg: TrainConfig, reward_cfg: RewardConfig = RewardConfig(),
          state: Optional[TrainingState] = None, hook: Hook = None,
          on_phase_end: Optional[Callable[[TrainingState], None]] = None) -> TrainingState:
    """critic pre-training -> SL warm start -> RL with mixed reward -> optional SIL."""
    state = state or init_state(dataset, cfg)
    phases = [
        ("critic", cfg.critic_epochs, lambda s: critic_pretrain(s, dataset, cfg, hook)),
        ("sl", cfg.sl_epochs, lambda s: train_sl(s, dataset, cfg, hook, d=reward_cfg.d_success)),
        ("rl", cfg.rl_epochs, lambda s: train_rl(s, dataset, cfg, reward_cfg, hook)),
        ("sil", cfg.sil_epochs, lambda s: train_sil(s, dataset, cfg, hook, d=reward_cfg.d_success)),
    ]
    for name, epochs, run in phases:
        if epochs <= 0:
            continue
        state = run(state)
        if on_phase_end is not None:
            on_phase_end(state)
    return state
