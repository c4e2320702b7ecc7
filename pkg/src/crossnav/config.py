"""Flat `key = value` run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from . import critic as critic_mod
from . import learner as L
from . import navigator as nav
from .worldsim import EpisodeConfig, SplitConfig, Vocabulary, WorldConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class RunConfig:
    # world generation
    n_viewpoints: int = 40
    mean_degree: float = 3.0
    feature_dim: int = 32          # full scale: 2048
    m: int = 8
    landmark_vocab: int = 16
    noise_sigma: float = 0.1
    style_sigma: float = 0.15
    tile_factor: int = 4           # full scale: 32
    spacing: float = 4.0
    # episodes / splits
    min_hops: int = 2
    max_hops: int = 4
    train_worlds: int = 20
    train_episodes: int = 500
    seen_val_episodes: int = 300
    unseen_worlds: int = 10
    unseen_val_episodes: int = 300
    max_instruction: int = 80      # instructions truncated at 80 tokens
    max_path: int = 10             # longest action path
    # rewards
    gamma: float = 0.95            # discount of the cumulative extrinsic reward
    delta: float = 2.0             # intrinsic reward weight
    d_success: float = 3.0         # success radius, 3 m
    success_indicator: bool = True
    reward_form: str = "geometric"
    # optimisation
    lr_sl: float = 1e-4
    lr_rl: float = 1e-5
    lr_sil: float = 1e-5
    lr_critic: float = 1e-4
    dropout: float = 0.5
    weight_decay: float = 0.0005   # L2 decay added to the gradient
    sil_rollouts: int = 10         # rollouts per instruction (SIL)
    sil_iterations: int = 1
    sil_loss: str = "weighted"
    critic_epochs: int = 10
    sl_epochs: int = 30
    rl_epochs: int = 15
    sil_epochs: int = 6
    batch_size: int = 1
    patience: int = 5
    advantage_baseline: bool = False
    # model sizes (full scale: hidden 512, words 300, attention 256/512/256, W_c/W_u 256)
    hidden: int = 64
    word_dim: int = 32
    action_dim: int = 32
    att_history: int = 32
    att_text: int = 64
    att_visual: int = 32
    proj: int = 32
    critic_att: int = 64
    critic_mlp: int = 64
    # seeds and io
    data_seed: int = 0
    train_seed: int = 0
    dataset: str = ""
    workers: int = 1

    def world_config(self) -> WorldConfig:
        return WorldConfig(self.n_viewpoints, self.mean_degree, self.feature_dim, self.m,
                           self.landmark_vocab, self.noise_sigma, self.style_sigma,
                           self.tile_factor, self.spacing)

    def episode_config(self) -> EpisodeConfig:
        return EpisodeConfig(self.min_hops, self.max_hops, self.d_success, self.max_instruction,
                             self.max_path)

    def split_config(self) -> SplitConfig:
        return SplitConfig(self.world_config(), self.episode_config(), self.train_worlds,
                           self.train_episodes, self.seen_val_episodes, self.unseen_worlds,
                           self.unseen_val_episodes)

    def train_config(self) -> L.TrainConfig:
        return L.TrainConfig(lr_sl=self.lr_sl, lr_rl=self.lr_rl, lr_sil=self.lr_sil,
                             lr_critic=self.lr_critic, dropout=self.dropout,
                             weight_decay=self.weight_decay, sil_rollouts=self.sil_rollouts,
                             max_path=self.max_path, max_instruction=self.max_instruction,
                             critic_epochs=self.critic_epochs, sl_epochs=self.sl_epochs,
                             rl_epochs=self.rl_epochs, sil_epochs=self.sil_epochs,
                             sil_loss=self.sil_loss, batch_size=self.batch_size,
                             patience=self.patience, advantage_baseline=self.advantage_baseline,
                             seed=self.train_seed)

    def reward_config(self) -> L.RewardConfig:
        return L.RewardConfig(self.gamma, self.delta, self.d_success, self.success_indicator)

    @property
    def vocab_size(self) -> int:
        return len(Vocabulary(self.landmark_vocab))

    def navigator_config(self) -> nav.NavigatorConfig:
        return nav.NavigatorConfig(self.vocab_size, self.feature_dim, 4 * self.tile_factor,
                                   self.word_dim, self.hidden, self.action_dim, self.att_history,
                                   self.att_text, self.att_visual, self.proj, self.dropout)

    def critic_config(self) -> critic_mod.CriticConfig:
        return critic_mod.CriticConfig(self.vocab_size, self.feature_dim, 4 * self.tile_factor,
                                       self.word_dim, self.hidden, self.action_dim,
                                       self.att_history, self.critic_att, self.critic_mlp,
                                       reward_form=self.reward_form)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}")
        cfg = cls(**data)
        validate(cfg)
        return cfg


_CHOICES = {
    "reward_form": ("geometric", "mean_logprob"),
    "sil_loss": ("weighted", "plain"),
}

_POSITIVE = {"n_viewpoints", "mean_degree", "feature_dim", "m", "landmark_vocab", "tile_factor",
             "spacing", "min_hops", "max_hops", "train_worlds", "train_episodes",
             "seen_val_episodes", "unseen_worlds", "unseen_val_episodes", "max_instruction",
             "max_path", "lr_sl", "lr_rl", "lr_sil", "lr_critic", "sil_rollouts", "sil_iterations",
             "batch_size", "patience", "hidden", "word_dim", "action_dim", "att_history",
             "att_text", "att_visual", "proj", "critic_att", "critic_mlp", "workers"}

_NON_NEGATIVE = {"noise_sigma", "style_sigma", "delta", "d_success", "weight_decay",
                 "critic_epochs", "sl_epochs", "rl_epochs", "sil_epochs", "data_seed", "train_seed"}


def _check_field(name, value):
    if name in _POSITIVE and not value > 0:
        return f"{name} must be positive, got {value!r}"
    if name in _NON_NEGATIVE and value < 0:
        return f"{name} must be non-negative, got {value!r}"
    if name == "gamma" and not 0.0 <= value <= 1.0:
        return f"gamma must lie in [0, 1], got {value!r}"
    if name == "dropout" and not 0.0 <= value < 1.0:
        return f"dropout must lie in [0, 1), got {value!r}"
    if name in _CHOICES and value not in _CHOICES[name]:
        return f"{name} must be one of {_CHOICES[name]}, got {value!r}"
    return None


def validate(cfg: RunConfig, lines: dict | None = None) -> None:
    for f in fields(cfg):
        problem = _check_field(f.name, getattr(cfg, f.name))
        if problem:
            raise ConfigError(problem, (lines or {}).get(f.name))
    if cfg.min_hops > cfg.max_hops:
        raise ConfigError("min_hops exceeds max_hops", (lines or {}).get("min_hops"))
    if cfg.mean_degree >= cfg.n_viewpoints:
        raise ConfigError("mean_degree must be below n_viewpoints", (lines or {}).get("mean_degree"))


def _coerce(name: str, kind, raw: str, line: int):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"malformed value for {name}: {raw!r}", line) from None


def parse_config(text: str) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    kinds = {"int": int, "float": float, "bool": bool, "str": str}
    values, seen = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno)
        seen[key] = lineno
        values[key] = _coerce(key, kinds[types[key]], value, lineno)
    cfg = RunConfig(**values)
    validate(cfg, seen)
    return cfg


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
