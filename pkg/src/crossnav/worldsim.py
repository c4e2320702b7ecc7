"""Procedural navigation worlds, observations and synthetic instructions."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

TWO_PI = 2.0 * math.pi

DIRECTION_TOKENS = ("forward", "left", "back", "right")
STOP_TOKEN = "stop-at"


class WorldError(ValueError):
    pass


class InvalidActionError(WorldError):
    pass


class OffPathError(WorldError):
    pass


class GenerationError(WorldError):
    pass


class SupervisionAccessError(RuntimeError):
    """Raised when a guarded episode's target or demonstration is touched."""


class Vocabulary:
    """Token universe shared by every split: directions, stop marker, landmarks."""

    def __init__(self, landmark_vocab: int):
        self.landmark_vocab = landmark_vocab
        self.tokens = list(DIRECTION_TOKENS) + [STOP_TOKEN] + [f"lm{k}" for k in range(landmark_vocab)]
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def landmark(self, lm: int) -> int:
        return len(DIRECTION_TOKENS) + 1 + lm

    def direction(self, name: str) -> int:
        return self.index[name]

    @property
    def stop(self) -> int:
        return self.index[STOP_TOKEN]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class WorldConfig:
    n_viewpoints: int = 40
    mean_degree: float = 3.0
    feature_dim: int = 32
    m: int = 8
    landmark_vocab: int = 16
    noise_sigma: float = 0.1
    # per-world perturbation of landmark appearance (scene-specific look)
    style_sigma: float = 0.0
    tile_factor: int = 4
    spacing: float = 4.0


@dataclass(frozen=True)
class Viewpoint:
    id: int
    position: tuple
    landmark_id: int


@dataclass
class WorldGraph:
    world_id: int
    viewpoints: list
    edges: list  # (a, b, length) with a < b
    feature_dim: int
    m: int
    landmark_vocab: int
    noise_sigma: float
    tile_factor: int
    landmark_features: np.ndarray  # (landmark_vocab, feature_dim)
    _adjacency: dict = field(default=None, repr=False, compare=False)
    _dist_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        adj = {vp.id: [] for vp in self.viewpoints}
        for a, b, length in self.edges:
            adj[a].append((b, length))
            adj[b].append((a, length))
        for nbrs in adj.values():
            nbrs.sort()
        self._adjacency = adj

    def neighbors(self, vp: int) -> list:
        return self._adjacency[vp]

    def position(self, vp: int) -> np.ndarray:
        return np.asarray(self.viewpoints[vp].position, dtype=np.float64)

    def bearing(self, a: int, b: int) -> float:
        d = self.position(b) - self.position(a)
        return math.atan2(d[1], d[0]) % TWO_PI

    def edge_length(self, a: int, b: int) -> float:
        for nb, length in self._adjacency[a]:
            if nb == b:
                return length
        raise WorldError(f"no edge {a}-{b} in world {self.world_id}")

    def has_viewpoint(self, vp) -> bool:
        return isinstance(vp, (int, np.integer)) and 0 <= vp < len(self.viewpoints)

    @property
    def orientation_dim(self) -> int:
        return 4 * self.tile_factor


@dataclass(frozen=True)
class AgentState:
    viewpoint: int
    heading: float
    elevation: float = 0.0


@dataclass(frozen=True)
class ActionCandidate:
    kind: str  # "move" | "stop"
    target: Optional[int]
    appearance: Optional[np.ndarray]  # None for STOP: learned embedding lives in the model
    orientation: Optional[np.ndarray]

    @property
    def is_stop(self) -> bool:
        return self.kind == "stop"


@dataclass(frozen=True)
class PanoramicObservation:
    patches: np.ndarray  # (m, feature_dim)
    candidates: tuple  # MOVE candidates in neighbor-id order, STOP last

    @property
    def stop_index(self) -> int:
        return len(self.candidates) - 1


@dataclass(frozen=True)
class Instruction:
    tokens: tuple

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class EpisodeSpec:
    episode_id: int
    world_id: int
    instruction: Instruction
    start: AgentState
    target_viewpoint: Optional[int]
    demonstration: Optional[tuple]
    noise_seed: int

    @property
    def has_supervision(self) -> bool:
        return self.target_viewpoint is not None and self.demonstration is not None

    def guarded(self) -> "GuardedEpisode":
        return GuardedEpisode(self)


class GuardedEpisode:
    """Episode view exposing only instruction, world and start state."""

    def __init__(self, episode: EpisodeSpec):
        self._episode = episode
        self.episode_id = episode.episode_id
        self.world_id = episode.world_id
        self.instruction = episode.instruction
        self.start = episode.start
        self.noise_seed = episode.noise_seed

    @property
    def target_viewpoint(self):
        raise SupervisionAccessError(f"episode {self.episode_id}: target location is hidden")

    @property
    def demonstration(self):
        raise SupervisionAccessError(f"episode {self.episode_id}: demonstration is hidden")

    @property
    def has_supervision(self):
        return False


# --------------------------------------------------------------------------
# generation


def landmark_codebook(landmark_vocab: int, feature_dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x1A4D])
    codes = rng.normal(size=(landmark_vocab, feature_dim))
    return codes / np.linalg.norm(codes, axis=1, keepdims=True)


def _angle_gap(a: float, b: float) -> float:
    d = abs(a - b) % TWO_PI
    return min(d, TWO_PI - d)


def generate_world(config: WorldConfig, seed: int, world_id: int = 0,
                   codebook: Optional[np.ndarray] = None) -> WorldGraph:
    """Random geometric graph made connected with its Euclidean spanning tree.

    Extra short edges are only added when they keep every pair of neighbor
    bearings at a viewpoint at least one panoramic sector apart, so each patch
    sees at most one neighbor.
    """
    n = config.n_viewpoints
    if n < 2:
        raise GenerationError("need at least two viewpoints")
    if config.mean_degree >= n or config.mean_degree <= 0:
        raise GenerationError(f"mean_degree {config.mean_degree} unsatisfiable with {n} viewpoints")
    if config.m < 1 or config.feature_dim < 1 or config.landmark_vocab < 1:
        raise GenerationError("m, feature_dim and landmark_vocab must be positive")
    rng = np.random.default_rng([seed, 0x5EED])
    side = config.spacing * math.sqrt(n) * 1.25
    min_sep = 0.8 * config.spacing
    pts: list[np.ndarray] = []
    attempts = 0
    while len(pts) < n:
        p = rng.uniform(0.0, side, size=2)
        attempts += 1
        if attempts > 200 * n:
            min_sep *= 0.9
            attempts = 0
        if all(np.hypot(*(p - q)) >= min_sep for q in pts):
            pts.append(p)
    pos = np.array(pts)

    pairs = []
    for a in range(n):
        for b in range(a + 1, n):
            pairs.append((float(np.hypot(*(pos[a] - pos[b]))), a, b))
    pairs.sort()

    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    chosen: dict = {}
    bearings: dict = {v: [] for v in range(n)}

    def add(a, b, length):
        chosen[(a, b)] = length
        bearings[a].append(math.atan2(*(pos[b] - pos[a])[::-1]))
        bearings[b].append(math.atan2(*(pos[a] - pos[b])[::-1]))

    for length, a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            add(a, b, length)
    target_edges = int(round(n * config.mean_degree / 2.0))
    sector = TWO_PI / config.m
    for length, a, b in pairs:
        if len(chosen) >= target_edges:
            break
        if (a, b) in chosen:
            continue
        ba = math.atan2(*(pos[b] - pos[a])[::-1])
        bb = math.atan2(*(pos[a] - pos[b])[::-1])
        if all(_angle_gap(ba, x) >= sector for x in bearings[a]) and \
                all(_angle_gap(bb, x) >= sector for x in bearings[b]):
            add(a, b, length)

    landmarks = rng.integers(0, config.landmark_vocab, size=n)
    if codebook is None:
        codebook = landmark_codebook(config.landmark_vocab, config.feature_dim, 0)
    feats = codebook.copy()
    if config.style_sigma > 0:
        feats = feats + rng.normal(scale=config.style_sigma, size=feats.shape)
    viewpoints = [Viewpoint(i, (float(pos[i, 0]), float(pos[i, 1]), 0.0), int(landmarks[i]))
                  for i in range(n)]
    edges = sorted((a, b, float(np.hypot(*(pos[a] - pos[b])))) for (a, b) in chosen)
    return WorldGraph(world_id, viewpoints, edges, config.feature_dim, config.m,
                      config.landmark_vocab, config.noise_sigma, config.tile_factor, feats)


# --------------------------------------------------------------------------
# observation and transition


def orientation_feature(relative_heading: float, elevation: float, tile_factor: int) -> np.ndarray:
    base = np.array([math.sin(relative_heading), math.cos(relative_heading),
                     math.sin(elevation), math.cos(elevation)])
    return np.tile(base, tile_factor)


def _check_state(world: WorldGraph, state: AgentState):
    if not world.has_viewpoint(state.viewpoint):
        raise WorldError(f"viewpoint {state.viewpoint} not in world {world.world_id}")


def observe(world: WorldGraph, state: AgentState, seed: int) -> PanoramicObservation:
    """Egocentric panorama: sector j spans relative headings [2πj/m, 2π(j+1)/m)."""
    _check_state(world, state)
    m = world.m
    patches = np.zeros((m, world.feature_dim))
    counts = np.zeros(m)
    sectors = []
    for nb, _ in world.neighbors(state.viewpoint):
        rel = (world.bearing(state.viewpoint, nb) - state.heading) % TWO_PI
        j = min(int(rel / (TWO_PI / m)), m - 1)
        patches[j] += world.landmark_features[world.viewpoints[nb].landmark_id]
        counts[j] += 1
        sectors.append((nb, rel, j))
    shared = counts > 1
    patches[shared] /= counts[shared, None]
    if world.noise_sigma > 0:
        rng = np.random.default_rng([world.world_id, state.viewpoint, seed])
        patches = patches + rng.normal(scale=world.noise_sigma, size=patches.shape)
    cands = [ActionCandidate("move", nb, patches[j].copy(),
                             orientation_feature(rel, state.elevation, world.tile_factor))
             for nb, rel, j in sectors]
    cands.append(ActionCandidate("stop", None, None, None))
    return PanoramicObservation(patches, tuple(cands))


def transition(world: WorldGraph, state: AgentState, action: ActionCandidate) -> AgentState:
    _check_state(world, state)
    if action.is_stop:
        return state
    if action.target not in {nb for nb, _ in world.neighbors(state.viewpoint)}:
        raise InvalidActionError(
            f"viewpoint {action.target} is not navigable from {state.viewpoint}")
    return AgentState(action.target, world.bearing(state.viewpoint, action.target), state.elevation)


def geodesic_distances_from(world: WorldGraph, source: int) -> np.ndarray:
    """Dijkstra from `source`; cached per world (the cache never changes results)."""
    cached = world._dist_cache.get(source)
    if cached is not None:
        return cached
    dist = np.full(len(world.viewpoints), np.inf)
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, length in world.neighbors(u):
            nd = d + length
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    dist.setflags(write=False)
    world._dist_cache[source] = dist
    return dist


def geodesic_distance(world: WorldGraph, a: int, b: int) -> float:
    if not (world.has_viewpoint(a) and world.has_viewpoint(b)):
        raise WorldError(f"unknown viewpoint in ({a}, {b})")
    # always search from the smaller id so that D(a, b) == D(b, a) bit for bit
    d = geodesic_distances_from(world, min(a, b))[max(a, b)]
    if not np.isfinite(d):
        raise WorldError(f"viewpoints {a} and {b} are not connected")
    return float(d)


def hop_distances(world: WorldGraph, source: int) -> dict:
    hops = {source: 0}
    frontier = [source]
    while frontier:
        nxt = []
        for u in frontier:
            for v, _ in world.neighbors(u):
                if v not in hops:
                    hops[v] = hops[u] + 1
                    nxt.append(v)
        frontier = nxt
    return hops


def shortest_path(world: WorldGraph, start: int, target: int) -> list:
    """Metric shortest path; ties go to the smallest next viewpoint id."""
    dist = geodesic_distances_from(world, target)
    path = [start]
    cur = start
    while cur != target:
        best = None
        for nb, length in world.neighbors(cur):
            if math.isclose(length + dist[nb], dist[cur], rel_tol=1e-12, abs_tol=1e-12):
                best = nb
                break  # neighbors are sorted by id
        if best is None:
            raise WorldError("inconsistent distance table")
        path.append(best)
        cur = best
    return path


# --------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class EpisodeConfig:
    min_hops: int = 2
    max_hops: int = 4
    d_success: float = 3.0
    max_instruction_length: int = 80
    max_path_length: int = 10


def direction_token(relative_heading: float) -> str:
    q = TWO_PI / 8
    rel = relative_heading % TWO_PI
    if rel < q or rel >= 7 * q:
        return "forward"
    if rel < 3 * q:
        return "left"
    if rel < 5 * q:
        return "back"
    return "right"


def describe_path(world: WorldGraph, vocab: Vocabulary, start_heading: float, path) -> list:
    tokens = []
    heading = start_heading
    for a, b in zip(path[:-1], path[1:]):
        bearing = world.bearing(a, b)
        tokens.append(vocab.direction(direction_token(bearing - heading)))
        tokens.append(vocab.landmark(world.viewpoints[b].landmark_id))
        heading = bearing
    tokens.append(vocab.stop)
    tokens.append(vocab.landmark(world.viewpoints[path[-1]].landmark_id))
    return tokens


def _candidate_pairs(world: WorldGraph, lo: int, hi: int) -> list:
    key = ("pairs", lo, hi)
    if key not in world._dist_cache:
        n = len(world.viewpoints)
        world._dist_cache[key] = [(s, t) for s in range(n) for t in range(n)
                                  if lo <= len(shortest_path(world, s, t)) - 1 <= hi]
    return world._dist_cache[key]


def generate_episode(world: WorldGraph, vocab: Vocabulary, seed: int, config: EpisodeConfig,
                     episode_id: int = 0) -> EpisodeSpec:
    rng = np.random.default_rng([seed, world.world_id, 0xE915])
    pairs = _candidate_pairs(world, config.min_hops, min(config.max_hops, config.max_path_length - 1))
    if not pairs:
        raise GenerationError(
            f"world {world.world_id} has no pair within [{config.min_hops}, {config.max_hops}] hops")
    s, t = pairs[int(rng.integers(len(pairs)))]
    heading = float(rng.uniform(0.0, TWO_PI))
    path = shortest_path(world, s, t)
    tokens = describe_path(world, vocab, heading, path)[:config.max_instruction_length]
    noise_seed = int(rng.integers(2 ** 31))
    return EpisodeSpec(episode_id, world.world_id, Instruction(tuple(tokens)),
                       AgentState(s, heading), t, tuple(path), noise_seed)


def demonstration_action(world: WorldGraph, episode: EpisodeSpec, state: AgentState,
                         observation: Optional[PanoramicObservation] = None) -> int:
    demo = episode.demonstration
    if state.viewpoint not in demo:
        raise OffPathError(f"viewpoint {state.viewpoint} is off the demonstration path")
    obs = observation if observation is not None else observe(world, state, episode.noise_seed)
    k = demo.index(state.viewpoint)
    if k == len(demo) - 1:
        return obs.stop_index
    nxt = demo[k + 1]
    for i, cand in enumerate(obs.candidates):
        if cand.target == nxt:
            return i
    raise OffPathError(f"no candidate toward {nxt}")


@dataclass
class SplitConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    train_worlds: int = 20
    train_episodes: int = 500
    seen_val_episodes: int = 100
    unseen_worlds: int = 10
    unseen_val_episodes: int = 100


@dataclass
class Dataset:
    vocab: Vocabulary
    worlds: dict  # world_id -> WorldGraph
    train: list
    seen_val: list
    unseen_val: list

    def split(self, name: str) -> list:
        return {"train": self.train, "seen_val": self.seen_val, "unseen_val": self.unseen_val}[name]

    def world_of(self, episode) -> WorldGraph:
        return self.worlds[episode.world_id]

    def without_supervision(self, split: str) -> "Dataset":
        """Copy with the named split stripped of targets and demonstrations."""
        stripped = [replace(e, target_viewpoint=None, demonstration=None) for e in self.split(split)]
        parts = {"train": self.train, "seen_val": self.seen_val, "unseen_val": self.unseen_val}
        parts[split] = stripped
        return Dataset(self.vocab, self.worlds, **parts)


def _episodes_round_robin(worlds, vocab, count, seed_base, config, id_base):
    out = []
    for k in range(count):
        w = worlds[k % len(worlds)]
        out.append(generate_episode(w, vocab, seed_base + k, config, episode_id=id_base + k))
    return out


def generate_split(config: SplitConfig, seed: int) -> Dataset:
    """Train / seen-val / unseen-val with disjoint world and episode seeds."""
    if min(config.train_worlds, config.unseen_worlds, config.train_episodes,
           config.seen_val_episodes, config.unseen_val_episodes) < 1:
        raise GenerationError("every split count must be at least 1")
    vocab = Vocabulary(config.world.landmark_vocab)
    codebook = landmark_codebook(config.world.landmark_vocab, config.world.feature_dim, seed)
    worlds = {}
    train_worlds, unseen_worlds = [], []
    for k in range(config.train_worlds):
        w = generate_world(config.world, seed * 100003 + k, world_id=k, codebook=codebook)
        worlds[k] = w
        train_worlds.append(w)
    for k in range(config.unseen_worlds):
        wid = config.train_worlds + k
        w = generate_world(config.world, seed * 100003 + 50000 + k, world_id=wid, codebook=codebook)
        worlds[wid] = w
        unseen_worlds.append(w)
    ep = config.episode
    base = seed * 1000003
    train = _episodes_round_robin(train_worlds, vocab, config.train_episodes, base, ep, 0)
    seen = _episodes_round_robin(train_worlds, vocab, config.seen_val_episodes, base + 300000, ep,
                                 config.train_episodes)
    unseen = _episodes_round_robin(unseen_worlds, vocab, config.unseen_val_episodes, base + 600000,
                                   ep, config.train_episodes + config.seen_val_episodes)
    return Dataset(vocab, worlds, train, seen, unseen)
