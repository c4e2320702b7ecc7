import itertools
import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY_SPLIT, make_world
from crossnav.worldsim import (AgentState, EpisodeConfig, GenerationError, InvalidActionError,
                               OffPathError, SplitConfig, SupervisionAccessError, Vocabulary,
                               WorldConfig, demonstration_action, generate_episode, generate_split,
                               generate_world, geodesic_distance, observe, shortest_path,
                               transition)


def reachable(world, src=0):
    seen, queue = {src}, deque([src])
    while queue:
        v = queue.popleft()
        for nb, _ in world.neighbors(v):
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return seen


# ---------------------------------------------------------------- generation

def test_two_viewpoints_single_edge():
    w = generate_world(WorldConfig(n_viewpoints=2, mean_degree=1.0), 0)
    assert len(w.edges) == 1
    assert reachable(w) == {0, 1}


def test_generation_deterministic():
    cfg = WorldConfig(n_viewpoints=20)
    a, b = generate_world(cfg, 11), generate_world(cfg, 11)
    assert a.edges == b.edges and a.viewpoints == b.viewpoints
    np.testing.assert_array_equal(a.landmark_features, b.landmark_features)


def test_fifty_viewpoints_connected_bfs():
    w = generate_world(WorldConfig(n_viewpoints=50), 7)
    assert reachable(w) == set(range(50))


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 30), st.integers(0, 10 ** 6))
def test_generated_worlds_are_valid(n, seed):
    w = generate_world(WorldConfig(n_viewpoints=n, mean_degree=min(3.0, n - 1.0)), seed)
    assert reachable(w) == set(range(n))
    assert all(length > 0 for _, _, length in w.edges)
    for a, b, length in w.edges:
        assert length == pytest.approx(math.dist(w.position(a), w.position(b)), rel=1e-12)
    assert all(0 <= vp.landmark_id < w.landmark_vocab for vp in w.viewpoints)


def test_unsatisfiable_config():
    with pytest.raises(GenerationError):
        generate_world(WorldConfig(n_viewpoints=5, mean_degree=5.0), 0)
    with pytest.raises(GenerationError):
        generate_world(WorldConfig(n_viewpoints=1), 0)


# ---------------------------------------------------------------- observation

def test_single_neighbor_due_east():
    w = make_world([(0, 0), (4, 0)], [(0, 1)], landmarks=[0, 2], m=4)
    obs = observe(w, AgentState(0, 0.0), seed=0)
    np.testing.assert_array_equal(obs.patches[0], w.landmark_features[2])
    assert np.all(obs.patches[1:] == 0)
    np.testing.assert_array_equal(obs.candidates[0].appearance, obs.patches[0])


def test_observation_deterministic_without_noise():
    w = generate_world(WorldConfig(n_viewpoints=10, noise_sigma=0.0), 1)
    o1, o2 = observe(w, AgentState(3, 1.0), 5), observe(w, AgentState(3, 1.0), 5)
    np.testing.assert_array_equal(o1.patches, o2.patches)


def test_noise_depends_only_on_seed_triple():
    w = generate_world(WorldConfig(n_viewpoints=10, noise_sigma=0.3), 1)
    a, b = observe(w, AgentState(3, 1.0), 5), observe(w, AgentState(3, 1.0), 5)
    c = observe(w, AgentState(3, 1.0), 6)
    np.testing.assert_array_equal(a.patches, b.patches)
    assert not np.array_equal(a.patches, c.patches)


def test_orientation_of_left_neighbor():
    w = make_world([(0, 0), (0, 5)], [(0, 1)], tile_factor=3)
    obs = observe(w, AgentState(0, 0.0), 0)
    np.testing.assert_allclose(obs.candidates[0].orientation, [1, 0, 0, 1] * 3, atol=1e-15)


def test_heading_rotates_sectors():
    w = make_world([(0, 0), (0, 5)], [(0, 1)], m=4)
    # neighbor at bearing pi/2; facing north it sits in the forward sector
    obs = observe(w, AgentState(0, math.pi / 2), 0)
    assert np.any(obs.patches[0] != 0) and np.all(obs.patches[1:] == 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 2 * math.pi, exclude_max=True))
def test_exactly_one_stop_and_moves_are_neighbors(seed, heading):
    w = generate_world(WorldConfig(n_viewpoints=12), seed)
    for vp in range(12):
        obs = observe(w, AgentState(vp, heading), seed)
        assert obs.patches.shape == (w.m, w.feature_dim)
        assert sum(c.is_stop for c in obs.candidates) == 1 and obs.candidates[-1].is_stop
        assert [c.target for c in obs.candidates[:-1]] == [nb for nb, _ in w.neighbors(vp)]


# ---------------------------------------------------------------- transition

def test_stop_keeps_state():
    w = make_world([(0, 0), (3, 4)], [(0, 1)])
    s = AgentState(0, 1.0)
    obs = observe(w, s, 0)
    assert transition(w, s, obs.candidates[obs.stop_index]) == s


def test_move_over_only_edge_sets_bearing():
    w = make_world([(0, 0), (3, 4)], [(0, 1)])
    s = AgentState(0, 0.0)
    nxt = transition(w, s, observe(w, s, 0).candidates[0])
    assert nxt.viewpoint == 1
    assert nxt.heading == pytest.approx(math.atan2(4, 3), abs=1e-15)


def test_invalid_move():
    w = make_world([(0, 0), (3, 4), (9, 9)], [(0, 1), (1, 2)])
    cand = observe(w, AgentState(1, 0.0), 0).candidates[1]  # toward 2
    with pytest.raises(InvalidActionError):
        transition(w, AgentState(0, 0.0), cand)


# ---------------------------------------------------------------- distances

def test_geodesic_basics():
    w = make_world([(0, 0), (4, 0)], [(0, 1)])
    assert geodesic_distance(w, 0, 0) == 0.0
    assert geodesic_distance(w, 0, 1) == 4.0


def brute_force_distance(world, a, b):
    best = math.inf
    n = len(world.viewpoints)
    adj = {v: dict(world.neighbors(v)) for v in range(n)}

    def walk(v, seen, total):
        nonlocal best
        if v == b:
            best = min(best, total)
            return
        for nb, length in adj[v].items():
            if nb not in seen:
                walk(nb, seen | {nb}, total + length)

    walk(a, {a}, 0.0)
    return best


def test_geodesic_matches_path_enumeration():
    w = generate_world(WorldConfig(n_viewpoints=8, mean_degree=2.5), 4)
    for a, b in itertools.combinations(range(8), 2):
        assert geodesic_distance(w, a, b) == pytest.approx(brute_force_distance(w, a, b), rel=1e-12)
        assert geodesic_distance(w, a, b) == geodesic_distance(w, b, a)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 50), st.integers(0, 19), st.integers(0, 19), st.integers(0, 19))
def test_triangle_inequality(seed, a, b, c):
    w = generate_world(WorldConfig(n_viewpoints=20), seed)
    assert geodesic_distance(w, a, c) <= geodesic_distance(w, a, b) + geodesic_distance(w, b, c) + 1e-9


def test_telescoping_path_sum():
    w = generate_world(WorldConfig(n_viewpoints=15), 2)
    rng = np.random.default_rng(0)
    for _ in range(20):
        path = [int(rng.integers(15))]
        for _ in range(6):
            path.append(w.neighbors(path[-1])[int(rng.integers(len(w.neighbors(path[-1]))))][0])
        D = lambda v: geodesic_distance(w, v, 7)  # noqa: E731
        total = sum(D(a) - D(b) for a, b in zip(path[:-1], path[1:]))
        assert total == pytest.approx(D(path[0]) - D(path[-1]), abs=1e-12)


# ---------------------------------------------------------------- episodes

def test_single_hop_episode():
    w = make_world([(0, 0), (4, 0)], [(0, 1)], landmarks=[1, 2])
    vocab = Vocabulary(3)
    ep = generate_episode(w, vocab, 0, EpisodeConfig(min_hops=1, max_hops=1))
    assert len(ep.instruction) == 4
    words = vocab.decode(ep.instruction.tokens)
    assert words[0] in ("forward", "left", "back", "right")
    assert words[2] == "stop-at" and words[3] == f"lm{w.viewpoints[ep.target_viewpoint].landmark_id}"
    assert ep.demonstration == (ep.start.viewpoint, ep.target_viewpoint)


def test_episode_deterministic_and_shortest():
    w = generate_world(WorldConfig(n_viewpoints=25), 9)
    vocab = Vocabulary(16)
    cfg = EpisodeConfig(min_hops=2, max_hops=4)
    for seed in range(10):
        a, b = generate_episode(w, vocab, seed, cfg), generate_episode(w, vocab, seed, cfg)
        assert a == b
        demo = a.demonstration
        assert demo[0] == a.start.viewpoint and demo[-1] == a.target_viewpoint
        assert 2 <= len(demo) - 1 <= 4
        length = sum(w.edge_length(x, y) for x, y in zip(demo[:-1], demo[1:]))
        assert length == pytest.approx(geodesic_distance(w, demo[0], demo[-1]), rel=1e-12)
        assert 1 <= len(a.instruction) <= 80


def test_instruction_truncation():
    w = generate_world(WorldConfig(n_viewpoints=25), 9)
    ep = generate_episode(w, Vocabulary(16), 0, EpisodeConfig(min_hops=3, max_hops=3,
                                                              max_instruction_length=5))
    assert len(ep.instruction) == 5


def test_no_valid_pair():
    w = make_world([(0, 0), (4, 0)], [(0, 1)])
    with pytest.raises(GenerationError):
        generate_episode(w, Vocabulary(3), 0, EpisodeConfig(min_hops=2, max_hops=3))


def test_shortest_path_tie_break_smaller_id():
    # square: 0 -> 3 via 1 or 2 with equal length
    w = make_world([(0, 0), (4, 0), (0, 4), (4, 4)], [(0, 1), (0, 2), (1, 3), (2, 3)])
    assert shortest_path(w, 0, 3) == [0, 1, 3]


def test_demonstration_action():
    w = make_world([(0, 0), (4, 0), (8, 0)], [(0, 1), (1, 2)])
    ep = generate_episode(w, Vocabulary(3), 0, EpisodeConfig(min_hops=2, max_hops=2))
    demo = ep.demonstration
    s0 = AgentState(demo[0], 0.0)
    k = demonstration_action(w, ep, s0)
    assert observe(w, s0, ep.noise_seed).candidates[k].target == demo[1]
    end = AgentState(demo[-1], 0.0)
    assert demonstration_action(w, ep, end) == observe(w, end, 0).stop_index
    w4 = make_world([(0, 0), (4, 0), (8, 0), (0, 4)], [(0, 1), (1, 2), (0, 3)])
    ep4 = generate_episode(w4, Vocabulary(3), 1, EpisodeConfig(min_hops=2, max_hops=2))
    off = next(v for v in range(4) if v not in ep4.demonstration)
    with pytest.raises(OffPathError):
        demonstration_action(w4, ep4, AgentState(off, 0.0))


# ---------------------------------------------------------------- splits

def test_split_structure():
    cfg = SplitConfig(world=WorldConfig(n_viewpoints=10), episode=EpisodeConfig(min_hops=1),
                      train_worlds=1, train_episodes=5, seen_val_episodes=5, unseen_worlds=1,
                      unseen_val_episodes=5)
    ds = generate_split(cfg, 0)
    train_w = {e.world_id for e in ds.train}
    unseen_w = {e.world_id for e in ds.unseen_val}
    assert train_w.isdisjoint(unseen_w)
    assert {e.world_id for e in ds.seen_val} <= train_w
    assert {e.episode_id for e in ds.train}.isdisjoint({e.episode_id for e in ds.seen_val})
    vocab_tokens = set(range(len(ds.vocab)))
    for split in ("train", "seen_val", "unseen_val"):
        assert all(set(e.instruction.tokens) <= vocab_tokens for e in ds.split(split))


def test_split_deterministic(tiny_dataset):
    again = generate_split(TINY_SPLIT, 3)
    assert again.train == tiny_dataset.train and again.unseen_val == tiny_dataset.unseen_val


def test_guarded_episode_blocks_supervision(tiny_dataset):
    g = tiny_dataset.unseen_val[0].guarded()
    assert g.instruction == tiny_dataset.unseen_val[0].instruction
    with pytest.raises(SupervisionAccessError):
        g.target_viewpoint
    with pytest.raises(SupervisionAccessError):
        g.demonstration


def test_without_supervision(tiny_dataset):
    blind = tiny_dataset.without_supervision("unseen_val")
    assert all(e.target_viewpoint is None and e.demonstration is None for e in blind.unseen_val)
    assert blind.train == tiny_dataset.train
