import math

import numpy as np
import pytest

from crossnav.worldsim import (EpisodeConfig, SplitConfig, Viewpoint, WorldConfig, WorldGraph,
                               generate_split)


def make_world(positions, edges, landmarks=None, feature_dim=4, m=4, landmark_vocab=3,
               noise_sigma=0.0, tile_factor=1, world_id=0, features=None):
    """Hand-built world; edge lengths are the Euclidean distances."""
    landmarks = landmarks or [0] * len(positions)
    vps = [Viewpoint(i, (float(x), float(y), 0.0), lm)
           for i, ((x, y), lm) in enumerate(zip(positions, landmarks))]
    es = sorted((min(a, b), max(a, b), math.dist(positions[a], positions[b])) for a, b in edges)
    if features is None:
        features = np.eye(landmark_vocab, feature_dim) + 0.5
    return WorldGraph(world_id, vps, es, feature_dim, m, landmark_vocab, noise_sigma, tile_factor,
                      np.asarray(features, dtype=np.float64))


TINY_SPLIT = SplitConfig(
    world=WorldConfig(n_viewpoints=12, mean_degree=2.6, feature_dim=6, m=8, landmark_vocab=5,
                      noise_sigma=0.1, tile_factor=1),
    episode=EpisodeConfig(min_hops=1, max_hops=3),
    train_worlds=2, train_episodes=12, seen_val_episodes=6, unseen_worlds=1, unseen_val_episodes=6)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_split(TINY_SPLIT, 3)
