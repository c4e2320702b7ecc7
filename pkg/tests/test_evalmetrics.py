import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_world
from crossnav.evalmetrics import EpisodeResult, aggregate, evaluate_episode, format_table
from crossnav.worldsim import (AgentState, EpisodeSpec, Instruction, WorldConfig, WorldError,
                               generate_world, geodesic_distance)


def episode(start, target):
    return EpisodeSpec(0, 0, Instruction((0,)), AgentState(start, 0.0), target, (start, target), 0)


LINE = make_world([(0, 0), (5, 0), (10, 0), (10, 5)], [(0, 1), (1, 2), (2, 3)])


def test_exact_shortest_path_spl_one():
    r = evaluate_episode(LINE, episode(0, 2), [0, 1, 2])
    assert (r.pl, r.ne, r.success, r.oracle_success, r.spl) == (10.0, 0.0, 1, 1, 1.0)


def test_spl_half_when_path_twice_shortest():
    w = make_world([(0, 0), (10, 0), (5, 0)], [(0, 2), (2, 1)])
    r = evaluate_episode(w, episode(2, 1), [2, 0, 2, 1])  # l = 5, p = 15
    assert r.success == 1 and r.spl == pytest.approx(5 / 15)
    w2 = make_world([(0, 0), (10, 0), (-5, 0)], [(0, 1), (0, 2)])
    r2 = evaluate_episode(w2, episode(0, 1), [0, 2, 0, 1])  # l = 10, p = 20
    assert r2.spl == 0.5


def test_oracle_success_but_failure():
    r = evaluate_episode(LINE, episode(0, 2), [0, 1, 2, 3])
    assert r.oracle_success == 1 and r.success == 0 and r.spl == 0.0 and r.ne == 5.0


def test_zero_length_episode():
    r = evaluate_episode(LINE, episode(1, 1), [1])
    assert r.spl == 1.0 and r.pl == 0.0
    r = evaluate_episode(LINE, episode(1, 1), [1, 2])
    assert r.success == 0 and r.spl == 0.0


def test_errors():
    with pytest.raises(WorldError):
        evaluate_episode(LINE, episode(0, 2), [0, 9])
    with pytest.raises(ValueError):
        evaluate_episode(LINE, episode(0, 2), [])
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_examples():
    one = EpisodeResult(0, (0,), 1.0, 0.0, 1, 1, 0.5)
    rep = aggregate([one])
    assert rep.sr == 100.0 and rep.spl == 50.0
    two = aggregate([one, EpisodeResult(1, (0,), 2.0, 9.0, 0, 0, 0.0)])
    assert two.sr == 50.0 and two.pl == 1.5 and two.ne == 4.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_random_walk_metric_ordering(seed):
    rng = np.random.default_rng(seed)
    w = generate_world(WorldConfig(n_viewpoints=15), int(rng.integers(100)))
    results = []
    for k in range(10):
        s, t = int(rng.integers(15)), int(rng.integers(15))
        path = [s]
        for _ in range(int(rng.integers(0, 8))):
            nbrs = w.neighbors(path[-1])
            path.append(nbrs[int(rng.integers(len(nbrs)))][0])
        r = evaluate_episode(w, episode(s, t), path)
        assert 0 <= r.spl <= r.success <= r.oracle_success <= 1
        assert r.pl >= 0 and r.ne >= 0
        assert r.ne == geodesic_distance(w, path[-1], t)
        results.append(r)
    rep = aggregate(results)
    assert rep.spl <= rep.sr <= rep.osr
    assert rep.pl == pytest.approx(np.mean([r.pl for r in results]), rel=1e-15)


def test_format_table_columns():
    rep = aggregate([EpisodeResult(0, (0,), 1.0, 0.0, 1, 1, 0.5)])
    text = format_table({"seen": rep})
    assert text.splitlines()[0].split() == ["PL", "NE", "OSR", "SR", "SPL"]
    assert text.splitlines()[1].split()[0] == "seen"
