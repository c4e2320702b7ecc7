"""PL / NE / OSR / SR / SPL, per episode and aggregated."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .worldsim import WorldError, geodesic_distance


@dataclass(frozen=True)
class EpisodeResult:
    episode_id: int
    viewpoints: tuple
    pl: float
    ne: float
    success: int
    oracle_success: int
    spl: float


@dataclass(frozen=True)
class MetricsReport:
    results: tuple
    pl: float
    ne: float
    osr: float  # percentages
    sr: float
    spl: float

    def row(self) -> dict:
        return {"PL": self.pl, "NE": self.ne, "OSR": self.osr, "SR": self.sr, "SPL": self.spl}


def path_length(world, viewpoints) -> float:
    total = 0.0
    for a, b in zip(viewpoints[:-1], viewpoints[1:]):
        if a != b:
            total += world.edge_length(a, b)
    return total


def evaluate_episode(world, episode, trajectory, d: float = 3.0) -> EpisodeResult:
    vps = tuple(trajectory.viewpoints) if hasattr(trajectory, "viewpoints") else tuple(trajectory)
    if not vps:
        raise ValueError("empty trajectory")
    for v in vps:
        if not world.has_viewpoint(v):
            raise WorldError(f"unknown viewpoint {v}")
    target = episode.target_viewpoint
    pl = path_length(world, vps)
    ne = geodesic_distance(world, vps[-1], target)
    success = int(ne <= d)
    oracle = int(min(geodesic_distance(world, v, target) for v in vps) <= d)
    shortest = geodesic_distance(world, vps[0], target)
    if shortest == 0.0:
        spl = float(success)
    else:
        spl = success * shortest / max(pl, shortest)
    return EpisodeResult(episode.episode_id, vps, pl, ne, success, oracle, spl)


def aggregate(results) -> MetricsReport:
    results = tuple(results)
    if not results:
        raise ValueError("cannot aggregate an empty result list")
    return MetricsReport(
        results,
        float(np.mean([r.pl for r in results])),
        float(np.mean([r.ne for r in results])),
        100.0 * float(np.mean([r.oracle_success for r in results])),
        100.0 * float(np.mean([r.success for r in results])),
        100.0 * float(np.mean([r.spl for r in results])),
    )


def format_table(rows: dict) -> str:
    """rows: label -> MetricsReport. Fixed-width table in PL NE OSR SR SPL order."""
    width = max([5] + [len(k) for k in rows])
    lines = [f"{'':<{width}}  {'PL':>7} {'NE':>7} {'OSR':>7} {'SR':>7} {'SPL':>7}"]
    for label, rep in rows.items():
        lines.append(f"{label:<{width}}  {rep.pl:7.2f} {rep.ne:7.2f} {rep.osr:7.1f} {rep.sr:7.1f} {rep.spl:7.1f}")
    return "\n".join(lines)
