"""Text serialization of worlds and splits ("CROSSNAV-WORLD v1").

Layout::

    CROSSNAV-WORLD v1
    landmark_vocab <L>
    [world <id>]
    params <feature_dim> <m> <noise_sigma> <tile_factor>
    [viewpoints]
    <id> <x> <y> <z> <landmark>
    [edges]
    <a> <b> <length>
    [landmarks]
    <landmark> <f_1> ... <f_d>
    [episodes]
    <split> <id> <world> <start> <heading> <elevation> <target|-> <noise_seed> <demo|-> <tokens>

Reals are written with 17 significant digits, so reading back is exact.
Lists inside an episode line are comma separated.
"""
from __future__ import annotations

import numpy as np

from .worldsim import (AgentState, Dataset, EpisodeSpec, Instruction, Viewpoint, Vocabulary,
                       WorldGraph)

MAGIC = "CROSSNAV-WORLD v1"
SPLITS = ("train", "seen_val", "unseen_val")


class FormatError(ValueError):
    pass


def _r(x: float) -> str:
    return format(float(x), ".17g")


def dump_dataset(dataset: Dataset) -> str:
    out = [MAGIC, f"landmark_vocab {dataset.vocab.landmark_vocab}"]
    for wid in sorted(dataset.worlds):
        w = dataset.worlds[wid]
        out.append(f"[world {wid}]")
        out.append(f"params {w.feature_dim} {w.m} {_r(w.noise_sigma)} {w.tile_factor}")
        out.append("[viewpoints]")
        for vp in w.viewpoints:
            out.append(f"{vp.id} {' '.join(_r(c) for c in vp.position)} {vp.landmark_id}")
        out.append("[edges]")
        for a, b, length in w.edges:
            out.append(f"{a} {b} {_r(length)}")
        out.append("[landmarks]")
        for k, row in enumerate(w.landmark_features):
            out.append(f"{k} {' '.join(_r(v) for v in row)}")
    out.append("[episodes]")
    for split in SPLITS:
        for ep in dataset.split(split):
            target = "-" if ep.target_viewpoint is None else str(ep.target_viewpoint)
            demo = "-" if ep.demonstration is None else ",".join(map(str, ep.demonstration))
            out.append(" ".join([split, str(ep.episode_id), str(ep.world_id), str(ep.start.viewpoint),
                                 _r(ep.start.heading), _r(ep.start.elevation), target,
                                 str(ep.noise_seed), demo,
                                 ",".join(map(str, ep.instruction.tokens))]))
    return "\n".join(out) + "\n"


def load_dataset(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise FormatError(f"missing header {MAGIC!r}")
    try:
        key, value = lines[1].split()
        if key != "landmark_vocab":
            raise ValueError
        vocab = Vocabulary(int(value))
    except (IndexError, ValueError):
        raise FormatError("line 2: expected 'landmark_vocab <n>'") from None

    worlds: dict = {}
    splits: dict = {s: [] for s in SPLITS}
    cur = None
    section = None

    def flush():
        if cur is not None:
            wid, params, vps, edges, lms = cur
            feats = np.array([lms[k] for k in range(len(lms))])
            worlds[wid] = WorldGraph(wid, vps, edges, params[0], params[1], vocab.landmark_vocab,
                                     params[2], params[3], feats)

    for lineno, line in enumerate(lines[2:], start=3):
        line = line.strip()
        if not line:
            continue
        try:
            if line.startswith("[world "):
                flush()
                cur = (int(line[7:-1]), None, [], [], {})
                section = "world"
            elif line in ("[viewpoints]", "[edges]", "[landmarks]"):
                section = line[1:-1]
            elif line == "[episodes]":
                flush()
                cur = None
                section = "episodes"
            elif section == "world" and line.startswith("params "):
                f, m, noise, tile = line.split()[1:]
                cur = (cur[0], (int(f), int(m), float(noise), int(tile)), cur[2], cur[3], cur[4])
            elif section == "viewpoints":
                i, x, y, z, lm = line.split()
                cur[2].append(Viewpoint(int(i), (float(x), float(y), float(z)), int(lm)))
            elif section == "edges":
                a, b, length = line.split()
                cur[3].append((int(a), int(b), float(length)))
            elif section == "landmarks":
                parts = line.split()
                cur[4][int(parts[0])] = [float(v) for v in parts[1:]]
            elif section == "episodes":
                (split, eid, wid, start, heading, elev, target, noise_seed,
                 demo, tokens) = line.split()
                ep = EpisodeSpec(int(eid), int(wid),
                                 Instruction(tuple(int(t) for t in tokens.split(","))),
                                 AgentState(int(start), float(heading), float(elev)),
                                 None if target == "-" else int(target),
                                 None if demo == "-" else tuple(int(v) for v in demo.split(",")),
                                 int(noise_seed))
                splits[split].append(ep)
            else:
                raise ValueError(f"unexpected line {line!r}")
        except (ValueError, KeyError, TypeError, IndexError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
    flush()
    return Dataset(vocab, worlds, splits["train"], splits["seen_val"], splits["unseen_val"])


def save_dataset(path, dataset: Dataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_dataset(dataset))


def read_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return load_dataset(fh.read())
