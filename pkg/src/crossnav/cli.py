"""Command-line harness: data generation, the training phases, evaluation,
gradient checks and trace inspection.

A run directory (``--out``) holds the dataset, one checkpoint per phase and
one trace per command::

    dataset.txt  critic.ckpt  sl.ckpt  rl.ckpt  sil.ckpt  <command>.trace  .lock
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import critic as critic_mod
from . import learner as L
from . import navigator as nav
from .checkpoint import Checkpoint, CheckpointError, check_shapes, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .evalmetrics import aggregate, evaluate_episode, format_table
from .gradcheck import TOLERANCE, run_all
from .mathcore import AdamState
from .trace import (EpisodeRecord, EpochRecord, StepRecord, TraceError, emit_trace, epoch_record,
                    parse_trace, write_header)
from .worldio import FormatError, read_dataset, save_dataset
from .worldsim import generate_split

COMMANDS = ("gen-data", "pretrain-critic", "train-sl", "train-rl", "train-sil", "eval",
            "grad-check", "trace-dump")
# checkpoint each command starts from by default, and the one it writes
_INPUT = {"train-sl": "critic", "train-rl": "sl", "train-sil": "rl", "eval": None}
_OUTPUT = {"pretrain-critic": "critic", "train-sl": "sl", "train-rl": "rl", "train-sil": "sil"}


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# state <-> checkpoint


def state_to_checkpoint(state: L.TrainingState, cfg: RunConfig) -> Checkpoint:
    return Checkpoint(state.phase, cfg.to_dict(), state.nav_params, state.critic_params,
                      state.optimizer, state.rng.bit_generator.state, list(state.history))


def state_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig) -> L.TrainingState:
    ncfg, ccfg = cfg.navigator_config(), cfg.critic_config()
    check_shapes(ckpt.nav_params, nav.param_shapes(ncfg), "nav")
    check_shapes(ckpt.critic_params, critic_mod.param_shapes(ccfg), "critic")
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    return L.TrainingState(ckpt.nav_params, ckpt.critic_params, ncfg, ccfg, rng, ckpt.phase,
                           ckpt.optimizer, list(ckpt.history))


def fresh_state(cfg: RunConfig, dataset) -> L.TrainingState:
    return L.init_state(dataset, cfg.train_config(), cfg.navigator_config(), cfg.critic_config())


def zero_state(cfg: RunConfig) -> L.TrainingState:
    ncfg, ccfg = cfg.navigator_config(), cfg.critic_config()
    nav_params = nav.zero_params(ncfg)
    return L.TrainingState(nav_params, critic_mod.zero_params(ccfg), ncfg, ccfg,
                           np.random.default_rng(cfg.train_seed), "init",
                           AdamState.for_params(nav_params))


# --------------------------------------------------------------------------
# evaluation (optionally across worker processes)

_WORKER = {}


def _worker_init(params, dataset, cfg):
    _WORKER.update(params=params, dataset=dataset, cfg=cfg)


def _rollout_chunk(episodes):
    p, ds, cfg = _WORKER["params"], _WORKER["dataset"], _WORKER["cfg"]
    return [nav.rollout(p, ds.world_of(ep), ep, "greedy", max_steps=cfg.max_path) for ep in episodes]


def greedy_trajectories(params, dataset, episodes, cfg: RunConfig, workers: int = 1) -> list:
    """Greedy rollouts in episode order; results do not depend on `workers`."""
    if workers <= 1 or len(episodes) < 2:
        _worker_init(params, dataset, cfg)
        return _rollout_chunk(episodes)
    chunks = [episodes[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(workers, initializer=_worker_init,
                             initargs=(params, dataset, cfg)) as pool:
        parts = list(pool.map(_rollout_chunk, chunks))
    by_id = {t.episode_id: t for part in parts for t in part}
    return [by_id[ep.episode_id] for ep in episodes]


def evaluate_split(state, dataset, split, cfg: RunConfig, stream=None, limit=None):
    episodes = [ep for ep in dataset.split(split) if ep.has_supervision]
    if limit is not None:
        episodes = episodes[:limit]
    if not episodes:
        return None
    trajs = greedy_trajectories(state.nav_params, dataset, episodes, cfg, cfg.workers)
    reward_cfg = cfg.reward_config()
    results = []
    for ep, traj in zip(episodes, trajs):
        world = dataset.world_of(ep)
        res = evaluate_episode(world, ep, traj, cfg.d_success)
        results.append(res)
        if stream is None:
            continue
        rec = L.reward_record(world, ep, traj, state.critic_params, reward_cfg, cfg.reward_form)
        for t, step in enumerate(traj.steps):
            emit_trace(stream, StepRecord(ep.episode_id, t, step.state.viewpoint,
                                          float(step.state.heading), step.action,
                                          float(step.log_prob), float(rec.immediate[t])))
        r_intr = float(critic_mod.intrinsic_reward(ep.instruction, traj, state.critic_params,
                                                   cfg.reward_form).value)
        emit_trace(stream, EpisodeRecord(ep.episode_id, r_intr, float(rec.returns[0]), res.pl,
                                         res.ne, bool(res.oracle_success), bool(res.success),
                                         res.spl))
    report = aggregate(sorted(results, key=lambda r: r.episode_id))
    if stream is not None:
        emit_trace(stream, EpochRecord(state.phase, 0, split, report.pl, report.ne, report.osr,
                                       report.sr, report.spl, None))
    return report


# --------------------------------------------------------------------------
# commands


class Run:
    """Resolved configuration and paths for one command invocation."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out) if args.out else None
        self.ckpt = None
        ckpt_path = self.checkpoint_path()
        if ckpt_path is not None:
            self.ckpt = load_checkpoint(ckpt_path)
        if args.config:
            try:
                text = Path(args.config).read_text(encoding="utf-8")
            except OSError as exc:
                raise CliError(f"cannot read config {args.config}: {exc.strerror}") from None
            cfg = parse_config(text)
        elif self.ckpt is not None:
            cfg = RunConfig.from_dict(self.ckpt.config)
        else:
            cfg = RunConfig()
        overrides = {}
        if args.seed is not None:
            overrides.update(data_seed=args.seed, train_seed=args.seed)
        if args.workers is not None:
            overrides["workers"] = args.workers
        self.cfg = dataclasses.replace(cfg, **overrides) if overrides else cfg

    def checkpoint_path(self):
        if self.args.checkpoint:
            return Path(self.args.checkpoint)
        phase = _INPUT.get(self.args.command)
        if phase is None or self.out is None:
            return None
        path = self.out / f"{phase}.ckpt"
        if path.exists():
            return path
        if self.args.command in ("train-rl", "train-sil"):
            raise CliError(f"{path} not found; run the previous phase first or pass --checkpoint")
        return None

    def dataset_path(self) -> Path:
        return Path(self.cfg.dataset) if self.cfg.dataset else self.out / "dataset.txt"

    def dataset(self):
        path = self.dataset_path()
        if not path.exists():
            raise CliError(f"{path} not found; run gen-data first")
        return read_dataset(path)

    def state(self, dataset):
        if self.ckpt is not None:
            return state_from_checkpoint(self.ckpt, self.cfg)
        return fresh_state(self.cfg, dataset)

    def trace(self, name):
        stream = open(self.out / f"{name}.trace", "w", encoding="utf-8", newline="\n")
        write_header(stream, timestamp=not self.args.no_timestamp)
        return stream


def _train(run: Run, phase_fn) -> int:
    dataset = run.dataset()
    state = run.state(dataset)
    with run.trace(run.args.command) as stream:
        def hook(rec):
            emit_trace(stream, epoch_record(rec))
            stream.flush()
        phase_fn(state, dataset, run.cfg.train_config(), hook)
    save_checkpoint(run.out / f"{_OUTPUT[run.args.command]}.ckpt", state_to_checkpoint(state, run.cfg))
    last = [r for r in state.history if r["phase"] == state.phase]
    if last:
        rec = last[-1]
        print(f"{run.args.command}: {sum(1 for r in last if r['split'] == rec['split'])} epochs, "
              f"last {rec['split']} " + " ".join(f"{k}={rec[k]:.4g}" for k in rec
                                                 if k not in ("phase", "epoch", "split")))
    return 0


def cmd_gen_data(run: Run) -> int:
    dataset = generate_split(run.cfg.split_config(), run.cfg.data_seed)
    path = run.dataset_path()
    save_dataset(path, dataset)
    print(f"wrote {path}: {len(dataset.worlds)} worlds, {len(dataset.train)} train / "
          f"{len(dataset.seen_val)} seen_val / {len(dataset.unseen_val)} unseen_val episodes")
    return 0


def cmd_pretrain_critic(run: Run) -> int:
    return _train(run, lambda s, ds, tc, hook: L.critic_pretrain(s, ds, tc, hook))


def cmd_train_sl(run: Run) -> int:
    d = run.cfg.d_success
    return _train(run, lambda s, ds, tc, hook: L.train_sl(s, ds, tc, hook, d=d))


def cmd_train_rl(run: Run) -> int:
    rc, form = run.cfg.reward_config(), run.cfg.reward_form
    return _train(run, lambda s, ds, tc, hook: L.train_rl(s, ds, tc, rc, hook, reward_form=form))


def cmd_train_sil(run: Run) -> int:
    mode, cfg = run.args.mode, run.cfg

    def phase(state, dataset, tc, hook):
        if mode == "unseen":
            dataset = dataset.without_supervision("unseen_val")
        L.train_sil(state, dataset, tc, hook, mode=mode, iterations=cfg.sil_iterations,
                    d=cfg.d_success, reward_form=cfg.reward_form)
    return _train(run, phase)


def cmd_eval(run: Run) -> int:
    dataset = run.dataset()
    state = state_from_checkpoint(run.ckpt, run.cfg) if run.ckpt is not None else zero_state(run.cfg)
    rows = {}
    with run.trace("eval") as stream:
        for split in ("train", "seen_val", "unseen_val"):
            report = evaluate_split(state, dataset, split, run.cfg, stream, run.args.limit)
            if report is not None:
                rows[split] = report
    print(format_table(rows))
    return 0


def cmd_grad_check(run: Run) -> int:
    failed = False
    for r in run_all(run.cfg.train_seed):
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:<20} max_rel_error={r.max_rel_error:.3e} coords={r.n_coords} "
              f"time={r.seconds:.1f}s {status}")
        failed |= not r.ok
    print(f"tolerance {TOLERANCE:g}: {'FAILED' if failed else 'passed'}")
    return 1 if failed else 0


def cmd_trace_dump(run: Run) -> int:
    path = Path(run.args.trace) if run.args.trace else run.out / "eval.trace"
    records = parse_trace(path.read_text(encoding="utf-8"))
    steps: dict = {}
    for rec in records:
        if isinstance(rec, StepRecord):
            steps.setdefault(rec.episode_id, []).append(rec)
        elif isinstance(rec, EpisodeRecord):
            path_vps = " ".join(str(s.viewpoint) for s in steps.pop(rec.episode_id, []))
            r_intr = "-" if rec.r_intr is None else f"{rec.r_intr:.3f}"
            print(f"episode {rec.episode_id}: path [{path_vps}] success={int(rec.success)} "
                  f"NE={rec.ne:.2f} SPL={rec.spl:.3f} R_intr={r_intr}")
        else:
            vals = " ".join(f"{k}={getattr(rec, k):.4g}" for k in ("pl", "ne", "osr", "sr", "spl", "loss")
                            if getattr(rec, k) is not None)
            print(f"{rec.phase} epoch {rec.epoch} {rec.split}: {vals}")
    return 0


_HANDLERS = {"gen-data": cmd_gen_data, "pretrain-critic": cmd_pretrain_critic,
             "train-sl": cmd_train_sl, "train-rl": cmd_train_rl, "train-sil": cmd_train_sil,
             "eval": cmd_eval, "grad-check": cmd_grad_check, "trace-dump": cmd_trace_dump}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossnav", description=" ".join(__doc__.split("\n\n")[0].split()))
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--seed", type=int, help="overrides data_seed and train_seed")
    p.add_argument("--out", help="run directory")
    p.add_argument("--checkpoint", help="checkpoint to start from (default: previous phase)")
    p.add_argument("--mode", choices=("train", "unseen"), default="unseen", help="SIL split")
    p.add_argument("--workers", type=int, help="evaluation worker processes")
    p.add_argument("--no-timestamp", action="store_true", help="omit the trace timestamp line")
    p.add_argument("--limit", type=int, help="eval: at most N episodes per split")
    p.add_argument("--trace", help="trace-dump: trace file (default: <out>/eval.trace)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    needs_out = args.command not in ("grad-check",) and not (args.command == "trace-dump" and args.trace)
    if needs_out and not args.out:
        print(f"crossnav {args.command}: --out is required", file=sys.stderr)
        return 2
    try:
        if args.out:
            os.makedirs(args.out, exist_ok=True)
        lock = FileLock(os.path.join(args.out, ".lock"), timeout=0) if args.out else None
        try:
            if lock is not None:
                lock.acquire()
        except Timeout:
            raise CliError(f"run directory {args.out} is in use by another process") from None
        try:
            run = Run(args)
            return _HANDLERS[args.command](run)
        finally:
            if lock is not None:
                lock.release()
    except (CliError, ConfigError, CheckpointError, FormatError, TraceError, L.IntegrityError,
            OSError) as exc:
        print(f"crossnav {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
