"""Line-structured trace log ("CROSSNAV-TRACE v1").

The first line names the schema; an optional second line carries a wall-clock
timestamp (the only non-reproducible content). Every other line is one
tab-separated record whose first field is its kind:

    step     episode_id t viewpoint heading action_index log_prob immediate_reward
    episode  episode_id r_intr return0 pl ne oracle_success success spl
    epoch    phase epoch split pl ne osr sr spl loss

Reals use 17 significant digits; missing values are written as "-".
"""
from __future__ import annotations

import datetime as _dt
from dataclasses import astuple, dataclass, fields
from typing import Optional, Union

HEADER = "CROSSNAV-TRACE v1"
TIMESTAMP_PREFIX = "# timestamp "


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class StepRecord:
    episode_id: int
    t: int
    viewpoint: int
    heading: float
    action_index: int
    log_prob: float
    immediate_reward: Optional[float]


@dataclass(frozen=True)
class EpisodeRecord:
    episode_id: int
    r_intr: Optional[float]
    return0: Optional[float]
    pl: float
    ne: float
    oracle_success: bool
    success: bool
    spl: float


@dataclass(frozen=True)
class EpochRecord:
    phase: str
    epoch: int
    split: str
    pl: Optional[float]
    ne: Optional[float]
    osr: Optional[float]
    sr: Optional[float]
    spl: Optional[float]
    loss: Optional[float]


Record = Union[StepRecord, EpisodeRecord, EpochRecord]
_KINDS = {"step": StepRecord, "episode": EpisodeRecord, "epoch": EpochRecord}
_NAMES = {cls: name for name, cls in _KINDS.items()}


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format(value, ".17g")
    text = str(value)
    if "\t" in text or "\n" in text:
        raise TraceError(f"field {text!r} contains a separator")
    return text


def format_record(record: Record) -> str:
    kind = _NAMES.get(type(record))
    if kind is None:
        raise TraceError(f"not a trace record: {record!r}")
    return "\t".join([kind] + [_fmt(v) for v in astuple(record)])


def emit_trace(stream, record: Record) -> None:
    stream.write(format_record(record) + "\n")


def write_header(stream, timestamp: bool = True) -> None:
    stream.write(HEADER + "\n")
    if timestamp:
        now = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        stream.write(TIMESTAMP_PREFIX + now + "\n")


def _parse_field(raw: str, kind):
    if raw == "-":
        return None
    if "bool" in kind:
        return raw == "1"
    if "int" in kind:
        return int(raw)
    if "float" in kind:
        return float(raw)
    return raw


def parse_record(line: str) -> Record:
    parts = line.rstrip("\n").split("\t")
    cls = _KINDS.get(parts[0])
    if cls is None:
        raise TraceError(f"unknown record kind {parts[0]!r}")
    flds = fields(cls)
    if len(parts) - 1 != len(flds):
        raise TraceError(f"{parts[0]} record needs {len(flds)} fields, got {len(parts) - 1}")
    try:
        return cls(*(_parse_field(raw, str(f.type)) for raw, f in zip(parts[1:], flds)))
    except ValueError as exc:
        raise TraceError(f"bad field in {line!r}: {exc}") from None


def parse_trace(text: str) -> list:
    lines = text.splitlines()
    if not lines or lines[0] != HEADER:
        raise TraceError(f"missing header {HEADER!r}")
    return [parse_record(line) for line in lines[1:] if line and not line.startswith("#")]


def strip_timestamp(text: str) -> str:
    return "".join(line for line in text.splitlines(keepends=True)
                   if not line.startswith(TIMESTAMP_PREFIX))


def epoch_record(rec: dict) -> EpochRecord:
    """Converts a learner history entry to a trace record."""
    loss = rec.get("loss", rec.get("val_loss"))
    get = lambda k: None if rec.get(k) is None else float(rec[k])  # noqa: E731
    return EpochRecord(rec["phase"], int(rec["epoch"]), rec["split"], get("PL"), get("NE"),
                       get("OSR"), get("SR"), get("SPL"), None if loss is None else float(loss))
