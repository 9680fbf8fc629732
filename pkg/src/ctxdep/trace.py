"""Trace data model, vocabulary construction and JSONL I/O."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

CYCLE_MINUTES = 2880
DAY_MINUTES = 1440
ACCEL_POWER_MIN = 0.1
ACCEL_POWER_MAX = 10000.0
DEFAULT_VOCAB_CAP = 100


class TraceError(ValueError):
    """Raised for malformed or inconsistent trace data."""


class UsageKind(str, Enum):
    WEB = "web"
    PHONE = "phone"
    APP = "app"


KINDS: tuple[UsageKind, ...] = (UsageKind.WEB, UsageKind.PHONE, UsageKind.APP)


def cycle_minute(ts: int, epoch_weekday: int = 0) -> float:
    """Map seconds since the trace epoch onto the 2880-minute weekday+weekend cycle.

    ``epoch_weekday`` is the weekday of the epoch (Monday = 0). Saturdays and
    Sundays land in ``[1440, 2880)``.
    """
    day, sec = divmod(int(ts), 86400)
    weekday = (epoch_weekday + day) % 7
    offset = DAY_MINUTES if weekday >= 5 else 0
    return offset + sec / 60.0


def accel_log_power(power: float) -> float:
    """Log of accelerometer power after clamping to the logged range."""
    return math.log(min(max(power, ACCEL_POWER_MIN), ACCEL_POWER_MAX))


@dataclass(frozen=True, slots=True)
class UsageEvent:
    user_id: str
    timestamp: int
    kind: UsageKind
    label: str

    def __post_init__(self) -> None:
        if self.timestamp < 0:
            raise TraceError(f"negative timestamp {self.timestamp}")
        if not self.label:
            raise TraceError("empty usage label")


@dataclass(frozen=True, slots=True)
class ContextSnapshot:
    """Last known context at the moment of a usage event.

    Parameters
    ----------
    time_of_cycle : float
        Minutes in ``[0, 2880)``; weekday first, then weekend.
    accel_log_power : float
        Log accelerometer power.
    gps : tuple of float, optional
        ``(lat, lon)`` in degrees; ``None`` when the sensor had no fix.
    cell_id : str, optional
        Serving cell, ``None`` when unavailable.
    prior_usage : mapping
        Per usage kind, labels of earlier events, most recent first.
    """

    time_of_cycle: float
    accel_log_power: float
    gps: tuple[float, float] | None = None
    cell_id: str | None = None
    prior_usage: Mapping[UsageKind, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0 <= self.time_of_cycle < CYCLE_MINUTES:
            raise TraceError(f"time_of_cycle {self.time_of_cycle} outside [0, {CYCLE_MINUTES})")
        if self.gps is not None:
            lat, lon = self.gps
            if abs(lat) > 90 or abs(lon) > 180:
                raise TraceError(f"gps fix {self.gps} out of range")

    def prior(self, kind: UsageKind) -> tuple[str, ...]:
        return tuple(self.prior_usage.get(kind, ()))


@dataclass(frozen=True, slots=True)
class LabeledEvent:
    context: ContextSnapshot
    outcome: UsageEvent

    @property
    def kind(self) -> UsageKind:
        return self.outcome.kind

    @property
    def label(self) -> str:
        return self.outcome.label


@dataclass
class Trace:
    """Per-user, time-ordered labeled events.

    ``depth`` is the prior-usage chain length written to file; ``None`` means
    chains are not truncated.
    """

    users: dict[str, list[LabeledEvent]] = field(default_factory=dict)
    depth: int | None = None
    epoch_weekday: int = 0

    def __len__(self) -> int:
        return sum(len(v) for v in self.users.values())

    def user_ids(self) -> list[str]:
        return sorted(self.users)

    def events(self, user: str, kind: UsageKind | None = None) -> list[LabeledEvent]:
        evs = self.users.get(user, [])
        if kind is None:
            return list(evs)
        return [e for e in evs if e.outcome.kind == kind]


@dataclass(frozen=True)
class Vocabulary:
    """Top-frequency outcome labels for one usage kind."""

    kind: UsageKind
    labels: tuple[str, ...]
    coverage: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(self.labels)})

    @property
    def k(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: object) -> bool:
        return label in self._index  # type: ignore[attr-defined]

    def index(self, label: str) -> int:
        return self._index[label]  # type: ignore[attr-defined]

    def get(self, label: str) -> int | None:
        return self._index.get(label)  # type: ignore[attr-defined]

    def filter(self, events: Sequence[LabeledEvent]) -> tuple[list[LabeledEvent], float]:
        """Keep events of this kind whose label is in the vocabulary.

        Returns the kept events and the dropped fraction among events of this kind.
        """
        same = [e for e in events if e.outcome.kind == self.kind]
        kept = [e for e in same if e.outcome.label in self]
        dropped = 1.0 - len(kept) / len(same) if same else 0.0
        return kept, dropped


def rank_labels(labels: Iterable[str]) -> list[tuple[str, int]]:
    """Labels with counts, ordered by frequency desc then label asc."""
    counts = Counter(labels)
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


def build_vocabulary(
    events: Iterable[UsageEvent | LabeledEvent],
    kind: UsageKind,
    cap: int = DEFAULT_VOCAB_CAP,
) -> Vocabulary:
    if cap < 1:
        raise ValueError("vocabulary cap must be >= 1")
    kind = UsageKind(kind)
    labels = []
    for ev in events:
        out = ev.outcome if isinstance(ev, LabeledEvent) else ev
        if out.kind == kind:
            labels.append(out.label)
    if not labels:
        raise TraceError(f"no {kind.value} events to build a vocabulary from")
    ranked = rank_labels(labels)[:cap]
    kept = sum(c for _, c in ranked)
    return Vocabulary(kind, tuple(lab for lab, _ in ranked), coverage=kept / len(labels))


# --------------------------------------------------------------------------
# JSONL I/O
# --------------------------------------------------------------------------

_PRIOR_KEYS = {k: f"prior_{k.value}" for k in KINDS}


def event_to_record(ev: LabeledEvent, depth: int | None = None) -> dict:
    ctx, out = ev.context, ev.outcome
    rec: dict = {
        "user": out.user_id,
        "ts": out.timestamp,
        "kind": out.kind.value,
        "label": out.label,
        "tod": ctx.time_of_cycle,
        "alp": ctx.accel_log_power,
    }
    if ctx.gps is not None:
        rec["lat"], rec["lon"] = ctx.gps
    if ctx.cell_id is not None:
        rec["cell"] = ctx.cell_id
    for kind in KINDS:
        chain = list(ctx.prior(kind))
        rec[_PRIOR_KEYS[kind]] = chain if depth is None else chain[:depth]
    return rec


def record_to_event(rec: Mapping, epoch_weekday: int = 0) -> LabeledEvent:
    try:
        ts = rec["ts"]
        if not isinstance(ts, int) or isinstance(ts, bool):
            raise TraceError(f"ts must be an integer, got {ts!r}")
        kind = UsageKind(rec["kind"])
        tod = rec.get("tod")
        tod = cycle_minute(ts, epoch_weekday) if tod is None else float(tod)
        gps = None
        if rec.get("lat") is not None and rec.get("lon") is not None:
            gps = (float(rec["lat"]), float(rec["lon"]))
        prior = {k: tuple(str(x) for x in rec.get(_PRIOR_KEYS[k], ())) for k in KINDS}
        ctx = ContextSnapshot(
            time_of_cycle=tod,
            accel_log_power=float(rec["alp"]),
            gps=gps,
            cell_id=None if rec.get("cell") is None else str(rec["cell"]),
            prior_usage=prior,
        )
        out = UsageEvent(str(rec["user"]), ts, kind, str(rec["label"]))
    except KeyError as exc:
        raise TraceError(f"missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise TraceError(str(exc)) from None
    return LabeledEvent(ctx, out)


def _check_chains(events: list[LabeledEvent], user: str) -> None:
    history: dict[UsageKind, list[str]] = {k: [] for k in KINDS}
    for ev in events:
        for kind in KINDS:
            chain = ev.context.prior(kind)
            known = history[kind]
            n = min(len(chain), len(known))
            if list(chain[:n]) != known[:n]:
                raise TraceError(
                    f"user {user!r} ts={ev.outcome.timestamp}: prior_{kind.value} "
                    f"{list(chain[:n])} disagrees with event history {known[:n]}"
                )
        history[ev.outcome.kind].insert(0, ev.outcome.label)


def parse_trace(path: str | Path) -> Trace:
    """Read a JSONL trace file.

    Raises
    ------
    TraceError
        On a malformed line (message carries the line number), a timestamp
        that goes backwards within a user, or prior-usage chains that
        contradict the event order.
    """
    trace = Trace()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise TraceError(f"line {lineno}: expected a JSON object")
            if rec.get("header"):
                trace.depth = rec.get("depth")
                trace.epoch_weekday = int(rec.get("epoch_weekday", 0))
                continue
            try:
                ev = record_to_event(rec, trace.epoch_weekday)
            except TraceError as exc:
                raise TraceError(f"line {lineno}: {exc}") from None
            evs = trace.users.setdefault(ev.outcome.user_id, [])
            if evs and ev.outcome.timestamp < evs[-1].outcome.timestamp:
                raise TraceError(
                    f"line {lineno}: timestamp {ev.outcome.timestamp} precedes "
                    f"{evs[-1].outcome.timestamp} for user {ev.outcome.user_id!r}"
                )
            evs.append(ev)
    for user, evs in trace.users.items():
        _check_chains(evs, user)
    return trace


def dumps_trace(trace: Trace) -> str:
    """Canonical serialization: header, then users in id order, events in time order."""
    lines = []
    if trace.depth is not None or trace.epoch_weekday:
        header = {"header": True, "depth": trace.depth, "epoch_weekday": trace.epoch_weekday}
        lines.append(json.dumps(header, separators=(",", ":")))
    for user in trace.user_ids():
        for ev in trace.users[user]:
            lines.append(json.dumps(event_to_record(ev, trace.depth), separators=(",", ":")))
    return "".join(line + "\n" for line in lines)


def write_trace(trace: Trace, path: str | Path) -> None:
    Path(path).write_text(dumps_trace(trace), encoding="utf-8")
