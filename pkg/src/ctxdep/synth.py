"""Seeded synthetic multi-user traces with known ground truth.

Each user lives through a handful of *situations*. Situations tile the
2880-minute cycle in fixed windows and each carries its own gps center, cell
and accelerometer signature. Usage within a situation follows a mixture of a
situation-specific permuted Zipf law (weight ``dependency``) and the user's
global Zipf law; with probability ``markov`` the next label instead follows
the previous label of the same kind through a fixed successor map.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .discretize import METERS_PER_DEGREE, MOVEMENT, TIME, Binning
from .estimate import laplace_rows
from .trace import (
    CYCLE_MINUTES,
    DAY_MINUTES,
    KINDS,
    ContextSnapshot,
    LabeledEvent,
    Trace,
    TraceError,
    UsageEvent,
    UsageKind,
    Vocabulary,
    accel_log_power,
    cycle_minute,
    write_trace,
)

BASE_LAT, BASE_LON = 29.7174, -95.4018
FULL_EVENTS = {"web": 700, "phone": 2300, "app": 21200}


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 24
    scale: float = 0.1
    events_per_user: Mapping[str, int] = field(default_factory=lambda: dict(FULL_EVENTS))
    zipf_exponent: float = 1.5
    n_situations: int = 6
    n_windows: int = 12
    dependency: float = 0.7
    markov: float = 0.2
    vocab_sizes: Mapping[str, int] = field(default_factory=lambda: {"web": 150, "phone": 120, "app": 100})
    gps_sigma_m: float = 50.0
    gps_spread_deg: float = 0.02
    n_cells: int = 3
    accel_sd: float = 0.6
    gps_missing: float = 0.05
    cell_missing: float = 0.02
    depth: int = 3
    days: int = 364
    epoch_weekday: int = 0
    seed: int = 42

    def __post_init__(self) -> None:
        if self.n_users < 1 or self.n_situations < 1 or self.n_windows < self.n_situations:
            raise ValueError("need n_users >= 1 and n_windows >= n_situations >= 1")
        if not 0.0 <= self.dependency <= 1.0 or not 0.0 <= self.markov <= 1.0:
            raise ValueError("dependency and markov must lie in [0, 1]")
        if self.zipf_exponent <= 0:
            raise ValueError("zipf exponent must be positive")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    def n_events(self, kind: UsageKind | str) -> int:
        return max(1, round(self.events_per_user[UsageKind(kind).value] * self.scale))


def zipf_weights(k: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, k + 1) ** s
    return w / w.sum()


def _label(kind: UsageKind, user: int, j: int) -> str:
    if kind is UsageKind.WEB:
        return f"site{j:03d}.com"
    if kind is UsageKind.PHONE:
        return hashlib.sha1(f"{user}:{j}".encode()).hexdigest()[:12]
    return f"app.{j:03d}"


@dataclass
class UserModel:
    windows: list[int]
    gps_centers: list[tuple[float, float]]
    cells: list[str]
    accel_means: list[float]
    labels: dict[str, list[str]]
    probs: dict[str, list[list[float]]]
    successor: dict[str, dict[str, str]]

    def situation(self, tod: float) -> int:
        if not 0 <= tod < CYCLE_MINUTES:
            raise TraceError(f"time_of_cycle {tod} outside every situation window")
        w = int(tod * len(self.windows) // CYCLE_MINUTES)
        return self.windows[w]


@dataclass
class GeneratorModel:
    config: SynthConfig
    users: dict[str, UserModel]

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        return {"config": cfg, "users": {u: asdict(m) for u, m in self.users.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorModel:
        users = {}
        for u, m in d["users"].items():
            m = dict(m)
            m["gps_centers"] = [tuple(c) for c in m["gps_centers"]]
            users[u] = UserModel(**m)
        return cls(SynthConfig(**d["config"]), users)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> GeneratorModel:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def situation_probabilities(self, user: str) -> np.ndarray:
        """Exact probability of each situation under uniform timestamps over whole weeks."""
        m = self.users[user]
        n_w = len(m.windows)
        p = np.zeros(self.config.n_situations)
        width = CYCLE_MINUTES / n_w
        for w, s in enumerate(m.windows):
            a, b = w * width, (w + 1) * width
            weekday = max(0.0, min(b, DAY_MINUTES) - a)
            weekend = (b - a) - weekday
            p[s] += (5 / 7 * weekday + 2 / 7 * weekend) / DAY_MINUTES
        return p / p.sum()


def user_rng(config: SynthConfig, user_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, user_index]))


def build_user_model(config: SynthConfig, user_index: int, rng: np.random.Generator) -> UserModel:
    S = config.n_situations
    windows = list(rng.permutation(S)) + list(rng.integers(0, S, config.n_windows - S))
    windows = [int(w) for w in rng.permutation(windows)]
    centers = []
    for _ in range(S):
        dlat, dlon = rng.uniform(-config.gps_spread_deg, config.gps_spread_deg, 2)
        centers.append((BASE_LAT + float(dlat), BASE_LON + float(dlon)))
    cell_of = rng.permutation(S) % max(1, min(config.n_cells, S))
    cells = [f"cell{int(c):02d}" for c in cell_of]
    lo, hi = math.log(0.5), math.log(500.0)
    accel = [float(x) for x in lo + (hi - lo) * rng.permutation(S) / max(1, S - 1)]
    labels, probs, succ = {}, {}, {}
    for kind in KINDS:
        V = config.vocab_sizes[kind.value]
        names = [_label(kind, user_index, j) for j in range(V)]
        z = zipf_weights(V, config.zipf_exponent)
        glob = np.empty(V)
        glob[rng.permutation(V)] = z
        rows = []
        for _ in range(S):
            sit = np.empty(V)
            sit[rng.permutation(V)] = z
            p = config.dependency * sit + (1 - config.dependency) * glob
            rows.append((p / p.sum()).tolist())
        perm = rng.permutation(V)
        labels[kind.value] = names
        probs[kind.value] = rows
        succ[kind.value] = {names[i]: names[int(perm[i])] for i in range(V)}
    return UserModel(windows, centers, cells, accel, labels, probs, succ)


def generate_user(config: SynthConfig, user_index: int) -> tuple[str, UserModel, list[LabeledEvent]]:
    """Model and events of one user; depends only on ``(config.seed, user_index)``."""
    rng = user_rng(config, user_index)
    user = f"u{user_index:02d}"
    model = build_user_model(config, user_index, rng)
    horizon = config.days * 86400
    stamps, kinds = [], []
    for ki, kind in enumerate(KINDS):
        n = config.n_events(kind)
        stamps.append(rng.integers(0, horizon, n))
        kinds.append(np.full(n, ki))
    ts = np.concatenate(stamps)
    kk = np.concatenate(kinds)
    order = np.lexsort((kk, ts))
    ts, kk = ts[order], kk[order]
    n = len(ts)
    u_out, u_markov, u_gps, u_cell = rng.random(n), rng.random(n), rng.random(n), rng.random(n)
    gps_noise = rng.normal(0.0, config.gps_sigma_m / METERS_PER_DEGREE, (n, 2))
    accel_noise = rng.normal(0.0, config.accel_sd, n)
    cum = {k: np.cumsum(np.asarray(model.probs[k]), axis=1) for k in model.probs}
    history: dict[UsageKind, list[str]] = {k: [] for k in KINDS}
    events = []
    for i in range(n):
        kind = KINDS[int(kk[i])]
        tod = cycle_minute(int(ts[i]), config.epoch_weekday)
        s = model.situation(tod)
        lat0, lon0 = model.gps_centers[s]
        gps = None
        if u_gps[i] >= config.gps_missing:
            gps = (round(lat0 + gps_noise[i, 0], 7),
                   round(lon0 + gps_noise[i, 1] / math.cos(math.radians(lat0)), 7))
        cell = None if u_cell[i] < config.cell_missing else model.cells[s]
        alp = round(accel_log_power(math.exp(model.accel_means[s] + accel_noise[i])), 6)
        prev = history[kind]
        if prev and u_markov[i] < config.markov:
            label = model.successor[kind.value][prev[0]]
        else:
            c = cum[kind.value][s]
            j = min(int(np.searchsorted(c, u_out[i] * c[-1], side="right")), len(c) - 1)
            label = model.labels[kind.value][j]
        ctx = ContextSnapshot(round(tod, 4), alp, gps, cell,
                              {k: tuple(history[k]) for k in KINDS})
        events.append(LabeledEvent(ctx, UsageEvent(user, int(ts[i]), kind, label)))
        prev.insert(0, label)
        del prev[config.depth:]
    return user, model, events


def generate(config: SynthConfig) -> tuple[Trace, GeneratorModel]:
    trace = Trace(depth=config.depth, epoch_weekday=config.epoch_weekday)
    users = {}
    for j in range(config.n_users):
        user, model, events = generate_user(config, j)
        trace.users[user] = events
        users[user] = model
    return trace, GeneratorModel(config, users)


def generate_trace(config: SynthConfig) -> Trace:
    return generate(config)[0]


def write_synthetic(config: SynthConfig, out: str | Path) -> tuple[Trace, GeneratorModel]:
    """Write ``out`` (JSONL trace) and ``<stem>.model.json`` next to it."""
    trace, model = generate(config)
    out = Path(out)
    write_trace(trace, out)
    model.save(model_path(out))
    return trace, model


def model_path(trace_path: str | Path) -> Path:
    p = Path(trace_path)
    stem = p.name[: -len(p.suffix)] if p.suffix else p.name
    return p.with_name(stem + ".model.json")


# --------------------------------------------------------------------------
# oracles
# --------------------------------------------------------------------------

def oracle_posterior(model: GeneratorModel, user: str, kind: UsageKind | str,
                     snapshot: ContextSnapshot) -> np.ndarray:
    """Exact ``P(label | context)`` over the user's label list for ``kind``."""
    kind = UsageKind(kind)
    m = model.users[user]
    s = m.situation(snapshot.time_of_cycle)
    p = np.asarray(m.probs[kind.value][s], dtype=float)
    chain = snapshot.prior(kind)
    rho = model.config.markov
    if rho > 0 and chain:
        nxt = m.labels[kind.value].index(m.successor[kind.value][chain[0]])
        p = (1 - rho) * p
        p[nxt] += rho
    return p


def bayes_optimal_accuracy(model: GeneratorModel, user: str, kind: UsageKind | str, r: int = 1) -> float:
    """Expected top-``r`` accuracy of the situation oracle (no Markov term)."""
    kind = UsageKind(kind)
    m = model.users[user]
    ps = model.situation_probabilities(user)
    probs = np.asarray(m.probs[kind.value])
    top = -np.sort(-probs, axis=1)[:, :r].sum(axis=1)
    return float((ps * top).sum())


def joint_posterior_oracle(events: Sequence[LabeledEvent], binnings: Sequence[Binning],
                           bins: Sequence[int], vocab: Vocabulary) -> np.ndarray:
    """Laplace-corrected outcome frequencies among events whose joint bin tuple equals ``bins``."""
    y = np.array([vocab.index(e.outcome.label) for e in events])
    mask = np.ones(len(events), dtype=bool)
    snaps = [e.context for e in events]
    for b, want in zip(binnings, bins):
        mask &= b.assign_snapshots(snaps) == want
    priors = np.bincount(y, minlength=vocab.k) / len(y)
    row = np.bincount(y[mask], minlength=vocab.k)
    return laplace_rows(row, row.sum(), priors)


def plugin_mutual_information(xs: Sequence[int], ys: Sequence[int]) -> float:
    """Plug-in estimate of I(X; Y) in nats."""
    xs, ys = np.asarray(xs), np.asarray(ys)
    _, xi = np.unique(xs, return_inverse=True)
    _, yi = np.unique(ys, return_inverse=True)
    joint = np.zeros((xi.max() + 1, yi.max() + 1))
    np.add.at(joint, (xi, yi), 1)
    joint /= joint.sum()
    px, py = joint.sum(axis=1, keepdims=True), joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (px @ py)[nz])).sum())


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights / weights.sum() * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    frac = raw - base
    order = np.lexsort((np.arange(len(frac)), -frac))
    base[order[:short]] += 1
    return base


def conditionally_independent_sample(n: int = 10_000, k: int = 4, n_bins: int = 10,
                                     concentration: float = 5.0, seed: int = 0,
                                     ) -> tuple[list[LabeledEvent], list[Binning]]:
    """Events whose time and movement bins are independent given the outcome.

    Counts for every ``(outcome, time bin, movement bin)`` cell are the
    largest-remainder rounding of ``n * P(g) P(a|g) P(b|g)``, so the sample
    reproduces the factorized joint up to rounding. Returns the events and
    the two equal-width binnings that recover ``a`` and ``b``.
    """
    rng = np.random.default_rng(seed)
    pg = zipf_weights(k, 0.5)
    pa = rng.dirichlet(np.full(n_bins, concentration), size=k)
    pb = rng.dirichlet(np.full(n_bins, concentration), size=k)
    w = pg[:, None, None] * pa[:, :, None] * pb[:, None, :]
    counts = _largest_remainder(w.ravel(), n).reshape(w.shape)
    t_width = CYCLE_MINUTES / n_bins
    lo, hi = math.log(0.1), math.log(10000.0)
    m_width = (hi - lo) / n_bins
    events = []
    ts = 0
    for g, a, b in zip(*np.nonzero(counts)):
        ctx = ContextSnapshot((a + 0.5) * t_width, lo + (b + 0.5) * m_width)
        for _ in range(int(counts[g, a, b])):
            events.append(LabeledEvent(ctx, UsageEvent("ci", ts, UsageKind.APP, f"o{g}")))
            ts += 1
    tb = Binning(TIME, "equal_width", n_bins, boundaries=tuple(t_width * i for i in range(1, n_bins)))
    mb = Binning(MOVEMENT, "equal_width", n_bins,
                 boundaries=tuple(lo + m_width * i for i in range(1, n_bins)))
    return events, [tb, mb]
