"""Shared builders for small hand-made events, a cached synthetic trace and the acceptance summary."""

from __future__ import annotations

import pytest

from ctxdep.synth import SynthConfig, generate
from ctxdep.trace import ContextSnapshot, LabeledEvent, UsageEvent, UsageKind

# one-line verdicts appended by test_acceptance.py, echoed after the run
ACCEPTANCE: list[str] = []


def make_event(label: str, tod: float = 0.0, *, kind: UsageKind = UsageKind.APP, ts: int = 0,
               alp: float = 0.0, gps=None, cell=None, prior=None, user: str = "u0") -> LabeledEvent:
    ctx = ContextSnapshot(tod, alp, gps, cell, prior or {})
    return LabeledEvent(ctx, UsageEvent(user, ts, kind, label))


def chained(labels, tods=None, kind: UsageKind = UsageKind.APP, user: str = "u0") -> list[LabeledEvent]:
    """Events whose prior-usage chains are the lagged label sequence."""
    out, history = [], []
    for i, lab in enumerate(labels):
        tod = 0.0 if tods is None else tods[i]
        out.append(make_event(lab, tod, kind=kind, ts=60 * i, user=user,
                              prior={kind: tuple(history)}))
        history.insert(0, lab)
    return out


@pytest.fixture(scope="session")
def small_synth():
    return generate(SynthConfig(n_users=3, seed=7))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
