"""Thread-local instrumentation: attention audits, timing sections, core flops.

Everything here is inert unless a collector context is active, so the hot
path pays only an attribute lookup.
"""

from __future__ import annotations

import threading
import time
from contextlib import contextmanager

import numpy as np


class _TLS(threading.local):
    def __init__(self):
        self.audits: list[list] = []
        self.timers: list[dict] = []
        self.core_flops: list[list] = []


_tls = _TLS()


@contextmanager
def attention_audit():
    """Collect per-softmax row-sum deviations from 1 while active.

    Yields a list that receives ``(max_abs_deviation, n_rows)`` per attention
    weight matrix computed inside the context.
    """
    rec: list[tuple[float, int]] = []
    _tls.audits.append(rec)
    try:
        yield rec
    finally:
        _tls.audits.pop()


def record_attention_weights(weights: np.ndarray) -> None:
    if _tls.audits:
        dev = float(np.abs(weights.sum(axis=1) - 1.0).max())
        for rec in _tls.audits:
            rec.append((dev, weights.shape[0]))


@contextmanager
def collect_timings():
    """Accumulate wall time per named section into the yielded dict."""
    acc: dict[str, float] = {}
    _tls.timers.append(acc)
    try:
        yield acc
    finally:
        _tls.timers.pop()


@contextmanager
def section(name: str):
    timers = _tls.timers
    if not timers:
        yield
        return
    t0 = time.perf_counter()
    try:
        yield
    finally:
        dt = time.perf_counter() - t0
        for acc in timers:
            acc[name] = acc.get(name, 0.0) + dt


@contextmanager
def collect_core_flops():
    """Collect the interaction-term flop counts of each attention call.

    The interaction term (logits, softmax, value mixing) is the part whose
    cost scales as tokens x channels x hyperedges; projections and
    feedforwards are excluded here and measured by the general counter.
    """
    rec: list[int] = []
    _tls.core_flops.append(rec)
    try:
        yield rec
    finally:
        _tls.core_flops.pop()


def record_core_flops(n: int) -> None:
    for rec in _tls.core_flops:
        rec.append(n)


def core_flops_active() -> bool:
    return bool(_tls.core_flops)
