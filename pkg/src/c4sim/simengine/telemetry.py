"""Per-message timing of a ring allreduce, for the transport-layer records.

Messages follow the receiver-driven rule: a sender posts step ``t`` once it
holds the data (the previous step's message from its predecessor, or its
own input at step 0) and its receiver is ready (entered the collective at
step 0, afterwards has absorbed the previous step).  Each QP then moves its
share of the chunk at its own wire rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..collective import chunk_split


@dataclass
class RingChannel:
    stride: int
    channel_bytes: int
    share: np.ndarray  # (n, Q) fraction of each message per QP, ring-position major
    wire: np.ndarray   # (n, Q) bytes/s per QP


@dataclass
class Message:
    step: int
    sender: int     # comm-local rank
    receiver: int
    slot: int       # QP slot within the connection
    nbytes: int
    post: float
    ready: float
    complete: float


def _ring_order(n: int, stride: int) -> np.ndarray:
    return (np.arange(n) * stride) % n


@dataclass
class _Stack:
    """All channels of one collective as (K, n, Q) arrays in ring order."""

    order: np.ndarray   # (K, n) comm rank at each ring position
    entry: np.ndarray   # (K, n)
    chunks: np.ndarray  # (K, n)
    share: np.ndarray   # (K, n, Q)
    wire: np.ndarray    # (K, n, Q)
    used: np.ndarray    # (K, n, Q)
    freeze: np.ndarray  # (K, n)


def _stack(n: int, channels: list[RingChannel], entries: np.ndarray,
           freeze: dict[int, float]) -> _Stack:
    order = np.array([_ring_order(n, ch.stride) for ch in channels])
    share = np.array([ch.share[o] for ch, o in zip(channels, order)])
    wire = np.array([ch.wire[o] for ch, o in zip(channels, order)])
    chunks = np.array([chunk_split(ch.channel_bytes, n) for ch in channels], dtype=float)
    fz = np.vectorize(lambda r: freeze.get(int(r), math.inf), otypes=[float])(order)
    return _Stack(order, entries[order], chunks, share, wire, share > 0, fz)


def _run(n: int, st: _Stack, alpha: float, keep: bool):
    k = len(st.order)
    prev = np.roll(np.arange(n), 1)
    nxt = np.roll(np.arange(n), -1)
    pos = np.arange(n)
    rows = np.arange(k)[:, None]
    wire = st.wire * alpha
    any_used = st.used.any(axis=2)
    done_in = prev_send = None
    end = -math.inf
    out = []
    for t in range(2 * (n - 1)):
        idx = (pos - t) % n if t < n - 1 else (pos + 1 - (t - (n - 1))) % n
        data = st.entry if t == 0 else done_in
        ready = st.entry[:, nxt] if t == 0 else prev_send
        post = np.maximum(data, ready)
        cb = st.chunks[rows, idx[None, :]]
        nbytes = np.floor(cb[:, :, None] * st.share)
        nbytes[:, :, 0] += cb - nbytes.sum(axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            comp = post[:, :, None] + np.where(st.used, nbytes / wire, 0.0)
        comp[post >= st.freeze] = math.inf
        comp = np.where(st.used, comp, -math.inf)
        # a connection with no usable QP never delivers
        send_done = np.where(any_used, comp.max(axis=2), math.inf)
        fin = send_done[np.isfinite(send_done)]
        if fin.size:
            end = max(end, float(fin.max()))
        if keep:
            out.append((t, post, ready, nbytes, comp))
        done_in = send_done[:, prev]
        prev_send = send_done
    return end, out


def ring_end(n: int, channels: list[RingChannel], entries: np.ndarray, alpha: float = 1.0,
             freeze: dict[int, float] | None = None) -> float:
    return _run(n, _stack(n, channels, entries, freeze or {}), alpha, False)[0]


def fit_alpha(n: int, channels: list[RingChannel], entries: np.ndarray, target_end: float,
              rtol: float = 1e-12, max_iter: int = 100) -> float:
    """Wire-rate scale that makes the last message complete at ``target_end``.

    The end time is increasing and piecewise linear in ``1/alpha``; a
    bracketed secant (Illinois variant) on ``x = 1/alpha`` converges in a
    few evaluations and is exact on each linear piece.
    """
    base = float(entries.max())
    if not math.isfinite(target_end) or target_end <= base:
        return 1.0
    st = _stack(n, channels, entries, {})

    def f(x: float) -> float:
        return _run(n, st, 1.0 / x, False)[0] - target_end

    tol = rtol * max(1.0, abs(target_end))
    x0, f0 = 1.0, f(1.0)
    if abs(f0) <= tol:
        return 1.0
    # bracket the root
    lo, hi = (x0, None) if f0 < 0 else (None, x0)
    flo, fhi = (f0, None) if f0 < 0 else (None, f0)
    x = x0
    while lo is None or hi is None:
        span = f0 + target_end - base
        x = x * (target_end - base) / span if span > 0 else x * 2
        x = x * 2 if lo is None and hi is not None and x >= hi else x
        fx = f(x)
        if abs(fx) <= tol:
            return 1.0 / x
        if fx < 0:
            lo, flo = x, fx
        else:
            hi, fhi = x, fx
        f0 = fx
        if x > 1e12 or x < 1e-12:
            return 1.0
    side = 0
    for _ in range(max_iter):
        x = hi - fhi * (hi - lo) / (fhi - flo)
        if not lo < x < hi:
            x = 0.5 * (lo + hi)
        fx = f(x)
        if abs(fx) <= tol or hi - lo <= 1e-15 * hi:
            return 1.0 / x
        if fx < 0:
            lo, flo = x, fx
            if side == -1:
                fhi /= 2
            side = -1
        else:
            hi, fhi = x, fx
            if side == 1:
                flo /= 2
            side = 1
    return 1.0 / x


def ring_messages(n: int, channels: list[RingChannel], entries: np.ndarray, alpha: float = 1.0,
                  freeze: dict[int, float] | None = None) -> list[list[Message]]:
    """Messages per channel; frozen ranks never complete sends posted after their freeze."""
    st = _stack(n, channels, entries, freeze or {})
    _, steps = _run(n, st, alpha, True)
    out: list[list[Message]] = [[] for _ in channels]
    for t, post, ready, nbytes, comp in steps:
        ks, ps, qs = np.nonzero(st.used & np.isfinite(comp))
        for c, i, q in zip(ks.tolist(), ps.tolist(), qs.tolist()):
            out[c].append(Message(t, int(st.order[c, i]), int(st.order[c, (i + 1) % n]), q,
                                  int(nbytes[c, i, q]), float(post[c, i]), float(ready[c, i]),
                                  float(comp[c, i, q])))
    return out
