"""Max-min fair rate allocation by progressive filling."""

from __future__ import annotations

from typing import Hashable, Mapping, Sequence

import numpy as np

_EPS = 1e-12


def fair_share(flow_links: Sequence[Sequence[Hashable]], capacity: Mapping[Hashable, float],
               caps: Sequence[float] | None = None,
               weights: Sequence[Sequence[float]] | None = None) -> np.ndarray:
    """Max-min fair rates for flows over shared links.

    ``flow_links[f]`` lists the link keys flow ``f`` traverses and
    ``capacity`` maps each key to its usable capacity.  ``caps`` optionally
    bounds individual flows (a demand limit).  ``weights[f][i]`` is how much
    of link ``flow_links[f][i]`` one unit of the flow's rate consumes
    (1 when omitted).  Flows that cross a zero-capacity link get rate 0.
    """
    nf = len(flow_links)
    rates = np.zeros(nf)
    if nf == 0:
        return rates
    keys = sorted({l for fl in flow_links for l in fl}, key=repr)
    index = {k: i for i, k in enumerate(keys)}
    residual = np.array([float(capacity[k]) for k in keys])
    fi = np.fromiter((f for f, fl in enumerate(flow_links) for _ in fl), dtype=np.int64)
    li = np.fromiter((index[l] for fl in flow_links for l in fl), dtype=np.int64)
    if weights is None:
        wi = np.ones(len(fi))
    else:
        wi = np.fromiter((w for ws in weights for w in ws), dtype=float)
        if len(wi) != len(fi):
            raise ValueError("weights must match flow_links entry for entry")
    headroom = np.full(nf, np.inf) if caps is None else np.asarray(caps, dtype=float).copy()
    if np.any(np.isinf(headroom) & (np.bincount(fi, minlength=nf) == 0)):
        raise ValueError("a flow with no links needs a finite cap")

    active = headroom > _EPS
    dead = np.zeros(nf, dtype=bool)
    np.logical_or.at(dead, fi, (residual[li] <= _EPS) & (wi > 0))
    active &= ~dead
    scale = np.maximum(residual, 1.0)
    while active.any():
        pa = active[fi]
        n = np.bincount(li[pa], weights=wi[pa], minlength=len(keys))
        with np.errstate(divide="ignore", invalid="ignore"):
            share = np.where(n > 0, residual / n, np.inf)
        inc = min(share.min(initial=np.inf), headroom[active].min())
        if not np.isfinite(inc):
            raise ValueError("unbounded flow: no positive-weight link and no cap")
        rates[active] += inc
        headroom[active] -= inc
        residual -= inc * n
        full = (n > 0) & (residual <= _EPS * scale)
        stop = np.zeros(nf, dtype=bool)
        np.logical_or.at(stop, fi[pa], full[li[pa]] & (wi[pa] > 0))
        stop |= headroom <= _EPS * np.maximum(rates, 1.0)
        active &= ~stop
    return rates
