"""Reference numpy implementations of the compiled kernels."""

from __future__ import annotations

import numpy as np


def offload_rates(gains, off, es, sub, p, b, noise):
    """Per-MD uplink rate under co-channel interference from other ESs' MDs.

    MD ``n`` offloading to ``(m, g)`` is interfered by every other offloading
    MD on sub-channel ``g`` that targets a different ES, received at ``m``.
    Returns 0 for local MDs.
    """
    off = np.asarray(off, dtype=bool)
    N = off.size
    rates = np.zeros(N)
    idx = np.flatnonzero(off)
    if idx.size == 0:
        return rates
    m, g = es[idx], sub[idx]
    # rx[i, j]: power of offloader j received at offloader i's ES on i's channel
    rx = p[idx][None, :] * gains[idx[None, :], m[:, None], g[:, None]]
    clash = (g[:, None] == g[None, :]) & (m[:, None] != m[None, :])
    interference = (rx * clash).sum(axis=1)
    signal = np.diagonal(rx)
    rates[idx] = b[idx] * np.log2(1.0 + signal / (noise + interference))
    return rates


def pairwise_max_ratio(G, V):
    """max over i<j with V_i != V_j of ‖G_i − G_j‖ / ‖V_i − V_j‖ (0 if none)."""
    G = np.asarray(G, dtype=float)
    V = np.asarray(V, dtype=float)
    n = G.shape[0]
    best = 0.0
    for i in range(n - 1):
        dv = np.sqrt(((V[i + 1:] - V[i]) ** 2).sum(axis=1))
        dg = np.sqrt(((G[i + 1:] - G[i]) ** 2).sum(axis=1))
        ok = dv > 0
        if np.any(ok):
            best = max(best, float((dg[ok] / dv[ok]).max()))
    return best
