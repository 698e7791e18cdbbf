"""Linear consensus among edge servers.

Each server holds a gradient vector; one P2P round replaces every vector by a
weighted average of itself and its neighbours. With a symmetric,
doubly-stochastic weight matrix the states converge to their mean at a rate
set by the deflated spectral radius.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

__all__ = [
    "Topology",
    "ConsensusMatrix",
    "WeightDiagnostics",
    "ConsensusRun",
    "build_weights",
    "validate_weights",
    "spectral_gap",
    "consensus_step",
    "run_consensus",
    "gradient_divergence",
    "min_p2p_rounds",
    "write_trace_csv",
]


@dataclass(frozen=True)
class Topology:
    M: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("topology needs at least one node")
        clean = set()
        for u, v in self.edges:
            u, v = int(u), int(v)
            if u == v:
                raise ValueError(f"self-loop at node {u}")
            if not (0 <= u < self.M and 0 <= v < self.M):
                raise ValueError(f"edge ({u}, {v}) outside 0..{self.M - 1}")
            clean.add((min(u, v), max(u, v)))
        object.__setattr__(self, "edges", frozenset(clean))

    def neighbors(self, m: int) -> list[int]:
        out = [v for u, v in self.edges if u == m] + [u for u, v in self.edges if v == m]
        return sorted(out)

    def degree(self, m: int) -> int:
        return len(self.neighbors(m))

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.M, self.M), dtype=bool)
        for u, v in self.edges:
            A[u, v] = A[v, u] = True
        return A

    def is_connected(self) -> bool:
        seen = {0}
        frontier = [0]
        while frontier:
            m = frontier.pop()
            for n in self.neighbors(m):
                if n not in seen:
                    seen.add(n)
                    frontier.append(n)
        return len(seen) == self.M

    @classmethod
    def complete(cls, M: int) -> "Topology":
        return cls(M, frozenset((u, v) for u in range(M) for v in range(u + 1, M)))

    @classmethod
    def ring(cls, M: int) -> "Topology":
        if M <= 2:
            return cls.complete(M)
        return cls(M, frozenset((m, (m + 1) % M) for m in range(M)))

    @classmethod
    def star(cls, M: int) -> "Topology":
        return cls(M, frozenset((0, m) for m in range(1, M)))

    @classmethod
    def path(cls, M: int) -> "Topology":
        return cls(M, frozenset((m, m + 1) for m in range(M - 1)))

    @classmethod
    def named(cls, name: str, M: int) -> "Topology":
        try:
            return {"complete": cls.complete, "ring": cls.ring, "star": cls.star,
                    "path": cls.path}[name](M)
        except KeyError:
            raise ValueError(f"unknown topology {name!r}") from None

    @classmethod
    def from_file(cls, path: str | Path) -> "Topology":
        """Parse a topology file: a first line holding ``M`` then ``u v`` per edge."""
        lines = [ln.split("#")[0].strip() for ln in Path(path).read_text().splitlines()]
        lines = [ln for ln in lines if ln]
        if not lines:
            raise ValueError(f"{path}: empty topology file")
        M = int(lines[0])
        edges = []
        for ln in lines[1:]:
            u, v = ln.split()
            edges.append((int(u), int(v)))
        return cls(M, frozenset(edges))

    def to_text(self) -> str:
        return "\n".join([str(self.M)] + [f"{u} {v}" for u, v in sorted(self.edges)]) + "\n"


@dataclass(frozen=True)
class ConsensusMatrix:
    L: np.ndarray
    d: float
    topology: Topology

    @property
    def M(self) -> int:
        return self.L.shape[0]


@dataclass(frozen=True)
class WeightDiagnostics:
    symmetric: bool
    row_stochastic: bool
    sparsity: bool
    spectral_ok: bool
    spectral_radius: float

    @property
    def ok(self) -> bool:
        return self.symmetric and self.row_stochastic and self.sparsity and self.spectral_ok


def build_weights(topo: Topology, d: float | None = None) -> ConsensusMatrix:
    """Uniform-edge weights: ``d`` on every edge, ``1 − d·deg(m)`` on the diagonal.

    ``d`` defaults to ``0.9/M``.
    """
    M = topo.M
    if d is None:
        d = 0.9 / M
    if not 0.0 < d < 1.0 / M:
        raise ValueError(f"mixing parameter d={d} outside (0, 1/M) = (0, {1.0 / M:g})")
    if not topo.is_connected():
        raise ValueError("topology is disconnected; consensus cannot reach the mean")
    L = d * topo.adjacency().astype(float)
    L[np.diag_indices(M)] = 1.0 - L.sum(axis=1)
    return ConsensusMatrix(L, float(d), topo)


def validate_weights(L: np.ndarray, topo: Topology, tol: float = 1e-12) -> WeightDiagnostics:
    L = np.asarray(L, dtype=float)
    M = topo.M
    if L.shape != (M, M):
        raise ValueError(f"weight matrix shape {L.shape} does not match M={M}")
    symmetric = bool(np.max(np.abs(L - L.T)) <= tol)
    row_stochastic = bool(np.max(np.abs(L.sum(axis=1) - 1.0)) <= tol)
    off = ~topo.adjacency()
    off[np.diag_indices(M)] = False
    sparsity = bool(np.all(np.abs(L[off]) <= tol))
    # the power iteration assumes symmetry; fall back to the symmetric part
    rho = spectral_gap(L if symmetric else 0.5 * (L + L.T))
    return WeightDiagnostics(symmetric, row_stochastic, sparsity, bool(rho < 1.0 - tol), rho)


def spectral_gap(L: np.ndarray, tol: float = 1e-10, max_iter: int = 100_000,
                 seed: int = 12345) -> float:
    """Spectral radius of the deflated matrix ``A = L − 11ᵀ/M`` by power iteration.

    Iterates on ``A²`` (positive semi-definite, so a ``±ρ`` pair cannot make
    the iteration oscillate) and stops once the Rayleigh residual falls below
    ``tol`` relative to the estimate.
    """
    L = np.asarray(L, dtype=float)
    M = L.shape[0]
    A = L - np.full((M, M), 1.0 / M)
    B = A @ A
    v = np.random.default_rng(seed).standard_normal(M)
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = B @ v
        mu = float(v @ w)
        if mu <= 0.0 or not np.any(w):
            return 0.0
        if np.linalg.norm(w - mu * v) <= tol * mu:
            return math.sqrt(mu)
        v = w / np.linalg.norm(w)
    raise RuntimeError(f"power iteration did not converge in {max_iter} iterations")


def consensus_step(states: np.ndarray, L: np.ndarray) -> np.ndarray:
    """One synchronous P2P round; returns a fresh array ``L @ states``."""
    X = np.asarray(states, dtype=float)
    L = np.asarray(L, dtype=float)
    if X.ndim != 2 or X.shape[0] != L.shape[0] or L.shape[0] != L.shape[1]:
        raise ValueError(f"cannot mix {X.shape} states with a {L.shape} matrix")
    return L @ X


@dataclass
class ConsensusRun:
    states: np.ndarray
    rounds: int
    errors: np.ndarray
    trace: np.ndarray  # (rounds + 1, M) error norms per round

    @property
    def final(self) -> np.ndarray:
        return self.states


def run_consensus(initial, L, phi: int) -> ConsensusRun:
    """Apply ``phi`` consensus rounds and record the distance to the true mean."""
    if phi < 0:
        raise ValueError("phi must be non-negative")
    X = np.array(initial, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    mean = X.mean(axis=0)
    trace = np.empty((phi + 1, X.shape[0]))
    trace[0] = np.linalg.norm(X - mean, axis=1)
    for l in range(phi):
        X = consensus_step(X, L)
        trace[l + 1] = np.linalg.norm(X - mean, axis=1)
    return ConsensusRun(X, int(phi), X - mean, trace)


def gradient_divergence(grads) -> float:
    """Largest pairwise Euclidean distance among the given vectors."""
    G = np.asarray(grads, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    if G.shape[0] < 1:
        raise ValueError("need at least one gradient")
    sq = np.einsum("ij,ij->i", G, G)
    D2 = sq[:, None] + sq[None, :] - 2.0 * G @ G.T
    # Gram-based distances lose precision; redo the worst pair exactly
    i, j = np.unravel_index(np.argmax(D2), D2.shape)
    best = float(np.linalg.norm(G[i] - G[j]))
    # near-ties may hide a slightly larger pair
    cand = np.argwhere(D2 >= D2[i, j] - 1e-9 * max(1.0, D2[i, j]))
    for a, b in cand:
        best = max(best, float(np.linalg.norm(G[a] - G[b])))
    return best


def min_p2p_rounds(lam: float, xi_cons: float, K: int, Xi: float, M: int) -> int:
    """Smallest integer ``φ`` with ``λ^{2φ} ≤ ξ/(√K Ξ² M)``."""
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    if xi_cons <= 0 or Xi <= 0 or K < 1 or M < 1:
        raise ValueError("xi_cons, Xi, K and M must be positive")
    ratio = xi_cons / (math.sqrt(K) * Xi * Xi * M)
    if ratio >= 1.0:
        return 0
    phi = max(0, math.ceil(0.5 * math.log(ratio) / math.log(lam) - 1e-9))
    # guard the log round-off in both directions
    while phi > 0 and lam ** (2 * (phi - 1)) <= ratio * (1 + 1e-12):
        phi -= 1
    while lam ** (2 * phi) > ratio * (1 + 1e-12):
        phi += 1
    return phi


def write_trace_csv(runs: Iterable[ConsensusRun], path: str | Path) -> None:
    """Write ``round,node,err_norm`` rows; rounds are numbered across runs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "node", "err_norm"])
        for k, run in enumerate(runs):
            for l in range(run.trace.shape[0]):
                for m, e in enumerate(run.trace[l]):
                    w.writerow([f"{k}:{l}", m, repr(float(e))])
