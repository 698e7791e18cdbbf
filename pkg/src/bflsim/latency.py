"""Closed-form latency and energy model of one training round.

Units are SI throughout: seconds, joules, watts, hertz, bits, cycles,
hashes. Computation workload is expressed per *data unit*: ``C`` cycles per
unit and ``D`` in units (the default unit is one megabyte, so a
``cycles_per_unit`` of 0.9e9 means 0.9 Gcycles per MB). Communication always
uses bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import NamedTuple, Sequence

import numpy as np

from bflsim import _kernels

__all__ = [
    "transmission_rate",
    "offload_latency",
    "energy_offload",
    "exec_latency",
    "local_latency",
    "energy_local",
    "upload_latency",
    "update_round_time",
    "consensus_latency",
    "MineLatency",
    "mine_latency",
    "energy_mine",
    "total_objective",
    "ChannelModel",
    "ComputeModel",
    "MiningModel",
    "SystemModel",
    "LatencyBreakdown",
    "evaluate",
    "decode_target",
    "InfeasibleOffload",
    "LOCAL",
]

LOCAL = 0  # target code for local training; offload targets are 1 + m*G + g


class InfeasibleOffload(ValueError):
    """An offload was requested over a zero-rate link."""


def transmission_rate(b, p, h, noise, interference=0.0):
    """Shannon rate ``b·log2(1 + p·h/(σ² + I))`` in bit/s."""
    return b * np.log2(1.0 + p * h / (noise + interference))


def offload_latency(D_bits: float, rate: float, offloading: bool = True) -> float:
    if not offloading:
        return 0.0
    if rate <= 0:
        raise InfeasibleOffload("offload requested over a zero-rate link")
    return D_bits / rate


def energy_offload(p: float, T_off: float, offloading: bool = True) -> float:
    return p * T_off if offloading else 0.0


def exec_latency(C_m: float, D_m: float, ratio: float, epochs: int, f_m: float) -> float:
    if f_m <= 0:
        raise ValueError("ES CPU frequency must be positive")
    return C_m * D_m * ratio * epochs / f_m


def local_latency(C_n: float, D_n: float, ratio: float, epochs: int, f_n: float,
                  offloading: bool = False) -> float:
    if offloading:
        return 0.0
    if f_n <= 0:
        raise ValueError("MD CPU frequency must be positive")
    return C_n * D_n * ratio * epochs / f_n


def energy_local(kappa: float, f_n: float, C_n: float, offloading: bool = False) -> float:
    """``κ·f²·C``. This form has no data size or epoch factor."""
    return 0.0 if offloading else kappa * f_n * f_n * C_n


def upload_latency(model_bits: float, rate: float, offloading: bool = False) -> float:
    if offloading:
        return 0.0
    if rate <= 0:
        raise InfeasibleOffload("local MD has no uplink to its ES")
    return model_bits / rate


def update_round_time(model_bits: float, neighbor_rates: Sequence[float]) -> float:
    """Time for one P2P round at an ES: the slowest neighbour transfer."""
    if len(neighbor_rates) == 0:
        return 0.0
    return max(model_bits / r for r in neighbor_rates)


def consensus_latency(per_es_round_times) -> float:
    """Slowest ES's accumulated P2P time; input shape ``(M, φ)``."""
    T = np.asarray(per_es_round_times, dtype=float)
    if T.size == 0:
        return 0.0
    return float(T.sum(axis=1).max())


class MineLatency(NamedTuple):
    T_gen: float
    T_prop: float
    P_fork: float
    T_mine: float


def mine_latency(hbar, psi, verify_coeff, block_bits, M, N, iota, tx_count,
                 zeta_fork, c_blk) -> MineLatency:
    if psi <= 0:
        raise ValueError("hash allocation must be positive to mine")
    T_gen = hbar / psi
    T_prop = verify_coeff * block_bits * (M + N - 1)
    P_fork = 1.0 - math.exp(-iota * c_blk * tx_count)
    return MineLatency(T_gen, T_prop, P_fork, zeta_fork * (T_gen + T_prop))


def energy_mine(joules_per_hash: float, hbar: float) -> float:
    return joules_per_hash * hbar


def total_objective(breakdowns, K: int | None = None) -> float:
    """Mean per-round objective; a single breakdown returns its own sum."""
    if isinstance(breakdowns, LatencyBreakdown):
        return breakdowns.objective
    vals = [b.objective if isinstance(b, LatencyBreakdown) else float(b) for b in breakdowns]
    K = len(vals) if K is None else K
    return float(sum(vals) / K) if K else 0.0


# ---------------------------------------------------------------------------
# system model


def _vec(x, n, name):
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = np.full(n, float(a))
    if a.shape != (n,):
        raise ValueError(f"{name}: expected {n} values, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class ChannelModel:
    """Radio and backhaul parameters. ``W`` caps each bandwidth allocation."""

    W: float = 20e6
    noise: float = 1e-13
    P_max: np.ndarray | float = 0.1
    upload_bw: float = 5e6
    es_rate: np.ndarray | float = 1e8


@dataclass(frozen=True)
class ComputeModel:
    cycles_md: np.ndarray | float = 0.9e9
    cycles_es: np.ndarray | float = 0.9e9
    F_max: np.ndarray | float = 2e9
    f_es: np.ndarray | float = 5e9
    kappa: float = 5e-27
    md_batch_ratio: float = 0.5
    md_epochs: int = 2
    es_batch_ratio: float = 0.5
    es_epochs: int = 2
    unit_bits: float = 8e6


@dataclass(frozen=True)
class MiningModel:
    hbar: float = 50e9
    psi_max: np.ndarray | float = 1000e9
    verify_coeff: float = 5e-9
    block_bits: float = 4e4
    iota: float = 1.0 / 600.0
    tx_count: np.ndarray | float = 1.0
    zeta_fork: float = 3.0
    c_blk: float = 60.0
    joules_per_hash: float = 5e-8


@dataclass(frozen=True)
class SystemModel:
    """Everything the latency engine needs besides the per-round action and gains.

    ``home[n]`` is the ES a locally-training MD uploads its model to.
    """

    N: int
    M: int
    G: int
    channel: ChannelModel = field(default_factory=ChannelModel)
    compute: ComputeModel = field(default_factory=ComputeModel)
    mining: MiningModel = field(default_factory=MiningModel)
    model_bits: float = 4e4
    phi: int = 5
    adjacency: np.ndarray | None = None
    home: np.ndarray | None = None
    E_max: np.ndarray | float = 2600.0

    def __post_init__(self):
        N, M = self.N, self.M
        if N < 1 or M < 1 or self.G < 1:
            raise ValueError("N, M and G must be positive")
        set_ = object.__setattr__
        ch, cp, mn = self.channel, self.compute, self.mining
        set_(self, "channel", ChannelModel(
            ch.W, ch.noise, _vec(ch.P_max, N, "P_max"), ch.upload_bw,
            np.broadcast_to(np.asarray(ch.es_rate, dtype=float), (M, M)).copy()))
        set_(self, "compute", ComputeModel(
            _vec(cp.cycles_md, N, "cycles_md"), _vec(cp.cycles_es, M, "cycles_es"),
            _vec(cp.F_max, N, "F_max"), _vec(cp.f_es, M, "f_es"), cp.kappa,
            cp.md_batch_ratio, cp.md_epochs, cp.es_batch_ratio, cp.es_epochs, cp.unit_bits))
        set_(self, "mining", MiningModel(
            mn.hbar, _vec(mn.psi_max, N, "psi_max"), mn.verify_coeff, mn.block_bits,
            mn.iota, _vec(mn.tx_count, N, "tx_count"), mn.zeta_fork, mn.c_blk,
            mn.joules_per_hash))
        if self.adjacency is None:
            adj = ~np.eye(M, dtype=bool)
        else:
            adj = np.asarray(self.adjacency, dtype=bool)
        set_(self, "adjacency", adj)
        home = np.arange(N) % M if self.home is None else np.asarray(self.home, dtype=np.int64)
        set_(self, "home", home)
        set_(self, "E_max", _vec(self.E_max, N, "E_max"))

    @property
    def n_targets(self) -> int:
        return 1 + self.M * self.G

    @property
    def E_gen(self) -> float:
        return energy_mine(self.mining.joules_per_hash, self.mining.hbar)

    def consensus_round_times(self) -> np.ndarray:
        """Per-ES time of one P2P round, shape ``(M,)``."""
        out = np.zeros(self.M)
        for m in range(self.M):
            nb = np.flatnonzero(self.adjacency[m])
            out[m] = update_round_time(self.model_bits, self.channel.es_rate[m, nb])
        return out


@dataclass
class LatencyBreakdown:
    """All per-round latency (s) and energy (J) components."""

    T_off: np.ndarray
    T_exe: np.ndarray
    T_loc: np.ndarray
    T_up: np.ndarray
    T_cons: float
    T_gen: np.ndarray
    T_prop: np.ndarray
    P_fork: np.ndarray
    T_mine_n: np.ndarray
    E_off: np.ndarray
    E_loc: np.ndarray
    E_gen: np.ndarray
    rates: np.ndarray

    @property
    def T_learn(self) -> float:
        return float(self.T_off.sum() + self.T_exe.sum() + self.T_loc.sum() + self.T_up.sum())

    @property
    def T_mine(self) -> float:
        return float(self.T_mine_n.sum())

    @property
    def E_learn(self) -> np.ndarray:
        return self.E_off + self.E_loc

    @property
    def objective(self) -> float:
        return self.T_learn + self.T_cons + self.T_mine

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else float(v)
        out["T_learn"] = self.T_learn
        out["T_mine"] = self.T_mine
        out["objective"] = self.objective
        return out


def decode_target(code, G: int):
    """Map target codes to ``(offloading, es, subchannel)`` arrays."""
    code = np.asarray(code, dtype=np.int64)
    off = code > 0
    k = np.where(off, code - 1, 0)
    return off, k // G, k % G


def evaluate(sys: SystemModel, gains: np.ndarray, data_bits, target, p, b, f, psi,
             ) -> LatencyBreakdown:
    """Latency/energy of one round for MD data sizes ``data_bits``.

    ``gains`` has shape ``(N, M, G)``; ``target[n]`` is 0 for local training or
    ``1 + m·G + g`` to offload to ES ``m`` on sub-channel ``g``. Parameters of
    the inactive mode are ignored.
    """
    N, M, G = sys.N, sys.M, sys.G
    ch, cp, mn = sys.channel, sys.compute, sys.mining
    off, es, sub = decode_target(target, G)
    D_bits = _vec(data_bits, N, "data_bits")
    p, b, f, psi = (np.asarray(x, dtype=float) for x in (p, b, f, psi))
    gains = np.asarray(gains, dtype=float)
    if gains.shape != (N, M, G):
        raise ValueError(f"gains must have shape {(N, M, G)}, got {gains.shape}")

    rates = _kernels.offload_rates(gains, off.astype(np.int8), es, sub, p, b, ch.noise)
    if np.any(off & (rates <= 0)):
        bad = np.flatnonzero(off & (rates <= 0)).tolist()
        raise InfeasibleOffload(f"MDs {bad} offload over zero-rate links")
    safe = np.where(off, rates, 1.0)
    T_off = np.where(off, D_bits / safe, 0.0)
    E_off = np.where(off, p * T_off, 0.0)

    units = D_bits / cp.unit_bits
    D_es = np.bincount(es[off], weights=units[off], minlength=M)
    T_exe = cp.cycles_es * D_es * cp.es_batch_ratio * cp.es_epochs / cp.f_es

    loc = ~off
    f_safe = np.where(loc, f, 1.0)
    if np.any(loc & (f <= 0)):
        raise ValueError("local MDs need a positive CPU frequency")
    T_loc = np.where(loc, cp.cycles_md * units * cp.md_batch_ratio * cp.md_epochs / f_safe, 0.0)
    E_loc = np.where(loc, cp.kappa * f * f * cp.cycles_md, 0.0)

    # local MDs upload the model at full power over the control link to their home ES
    h_up = gains[np.arange(N), sys.home].mean(axis=1)
    up_rate = transmission_rate(ch.upload_bw, ch.P_max, h_up, ch.noise)
    if np.any(loc & (up_rate <= 0)):
        raise InfeasibleOffload("a local MD has no uplink to its ES")
    T_up = np.where(loc, sys.model_bits / np.where(loc, up_rate, 1.0), 0.0)

    T_cons = float(sys.phi * sys.consensus_round_times().max()) if sys.phi > 0 else 0.0

    if np.any(psi <= 0):
        raise ValueError("every MD needs a positive hash allocation")
    T_gen = mn.hbar / psi
    T_prop = np.full(N, mn.verify_coeff * mn.block_bits * (M + N - 1))
    P_fork = 1.0 - np.exp(-mn.iota * mn.c_blk * mn.tx_count)
    T_mine_n = mn.zeta_fork * (T_gen + T_prop)
    E_gen = np.full(N, energy_mine(mn.joules_per_hash, mn.hbar))

    return LatencyBreakdown(T_off, T_exe, T_loc, T_up, T_cons, T_gen, T_prop, P_fork,
                            T_mine_n, E_off, E_loc, E_gen, np.where(off, rates, 0.0))
