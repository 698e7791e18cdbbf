"""The offloading/resource-allocation MDP.

A single centralized agent picks, for every MD, whether to train locally or
offload to an (ES, sub-channel) pair, together with the continuous
parameters of that mode. The reward is the exponential utility of the
round latency.

State vector layout (length ``N + 2·N·G + 2·N``), all entries scaled to
roughly [0, 1]:

==========  ======  =================================================
block       length  content
==========  ======  =================================================
data        N       data size of each MD / largest possible data size
occupancy   N·G     1 if MD n used sub-channel g last step (row-major)
bandwidth   N·G     bandwidth MD n held on sub-channel g last step / W
cpu         N       currently available CPU of each MD / F_max
hash        N       hash rate MD n bought last step / Ψ cap
==========  ======  =================================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from bflsim.latency import LatencyBreakdown, SystemModel, decode_target, evaluate
from bflsim.rng import stream

__all__ = [
    "EnvConfig",
    "Geometry",
    "SystemState",
    "ParamAction",
    "RawAction",
    "Caps",
    "BFLEnv",
    "reward",
    "project_action",
    "check_action",
    "mean_gains",
    "random_action",
    "greedy_action",
    "EPS_CAP",
]

EPS_CAP = 1e-6


def reward(T_learn: float, T_cons: float, T_mine: float, tau: float) -> float:
    """Exponential utility ``e^{1 − T/τ} − 1`` of the round latency ``T``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return math.exp(1.0 - (T_learn + T_cons + T_mine) / tau) - 1.0


@dataclass(frozen=True)
class Geometry:
    """Node placement (km) and the log-distance pathloss with Rayleigh fading.

    Mean power gain at distance ``d`` km is ``10^{-(pl0 + pl_slope·log10 d)/10}``;
    each step multiplies it by an independent unit-mean exponential draw.
    """

    es_xy: np.ndarray
    md_xy: np.ndarray
    pl0: float = 128.1
    pl_slope: float = 37.6
    min_dist: float = 0.01

    def distances(self) -> np.ndarray:
        d = np.linalg.norm(self.md_xy[:, None, :] - self.es_xy[None, :, :], axis=2)
        return np.maximum(d, self.min_dist)

    @staticmethod
    def clustered(N: int, M: int, es_spacing: float = 0.25, md_radius: float = 0.1,
                  seed: int = 0) -> "Geometry":
        """ESs on a line; MD ``n`` placed around ES ``n mod M``."""
        es = np.stack([np.arange(M) * es_spacing, np.zeros(M)], axis=1)
        rng = stream(seed, 0, 0, "geometry")
        ang = rng.uniform(0, 2 * np.pi, N)
        rad = md_radius * np.sqrt(rng.uniform(0.25, 1.0, N))
        home = np.arange(N) % M
        md = es[home] + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
        return Geometry(es, md)


def mean_gains(geo: Geometry, G: int) -> np.ndarray:
    d = geo.distances()
    pl_db = geo.pl0 + geo.pl_slope * np.log10(d)
    g = 10.0 ** (-pl_db / 10.0)
    return np.repeat(g[:, :, None], G, axis=2)


@dataclass(frozen=True)
class EnvConfig:
    tau: float | None = None
    gamma: float = 0.9
    T: int = 25
    loss_threshold: float = math.inf
    data_mb: tuple[float, float] = (0.5, 2.0)
    cpu_hz: tuple[float, float] = (0.2e9, 2.0e9)
    # lower ends of the parameter ranges the policies sample from
    p_floor: float = 0.01
    b_floor: float = 1e6
    psi_floor: float = 100e9
    seed: int = 0

    def tau_for(self, N: int) -> float:
        return 3.0 * N if self.tau is None else float(self.tau)


@dataclass
class SystemState:
    data_bits: np.ndarray
    occupancy: np.ndarray
    bandwidth: np.ndarray
    cpu: np.ndarray
    hash: np.ndarray

    def copy(self) -> "SystemState":
        return SystemState(*(np.array(getattr(self, k)) for k in
                             ("data_bits", "occupancy", "bandwidth", "cpu", "hash")))

    def vector(self, scale: "Caps", data_max_bits: float) -> np.ndarray:
        return np.concatenate([
            self.data_bits / data_max_bits,
            self.occupancy.ravel(),
            self.bandwidth.ravel() / scale.W,
            self.cpu / scale.F_static,
            self.hash / scale.psi,
        ])


@dataclass(frozen=True)
class ParamAction:
    """A feasible joint action. Parameters of the unused mode are zero."""

    target: np.ndarray
    p: np.ndarray
    b: np.ndarray
    f: np.ndarray
    psi: np.ndarray

    def offloading(self) -> np.ndarray:
        return self.target > 0

    def __eq__(self, other):
        if not isinstance(other, ParamAction):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("target", "p", "b", "f", "psi"))


@dataclass(frozen=True)
class RawAction:
    """Unconstrained action: targets (ints, or ``(N, 1+M·G)`` scores) and
    physical parameter values that may lie outside their caps."""

    target: np.ndarray
    p: np.ndarray
    b: np.ndarray
    f: np.ndarray
    psi: np.ndarray


@dataclass(frozen=True)
class Caps:
    P: np.ndarray
    W: float
    F: np.ndarray
    F_static: np.ndarray
    psi: np.ndarray
    E_max: np.ndarray
    E_gen: float


def _clamp(x, cap):
    x = np.where(np.isfinite(x), x, 0.0)
    lo = EPS_CAP * cap
    return np.minimum(np.maximum(x, lo), cap)


def project_action(raw: RawAction, sys: SystemModel, caps: Caps,
                   data_bits=None, gains=None) -> ParamAction:
    """Map any raw action onto the feasible set.

    1. Targets: scores are reduced by argmax; out-of-range codes become local.
    2. Continuous values are clamped to ``(1e-6·cap, cap]``.
    3. Channel capacity: per ES, MDs are served in index order; a sub-channel
       already taken moves the MD to the lowest free one, and MDs beyond ``G``
       fall back to local training at full available CPU.
    4. Energy: a local MD over budget has ``f`` and ``Ψ`` scaled by the same
       factor ``s`` so that ``κ(sf)²C + E_gen`` meets ``E_max``; an offloading
       MD over budget (needs ``data_bits`` and ``gains``) falls back to local.
    """
    N, M, G = sys.N, sys.M, sys.G
    tgt = np.asarray(raw.target)
    if tgt.ndim == 2:
        tgt = np.argmax(tgt, axis=1)
    tgt = np.asarray(tgt, dtype=np.int64).copy()
    tgt[(tgt < 0) | (tgt > M * G)] = 0

    p = _clamp(np.asarray(raw.p, dtype=float), caps.P)
    b = _clamp(np.asarray(raw.b, dtype=float), caps.W)
    f = _clamp(np.asarray(raw.f, dtype=float), caps.F)
    psi = _clamp(np.asarray(raw.psi, dtype=float), caps.psi)

    taken = np.zeros((M, G), dtype=bool)
    for n in range(N):
        if tgt[n] == 0:
            continue
        m, g = divmod(int(tgt[n]) - 1, G)
        if taken[m, g]:
            free = np.flatnonzero(~taken[m])
            if free.size == 0:
                tgt[n] = 0
                f[n] = caps.F[n]
                continue
            g = int(free[0])
            tgt[n] = 1 + m * G + g
        taken[m, g] = True

    kappa = sys.compute.kappa
    C = sys.compute.cycles_md
    budget = caps.E_max - caps.E_gen
    if np.any(budget <= 0):
        raise ValueError("the mining energy alone exceeds the energy budget")

    if data_bits is not None and gains is not None:
        # offloaders over budget fall back; dropping one only lowers others' energy
        for _ in range(N):
            off = tgt > 0
            if not off.any():
                break
            bd = evaluate(sys, gains, data_bits, tgt, p, b, f, psi)
            over = off & (bd.E_off > budget)
            if not over.any():
                break
            tgt[over] = 0
            f[over] = caps.F[over]

    loc = tgt == 0
    E_loc = kappa * f * f * C
    over = loc & (E_loc > budget)
    if over.any():
        s = np.sqrt(budget[over] / E_loc[over]) * (1.0 - 1e-12)
        f[over] *= s
        psi[over] *= s

    off = tgt > 0
    return ParamAction(tgt, np.where(off, p, 0.0), np.where(off, b, 0.0),
                       np.where(off, 0.0, f), psi)


def check_action(a: ParamAction, sys: SystemModel, caps: Caps, data_bits=None,
                 gains=None) -> list[str]:
    """Independent feasibility audit; returns the violated constraints."""
    bad = []
    N, M, G = sys.N, sys.M, sys.G
    t = np.asarray(a.target)
    if t.shape != (N,) or np.any((t < 0) | (t > M * G)):
        return ["target-range"]
    used = [(int(x) - 1) for x in t if x > 0]
    if len(used) != len(set(used)):
        bad.append("subchannel-exclusive")
    for m in range(M):
        if sum(1 for u in used if u // G == m) > G:
            bad.append(f"capacity-es{m}")
    off = t > 0
    if np.any(off & ~((a.p > 0) & (a.p <= caps.P))):
        bad.append("power")
    if np.any(off & ~((a.b > 0) & (a.b <= caps.W))):
        bad.append("bandwidth")
    if np.any(~off & ~((a.f > 0) & (a.f <= caps.F))):
        bad.append("cpu")
    if np.any(~((a.psi > 0) & (a.psi <= caps.psi))):
        bad.append("hash")
    E_loc = np.where(~off, sys.compute.kappa * a.f ** 2 * sys.compute.cycles_md, 0.0)
    E = E_loc + caps.E_gen
    if data_bits is not None and gains is not None and off.any():
        E = E + evaluate(sys, gains, data_bits, t, a.p, a.b, a.f, a.psi).E_off
    if np.any(E > caps.E_max) or np.any(E <= 0):
        bad.append("energy")
    return bad


class BFLEnv:
    """Episodic environment; ``reset(episode)`` then ``step(action)`` T times.

    Per-step randomness (data sizes, CPU availability, fading) comes from the
    stream ``(cfg.seed, episode, t)``, so an episode replays exactly.
    """

    def __init__(self, sys: SystemModel, geometry: Geometry, cfg: EnvConfig = EnvConfig()):
        self.sys = sys
        self.geo = geometry
        self.cfg = cfg
        self.tau = cfg.tau_for(sys.N)
        self.gain_mean = mean_gains(geometry, sys.G)
        self.data_max_bits = cfg.data_mb[1] * 8e6
        self.episode = 0
        self.t = 0
        self.state: SystemState | None = None
        self.gains: np.ndarray | None = None

    # -- dimensions -------------------------------------------------------
    @property
    def state_dim(self) -> int:
        N, G = self.sys.N, self.sys.G
        return N + 2 * N * G + 2 * N

    @property
    def n_targets(self) -> int:
        return self.sys.n_targets

    def caps(self, state: SystemState | None = None) -> Caps:
        s = self.sys
        st = self.state if state is None else state
        return Caps(s.channel.P_max, s.channel.W, st.cpu, s.compute.F_max,
                    s.mining.psi_max, s.E_max, s.E_gen)

    def floors(self) -> dict:
        c = self.cfg
        return {"p": c.p_floor, "b": c.b_floor, "psi": c.psi_floor, "f": c.cpu_hz[0]}

    # -- dynamics ---------------------------------------------------------
    def _draw(self, t: int):
        rng = stream(self.cfg.seed, self.episode, t, "env-step")
        N = self.sys.N
        lo, hi = self.cfg.data_mb
        data = rng.uniform(lo, hi, N) * 8e6
        cpu = np.minimum(rng.uniform(*self.cfg.cpu_hz, N), self.sys.compute.F_max)
        fading = rng.exponential(1.0, self.gain_mean.shape)
        return data, cpu, self.gain_mean * fading

    def reset(self, episode: int = 0) -> SystemState:
        self.episode = int(episode)
        self.t = 0
        N, G = self.sys.N, self.sys.G
        data, cpu, gains = self._draw(0)
        self.state = SystemState(data, np.zeros((N, G)), np.zeros((N, G)), cpu, np.zeros(N))
        self.gains = gains
        return self.state.copy()

    def observe(self) -> SystemState:
        if self.state is None:
            raise RuntimeError("call reset() first")
        return self.state.copy()

    def vector(self, state: SystemState | None = None) -> np.ndarray:
        st = self.state if state is None else state
        return st.vector(self.caps(st), self.data_max_bits)

    def project(self, raw: RawAction) -> ParamAction:
        return project_action(raw, self.sys, self.caps(), self.state.data_bits, self.gains)

    def evaluate(self, action: ParamAction) -> LatencyBreakdown:
        return evaluate(self.sys, self.gains, self.state.data_bits, action.target,
                        action.p, action.b, action.f, action.psi)

    def step(self, action: ParamAction):
        """Apply a projected action; returns ``(next_state, reward, breakdown, done)``."""
        if self.state is None:
            raise RuntimeError("call reset() first")
        bd = self.evaluate(action)
        r = reward(bd.T_learn, bd.T_cons, bd.T_mine, self.tau)
        N, G = self.sys.N, self.sys.G
        off, _, sub = decode_target(action.target, G)
        occ = np.zeros((N, G))
        band = np.zeros((N, G))
        occ[np.flatnonzero(off), sub[off]] = 1.0
        band[np.flatnonzero(off), sub[off]] = action.b[off]
        self.t += 1
        data, cpu, gains = self._draw(self.t)
        self.state = SystemState(data, occ, band, cpu, np.array(action.psi, dtype=float))
        self.gains = gains
        done = self.t >= self.cfg.T
        return self.state.copy(), r, bd, done


# ---------------------------------------------------------------------------
# baseline policies


def random_action(env: BFLEnv, rng: np.random.Generator) -> ParamAction:
    """Uniform over targets and over each parameter's sampling range."""
    s = env.sys
    N = s.N
    caps = env.caps()
    fl = env.floors()
    raw = RawAction(
        rng.integers(0, s.n_targets, N),
        rng.uniform(fl["p"], caps.P),
        rng.uniform(fl["b"], caps.W, N),
        rng.uniform(np.minimum(fl["f"], caps.F), caps.F),
        rng.uniform(fl["psi"], caps.psi),
    )
    return env.project(raw)


def greedy_action(env: BFLEnv) -> ParamAction:
    """Every parameter at its cap; offload to the home ES on the lowest free
    sub-channel iff that beats local training, judged on mean gains without
    interference."""
    s = env.sys
    N, G = s.N, s.G
    caps = env.caps()
    ch, cp = s.channel, s.compute
    st = env.state
    units = st.data_bits / cp.unit_bits
    free = [list(range(G)) for _ in range(s.M)]
    target = np.zeros(N, dtype=np.int64)
    for n in range(N):
        m = int(s.home[n])
        h_up = env.gain_mean[n, m].mean()
        t_loc = (cp.cycles_md[n] * units[n] * cp.md_batch_ratio * cp.md_epochs / caps.F[n]
                 + s.model_bits / (ch.upload_bw * np.log2(1 + ch.P_max[n] * h_up / ch.noise)))
        if not free[m]:
            continue
        g = free[m][0]
        rate = ch.W * np.log2(1 + ch.P_max[n] * env.gain_mean[n, m, g] / ch.noise)
        t_off = (st.data_bits[n] / rate
                 + cp.cycles_es[m] * units[n] * cp.es_batch_ratio * cp.es_epochs / cp.f_es[m])
        if t_off < t_loc:
            target[n] = 1 + m * G + g
            free[m].pop(0)
    raw = RawAction(target, caps.P.copy(), np.full(N, caps.W), caps.F.copy(), caps.psi.copy())
    return env.project(raw)
