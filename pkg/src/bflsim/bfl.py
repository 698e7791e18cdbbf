"""One training round of blockchain-backed federated learning and the outer loop.

Per round every MD either trains its shard locally and uploads the result to
its home ES, or offloads the shard to an ES that trains the union of what it
received. Each ES forms a data-weighted aggregate of the cumulative gradients
it holds, the ESs run ``φ`` P2P averaging rounds, and the leader ES applies the
boosted consensus gradient and publishes the new global model as a block.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from bflsim import chain as chainmod
from bflsim.chain import AttackSpec, Ledger
from bflsim.consensus import Topology, build_weights, run_consensus, spectral_gap
from bflsim.env import (BFLEnv, EnvConfig, Geometry, ParamAction, RawAction,
                        greedy_action, random_action)
from bflsim.fl_core import (Dataset, LossModel, TrainerConfig, accuracy, cumulative_gradient,
                            global_grad, global_loss, make_model, make_synthetic_dataset,
                            partition_noniid, sgd_round, train_test_split)
from bflsim.latency import ChannelModel, LatencyBreakdown, SystemModel, decode_target
from bflsim.rng import stream

__all__ = [
    "NodeWeights",
    "RoundAssignment",
    "RoundOptions",
    "RoundRecord",
    "Scenario",
    "SCHEMES",
    "POLICIES",
    "aggregate_gradients",
    "boost",
    "global_update",
    "select_leader",
    "run_round",
    "run_training",
    "write_round_csv",
    "ROUND_COLUMNS",
]

SCHEMES = ("consensus", "no-consensus", "isolated")
POLICIES = ("fixed", "rl-agent", "random", "greedy")


@dataclass(frozen=True)
class NodeWeights:
    """Data size ``D_y`` and epoch count ``e_y`` of every training entity."""

    D: tuple[float, ...]
    e: tuple[float, ...]

    def __post_init__(self):
        if len(self.D) != len(self.e) or not self.D:
            raise ValueError("node weights need matching, non-empty D and e")
        if sum(self.D) <= 0:
            raise ValueError("total data size must be positive")

    @property
    def total(self) -> float:
        return float(sum(self.D))

    @property
    def coefficient(self) -> float:
        return float(sum(d * e for d, e in zip(self.D, self.e)) / self.total)

    @property
    def e_avg(self) -> float:
        """Data-weighted mean epoch count."""
        return self.coefficient


def aggregate_gradients(es_grad, md_grads: Sequence[tuple], D_total: float,
                        es_weight: tuple | None = None, dim: int | None = None) -> np.ndarray:
    """``Σ_n (D_n/(D·e_n))·g_n + (D_m/(D·e_m))·g_m``; a missing ES term adds zero.

    ``md_grads`` holds ``(g_n, D_n, e_n)`` triples.
    """
    if D_total <= 0:
        raise ValueError("total data size must be positive")
    parts = [np.asarray(g, dtype=float) for g, _, _ in md_grads]
    if es_grad is not None:
        parts.append(np.asarray(es_grad, dtype=float))
    if not parts:
        if dim is None:
            raise ValueError("no gradients and no dimension given")
        return np.zeros(dim)
    d = parts[0].shape
    if any(p.shape != d for p in parts):
        raise ValueError("gradient dimensions differ")
    out = np.zeros(d)
    for g, Dn, en in md_grads:
        if en < 1:
            raise ValueError("epoch counts must be at least 1")
        out += (Dn / (D_total * en)) * np.asarray(g, dtype=float)
    if es_grad is not None:
        if es_weight is None:
            raise ValueError("an ES gradient needs its (D_m, e_m) weight")
        Dm, em = es_weight
        if em < 1:
            raise ValueError("epoch counts must be at least 1")
        out += (Dm / (D_total * em)) * np.asarray(es_grad, dtype=float)
    return out


def boost(final_grad, weights: NodeWeights) -> np.ndarray:
    """Scale by ``Σ_y D_y·e_y / D``."""
    return weights.coefficient * np.asarray(final_grad, dtype=float)


def global_update(w, eta: float, boosted) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    boosted = np.asarray(boosted, dtype=float)
    if w.shape != boosted.shape:
        raise ValueError(f"shape mismatch {w.shape} vs {boosted.shape}")
    return w - eta * boosted


def select_leader(prev_mining_latency) -> int:
    """Fastest ES in the previous mining round; ES 0 when there is no history."""
    if prev_mining_latency is None:
        return 0
    lat = np.asarray(prev_mining_latency, dtype=float)
    if lat.size == 0:
        raise ValueError("no ES latencies given")
    return int(np.argmin(lat))


@dataclass(frozen=True)
class RoundAssignment:
    """``target[n] = 0`` trains MD ``n`` locally, ``1 + m·G + g`` offloads it to
    ES ``m`` on sub-channel ``g``."""

    target: tuple[int, ...]
    M: int
    G: int
    md_cfg: TrainerConfig = TrainerConfig()
    es_cfg: TrainerConfig = TrainerConfig()

    def __post_init__(self):
        object.__setattr__(self, "target", tuple(int(t) for t in self.target))

    @staticmethod
    def all_local(N: int, M: int, G: int, md_cfg=TrainerConfig(), es_cfg=TrainerConfig()):
        return RoundAssignment((0,) * N, M, G, md_cfg, es_cfg)

    def violations(self) -> list[str]:
        bad = []
        used = []
        for n, t in enumerate(self.target):
            if t < 0 or t > self.M * self.G:
                bad.append(f"MD {n}: target {t} outside [0, {self.M * self.G}] "
                           "(one decision per dataset)")
            elif t > 0:
                used.append(t - 1)
        dup = sorted({u for u in used if used.count(u) > 1})
        for u in dup:
            bad.append(f"sub-channel {u % self.G} of ES {u // self.G} assigned to several MDs")
        for m in range(self.M):
            k = sum(1 for u in used if u // self.G == m)
            if k > self.G:
                bad.append(f"ES {m} receives {k} offloaders, more than G={self.G}")
        return bad

    def check(self) -> None:
        bad = self.violations()
        if bad:
            raise ValueError("infeasible assignment: " + "; ".join(bad))

    def trainer_of(self, n: int, home: int) -> tuple[bool, int]:
        """``(offloaded, ES index)`` for MD ``n``."""
        off, es, _ = decode_target(np.array([self.target[n]]), self.G)
        return (True, int(es[0])) if off[0] else (False, int(home))


@dataclass(frozen=True)
class RoundOptions:
    scheme: str = "consensus"
    attack: AttackSpec | None = None
    detect: bool = False
    window: int = 10
    z_threshold: float = 3.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")


@dataclass
class RoundRecord:
    k: int
    w_before: np.ndarray
    w_after: np.ndarray
    es_aggregates: np.ndarray        # (M, d)
    consensus_states: np.ndarray     # (M, d) after φ rounds
    consensus_trace: np.ndarray      # (φ + 1, M) distance to the mean
    boosted: np.ndarray
    eta: float
    leader: int
    weights: NodeWeights
    trained_counts: np.ndarray       # points trained at each MD (first N) and ES (last M)
    loss: float
    test_acc: float
    grad_sq: float                   # ‖∇F(w_before)‖² on the global data
    breakdown: LatencyBreakdown | None = None
    U: float = float("nan")
    miner: int = -1
    update_norms: np.ndarray | None = None
    flagged: tuple[int, ...] = ()
    attacked: bool = False
    rejected: bool = False
    es_models: np.ndarray | None = None   # (M, d) per-ES models, isolated scheme only
    entity_grads: dict = field(default_factory=dict)


def _train_entities(model, W_src, assignment: RoundAssignment, datasets, home, k, eta, seed):
    """Local and ES training; returns per-entity cumulative gradients and sizes."""
    N, M = len(datasets), assignment.M
    md_cfg = replace(assignment.md_cfg, step_size=eta, seed=seed)
    es_cfg = replace(assignment.es_cfg, step_size=eta, seed=seed)
    md_grads: list[list] = [[] for _ in range(M)]
    es_shards: list[list[Dataset]] = [[] for _ in range(M)]
    counts = np.zeros(N + M, dtype=np.int64)
    D, E = [], []
    grads = {}
    for n, ds in enumerate(datasets):
        if ds.size == 0:
            continue
        off, m = assignment.trainer_of(n, int(home[n]))
        if off:
            es_shards[m].append(ds)
            continue
        w0 = W_src[m]
        res = sgd_round(model, w0, ds, md_cfg, round_=k, entity=n)
        g = cumulative_gradient(w0, res.w, eta) if eta > 0 else np.zeros_like(w0)
        md_grads[m].append((g, ds.size, md_cfg.epochs))
        grads[("md", n)] = g
        counts[n] = ds.size
        D.append(ds.size)
        E.append(md_cfg.epochs)
    es_terms: list[tuple | None] = [None] * M
    for m in range(M):
        if not es_shards[m]:
            continue
        union = Dataset.concat(es_shards[m])
        w0 = W_src[m]
        res = sgd_round(model, w0, union, es_cfg, round_=k, entity=N + m)
        g = cumulative_gradient(w0, res.w, eta) if eta > 0 else np.zeros_like(w0)
        es_terms[m] = (g, (union.size, es_cfg.epochs))
        grads[("es", m)] = g
        counts[N + m] = union.size
        D.append(union.size)
        E.append(es_cfg.epochs)
    return md_grads, es_terms, counts, NodeWeights(tuple(D), tuple(E)), grads


def run_round(w, assignment: RoundAssignment, datasets: Sequence[Dataset], Lambda, phi: int,
              eta: float, chain: Ledger | None, latency_ctx=None, *, model: LossModel,
              k: int = 0, leader: int = 0, home=None, options: RoundOptions = RoundOptions(),
              test: Dataset | None = None, seed: int = 0) -> RoundRecord:
    """Execute one round and publish the new global model on ``chain``.

    ``w`` is the global model, or an ``(M, d)`` stack of per-ES models under
    the isolated scheme. ``latency_ctx`` is ``None`` or a
    ``(SystemModel, LatencyBreakdown, psi)`` triple used for the mining race
    and the per-ES mining latencies that drive the next leader choice.
    """
    assignment.check()
    M = assignment.M
    N = len(datasets)
    L = np.asarray(Lambda, dtype=float)
    if L.shape != (M, M):
        raise ValueError(f"consensus matrix is {L.shape}, expected ({M}, {M})")
    home = np.arange(N) % M if home is None else np.asarray(home)
    isolated = options.scheme == "isolated"
    W_in = np.array(w, dtype=float)
    if isolated:
        if W_in.ndim != 2 or W_in.shape[0] != M:
            raise ValueError("the isolated scheme needs one model per ES")
        W_src = W_in
        w_before = W_in.mean(axis=0)
    else:
        W_src = np.repeat(W_in[None, :], M, axis=0)
        w_before = W_in
    d = W_src.shape[1]
    model.check(w_before)

    md_grads, es_terms, counts, weights, grads = _train_entities(
        model, W_src, assignment, datasets, home, k, eta, seed)
    D_total = float(sum(ds.size for ds in datasets))
    if counts.sum() != D_total:
        raise AssertionError("data conservation violated in the offload split")
    A = np.zeros((M, d))
    for m in range(M):
        es_g, es_w = es_terms[m] if es_terms[m] is not None else (None, None)
        A[m] = aggregate_gradients(es_g, md_grads[m], D_total, es_w, dim=d)

    if options.scheme == "consensus":
        run = run_consensus(A, L, int(phi))
        C, trace = run.states, run.trace
    else:
        C = A.copy()
        trace = np.zeros((1, M))
    coef = weights.coefficient
    # candidate model each ES would broadcast
    if isolated:
        cand = W_src - eta * coef * C
    else:
        cand = w_before[None, :] - eta * coef * C

    publisher = leader
    attacked = False
    att = options.attack
    if att is not None and k in att.rounds:
        if not 0 <= att.es < M:
            raise ValueError(f"attacked ES {att.es} outside [0, {M})")
        attacked = True
        publisher = att.es
        cand[att.es] = chainmod.poison_model(cand[att.es], att.scale, att.seed + k)

    ref = W_src if isolated else np.repeat(w_before[None, :], M, axis=0)
    norms = np.linalg.norm(cand - ref, axis=1)
    flagged: tuple[int, ...] = ()
    if chain is not None:
        chain.update_norms.append(norms)
        if options.detect:
            hist = [chain.norm_history(m) for m in range(M)]
            flagged = tuple(sorted(chainmod.detect_poison(hist, options.window,
                                                          options.z_threshold)))
    rejected = False
    if isolated:
        W_out = cand.copy()
        for m in flagged:
            W_out[m] = W_src[m]
        rejected = bool(flagged)
        w_after = W_out.mean(axis=0)
        boosted = coef * C.mean(axis=0)
    else:
        w_after = cand[publisher].copy()
        boosted = coef * C[leader]
        if publisher in flagged:
            w_after = w_before.copy()
            rejected = True
        W_out = None
    if not np.all(np.isfinite(w_after)):
        raise FloatingPointError(f"non-finite global model in round {k}")

    miner = -1
    bd = None
    if latency_ctx is not None:
        sys, bd, psi = latency_ctx
        miner, _ = chainmod.mine_race(psi, sys)
    if chain is not None:
        payload = W_out.ravel() if isolated else w_after
        chain.append(chainmod.make_block(payload, chain, miner))
        if bd is not None:
            es_lat = np.array([bd.T_mine_n[home == m].min() if np.any(home == m) else np.inf
                               for m in range(M)])
            chain.es_latency.append(es_lat)
            chain.winner_latency.append(float(bd.T_mine_n[miner]))

    if isolated:
        loss = float(np.mean([global_loss(model, W_out[m], datasets) for m in range(M)]))
        acc = float(np.mean([accuracy(model, W_out[m], test) for m in range(M)])) \
            if test is not None else float("nan")
        grad_sq = float(np.mean([np.sum(global_grad(model, W_src[m], datasets) ** 2)
                                 for m in range(M)]))
    else:
        loss = global_loss(model, w_after, datasets)
        acc = accuracy(model, w_after, test) if test is not None else float("nan")
        grad_sq = float(np.sum(global_grad(model, w_before, datasets) ** 2))

    return RoundRecord(k, w_before, w_after, A, C, trace, boosted, float(eta), int(leader),
                       weights, counts, loss, acc, grad_sq, bd, miner=int(miner),
                       update_norms=norms, flagged=flagged, attacked=attacked,
                       rejected=rejected, es_models=W_out, entity_grads=grads)


# ---------------------------------------------------------------------------
# scenario and outer loop


@dataclass(frozen=True)
class Scenario:
    """A complete training setup. Build the standard fixtures with
    :meth:`synthetic`."""

    model: LossModel
    datasets: tuple[Dataset, ...]
    test: Dataset
    M: int
    G: int
    topology: Topology
    d: float | None = None
    phi: int = 5
    eta: float = 0.05
    md_cfg: TrainerConfig = TrainerConfig(epochs=2, batch_ratio=0.5)
    es_cfg: TrainerConfig = TrainerConfig(epochs=2, batch_ratio=0.5)
    sys: SystemModel | None = None
    geometry: Geometry | None = None
    env_cfg: EnvConfig = EnvConfig()
    bits_per_point: float = 8e4
    options: RoundOptions = RoundOptions()
    init_scale: float = 0.0

    @property
    def N(self) -> int:
        return len(self.datasets)

    def weights_matrix(self) -> np.ndarray:
        return build_weights(self.topology, self.d).L

    def latency_system(self) -> SystemModel:
        if self.sys is not None:
            return replace(self.sys, phi=int(self.phi))
        return SystemModel(self.N, self.M, self.G, phi=int(self.phi),
                           adjacency=self.topology.adjacency())

    def env(self, seed: int) -> BFLEnv:
        geo = self.geometry or Geometry.clustered(self.N, self.M, seed=seed)
        return BFLEnv(self.latency_system(), geo, replace(self.env_cfg, seed=seed))

    @staticmethod
    def synthetic(N: int = 6, M: int = 2, G: int = 3, C: int = 2, F: int = 2,
                  per_class: int = 150, spread: float = 1.0, labels_per_node: int = 1,
                  kind: str = "softmax-regression", topology: str = "complete", seed: int = 0,
                  **kw) -> "Scenario":
        full = make_synthetic_dataset(F, C, per_class, spread, seed)
        train, test = train_test_split(full, 0.2, seed)
        shards = partition_noniid(train, N, labels_per_node, seed)
        model = make_model(kind, F, C)
        return Scenario(model, tuple(shards), test, M, G, Topology.named(topology, M), **kw)


def _fixed_action(env: BFLEnv, k: int, seed: int) -> ParamAction:
    caps = env.caps()
    fl = env.floors()
    rng = stream(seed, 0, k, "fixed-hash")
    psi = rng.uniform(fl["psi"], caps.psi)
    N = env.sys.N
    raw = RawAction(np.zeros(N, dtype=np.int64), caps.P.copy(), np.full(N, caps.W),
                    caps.F.copy(), psi)
    return env.project(raw)


def run_training(K: int, scenario: Scenario, policy_source: str = "fixed", seed: int = 0,
                 agent=None, options: RoundOptions | None = None,
                 ledger: Ledger | None = None,
                 targets_out: list | None = None) -> list[RoundRecord]:
    """Run ``K`` rounds; the per-round offloading decision and resources come
    from ``policy_source``. Each round's target vector is appended to
    ``targets_out`` when given."""
    if K < 1:
        raise ValueError("K must be at least 1")
    if policy_source not in POLICIES:
        raise ValueError(f"unknown policy source {policy_source!r}; choose from {POLICIES}")
    if policy_source == "rl-agent" and agent is None:
        raise ValueError("policy source 'rl-agent' needs a trained agent")
    opts = scenario.options if options is None else options
    sc = scenario
    L = sc.weights_matrix()
    env = sc.env(seed)
    env.reset(0)
    sizes = np.array([ds.size for ds in sc.datasets], dtype=float)
    w0 = sc.model.init_params(seed, sc.init_scale)
    w = np.repeat(w0[None, :], sc.M, axis=0) if opts.scheme == "isolated" else w0
    ledger = Ledger() if ledger is None else ledger
    records = []
    for k in range(int(K)):
        env.state.data_bits = sizes * sc.bits_per_point
        if policy_source == "fixed":
            action = _fixed_action(env, k, seed)
        elif policy_source == "random":
            action = random_action(env, stream(seed, 0, k, "round-policy"))
        elif policy_source == "greedy":
            action = greedy_action(env)
        else:
            action, _ = agent.action(env, stream(seed, 0, k, "round-policy"), True)
        if targets_out is not None:
            targets_out.append([int(x) for x in action.target])
        bd = env.evaluate(action)
        U = math.exp(1.0 - (bd.T_learn + bd.T_cons + bd.T_mine) / env.tau) - 1.0
        assign = RoundAssignment(tuple(action.target), sc.M, sc.G, sc.md_cfg, sc.es_cfg)
        leader = select_leader(ledger.last_es_latency())
        rec = run_round(w, assign, sc.datasets, L, sc.phi, sc.eta, ledger,
                        (env.sys, bd, action.psi), model=sc.model, k=k, leader=leader,
                        home=env.sys.home, options=opts, test=sc.test, seed=seed)
        rec.U = U
        records.append(rec)
        w = rec.es_models if opts.scheme == "isolated" else rec.w_after
        env.step(action)
    return records


ROUND_COLUMNS = ["round", "global_loss", "test_acc", "T_learn", "T_cons", "T_mine", "U", "leader"]


def write_round_csv(records: Sequence[RoundRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUND_COLUMNS)
        for r in records:
            bd = r.breakdown
            lat = [bd.T_learn, bd.T_cons, bd.T_mine] if bd is not None else [math.nan] * 3
            w.writerow([r.k, repr(r.loss), repr(r.test_acc)] + [repr(float(x)) for x in lat]
                       + [repr(float(r.U)), r.leader])


def centralized_oracle(scenario: Scenario, K: int, seed: int = 0) -> np.ndarray:
    """Full-batch gradient descent on the pooled data with the matched step budget.

    Each round of the federated loop applies roughly ``e`` gradient steps of
    the global loss scaled by ``1/M``; the oracle takes ``K·e`` exact steps of
    size ``η/M`` and returns the loss after every ``e`` steps.
    """
    sc = scenario
    e = sc.md_cfg.epochs
    w = sc.model.init_params(seed, sc.init_scale)
    out = np.empty(K)
    for k in range(K):
        for _ in range(e):
            w = w - (sc.eta / sc.M) * global_grad(sc.model, w, sc.datasets)
        out[k] = global_loss(sc.model, w, sc.datasets)
    return out


def consensus_lambda(scenario: Scenario) -> float:
    return spectral_gap(scenario.weights_matrix())
