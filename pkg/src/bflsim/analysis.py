"""Empirical constants of the convergence analysis and the bounds built from them.

Every estimator returns an empirical lower bound on the true constant: the
defining inequality holds on all probes the estimator looked at, and nothing
is claimed elsewhere. Consequently a bound that fails to cover a measurement
is a genuine violation, while one that covers it is only a necessary check.

Symbol names avoid clashes with other modules: ``xi_cons`` is the closed-form bound's
consensus constant (the mining module uses ``verify_coeff``), ``theta_var``
the closed-form bound's variance constant (the model size is ``model_bits``).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from bflsim import _kernels
from bflsim.consensus import gradient_divergence, min_p2p_rounds, spectral_gap
from bflsim.fl_core import (Dataset, LossModel, batch_size, full_grad, global_grad,
                            global_loss, local_loss)
from bflsim.rng import stream

__all__ = [
    "AnalysisConstants",
    "EntityStats",
    "RunStats",
    "DissimilarityFit",
    "estimate_smoothness",
    "estimate_variability",
    "feature_variance",
    "fit_dissimilarity",
    "model_drift",
    "drift_from_losses",
    "sgd_variance_bound",
    "step_size",
    "theorem1_bound",
    "corollary1_bound",
    "Corollary1Result",
    "collect_run_stats",
    "write_bound_csv",
    "write_constants_json",
    "BOUND_COLUMNS",
]


# ---------------------------------------------------------------------------
# estimators


def estimate_smoothness(model: LossModel, dataset: Dataset, sample_pairs: int = 100,
                        seed: int = 0, centers: Sequence[np.ndarray] | None = None,
                        radius: float = 1.0) -> float:
    """Largest ``‖∇F(w) − ∇F(w′)‖ / ‖w − w′‖`` over sampled pairs.

    Pair ``i`` is drawn from the ball of ``radius`` around center ``i mod C``;
    pairs come from one sequential stream, so adding pairs never lowers the
    estimate.
    """
    if sample_pairs < 1:
        raise ValueError("need at least one sample pair")
    if centers is None or len(centers) == 0:
        centers = [np.zeros(model.dim)]
    centers = [np.asarray(c, dtype=float) for c in centers]
    rng = stream(seed, 0, 0, "smoothness")
    best = 0.0
    for i in range(int(sample_pairs)):
        c = centers[i % len(centers)]
        u = rng.standard_normal((2, model.dim))
        r = radius * rng.random(2) ** (1.0 / model.dim)
        u *= (r / np.maximum(np.linalg.norm(u, axis=1), 1e-300))[:, None]
        w1, w2 = c + u[0], c + u[1]
        dw = np.linalg.norm(w1 - w2)
        if dw == 0:
            continue
        dg = np.linalg.norm(full_grad(model, w1, dataset) - full_grad(model, w2, dataset))
        best = max(best, float(dg / dw))
    return best


def estimate_variability(model: LossModel, w_probe, dataset: Dataset) -> float:
    """``max ‖∇f(w,d) − ∇f(w,d′)‖ / ‖d − d′‖`` over distinct point pairs at ``w_probe``."""
    if dataset.size < 2:
        raise ValueError("variability needs at least two points")
    probes = np.atleast_2d(np.asarray(w_probe, dtype=float))
    V = model.point_vectors(dataset.X, dataset.y)
    best = 0.0
    for w in probes:
        G = model.point_grads(w, dataset.X, dataset.y)
        best = max(best, float(_kernels.pairwise_max_ratio(G, V)))
    return best


def feature_variance(model: LossModel, dataset: Dataset) -> float:
    """Mean squared distance of the point vectors from their centroid."""
    if dataset.size == 0:
        return 0.0
    V = model.point_vectors(dataset.X, dataset.y)
    return float(np.mean(np.sum((V - V.mean(axis=0)) ** 2, axis=1)))


@dataclass(frozen=True)
class DissimilarityFit:
    zeta1: float
    zeta2: float
    slack: np.ndarray   # per probe, ζ1‖Σag‖² + ζ2 − Σa‖g‖² (never negative)


def fit_dissimilarity(per_entity_grads, weights) -> DissimilarityFit:
    """Fit ``Σ a‖g‖² ≤ ζ1‖Σ a g‖² + ζ2`` over probes with ``ζ1 = 1``.

    ``per_entity_grads`` is ``(Y, d)`` for one probe or ``(P, Y, d)`` for
    several; ``weights`` are the ``a_y`` (shape ``(Y,)`` or ``(P, Y)``),
    non-negative and summing to one.
    """
    G = np.asarray(per_entity_grads, dtype=float)
    if G.ndim == 2:
        G = G[None]
    a = np.asarray(weights, dtype=float)
    if a.ndim == 1:
        a = np.broadcast_to(a, G.shape[:2])
    if np.any(a < 0) or np.any(np.abs(a.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("weights must be non-negative and sum to one")
    lhs = np.einsum("py,pyd,pyd->p", a, G, G)
    mean = np.einsum("py,pyd->pd", a, G)
    rhs = np.sum(mean * mean, axis=1)
    zeta2 = float(max(0.0, np.max(lhs - rhs)))
    return DissimilarityFit(1.0, zeta2, rhs + zeta2 - lhs)


def drift_from_losses(F_prev, F_cur, a_prev, a_cur) -> float:
    """``Σ_y max_p (a_cur_y·F_cur_y(w_p) − a_prev_y·F_prev_y(w_p))``.

    Loss arrays are ``(Y, P)``; an entity absent in a round has weight zero.
    """
    F_prev = np.atleast_2d(np.asarray(F_prev, dtype=float))
    F_cur = np.atleast_2d(np.asarray(F_cur, dtype=float))
    if F_prev.shape != F_cur.shape or F_cur.shape[1] < 1:
        raise ValueError("loss tables must share a (entities, probes) shape with probes >= 1")
    diff = np.asarray(a_cur, float)[:, None] * F_cur - np.asarray(a_prev, float)[:, None] * F_prev
    return float(np.sum(np.max(diff, axis=1)))


def model_drift(model: LossModel, prev: dict, cur: dict, probes) -> float:
    """Drift between two rounds given ``{entity: Dataset}`` maps and probe weights."""
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    keys = sorted(set(prev) | set(cur), key=str)

    def table(sets):
        D = sum(ds.size for ds in sets.values())
        if D <= 0:
            raise ValueError("a round holds no data")
        F = np.zeros((len(keys), len(probes)))
        a = np.zeros(len(keys))
        for i, k in enumerate(keys):
            ds = sets.get(k)
            if ds is None or ds.size == 0:
                continue
            a[i] = ds.size / D
            F[i] = [local_loss(model, w, ds) for w in probes]
        return F, a

    Fp, ap = table(prev)
    Fc, ac = table(cur)
    return drift_from_losses(Fp, Fc, ap, ac)


def sgd_variance_bound(B: int, D: int, sigma2: float, Theta: float) -> float:
    """``2(1 − B/D)(σ²/B)Θ²``."""
    if not 1 <= B <= D:
        raise ValueError("need 1 <= B <= D")
    return 2.0 * (1.0 - B / D) * (sigma2 / B) * Theta ** 2


def step_size(alpha: float, K: int, e_avg: float, beta: float | None = None,
              zeta1: float | None = None, e_max: float | None = None,
              D: float | None = None, sum_De: float | None = None) -> tuple[float, bool]:
    """``η = α/√(K·e_avg)`` and whether both step-size conditions hold.

    Conditions whose inputs are missing are not checked. With ``e_max ≤ 1``
    the first condition has no multi-step drift to control and holds.
    """
    if K < 1 or e_avg <= 0:
        raise ValueError("need K >= 1 and e_avg > 0")
    eta = alpha / math.sqrt(K * e_avg)
    ok = True
    if beta is not None and zeta1 is not None and e_max is not None and e_max > 1:
        ok &= eta <= 1.0 / (2.0 * beta) * math.sqrt(1.0 / ((4 * zeta1 + 1) * e_max * (e_max - 1)))
    if beta is not None and D is not None and sum_De is not None:
        ok &= eta <= D / (2.0 * beta * sum_De)
    return eta, bool(ok)


# ---------------------------------------------------------------------------
# bounds


@dataclass
class AnalysisConstants:
    beta: float
    zeta1: float = 1.0
    zeta2: float = 0.0
    Theta: float = 0.0
    alpha: float = 1.0
    K: int = 1
    M: int = 1
    F_gap: float = 0.0          # F(w⁰) − F*
    e_max: float = 1.0
    e_avg_min: float = 1.0
    e_avg_max: float = 1.0
    e_hat_min: float = 1.0
    e_hat_max: float = 1.0
    lam: float = 0.0
    Upsilon: float = 0.0
    theta_var: float = 0.0
    xi_cons: float = 0.0
    Theta_y: dict = field(default_factory=dict)
    sigma2_y: dict = field(default_factory=dict)

    def violations(self) -> list[str]:
        bad = []
        if not self.beta > 0:
            bad.append(f"beta={self.beta} must be positive")
        if not self.zeta1 >= 1:
            bad.append(f"zeta1={self.zeta1} must be at least 1")
        if not self.zeta2 >= 0:
            bad.append(f"zeta2={self.zeta2} must be non-negative")
        if not self.Theta >= 0:
            bad.append(f"Theta={self.Theta} must be non-negative")
        if not 0 <= self.lam < 1:
            bad.append(f"lambda={self.lam} must lie in [0, 1)")
        if not self.alpha > 0:
            bad.append(f"alpha={self.alpha} must be positive")
        if self.K < 1:
            bad.append(f"K={self.K} must be at least 1")
        for k in ("e_max", "e_avg_min", "e_avg_max", "e_hat_min", "e_hat_max"):
            if not getattr(self, k) > 0:
                bad.append(f"{k}={getattr(self, k)} must be positive")
        if self.e_avg_min > self.e_avg_max or self.e_hat_min > self.e_hat_max:
            bad.append("epoch-average bounds are out of order")
        if self.F_gap < 0:
            bad.append(f"F_gap={self.F_gap} must be non-negative")
        for k in ("Upsilon", "theta_var", "xi_cons"):
            if getattr(self, k) < 0:
                bad.append(f"{k}={getattr(self, k)} must be non-negative")
        return bad

    def check(self) -> None:
        bad = self.violations()
        if bad:
            raise ValueError("invalid constants: " + "; ".join(bad))

    def to_json(self) -> dict:
        d = asdict(self)
        d["Theta_y"] = {str(k): v for k, v in self.Theta_y.items()}
        d["sigma2_y"] = {str(k): v for k, v in self.sigma2_y.items()}
        return d


@dataclass(frozen=True)
class EntityStats:
    """One training entity in one round."""

    D: float
    e: float
    B: float
    sigma2: float
    Theta: float

    @property
    def var_term(self) -> float:
        return (1.0 - self.B / self.D) * self.sigma2 / self.B * self.Theta ** 2


@dataclass
class RunStats:
    """Per-round quantities of a finished run (index ``k = 0..K−1``)."""

    entities: list[list[EntityStats]]
    Xi: np.ndarray
    lam: np.ndarray
    phi: np.ndarray
    Delta: np.ndarray          # Delta[0] is unused (no previous round)
    grad_sq: np.ndarray        # ‖∇F(w^(k))‖²

    @property
    def K(self) -> int:
        return len(self.entities)

    def e_max(self, k: int) -> float:
        return max(s.e for s in self.entities[k])

    def e_avg(self, k: int) -> float:
        return float(np.mean([s.e for s in self.entities[k]]))

    def e_hat(self, k: int) -> float:
        ents = self.entities[k]
        return sum(s.D * s.e for s in ents) / sum(s.D for s in ents)

    def measured(self) -> float:
        return float(np.mean(self.grad_sq))


def theorem1_bound(c: AnalysisConstants, run: RunStats) -> tuple[float, dict]:
    """Evaluate the leading term and terms (a)–(e); returns ``(total, terms)``."""
    c.check()
    K = run.K
    if K != c.K:
        raise ValueError(f"run has {K} rounds but the constants say K={c.K}")
    sK = math.sqrt(K)
    pre = 8.0 * math.sqrt(c.e_avg_max) / (c.alpha * c.e_hat_min * sK)
    leading = pre * c.F_gap
    a = pre * float(np.sum(run.Delta[1:]))
    quad = 80.0 * c.beta ** 2 * c.alpha ** 2 / (K * K * c.e_avg_min)
    b = c_ = d = e = 0.0
    for k in range(K):
        ents = run.entities[k]
        D = sum(s.D for s in ents)
        b += sum(s.D / D * (s.e - 1.0) * s.var_term for s in ents)
        em = run.e_max(k)
        c_ += c.zeta2 * em * (em - 1.0)
        d += 24.0 * c.M * run.lam[k] ** (2 * run.phi[k]) * run.Xi[k] ** 2
        e += sum((s.D / (D * math.sqrt(s.e))) ** 2 * s.var_term for s in ents)
    terms = {
        "leading": leading,
        "a": a,
        "b": quad * b,
        "c": quad * c_,
        "d": d / K,
        "e": 16.0 * c.beta * c.alpha * c.e_hat_max / (K * sK * math.sqrt(c.e_avg_min)) * e,
    }
    return float(sum(terms.values())), terms


@dataclass(frozen=True)
class Corollary1Result:
    bound: float
    terms: dict
    failed: tuple[str, ...]


def corollary1_bound(c: AnalysisConstants, run: RunStats | None = None) -> Corollary1Result:
    """Closed-form O(1/sqrt(K)) bound; with ``run`` given, its preconditions are audited."""
    if c.lam >= 1:
        raise ValueError(f"lambda={c.lam} >= 1: consensus does not contract")
    c.check()
    K = c.K
    sK = math.sqrt(K)
    pre = 8.0 * math.sqrt(c.e_avg_max) / (c.alpha * c.e_hat_min * sK)
    quad = 80.0 * c.beta ** 2 * c.alpha ** 2 / (K * c.e_avg_min)
    terms = {
        "leading": pre * c.F_gap,
        "drift": pre * c.Upsilon,
        "variance": quad * (c.e_max - 1.0) * c.theta_var,
        "dissimilarity": quad * c.zeta2 * c.e_max * (c.e_max - 1.0),
        "consensus": 24.0 * c.xi_cons / sK,
        "sampling": 16.0 * c.beta * c.alpha * c.e_hat_max / (sK * math.sqrt(c.e_avg_min))
        * c.theta_var,
    }
    failed = []
    if run is not None:
        if np.any(run.Delta[1:] > c.Upsilon / K + 1e-15):
            failed.append("drift exceeds Upsilon/K")
        if any(s.var_term > c.theta_var * (1 + 1e-12) for ents in run.entities for s in ents):
            failed.append("mini-batch variance exceeds theta_var")
        if any(run.e_max(k) > c.e_max for k in range(run.K)):
            failed.append("epoch count exceeds e_max")
        if c.xi_cons > 0:
            for k in range(run.K):
                if run.Xi[k] > 0 and run.lam[k] > 0 and \
                        run.phi[k] < min_p2p_rounds(run.lam[k], c.xi_cons, K, run.Xi[k], c.M):
                    failed.append(f"too few P2P rounds in round {k}")
                    break
        else:
            failed.append("xi_cons must be positive to check the P2P-round condition")
    return Corollary1Result(float(sum(terms.values())), terms, tuple(failed))


# ---------------------------------------------------------------------------
# from a finished run


def _es_union(scenario, assignment_targets, m):
    G = scenario.G
    parts = [ds for n, ds in enumerate(scenario.datasets)
             if assignment_targets[n] > 0 and (assignment_targets[n] - 1) // G == m]
    if not parts:
        return Dataset.empty(scenario.datasets[0].n_features, scenario.datasets[0].n_classes)
    return Dataset.concat(parts)


def collect_run_stats(scenario, records, targets: Sequence[Sequence[int]] | None = None,
                      seed: int = 0, n_perturbed: int = 10, perturb: float = 0.1,
                      smooth_pairs: int = 200, F_star: float | None = None,
                      oracle_steps: int = 4000) -> tuple[AnalysisConstants, RunStats]:
    """Estimate every constant from ``records`` of :func:`bflsim.bfl.run_training`.

    Probe points are the iterates plus ``n_perturbed`` Gaussian perturbations
    of them. ``targets[k]`` is the offloading decision of round ``k``
    (all-local when omitted).
    """
    model = scenario.model
    K = len(records)
    N, M = scenario.N, scenario.M
    targets = [[0] * N for _ in range(K)] if targets is None else targets
    iterates = np.array([r.w_before for r in records] + [records[-1].w_after])
    rng = stream(seed, 0, 0, "analysis-probes")
    picks = iterates[rng.integers(0, len(iterates), n_perturbed)]
    probes = np.vstack([iterates, picks + perturb * rng.standard_normal(picks.shape)])

    pooled = Dataset.concat([ds for ds in scenario.datasets if ds.size])
    beta = estimate_smoothness(model, pooled, smooth_pairs, seed, list(iterates), radius=1.0)

    entities, sets_per_round = [], []
    Theta_y, sigma2_y = {}, {}
    zeta2 = 0.0
    for k, rec in enumerate(records):
        sets = {}
        for n, ds in enumerate(scenario.datasets):
            if ds.size and targets[k][n] == 0:
                sets[("md", n)] = ds
        for m in range(M):
            u = _es_union(scenario, targets[k], m)
            if u.size:
                sets[("es", m)] = u
        sets_per_round.append(sets)
        D = sum(ds.size for ds in sets.values())
        ents = []
        keys = sorted(sets, key=str)
        for key in keys:
            ds = sets[key]
            cfg = scenario.md_cfg if key[0] == "md" else scenario.es_cfg
            if key not in Theta_y:
                Theta_y[key] = estimate_variability(model, probes, ds) if ds.size > 1 else 0.0
                sigma2_y[key] = feature_variance(model, ds)
            ents.append(EntityStats(ds.size, cfg.epochs, batch_size(cfg.batch_ratio, ds.size),
                                    sigma2_y[key], Theta_y[key]))
        entities.append(ents)
        a = np.array([sets[key].size / D for key in keys])
        G = np.array([[full_grad(model, w, sets[key]) for key in keys] for w in probes])
        zeta2 = max(zeta2, fit_dissimilarity(G, a).zeta2)

    Delta = np.zeros(K)
    for k in range(1, K):
        if sets_per_round[k].keys() != sets_per_round[k - 1].keys() or any(
                sets_per_round[k][q].size != sets_per_round[k - 1][q].size
                for q in sets_per_round[k]):
            Delta[k] = model_drift(model, sets_per_round[k - 1], sets_per_round[k], probes)
    Xi = np.array([gradient_divergence(r.es_aggregates) for r in records])
    lam_val = spectral_gap(scenario.weights_matrix()) if M > 1 else 0.0
    lam = np.full(K, lam_val)
    phi = np.full(K, int(scenario.phi))
    run = RunStats(entities, Xi, lam, phi, Delta, np.array([r.grad_sq for r in records]))

    F0 = global_loss(model, records[0].w_before, scenario.datasets)
    if F_star is None:
        F_star = _oracle_min(model, scenario.datasets, records[0].w_before, beta, oracle_steps)
    F_star = min(F_star, min(r.loss for r in records), F0)
    e_avg = [run.e_avg(k) for k in range(K)]
    e_hat = [run.e_hat(k) for k in range(K)]
    alpha = scenario.eta * math.sqrt(K * float(np.mean(e_avg)))
    Theta = max(Theta_y.values()) if Theta_y else 0.0
    const = AnalysisConstants(
        beta=max(beta, 1e-300), zeta1=1.0, zeta2=zeta2, Theta=Theta, alpha=alpha, K=K, M=M,
        F_gap=F0 - F_star, e_max=max(run.e_max(k) for k in range(K)),
        e_avg_min=min(e_avg), e_avg_max=max(e_avg), e_hat_min=min(e_hat), e_hat_max=max(e_hat),
        lam=lam_val, Upsilon=float(K * Delta.max()) if K else 0.0,
        theta_var=max(s.var_term for ents in entities for s in ents),
        xi_cons=float(np.max(M * lam ** (2 * phi) * Xi ** 2) * math.sqrt(K)),
        Theta_y={f"{a}{b}": v for (a, b), v in Theta_y.items()},
        sigma2_y={f"{a}{b}": v for (a, b), v in sigma2_y.items()},
    )
    return const, run


def _oracle_min(model, datasets, w0, beta, steps) -> float:
    """Best loss of full-batch gradient descent with step ``1/β``."""
    w = np.array(w0, dtype=float)
    lr = 1.0 / max(beta, 1e-12)
    best = global_loss(model, w, datasets)
    for _ in range(int(steps)):
        w = w - lr * global_grad(model, w, datasets)
        best = min(best, global_loss(model, w, datasets))
    return best


BOUND_COLUMNS = ["k", "leading", "a", "b", "c", "d", "e", "total", "measured_grad_sq"]


def write_bound_csv(c: AnalysisConstants, run: RunStats, path) -> None:
    """One row per prefix length ``k`` = 1..K: the bound evaluated on rounds ``< k``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOUND_COLUMNS)
        for k in range(1, run.K + 1):
            sub = RunStats(run.entities[:k], run.Xi[:k], run.lam[:k], run.phi[:k],
                           run.Delta[:k], run.grad_sq[:k])
            ck = AnalysisConstants(**{**asdict(c), "K": k,
                                      "alpha": c.alpha * math.sqrt(k / c.K)})
            total, t = theorem1_bound(ck, sub)
            w.writerow([k] + [repr(float(t[x])) for x in BOUND_COLUMNS[1:7]]
                       + [repr(float(total)), repr(sub.measured())])


def write_constants_json(c: AnalysisConstants, path) -> None:
    with open(path, "w") as fh:
        json.dump(c.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
