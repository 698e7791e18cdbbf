"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Tolerances are pinned as module constants. Run ``pytest tests/test_acceptance.py -v``
to see the report lines alongside the test results.
"""

import json
import math
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from bflsim import drl
from bflsim.analysis import (collect_run_stats, estimate_variability, feature_variance,
                             sgd_variance_bound, theorem1_bound)
from bflsim.bfl import RoundOptions, centralized_oracle, run_training
from bflsim.chain import AttackSpec
from bflsim.cli import attack_summary, latency_fixture, main
from bflsim.config import bundled, parse_config
from bflsim.consensus import Topology, build_weights, gradient_divergence, run_consensus, \
    spectral_gap
from bflsim.drl import MLPCritic, PolicyNet, Trajectory, critic_value, evaluate_policy
from bflsim.env import reward
from bflsim.fl_core import (TrainerConfig, full_grad, local_loss, make_model,
                            make_synthetic_dataset, minibatch_indices)
from bflsim.latency import LatencyBreakdown

from conftest import finite_diff, rel_err

GOLDEN = __import__("pathlib").Path(__file__).parent / "golden" / "latency_desk.json"

# pinned tolerances
EIG_TOL = 1e-10
FP_ULPS = 16
C1_TIME = 5.0
C2_TIME = 30.0
C3_REL = 0.05
C3_SMOOTH = 5
C3_TIME = 60.0
C4_MIN_SEEDS = 8
C4_PHI_SLACK = 0.02
C4_TIME = 300.0
C5_REL = 1e-12
C6_REL = 1e-4
C6_PROBES = 50
C6_TIME = 30.0
C7_KL = 0.01 + 1e-6
C8_VS_RANDOM = 1.5
C8_VS_GREEDY = 1.1
C8_TIME_PER_SEED = 300.0
C9_MIN_SEEDS = 9
C9_SLOPE = -0.3
C10_SPIKE = 2.0
C10_MIN_SEEDS = 8
C10_RECOVERY_TOL = 0.10
C10_RECOVERY_ROUNDS = 5
C10_GRID = (1.0, 2.0, 5.0, 10.0, 20.0, 50.0)

RL_SEEDS = (0, 1, 2)
RL_EPISODES = 2000


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            sys.stdout.write(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}\n")
        return ok
    return emit


@pytest.fixture(scope="module")
def desk():
    return parse_config(bundled())


# -- 1 -----------------------------------------------------------------------

def test_c01_consensus_error_bound(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_ratio, instances, resolvable, lam_err = 0.0, 0, 0, 0.0
    for M in (2, 3, 5):
        for name in ("ring", "star", "complete"):
            L = build_weights(Topology.named(name, M)).L
            A = L - np.full((M, M), 1.0 / M)
            oracle = float(np.max(np.abs(np.linalg.eigvalsh(A))))
            lam = spectral_gap(L)
            lam_err = max(lam_err, abs(lam - oracle))
            for _ in range(100):
                grads = rng.standard_normal((M, 8)) * rng.uniform(0.1, 10.0)
                Xi = gradient_divergence(grads)
                for phi in range(1, 21):
                    c = run_consensus(grads, L, phi).errors
                    lhs = float(np.max(np.sum(c * c, axis=1)))
                    rhs = M * oracle ** (2 * phi) * Xi ** 2
                    # residuals cannot fall below rounding of X - mean
                    floor = (FP_ULPS * np.finfo(float).eps * np.abs(grads).max()) ** 2
                    worst_ratio = max(worst_ratio, lhs / (rhs + floor))
                    resolvable += rhs > floor
                    instances += 1
    dt = time.perf_counter() - t0
    ok = worst_ratio <= 1.0 and lam_err <= EIG_TOL and dt < C1_TIME
    report(1, ok, f"{instances} instances ({resolvable} above rounding floor), "
                  f"max lhs/(rhs+floor)={worst_ratio:.4f}, "
                  f"|lambda-eig|={lam_err:.1e}, {dt:.2f}s")
    assert ok


# -- 2 -----------------------------------------------------------------------

def test_c02_sgd_variance_bound(report):
    t0 = time.perf_counter()
    D, draws = 100, 10_000
    ds = make_synthetic_dataset(2, 2, D // 2, 1.0, 7)
    model = make_model("softmax-regression", 2, 2)
    w = np.random.default_rng(3).standard_normal(model.dim) * 0.5
    g_full = full_grad(model, w, ds)
    sigma2 = feature_variance(model, ds)
    Theta = estimate_variability(model, w, ds)
    lines, ok = [], True
    for B in (10, 25, 50, 100):
        assert TrainerConfig(batch_ratio=B / D).batch_size(D) == B
        sq = np.empty(draws)
        for i in range(draws):
            idx = minibatch_indices(D, B, 11, 0, i)
            Xb, yb = (ds.X, ds.y) if idx is None else (ds.X[idx], ds.y[idx])
            g = model.loss_and_grad(w, Xb, yb)[1]
            sq[i] = np.sum((g - g_full) ** 2)
        emp = float(sq.mean())
        bound = sgd_variance_bound(B, D, sigma2, Theta)
        good = emp == 0.0 if B == D else emp <= bound
        ok &= good
        lines.append(f"B={B}: {emp:.3e}<={bound:.3e}")
    dt = time.perf_counter() - t0
    ok &= dt < C2_TIME
    report(2, ok, ", ".join(lines) + f", {dt:.1f}s")
    assert ok


# -- 3 -----------------------------------------------------------------------

def test_c03_convergence_vs_oracle(report, desk):
    t0 = time.perf_counter()
    K = desk["run"]["K"]
    sc = desk.scenario(0)
    recs = run_training(K, sc, "fixed", 0)
    losses = np.array([r.loss for r in recs])
    oracle = float(centralized_oracle(sc, K, 0)[-1])
    rel = abs(losses[-1] - oracle) / oracle
    smooth = np.convolve(losses, np.ones(C3_SMOOTH) / C3_SMOOTH, mode="valid")
    rises = int(np.sum(np.diff(smooth) > 0))
    dt = time.perf_counter() - t0
    ok = rel <= C3_REL and rises == 0 and dt < C3_TIME
    report(3, ok, f"final {losses[-1]:.5f} vs oracle {oracle:.5f} (rel {rel:.2%}), "
                  f"{rises} rises after smoothing, {dt:.1f}s")
    assert ok


# -- 4 -----------------------------------------------------------------------

def test_c04_ordering_trends(report, desk):
    t0 = time.perf_counter()
    K = desk["run"]["K"]
    order_ok = phi_ok = 0
    for seed in range(10):
        sc = desk.scenario(seed)
        final = {s: run_training(K, sc, "fixed", seed, options=RoundOptions(s))[-1].loss
                 for s in ("consensus", "no-consensus", "isolated")}
        if final["consensus"] <= final["no-consensus"] <= final["isolated"]:
            order_ok += 1
        l5 = run_training(K, replace(sc, phi=5), "fixed", seed)[-1].loss
        l15 = run_training(K, replace(sc, phi=15), "fixed", seed)[-1].loss
        if l15 <= l5 + C4_PHI_SLACK:
            phi_ok += 1
    dt = time.perf_counter() - t0
    ok = order_ok >= C4_MIN_SEEDS and phi_ok >= C4_MIN_SEEDS and dt < C4_TIME
    report(4, ok, f"scheme ordering {order_ok}/10, phi15<=phi5+{C4_PHI_SLACK} {phi_ok}/10, "
                  f"{dt:.1f}s")
    assert ok


# -- 5 -----------------------------------------------------------------------

def test_c05_latency_golden_and_utility(report, desk):
    stored = json.loads(GOLDEN.read_text())["breakdown"]
    got = latency_fixture(desk).to_dict()
    worst = 0.0
    for key, ref in stored.items():
        a, b = np.asarray(got[key], dtype=float), np.asarray(ref, dtype=float)
        scale = np.maximum(np.abs(b), 1e-300)
        worst = max(worst, float(np.max(np.abs(a - b) / scale)) if a.size else 0.0)
    tau = 3.7
    u_tau = reward(1.2, 0.5, tau - 1.7, tau)
    u_zero = reward(0.0, 0.0, 0.0, tau)
    ok = (worst <= C5_REL and abs(u_tau) <= C5_REL
          and abs(u_zero - (math.e - 1)) <= C5_REL * (math.e - 1))
    report(5, ok, f"golden max rel {worst:.1e}, U(tau)={u_tau:.1e}, "
                  f"U(0)-(e-1)={u_zero - (math.e - 1):.1e}")
    assert ok
    assert isinstance(latency_fixture(desk), LatencyBreakdown)


# -- 6 -----------------------------------------------------------------------

def test_c06_gradient_correctness(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    worst = {}

    def probe(name, g, f, x):
        worst[name] = max(worst.get(name, 0.0), rel_err(g, finite_diff(f, x)))

    ds = make_synthetic_dataset(3, 3, 4, 1.0, 5)
    for kind in ("softmax-regression", "one-hidden-layer-mlp", "quadratic-test"):
        m = make_model(kind, 3, 3, hidden=5)
        for _ in range(C6_PROBES):
            w = rng.standard_normal(m.dim)
            probe(kind, full_grad(m, w, ds), lambda v: local_loss(m, v, ds), w)

    pol = PolicyNet(6, 2, 3, (5,), (4,))
    nd = pol.n_disc
    for _ in range(C6_PROBES):
        theta = pol.init(rng, log_std=-0.3) + 0.1 * rng.standard_normal(pol.n_params)
        X = rng.standard_normal((4, pol.S))
        acts, us = zip(*[pol.sample(theta, x, rng)[:2] for x in X])
        a, u = np.array(acts), np.array(us)
        wts = rng.standard_normal(4)
        g = pol.grad_log_prob(theta, X, a, u, wts)

        def head(i):
            return lambda th: float(wts @ pol.log_prob_parts(th, X, a, u)[i])
        probe("discrete head", g[:nd], lambda td: head(0)(np.concatenate([td, theta[nd:]])),
              theta[:nd])
        probe("continuous head", g[nd:], lambda tc: head(1)(np.concatenate([theta[:nd], tc])),
              theta[nd:])
        new = theta + 0.05 * rng.standard_normal(pol.n_params)
        probe("KL", pol.kl_grad(theta, new, X), lambda th: pol.kl(theta, th, X), new)

    critic = MLPCritic(5, (7, 3), seed=1)
    for _ in range(C6_PROBES):
        p = critic.params + 0.1 * rng.standard_normal(critic.params.size)
        x = rng.standard_normal(5)
        c = critic.with_params(p)
        probe("critic", c.grad(x), lambda q: critic_value(critic.with_params(q), x), p)
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= C6_REL and dt < C6_TIME
    report(6, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {dt:.1f}s")
    assert ok


# -- 7 and 8 share one training run per seed ----------------------------------

@pytest.fixture(scope="module")
def rl_runs():
    cfg = parse_config(bundled("toy_rl.cfg"))
    out = {}
    for seed in RL_SEEDS:
        env = cfg.env(seed)
        pol = PolicyNet(env.state_dim, env.sys.N, env.n_targets)
        checks = []

        def hook(old, new, traj: Trajectory, adv, info):
            if info.accepted:
                kl = pol.kl(old, new, traj.states)
                imp = (drl.surrogate_objective(pol, traj, new, adv)
                       - drl.surrogate_objective(pol, traj, old, adv))
                checks.append((kl, imp))

        t0 = time.perf_counter()
        _, rows = drl.train(env, RL_EPISODES, cfg=cfg.trpo(), seed=seed, on_update=hook)
        dt = time.perf_counter() - t0
        first = RL_EPISODES - 100
        out[seed] = {
            "checks": checks,
            "agent": float(np.mean([r["mean_reward"] for r in rows[first:]])),
            "random": float(evaluate_policy(env, "random", 100, seed, first).mean()),
            "greedy": float(evaluate_policy(env, "greedy", 100, seed, first).mean()),
            "time": dt,
        }
    return out


def test_c07_trust_region_contract(report, rl_runs):
    total = sum(len(r["checks"]) for r in rl_runs.values())
    bad = sum(1 for r in rl_runs.values() for kl, imp in r["checks"]
              if not (kl <= C7_KL and imp > 0))
    max_kl = max(kl for r in rl_runs.values() for kl, _ in r["checks"])
    ok = total > 0 and bad == 0
    report(7, ok, f"{total} accepted updates over {len(RL_SEEDS)}x{RL_EPISODES} episodes, "
                  f"{bad} violations, max KL {max_kl:.5f}")
    assert ok


def test_c08_rl_beats_baselines(report, rl_runs):
    parts, ok = [], True
    for seed, r in rl_runs.items():
        good = (r["agent"] >= C8_VS_RANDOM * r["random"]
                and r["agent"] >= C8_VS_GREEDY * r["greedy"]
                and r["time"] < C8_TIME_PER_SEED)
        ok &= good
        parts.append(f"seed {seed}: {r['agent']:.3f} vs random {r['random']:.3f} "
                     f"greedy {r['greedy']:.3f} ({r['time']:.0f}s)")
    report(8, ok, "; ".join(parts))
    assert ok


# -- 9 -----------------------------------------------------------------------

def test_c09_bound_instantiation(report, desk):
    held = 0
    for seed in range(10):
        sc = desk.scenario(seed)
        targets = []
        recs = run_training(50, sc, "fixed", seed, targets_out=targets)
        const, stats = collect_run_stats(sc, recs, targets, seed=seed)
        bound, _ = theorem1_bound(const, stats)
        held += bound >= stats.measured()
    Ks = (25, 100, 400)
    means = []
    for K in Ks:
        per_seed = []
        for seed in range(3):
            recs = run_training(K, desk.scenario(seed), "fixed", seed)
            per_seed.append(np.mean([r.grad_sq for r in recs]))
        means.append(float(np.mean(per_seed)))
    slope = float(np.polyfit(np.log(Ks), np.log(means), 1)[0])
    ok = held >= C9_MIN_SEEDS and slope <= C9_SLOPE
    report(9, ok, f"bound holds {held}/10, K-sweep slope {slope:.3f}")
    assert ok


# -- 10 ----------------------------------------------------------------------

def _attack_losses(sc, seed, scale, detect):
    opts = RoundOptions(attack=AttackSpec(0, (20, 60), scale, seed), detect=detect)
    return np.array([r.loss for r in run_training(80, sc, "fixed", seed, options=opts)])


def test_c10_attack_robustness(report, desk):
    good, chosen = 0, []
    for seed in range(10):
        sc = desk.scenario(seed)
        scale, und = None, None
        for s in C10_GRID:
            L = _attack_losses(sc, seed, s, False)
            # the first attack is the one measured against a clean pre-attack loss
            if attack_summary(L, 20)["spike"] >= C10_SPIKE:
                scale, und = s, L
                break
        chosen.append(scale)
        if scale is None:
            continue
        dfd = _attack_losses(sc, seed, scale, True)
        fine = True
        for k in (20, 60):
            u = attack_summary(und, k, C10_RECOVERY_ROUNDS, C10_RECOVERY_TOL)
            d = attack_summary(dfd, k, C10_RECOVERY_ROUNDS, C10_RECOVERY_TOL)
            fine &= d["spike"] <= u["spike"] and d["recovery"] >= 0
        good += fine
    ok = good >= C10_MIN_SEEDS
    report(10, ok, f"defended no worse and recovered in {good}/10 seeds, scale per seed {chosen}")
    assert ok


# -- 11 ----------------------------------------------------------------------

def test_c11_cli_determinism(report, tmp_path):
    rl = tmp_path / "rl.cfg"
    rl.write_text(bundled("toy_rl.cfg").read_text()
                  .replace("episodes = 2000", "episodes = 5")
                  .replace("eval_episodes = 10", "eval_episodes = 2"))
    desk_cfg = str(bundled())
    jobs = {
        "fl-train": ["--config", desk_cfg],
        "attack": ["--config", desk_cfg],
        "analyze": ["--config", desk_cfg],
        "latency-table": ["--config", desk_cfg],
        "sweep": ["--config", desk_cfg, "--param", "phi", "--values", "0,5,10"],
        "rl-train": ["--config", str(rl)],
    }
    compared, diffs = 0, []
    for sub, args in jobs.items():
        for rep in ("a", "b"):
            assert main([sub, *args, "--out", str(tmp_path / rep / sub), "--seed", "3"]) == 0
        for f in sorted((tmp_path / "a" / sub).rglob("*.csv")):
            other = tmp_path / "b" / sub / f.relative_to(tmp_path / "a" / sub)
            compared += 1
            if f.read_bytes() != other.read_bytes():
                diffs.append(str(f.relative_to(tmp_path / "a")))
    ok = compared > 0 and not diffs
    report(11, ok, f"{compared} CSV files compared across two runs, differing: {diffs or 'none'}")
    assert ok
