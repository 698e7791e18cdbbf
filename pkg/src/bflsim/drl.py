"""Parameterized advantage actor-critic with a trust-region actor.

The actor factorizes as ``π(a, c | s) = π_d(a | s) · π_c(c | s, a)``. Per MD,
``π_d`` is a softmax over ``1 + M·G`` targets and ``π_c`` a tanh-squashed
diagonal Gaussian over five pre-squash coordinates::

    0: transmit power   1: bandwidth   2: hash rate   (used when offloading)
    3: CPU frequency    4: hash rate                   (used when local)

Only the coordinates of the chosen mode enter the log-density and the KL.
All gradients are written out by hand.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from bflsim.env import BFLEnv, ParamAction, RawAction, greedy_action, random_action
from bflsim.nets import MLP
from bflsim.rng import stream

__all__ = [
    "TrpoConfig",
    "PolicyNet",
    "MLPCritic",
    "LinearCritic",
    "Trajectory",
    "Agent",
    "UpdateInfo",
    "advantage",
    "surrogate_objective",
    "kl_parameterized",
    "hvp",
    "conjugate_gradient",
    "line_search_update",
    "critic_value",
    "critic_update",
    "TabularBatch",
    "mspbe_loss",
    "mspbe_grad",
    "lstd_solution",
    "td_batch_update",
    "lipschitz_constant",
    "train",
    "evaluate_policy",
    "save_checkpoint",
    "load_checkpoint",
    "write_rl_csv",
    "agent_from_checkpoint",
    "moving_average",
]

N_CONT = 5
OFF_DIMS = (0, 1, 2)
LOC_DIMS = (3, 4)
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TrpoConfig:
    eps_kl: float = 0.01
    cg_iters: int = 10
    cg_tol: float = 1e-10
    damping: float = 0.1
    hvp_eps: float = 1e-5
    backtrack: float = 0.5
    max_backtracks: int = 10
    actor_rate: float = 0.003
    critic_rate: float = 0.02
    gamma: float = 0.9
    normalize_advantages: bool = True
    critic: str = "mlp"
    critic_hidden: tuple[int, ...] = (200, 100)
    disc_hidden: tuple[int, ...] = (64, 32)
    cont_hidden: tuple[int, ...] = (128, 64)
    log_std_init: float = 0.0
    # the horizon cut is a time limit, not an absorbing state: bootstrap through it
    bootstrap_horizon: bool = True

    def __post_init__(self):
        for k in ("eps_kl", "cg_tol", "hvp_eps", "backtrack", "critic_rate"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        if self.damping < 0 or self.actor_rate < 0:
            raise ValueError("damping and actor_rate must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.critic not in ("mlp", "linear"):
            raise ValueError("critic must be 'mlp' or 'linear'")


def _log1m_tanh2(u):
    # log(1 - tanh(u)^2) = 2·(log 2 − u − softplus(−2u))
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def _mode_mask(a: np.ndarray) -> np.ndarray:
    """(B, N, 5) indicator of the continuous coordinates used by action ``a``."""
    off = (a > 0)[..., None]
    m = np.zeros(a.shape + (N_CONT,))
    m[..., list(OFF_DIMS)] = 1.0
    return np.where(off, m, 1.0 - m)


@dataclass
class PolicyOut:
    logp_all: np.ndarray   # (B, N, A)
    probs: np.ndarray      # (B, N, A)
    mu: np.ndarray         # (B, N, 5)
    log_std: np.ndarray    # (N, 5), clipped
    std_free: np.ndarray   # (N, 5), 1 where the clip is inactive
    d_cache: list
    c_cache: list


class PolicyNet:
    """Discrete and continuous heads sharing the state input.

    ``θ = [θ_d, θ_c]`` with ``θ_c = [continuous-net weights, log-std (N·5)]``.
    """

    def __init__(self, state_dim: int, N: int, n_targets: int,
                 disc_hidden=(64, 32), cont_hidden=(128, 64)):
        self.S, self.N, self.A = int(state_dim), int(N), int(n_targets)
        self.disc = MLP([self.S, *disc_hidden, self.N * self.A])
        self.cont = MLP([self.S, *cont_hidden, self.N * N_CONT])
        self.n_disc = self.disc.n_params
        self.n_cont = self.cont.n_params + self.N * N_CONT

    @property
    def n_params(self) -> int:
        return self.n_disc + self.n_cont

    def split(self, theta):
        a, b = self.n_disc, self.n_disc + self.cont.n_params
        return theta[:a], theta[a:b], theta[b:].reshape(self.N, N_CONT)

    def init(self, rng: np.random.Generator, log_std: float = 0.0) -> np.ndarray:
        return np.concatenate([self.disc.init(rng), self.cont.init(rng),
                               np.full(self.N * N_CONT, float(log_std))])

    def forward(self, theta, X) -> PolicyOut:
        X = np.atleast_2d(X)
        B = X.shape[0]
        td, tc, ls = self.split(theta)
        z, dc = self.disc.forward(td, X)
        z = z.reshape(B, self.N, self.A)
        z = z - z.max(axis=2, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=2, keepdims=True))
        mu, cc = self.cont.forward(tc, X)
        lsc = np.clip(ls, LOG_STD_MIN, LOG_STD_MAX)
        free = ((ls >= LOG_STD_MIN) & (ls <= LOG_STD_MAX)).astype(float)
        return PolicyOut(logp, np.exp(logp), mu.reshape(B, self.N, N_CONT), lsc, free, dc, cc)

    # -- log-probabilities -------------------------------------------------
    def log_prob_parts(self, theta, X, a, u, out: PolicyOut | None = None):
        """Return ``(log π_d, log π_c)``, each of shape ``(B,)``."""
        out = self.forward(theta, X) if out is None else out
        a = np.atleast_2d(a)
        u = np.asarray(u).reshape(a.shape[0], self.N, N_CONT)
        lp_d = np.take_along_axis(out.logp_all, a[..., None], axis=2)[..., 0].sum(axis=1)
        mask = _mode_mask(a)
        z = (u - out.mu) / np.exp(out.log_std)
        dens = -0.5 * z * z - out.log_std - _HALF_LOG_2PI - _log1m_tanh2(u)
        lp_c = (mask * dens).sum(axis=(1, 2))
        return lp_d, lp_c

    def log_prob(self, theta, X, a, u) -> np.ndarray:
        lp_d, lp_c = self.log_prob_parts(theta, X, a, u)
        return lp_d + lp_c

    def grad_log_prob(self, theta, X, a, u, weights, out: PolicyOut | None = None) -> np.ndarray:
        """Gradient of ``Σ_b weights[b] · log π(a_b, u_b | s_b)``."""
        X = np.atleast_2d(X)
        out = self.forward(theta, X) if out is None else out
        a = np.atleast_2d(a)
        B = X.shape[0]
        u = np.asarray(u).reshape(B, self.N, N_CONT)
        w = np.asarray(weights, dtype=float).reshape(B, 1, 1)
        onehot = np.zeros_like(out.probs)
        np.put_along_axis(onehot, a[..., None], 1.0, axis=2)
        d_logits = (w * (onehot - out.probs)).reshape(B, -1)
        td, tc, _ = self.split(theta)
        g_d = self.disc.backward(td, out.d_cache, d_logits)
        mask = _mode_mask(a)
        var = np.exp(2.0 * out.log_std)
        diff = u - out.mu
        d_mu = (w * mask * diff / var).reshape(B, -1)
        g_c = self.cont.backward(tc, out.c_cache, d_mu)
        g_ls = (w * mask * (diff * diff / var - 1.0)).sum(axis=0) * out.std_free
        return np.concatenate([g_d, g_c, g_ls.ravel()])

    # -- KL ----------------------------------------------------------------
    @staticmethod
    def _mode_weights(p_old):
        """Per (state, MD, coordinate) probability that the coordinate is active."""
        p_loc = p_old[..., 0:1]
        wt = np.empty(p_old.shape[:2] + (N_CONT,))
        wt[..., list(OFF_DIMS)] = 1.0 - p_loc
        wt[..., list(LOC_DIMS)] = p_loc
        return wt

    def kl_terms(self, old: PolicyOut, new: PolicyOut):
        kl_d = (old.probs * (old.logp_all - new.logp_all)).sum(axis=(1, 2))
        var_o, var_n = np.exp(2 * old.log_std), np.exp(2 * new.log_std)
        kl_g = (new.log_std - old.log_std + (var_o + (old.mu - new.mu) ** 2) / (2 * var_n) - 0.5)
        kl_c = (self._mode_weights(old.probs) * kl_g).sum(axis=(1, 2))
        return kl_d, kl_c

    def kl(self, theta_old, theta_new, X) -> float:
        X = np.atleast_2d(X)
        kl_d, kl_c = self.kl_terms(self.forward(theta_old, X), self.forward(theta_new, X))
        return float(np.mean(kl_d + kl_c))

    def kl_grad(self, theta_old, theta_new, X, old: PolicyOut | None = None) -> np.ndarray:
        """Gradient of the mean KL(old ‖ new) with respect to ``theta_new``."""
        X = np.atleast_2d(X)
        B = X.shape[0]
        old = self.forward(theta_old, X) if old is None else old
        new = self.forward(theta_new, X)
        td, tc, _ = self.split(theta_new)
        g_d = self.disc.backward(td, new.d_cache, ((new.probs - old.probs) / B).reshape(B, -1))
        wt = self._mode_weights(old.probs)
        var_o, var_n = np.exp(2 * old.log_std), np.exp(2 * new.log_std)
        diff = new.mu - old.mu
        g_c = self.cont.backward(tc, new.c_cache, (wt * diff / var_n / B).reshape(B, -1))
        g_ls = (wt * (1.0 - (var_o + diff * diff) / var_n)).sum(axis=0) / B * new.std_free
        return np.concatenate([g_d, g_c, g_ls.ravel()])

    # -- sampling ----------------------------------------------------------
    def sample(self, theta, x, rng: np.random.Generator, deterministic: bool = False):
        """Draw ``(a, u, log π)`` for one state. ``u`` is the pre-squash sample."""
        out = self.forward(theta, x[None, :])
        probs = out.probs[0]
        if deterministic:
            a = probs.argmax(axis=1)
            u = out.mu[0].copy()
        else:
            cum = probs.cumsum(axis=1)
            r = rng.random(self.N)[:, None]
            a = np.minimum((cum < r).sum(axis=1), self.A - 1)
            u = out.mu[0] + np.exp(out.log_std) * rng.standard_normal((self.N, N_CONT))
        lp_d, lp_c = self.log_prob_parts(theta, x[None, :], a[None, :], u[None], out)
        return a.astype(np.int64), u, float(lp_d[0] + lp_c[0])


# ---------------------------------------------------------------------------
# critics


class MLPCritic:
    def __init__(self, state_dim: int, hidden=(200, 100), params=None, seed: int = 0):
        self.net = MLP([state_dim, *hidden, 1])
        self.params = self.net.init(stream(seed, 0, 0, "critic-init"), 0.1) \
            if params is None else np.asarray(params, dtype=float)

    def value(self, X) -> np.ndarray:
        return self.net.forward(self.params, np.atleast_2d(X))[0][:, 0]

    def grad(self, x) -> np.ndarray:
        out, acts = self.net.forward(self.params, np.atleast_2d(x))
        return self.net.backward(self.params, acts, np.ones_like(out))

    def with_params(self, params) -> "MLPCritic":
        c = object.__new__(MLPCritic)
        c.net, c.params = self.net, np.asarray(params, dtype=float)
        return c


class LinearCritic:
    """``V(s) = ω · feat(s)``; ``feat`` defaults to the identity."""

    def __init__(self, n_features: int, params=None, features: Callable | None = None):
        self.params = np.zeros(n_features) if params is None else np.asarray(params, dtype=float)
        self.features = features

    def feat(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X if self.features is None else np.atleast_2d(self.features(X))

    def value(self, X) -> np.ndarray:
        return self.feat(X) @ self.params

    def grad(self, x) -> np.ndarray:
        return self.feat(x)[0]

    def with_params(self, params) -> "LinearCritic":
        return LinearCritic(self.params.size, params, self.features)


def critic_value(critic, s) -> float:
    return float(critic.value(np.atleast_2d(s))[0])


def critic_update(critic, A: float, s, rate: float):
    """``ω ← ω + rate·A·∇V(s)``; returns the updated critic."""
    return critic.with_params(critic.params + rate * A * critic.grad(s))


# ---------------------------------------------------------------------------
# actor pieces


def advantage(r, gamma, V_s, V_next, terminal=False):
    """One-step advantage ``r + γ·V(s') − V(s)``, with ``V(s') = 0`` at a terminal."""
    V_next = np.where(terminal, 0.0, V_next)
    return r + gamma * V_next - V_s


@dataclass
class Trajectory:
    states: np.ndarray       # (T, S)
    actions: np.ndarray      # (T, N)
    u: np.ndarray            # (T, N, 5)
    rewards: np.ndarray      # (T,)
    next_states: np.ndarray  # (T, S)
    logp_old: np.ndarray     # (T,)
    values: np.ndarray       # (T,)
    terminal: np.ndarray     # (T,) bool
    gamma: float = 0.9

    def __len__(self) -> int:
        return int(self.rewards.size)


def surrogate_objective(policy: PolicyNet, traj: Trajectory, theta_new, adv,
                        return_flag: bool = False):
    """Mean of ``exp(log π_new − log π_old)·A``; the exponent is clamped to ±20."""
    delta = policy.log_prob(theta_new, traj.states, traj.actions, traj.u) - traj.logp_old
    clipped = bool(np.any(np.abs(delta) > 20.0))
    val = float(np.mean(np.exp(np.clip(delta, -20.0, 20.0)) * adv))
    return (val, clipped) if return_flag else val


def surrogate_grad(policy: PolicyNet, traj: Trajectory, theta, adv) -> np.ndarray:
    out = policy.forward(theta, traj.states)
    lp_d, lp_c = policy.log_prob_parts(theta, traj.states, traj.actions, traj.u, out)
    ratio = np.exp(np.clip(lp_d + lp_c - traj.logp_old, -20.0, 20.0))
    return policy.grad_log_prob(theta, traj.states, traj.actions, traj.u,
                                ratio * adv / len(adv), out)


def kl_parameterized(policy: PolicyNet, theta_old, theta_new, states) -> float:
    """Mean over states of ``KL_d + Σ_a π_old(a)·KL_c(·|a)``, direction old ‖ new."""
    return policy.kl(theta_old, theta_new, states)


def hvp(kl_grad_fn: Callable, theta, v, eps: float = 1e-5, damping: float = 0.1) -> np.ndarray:
    """Central difference of the KL gradient along ``v`` plus ``damping·v``.

    ``kl_grad_fn(θ')`` must return the KL gradient at ``θ'`` with the
    reference distribution held fixed.
    """
    v = np.asarray(v, dtype=float)
    if not np.any(v):
        return np.zeros_like(v)
    g_plus = kl_grad_fn(theta + eps * v)
    g_minus = kl_grad_fn(theta - eps * v)
    return (g_plus - g_minus) / (2.0 * eps) + damping * v


def conjugate_gradient(hvp_fn: Callable, g, iters: int = 10, tol: float = 1e-10) -> np.ndarray:
    """Approximately solve ``H x = g`` for symmetric positive-definite ``H``."""
    g = np.asarray(g, dtype=float)
    x = np.zeros_like(g)
    gnorm = np.linalg.norm(g)
    if gnorm == 0.0:
        return x
    r = g.copy()
    p = r.copy()
    rr = r @ r
    best, best_res = x.copy(), gnorm
    for _ in range(iters):
        Hp = hvp_fn(p)
        pHp = p @ Hp
        if pHp <= 0:
            break
        alpha = rr / pHp
        x = x + alpha * p
        r = r - alpha * Hp
        res = math.sqrt(r @ r)
        if res < best_res:
            best, best_res = x.copy(), res
        if res <= tol * gnorm:
            break
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return best


@dataclass
class UpdateInfo:
    accepted: bool
    steps: int
    kl: float
    surrogate_before: float
    surrogate_after: float
    step_scale: float
    clipped: bool = False


def line_search_update(policy: PolicyNet, theta, nu, hvp_fn: Callable, traj: Trajectory,
                       adv, cfg: TrpoConfig, grad=None) -> tuple[np.ndarray, UpdateInfo]:
    """Backtracking search along ``ν`` from the trust-region step length.

    The full step is ``√(2ε/νᵀĤν)·ν``; each backtrack halves it. A step is
    accepted when the surrogate rises by at least ``actor_rate`` times the
    linear prediction ``gᵀΔθ`` (and strictly rises) and the KL stays within
    ``ε``. If no step qualifies the parameters are returned unchanged.
    """
    nu = np.asarray(nu, dtype=float)
    base = surrogate_objective(policy, traj, theta, adv)
    if not np.any(nu):
        return theta, UpdateInfo(False, 0, 0.0, base, base, 0.0)
    shs = float(nu @ hvp_fn(nu))
    if shs <= 0:
        return theta, UpdateInfo(False, 0, 0.0, base, base, 0.0)
    scale = math.sqrt(2.0 * cfg.eps_kl / shs)
    expected = float(grad @ nu) if grad is not None else None
    frac = 1.0
    for k in range(cfg.max_backtracks):
        cand = theta + frac * scale * nu
        val, clipped = surrogate_objective(policy, traj, cand, adv, return_flag=True)
        improve = val - base
        kl = policy.kl(theta, cand, traj.states)
        armijo = expected is None or improve >= cfg.actor_rate * frac * scale * expected
        if improve > 0 and armijo and kl <= cfg.eps_kl and np.all(np.isfinite(cand)):
            return cand, UpdateInfo(True, k + 1, kl, base, val, frac * scale, clipped)
        frac *= cfg.backtrack
    return theta, UpdateInfo(False, cfg.max_backtracks, 0.0, base, base, 0.0)


# ---------------------------------------------------------------------------
# MSPBE for the linear critic


@dataclass(frozen=True)
class TabularBatch:
    """Empirical transition statistics over ``n`` discrete states."""

    Phi: np.ndarray      # (n, k) features
    H: np.ndarray        # (n,) state distribution
    P: np.ndarray        # (n, n) empirical transitions (terminal mass dropped)
    r: np.ndarray        # (n,) mean reward

    @staticmethod
    def from_transitions(Phi, s, r, s_next, terminal=None) -> "TabularBatch":
        Phi = np.asarray(Phi, dtype=float)
        n = Phi.shape[0]
        s = np.asarray(s, dtype=np.int64)
        s_next = np.asarray(s_next, dtype=np.int64)
        r = np.asarray(r, dtype=float)
        term = np.zeros(s.size, dtype=bool) if terminal is None else np.asarray(terminal, bool)
        counts = np.bincount(s, minlength=n).astype(float)
        P = np.zeros((n, n))
        np.add.at(P, (s[~term], s_next[~term]), 1.0)
        rsum = np.bincount(s, weights=r, minlength=n)
        seen = counts > 0
        P[seen] /= counts[seen, None]
        rbar = np.where(seen, rsum / np.where(seen, counts, 1.0), 0.0)
        return TabularBatch(Phi, counts / counts.sum(), P, rbar)

    def projector(self) -> np.ndarray:
        Phi, H = self.Phi, self.H
        G = Phi.T @ (H[:, None] * Phi)
        if np.linalg.matrix_rank(G) < G.shape[0]:
            raise np.linalg.LinAlgError("features are rank-deficient under the state distribution")
        return Phi @ np.linalg.solve(G, Phi.T * H[None, :])


def mspbe_loss(omega, batch: TabularBatch, gamma: float) -> float:
    """``½‖V − Π(r + γPV)‖²_H`` with ``V = Φω``."""
    Pi = batch.projector()
    V = batch.Phi @ omega
    e = V - Pi @ (batch.r + gamma * batch.P @ V)
    return float(0.5 * e @ (batch.H * e))


def mspbe_grad(omega, batch: TabularBatch, gamma: float) -> np.ndarray:
    Pi = batch.projector()
    A = batch.Phi - gamma * batch.P @ batch.Phi
    e = Pi @ (A @ omega - batch.r)
    return A.T @ (batch.H * e)


def lstd_solution(batch: TabularBatch, gamma: float) -> np.ndarray:
    """Fixed point of the projected Bellman operator."""
    Phi, H = batch.Phi, batch.H
    A = Phi.T @ (H[:, None] * (Phi - gamma * batch.P @ Phi))
    return np.linalg.solve(A, Phi.T @ (H * batch.r))


def td_batch_update(omega, batch: TabularBatch, gamma: float, rate: float) -> np.ndarray:
    """Expected TD(0) step over the batch distribution."""
    V = batch.Phi @ omega
    delta = batch.r + gamma * batch.P @ V - V
    return omega + rate * batch.Phi.T @ (batch.H * delta)


def lipschitz_constant(gamma: float, feature_norms) -> float:
    """``(1 + γ)² · max‖feat‖²``; ``feature_norms`` are the Euclidean norms."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    return (1.0 + gamma) ** 2 * float(np.max(np.asarray(feature_norms, dtype=float) ** 2))


# ---------------------------------------------------------------------------
# agent and training loop


class Agent:
    def __init__(self, env: BFLEnv, cfg: TrpoConfig = TrpoConfig(), seed: int = 0):
        self.cfg = cfg
        self.policy = PolicyNet(env.state_dim, env.sys.N, env.n_targets,
                                cfg.disc_hidden, cfg.cont_hidden)
        self.theta = self.policy.init(stream(seed, 0, 0, "actor-init"), cfg.log_std_init)
        if cfg.critic == "mlp":
            self.critic = MLPCritic(env.state_dim, cfg.critic_hidden, seed=seed)
        else:
            self.critic = LinearCritic(env.state_dim)

    def act(self, x, rng, deterministic=False):
        return self.policy.sample(self.theta, x, rng, deterministic)

    @staticmethod
    def to_raw(env: BFLEnv, a, u) -> RawAction:
        """Rescale squashed samples onto each parameter's sampling range."""
        caps = env.caps()
        fl = env.floors()
        c = (np.tanh(u) + 1.0) / 2.0
        lin = lambda lo, hi, x: lo + (hi - lo) * x  # noqa: E731
        off = a > 0
        psi = np.where(off, lin(fl["psi"], caps.psi, c[:, 2]), lin(fl["psi"], caps.psi, c[:, 4]))
        return RawAction(a, lin(fl["p"], caps.P, c[:, 0]), lin(fl["b"], caps.W, c[:, 1]),
                         lin(np.minimum(fl["f"], caps.F), caps.F, c[:, 3]), psi)

    def action(self, env: BFLEnv, rng, deterministic=False):
        x = env.vector()
        a, u, lp = self.act(x, rng, deterministic)
        return env.project(self.to_raw(env, a, u)), (x, a, u, lp)


def trpo_step(agent: Agent, traj: Trajectory, adv) -> tuple[np.ndarray, UpdateInfo]:
    cfg, pol, theta = agent.cfg, agent.policy, agent.theta
    g = surrogate_grad(pol, traj, theta, adv)
    old = pol.forward(theta, traj.states)
    kl_grad_fn = lambda th: pol.kl_grad(theta, th, traj.states, old)  # noqa: E731
    hvp_fn = lambda v: hvp(kl_grad_fn, theta, v, cfg.hvp_eps, cfg.damping)  # noqa: E731
    nu = conjugate_gradient(hvp_fn, g, cfg.cg_iters, cfg.cg_tol)
    return line_search_update(pol, theta, nu, hvp_fn, traj, adv, cfg, grad=g)


def _rollout(env: BFLEnv, agent: Agent, episode: int, seed: int):
    env.reset(episode)
    T = env.cfg.T
    S = env.state_dim
    N = env.sys.N
    states = np.empty((T, S))
    nxt = np.empty((T, S))
    acts = np.empty((T, N), dtype=np.int64)
    us = np.empty((T, N, N_CONT))
    rew = np.empty(T)
    lps = np.empty(T)
    bds = []
    for t in range(T):
        rng = stream(seed, episode, t, "policy")
        action, (x, a, u, lp) = agent.action(env, rng)
        _, r, bd, _ = env.step(action)
        states[t], acts[t], us[t], rew[t], lps[t] = x, a, u, r, lp
        nxt[t] = env.vector()
        bds.append(bd)
    term = np.zeros(T, dtype=bool)
    term[-1] = not agent.cfg.bootstrap_horizon
    vals = agent.critic.value(states)
    return Trajectory(states, acts, us, rew, nxt, lps, vals, term, agent.cfg.gamma), bds


def train(env: BFLEnv, episodes: int, T: int | None = None, cfg: TrpoConfig = TrpoConfig(),
          seed: int = 0, on_update: Callable | None = None, agent: Agent | None = None):
    """Run the actor-critic loop; returns ``(agent, rows)``.

    Each row holds ``episode, mean_reward, kl, surrogate, backtracks,
    critic_loss``. ``on_update(theta_old, theta_new, traj, adv, info)`` is
    called after every actor update.
    """
    if T is not None and T != env.cfg.T:
        from dataclasses import replace
        env = BFLEnv(env.sys, env.geo, replace(env.cfg, T=int(T)))
    agent = Agent(env, cfg, seed) if agent is None else agent
    rows = []
    for ep in range(int(episodes)):
        traj, _ = _rollout(env, agent, ep, seed)
        v_next = agent.critic.value(traj.next_states)
        adv = advantage(traj.rewards, cfg.gamma, traj.values, v_next, traj.terminal)
        adv_actor = adv
        if cfg.normalize_advantages and adv.size > 1:
            adv_actor = (adv - adv.mean()) / (adv.std() + 1e-8)
        theta_old = agent.theta
        theta_new, info = trpo_step(agent, traj, adv_actor)
        if on_update is not None:
            on_update(theta_old, theta_new, traj, adv_actor, info)
        agent.theta = theta_new
        if not np.all(np.isfinite(agent.theta)):
            raise FloatingPointError(f"non-finite actor parameters after episode {ep}")
        # critic: sequential TD(0) over the episode
        td_sq = 0.0
        critic = agent.critic
        for t in range(len(traj)):
            v = critic_value(critic, traj.states[t])
            vn = 0.0 if traj.terminal[t] else critic_value(critic, traj.next_states[t])
            delta = traj.rewards[t] + cfg.gamma * vn - v
            td_sq += delta * delta
            critic = critic_update(critic, delta, traj.states[t], cfg.critic_rate)
        agent.critic = critic
        if not np.all(np.isfinite(critic.params)):
            raise FloatingPointError(f"non-finite critic parameters after episode {ep}")
        rows.append({
            "episode": ep,
            "mean_reward": float(traj.rewards.mean()),
            "kl": info.kl,
            "surrogate": info.surrogate_after,
            "backtracks": info.steps if info.accepted else -1,
            "critic_loss": td_sq / len(traj),
        })
    return agent, rows


def evaluate_policy(env: BFLEnv, policy: str | Agent, episodes: int, seed: int = 0,
                    first_episode: int = 0, deterministic: bool = True) -> np.ndarray:
    """Mean reward per episode of ``'random'``, ``'greedy'`` or an agent."""
    out = np.empty(episodes)
    for i in range(episodes):
        ep = first_episode + i
        env.reset(ep)
        total = 0.0
        for t in range(env.cfg.T):
            rng = stream(seed, ep, t, "eval")
            if policy == "random":
                a = random_action(env, rng)
            elif policy == "greedy":
                a = greedy_action(env)
            else:
                a, _ = policy.action(env, rng, deterministic)
            total += env.step(a)[1]
        out[i] = total / env.cfg.T
    return out


def moving_average(x, window: int = 100) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = np.empty_like(x)
    for i in range(x.size):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


RL_COLUMNS = ["episode", "mean_reward", "kl", "surrogate", "backtracks", "critic_loss"]


def write_rl_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RL_COLUMNS)
        for r in rows:
            w.writerow([r["episode"]] + [repr(float(r[k])) if k != "backtracks" else r[k]
                                         for k in RL_COLUMNS[1:]])


# ---------------------------------------------------------------------------
# checkpoints: b"BFLCKPT\0" | u32 version | u32 header length | JSON header | f64 data

_MAGIC = b"BFLCKPT\0"
_VERSION = 1


def save_checkpoint(agent: Agent, path) -> None:
    blocks = [("actor", agent.theta), ("critic", agent.critic.params)]
    header = {
        "version": _VERSION,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(agent.cfg).items()},
        "policy": {"S": agent.policy.S, "N": agent.policy.N, "A": agent.policy.A,
                   "n_disc": agent.policy.n_disc, "n_cont": agent.policy.n_cont},
        "blocks": [{"name": n, "size": int(v.size)} for n, v in blocks],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(hb)) + hb)
        for _, v in blocks:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, {block name: array})``."""
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    off = 16 + hlen
    arrays = {}
    for b in header["blocks"]:
        arrays[b["name"]] = np.frombuffer(data, "<f8", b["size"], off).astype(float)
        off += 8 * b["size"]
    return header, arrays


def agent_from_checkpoint(env: BFLEnv, path) -> Agent:
    """Rebuild an :class:`Agent` for ``env`` from a checkpoint file."""
    header, arrays = load_checkpoint(path)
    conf = {k: tuple(v) if isinstance(v, list) else v for k, v in header["config"].items()}
    agent = Agent(env, TrpoConfig(**conf))
    pol = header["policy"]
    if (pol["S"], pol["N"], pol["A"]) != (agent.policy.S, agent.policy.N, agent.policy.A):
        raise ValueError(f"{path}: checkpoint shape {pol} does not fit this environment")
    if arrays["actor"].size != agent.theta.size or \
            arrays["critic"].size != agent.critic.params.size:
        raise ValueError(f"{path}: parameter counts do not match the configured networks")
    agent.theta = arrays["actor"]
    agent.critic = agent.critic.with_params(arrays["critic"])
    return agent
