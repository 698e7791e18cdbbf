"""Command-line entry point.

Every subcommand writes its data files plus ``manifest.json`` into ``--out``.
Data files depend only on the configuration and seed; timestamps and the
code version live in the manifest alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from bflsim import __version__
from bflsim.config import ConfigError, ScenarioConfig, parse_config

__all__ = ["main", "run", "SUBCOMMANDS", "latency_fixture"]

SUBCOMMANDS = ("fl-train", "rl-train", "sweep", "attack", "analyze", "latency-table")

SWEEP_ALIASES = {
    "phi": "consensus.phi",
    "N": "run.N",
    "md-count": "run.N",
    "power": "channel.P_max",
    "bandwidth": "channel.W",
    "hash": "mining.psi_max",
}

SCHEMAS = """\
output files (CSV, comma-separated, one header row):
  fl-train   rounds.csv       round,global_loss,test_acc,T_learn,T_cons,T_mine,U,leader
             consensus.csv    round,node,err_norm   (round written as k:l, l = P2P step)
             ledger.jsonl     one block per line
             records.jsonl    per-round export consumed by analyze
  rl-train   rl.csv           episode,mean_reward,kl,surrogate,backtracks,critic_loss
             episodes.csv     episode,t,reward,T_learn,T_cons,T_mine,violations
             agent.ckpt       binary checkpoint (actor and critic parameters)
  sweep      <param>=<value>/ one fl-train directory per value, plus sweep.csv
             sweep.csv        param,value,final_loss,T_learn,T_cons,T_mine,U
  attack     undefended/ and defended/ fl-train directories, plus attack.csv
             attack.csv       defense,attack_round,pre_loss,peak_loss,spike,recovery_rounds
  analyze    constants.json, bound_terms.csv
             bound_terms.csv  k,leading,a,b,c,d,e,total,measured_grad_sq
  latency-table latency.csv   quantity,md,value
every run also writes manifest.json (config hash, seed, git describe, wall time).
environment: BFLSIM_THREADS caps sweep parallelism; BFLSIM_KERNELS=python
forces the numpy kernels.
"""


# ---------------------------------------------------------------------------
# helpers


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=10, cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _write_manifest(out: Path, cfg: ScenarioConfig, subcommand: str, seed: int,
                    started: float, files: list[str], extra: dict | None = None) -> None:
    from bflsim import _kernels

    man = {
        "subcommand": subcommand,
        "config_path": cfg.path,
        "config_sha256": cfg.digest,
        "seed": seed,
        "git_describe": _git_describe(),
        "package_version": __version__,
        "kernel_backend": _kernels.BACKEND,
        "wall_time_s": round(time.time() - started, 3),
        "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "files": sorted(files),
    }
    if extra:
        man.update(extra)
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def _threads() -> int:
    try:
        n = int(os.environ.get("BFLSIM_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _records_jsonl(records, targets, path: Path) -> None:
    with open(path, "w") as fh:
        for r, t in zip(records, targets):
            fh.write(json.dumps({
                "k": r.k, "loss": r.loss, "grad_sq": r.grad_sq, "leader": r.leader,
                "target": [int(x) for x in t], "w_before": r.w_before.tolist(),
                "w_after": r.w_after.tolist(), "es_aggregates": r.es_aggregates.tolist(),
                "trained_counts": r.trained_counts.tolist(),
            }, sort_keys=True) + "\n")


def _read_records(path: Path):
    from types import SimpleNamespace

    recs, targets = [], []
    for line in path.read_text().splitlines():
        d = json.loads(line)
        recs.append(SimpleNamespace(
            k=d["k"], loss=d["loss"], grad_sq=d["grad_sq"], leader=d["leader"],
            w_before=np.array(d["w_before"]), w_after=np.array(d["w_after"]),
            es_aggregates=np.array(d["es_aggregates"]),
            trained_counts=np.array(d["trained_counts"])))
        targets.append(d["target"])
    return recs, targets


# ---------------------------------------------------------------------------
# subcommands


def _fl_train(cfg: ScenarioConfig, out: Path, seed: int, checkpoint=None) -> list[str]:
    from bflsim import bfl
    from bflsim.chain import Ledger
    from bflsim.consensus import ConsensusRun, write_trace_csv

    sc = cfg.scenario(seed)
    policy = cfg["run"]["policy"]
    agent = None
    if policy == "rl-agent":
        if checkpoint is None:
            raise ValueError("policy rl-agent needs --checkpoint")
        from bflsim.drl import agent_from_checkpoint
        agent = agent_from_checkpoint(sc.env(seed), checkpoint)
    ledger = Ledger()
    targets: list = []
    records = bfl.run_training(cfg["run"]["K"], sc, policy, seed, agent=agent, ledger=ledger,
                               targets_out=targets)
    out.mkdir(parents=True, exist_ok=True)
    bfl.write_round_csv(records, out / "rounds.csv")
    write_trace_csv([ConsensusRun(r.consensus_states, r.consensus_trace.shape[0] - 1,
                                  np.zeros(0), r.consensus_trace) for r in records],
                    out / "consensus.csv")
    ledger.export_jsonl(out / "ledger.jsonl")
    _records_jsonl(records, targets, out / "records.jsonl")
    return ["rounds.csv", "consensus.csv", "ledger.jsonl", "records.jsonl"]


def _rl_train(cfg: ScenarioConfig, out: Path, seed: int) -> list[str]:
    from bflsim import drl
    from bflsim.env import check_action
    from bflsim.rng import stream

    env = cfg.env(seed)
    d = cfg["drl"]
    agent, rows = drl.train(env, d["episodes"], cfg=cfg.trpo(), seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    drl.write_rl_csv(rows, out / "rl.csv")
    drl.save_checkpoint(agent, out / "agent.ckpt")
    with open(out / "episodes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "t", "reward", "T_learn", "T_cons", "T_mine", "violations"])
        for i in range(d["eval_episodes"]):
            ep = d["episodes"] + i
            env.reset(ep)
            for t in range(env.cfg.T):
                action, _ = agent.action(env, stream(seed, ep, t, "eval"), True)
                bad = check_action(action, env.sys, env.caps(), env.state.data_bits, env.gains)
                _, r, bd, _ = env.step(action)
                w.writerow([ep, t, repr(r), repr(bd.T_learn), repr(bd.T_cons), repr(bd.T_mine),
                            len(bad)])
    return ["rl.csv", "agent.ckpt", "episodes.csv"]


def _sweep_point(args):
    text, path, overrides, out, seed = args
    from bflsim.config import parse_text

    cfg = parse_text(text, path).with_overrides(overrides)
    _fl_train(cfg, Path(out), seed)
    rows = list(csv.DictReader(open(Path(out) / "rounds.csv")))
    last = rows[-1]
    return [last["global_loss"], last["T_learn"], last["T_cons"], last["T_mine"], last["U"]]


def _sweep(cfg: ScenarioConfig, out: Path, seed: int, param: str, values: list[str]) -> list[str]:
    key = SWEEP_ALIASES.get(param, param)
    if "." not in key:
        raise ValueError(f"unknown sweep parameter {param!r}; use one of "
                         f"{sorted(SWEEP_ALIASES)} or section.key")
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.text, cfg.path, {key: v}, str(out / f"{param}={v}"), seed) for v in values]
    for v in values:  # validate every point before launching any work
        cfg.with_overrides({key: v})
    n = min(_threads(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as ex:
            results = list(ex.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "value", "final_loss", "T_learn", "T_cons", "T_mine", "U"])
        for v, r in zip(values, results):
            w.writerow([param, v] + r)
    return ["sweep.csv"] + [f"{param}={v}" for v in values]


def _attack(cfg: ScenarioConfig, out: Path, seed: int) -> list[str]:
    a = cfg["attack"]
    files = []
    losses = {}
    for name, detect in (("undefended", False), ("defended", True)):
        c = cfg.with_overrides({"attack.enabled": "true", "attack.detect": str(detect).lower()})
        _fl_train(c, out / name, seed)
        files.append(name)
        rows = list(csv.DictReader(open(out / name / "rounds.csv")))
        losses[name] = np.array([float(r["global_loss"]) for r in rows])
    with open(out / "attack.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["defense", "attack_round", "pre_loss", "peak_loss", "spike",
                    "recovery_rounds"])
        for name, L in losses.items():
            for k in a["rounds"]:
                if not 1 <= k < L.size:
                    continue
                s = attack_summary(L, k)
                w.writerow([name, k, repr(s["pre"]), repr(s["peak"]), repr(s["spike"]),
                            s["recovery"]])
    return files + ["attack.csv"]


def attack_summary(losses, k: int, horizon: int = 5, tol: float = 0.10) -> dict:
    """Loss before round ``k``, the peak over rounds ``k..k+horizon−1``, their
    ratio, and the first offset at which the loss is back within ``tol`` of the
    pre-attack value (``-1`` if it never is within the horizon)."""
    L = np.asarray(losses, dtype=float)
    pre = float(L[k - 1])
    window = L[k:k + horizon]
    rec = -1
    for i, x in enumerate(window):
        if x <= pre * (1 + tol):
            rec = i
            break
    peak = float(window.max())
    return {"pre": pre, "peak": peak, "spike": peak / pre, "recovery": rec}


def _analyze(cfg: ScenarioConfig, out: Path, seed: int, run_dir=None) -> list[str]:
    from bflsim import analysis

    sc = cfg.scenario(seed)
    if run_dir is None:
        run_dir = out / "run"
        _fl_train(cfg, run_dir, seed)
    records, targets = _read_records(Path(run_dir) / "records.jsonl")
    if cfg["run"]["scheme"] == "isolated":
        raise ValueError("analyze needs a run with a shared global model")
    const, stats = analysis.collect_run_stats(sc, records, targets, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_constants_json(const, out / "constants.json")
    analysis.write_bound_csv(const, stats, out / "bound_terms.csv")
    return ["constants.json", "bound_terms.csv"]


def latency_fixture(cfg: ScenarioConfig):
    """Deterministic round: mean channel gains (no fading), 1 MB per MD, even
    MDs offload to their home ES on the lowest free sub-channel, every
    parameter at its cap."""
    from bflsim.env import mean_gains
    from bflsim.latency import evaluate

    sys_ = cfg.system()
    N, M, G = sys_.N, sys_.M, sys_.G
    gains = mean_gains(cfg.geometry(), G)
    free = [0] * M
    target = np.zeros(N, dtype=np.int64)
    for n in range(0, N, 2):
        m = int(sys_.home[n])
        if free[m] < G:
            target[n] = 1 + m * G + free[m]
            free[m] += 1
    ch, cp, mn = sys_.channel, sys_.compute, sys_.mining
    data = np.full(N, 8e6)
    return evaluate(sys_, gains, data, target, ch.P_max, np.full(N, ch.W), cp.F_max,
                    mn.psi_max)


def _latency_table(cfg: ScenarioConfig, out: Path, seed: int) -> list[str]:
    bd = latency_fixture(cfg)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "latency.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "md", "value"])
        for k, v in bd.to_dict().items():
            if isinstance(v, list):
                for n, x in enumerate(v):
                    w.writerow([k, n, repr(float(x))])
            else:
                w.writerow([k, "", repr(float(v))])
    return ["latency.csv"]


def run(subcommand: str, config: ScenarioConfig | str | Path, out_dir, seed: int | None = None,
        param: str | None = None, values: list[str] | None = None, run_dir=None,
        checkpoint=None) -> int:
    """Execute a subcommand; returns the process exit code."""
    if subcommand not in SUBCOMMANDS:
        print(f"unknown subcommand {subcommand!r}; choose from {', '.join(SUBCOMMANDS)}",
              file=sys.stderr)
        return 2
    started = time.time()
    try:
        cfg = config if isinstance(config, ScenarioConfig) else parse_config(config)
        if seed is not None:
            cfg = cfg.with_overrides({"run.seed": str(seed)})
        seed = cfg["run"]["seed"]
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if subcommand == "fl-train":
            files = _fl_train(cfg, out, seed, checkpoint)
        elif subcommand == "rl-train":
            files = _rl_train(cfg, out, seed)
        elif subcommand == "sweep":
            if not param or not values:
                raise ValueError("sweep needs --param and --values")
            files = _sweep(cfg, out, seed, param, values)
        elif subcommand == "attack":
            files = _attack(cfg, out, seed)
        elif subcommand == "analyze":
            files = _analyze(cfg, out, seed, run_dir)
        else:
            files = _latency_table(cfg, out, seed)
        _write_manifest(out, cfg, subcommand, seed, started, files)
    except ConfigError as e:
        print(f"configuration error:\n{e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001  (reported, not swallowed)
        print(f"{subcommand} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bflsim", description="Blockchain federated learning "
                                "simulator with offloading and resource allocation.",
                                epilog=SCHEMAS, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="subcommand", metavar="subcommand")
    sub.required = True
    helps = {
        "fl-train": "run the federated training loop",
        "rl-train": "train the offloading/allocation agent",
        "sweep": "repeat fl-train over values of one parameter",
        "attack": "poisoning experiment with and without detection",
        "analyze": "estimate the analysis constants and evaluate the bound",
        "latency-table": "latency/energy breakdown of the fixed reference round",
    }
    for name in SUBCOMMANDS:
        s = sub.add_parser(name, help=helps[name], epilog=SCHEMAS,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        s.add_argument("--config", required=True, help="INI scenario file")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, default=None, help="override run.seed")
        if name == "sweep":
            s.add_argument("--param", required=True,
                           help=f"one of {sorted(SWEEP_ALIASES)} or section.key")
            s.add_argument("--values", required=True, help="comma-separated values")
        if name == "analyze":
            s.add_argument("--run", default=None, help="fl-train output to analyze")
        if name == "fl-train":
            s.add_argument("--checkpoint", default=None, help="agent for policy rl-agent")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    values = [v.strip() for v in args.values.split(",")] if getattr(args, "values", None) else None
    return run(args.subcommand, args.config, args.out, args.seed,
               getattr(args, "param", None), values, getattr(args, "run", None),
               getattr(args, "checkpoint", None))


if __name__ == "__main__":
    sys.exit(main())
