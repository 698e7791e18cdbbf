"""INI scenario files: schema, unit conversion and validation.

Values are written in human units and converted to SI exactly once, here:

* ``MHz`` ×1e6, ``GHz`` ×1e9, ``GHash`` ×1e9, ``Mbit/s`` ×1e6
* ``KB`` → bits ×8e3, ``MB`` → bits ×8e6
* ``dBm`` → W: ``10^((x − 30)/10)``

Every problem in a file is reported at once, each with its ``section.key``
path. Unknown sections or keys are rejected with the closest valid name.
"""

from __future__ import annotations

import configparser
import difflib
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

__all__ = ["ConfigError", "ScenarioConfig", "parse_config", "parse_text", "bundled", "SCHEMA", "dbm_to_w",
           "default_text"]


def dbm_to_w(x: float) -> float:
    return 10.0 ** ((x - 30.0) / 10.0)


class ConfigError(ValueError):
    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("\n".join(f"{p}: {m}" for p, m in problems))


@dataclass(frozen=True)
class Field:
    kind: str                       # int | float | str | bool | ints | auto-float
    default: Any
    unit: str = ""
    scale: Callable[[float], float] | None = None
    check: str = ""                 # "pos" | "nonneg" | "prob" | choice list "a|b"
    doc: str = ""
    required: bool = False


_MHZ = lambda x: x * 1e6  # noqa: E731
_GHZ = lambda x: x * 1e9  # noqa: E731
_KB = lambda x: x * 8e3  # noqa: E731

SCHEMA: dict[str, dict[str, Field]] = {
    "run": {
        "N": Field("int", None, check="pos", doc="number of MDs", required=True),
        "M": Field("int", None, check="pos", doc="number of ESs", required=True),
        "G": Field("int", None, check="pos", doc="sub-channels per ES", required=True),
        "K": Field("int", None, check="pos", doc="global rounds", required=True),
        "seed": Field("int", 0, check="nonneg", doc="master seed"),
        "eta": Field("float", 0.05, check="nonneg", doc="global and local step size"),
        "scheme": Field("str", "consensus", check="consensus|no-consensus|isolated"),
        "policy": Field("str", "fixed", check="fixed|rl-agent|random|greedy"),
        "loss_threshold": Field("float", math.inf, doc="target global loss (reported only)"),
    },
    "dataset": {
        "source": Field("str", "synthetic", check="synthetic|csv"),
        "path": Field("str", "", doc="CSV file when source = csv"),
        "features": Field("int", 2, check="pos"),
        "classes": Field("int", 2, check="pos"),
        "per_class": Field("int", 150, check="pos"),
        "spread": Field("float", 1.0, check="nonneg", doc="cluster standard deviation"),
        "labels_per_node": Field("int", 1, check="pos"),
        "model": Field("str", "softmax-regression",
                       check="softmax-regression|one-hidden-layer-mlp|quadratic-test"),
        "hidden": Field("int", 8, check="pos"),
        "point_size": Field("float", 10.0, "KB", _KB, "pos", "storage per data point"),
        "md_epochs": Field("int", 2, check="pos"),
        "md_batch_ratio": Field("float", 0.5, check="prob"),
        "es_epochs": Field("int", 2, check="pos"),
        "es_batch_ratio": Field("float", 0.5, check="prob"),
    },
    "channel": {
        "W": Field("float", 20.0, "MHz", _MHZ, "pos", "sub-channel bandwidth cap"),
        "noise": Field("float", -100.0, "dBm", dbm_to_w, "", "noise power"),
        "P_max": Field("float", 20.0, "dBm", dbm_to_w, "", "MD transmit power cap"),
        "upload_bw": Field("float", 5.0, "MHz", _MHZ, "pos", "model-upload link bandwidth"),
        "es_rate": Field("float", 100.0, "Mbit/s", _MHZ, "pos", "ES backhaul rate"),
        "es_spacing": Field("float", 0.25, "km", None, "pos"),
        "md_radius": Field("float", 0.1, "km", None, "pos"),
        "geometry_seed": Field("int", 0, check="nonneg"),
    },
    "compute": {
        "cycles_md": Field("float", 0.9, "Gcycles/MB", _GHZ, "pos"),
        "cycles_es": Field("float", 0.9, "Gcycles/MB", _GHZ, "pos"),
        "F_max": Field("float", 2.0, "GHz", _GHZ, "pos", "MD CPU cap"),
        "F_min": Field("float", 0.2, "GHz", _GHZ, "pos", "lowest available MD CPU"),
        "f_es": Field("float", 5.0, "GHz", _GHZ, "pos"),
        "kappa": Field("float", 5e-27, check="pos", doc="effective capacitance"),
    },
    "mining": {
        "hbar": Field("float", 50.0, "GHash", _GHZ, "pos", "hashes per block"),
        "psi_max": Field("float", 1000.0, "GHash/s", _GHZ, "pos", "hash-rate cap"),
        "psi_min": Field("float", 100.0, "GHash/s", _GHZ, "pos", "hash-rate sampling floor"),
        "verify_coeff": Field("float", 5e-9, "s/bit", None, "pos"),
        "block_size": Field("float", 5.0, "KB", _KB, "pos"),
        "iota": Field("float", 1.0 / 600.0, check="pos"),
        "tx_count": Field("float", 1.0, check="pos"),
        "zeta_fork": Field("float", 3.0, check="pos"),
        "c_blk": Field("float", 60.0, check="pos"),
        "joules_per_hash": Field("float", 5e-8, "J/hash", None, "pos"),
        "E_max": Field("float", 2600.0, "J", None, "pos", "per-MD energy budget"),
    },
    "consensus": {
        "topology": Field("str", "complete", check="complete|ring|star|path"),
        "d": Field("auto-float", None, doc="edge weight, default 0.9/M"),
        "phi": Field("int", 5, check="nonneg", doc="P2P rounds"),
        "model_size": Field("float", 5.0, "KB", _KB, "pos"),
    },
    "drl": {
        "episodes": Field("int", 2000, check="nonneg"),
        "T": Field("int", 25, check="pos"),
        "eps_kl": Field("float", 0.01, check="pos"),
        "cg_iters": Field("int", 10, check="pos"),
        "cg_tol": Field("float", 1e-10, check="pos"),
        "damping": Field("float", 0.1, check="nonneg"),
        "hvp_eps": Field("float", 1e-5, check="pos"),
        "backtrack": Field("float", 0.5, check="prob"),
        "max_backtracks": Field("int", 10, check="pos"),
        "actor_rate": Field("float", 0.003, check="pos"),
        "critic_rate": Field("float", 0.02, check="pos"),
        "gamma": Field("float", 0.9, check="prob"),
        "critic": Field("str", "mlp", check="mlp|linear"),
        "tau": Field("auto-float", None, "s", None, "", "latency scale, default 3N"),
        "data_min": Field("float", 0.5, "MB", None, "pos"),
        "data_max": Field("float", 2.0, "MB", None, "pos"),
        "p_floor": Field("float", 10.0, "dBm", dbm_to_w, "", "power sampling floor"),
        "b_floor": Field("float", 1.0, "MHz", _MHZ, "pos", "bandwidth sampling floor"),
        "eval_episodes": Field("int", 10, check="nonneg"),
    },
    "attack": {
        "enabled": Field("bool", False),
        "es": Field("int", 0, check="nonneg"),
        "rounds": Field("ints", (20, 60)),
        "scale": Field("float", 1.0, check="nonneg"),
        "detect": Field("bool", False),
        "window": Field("int", 10, check="pos"),
        "z": Field("float", 3.0, check="pos"),
    },
}


def default_text() -> str:
    """The full schema as an INI file with every default filled in."""
    lines = []
    for sec, fields in SCHEMA.items():
        lines.append(f"[{sec}]")
        for k, f in fields.items():
            v = f.default
            if v is None:
                v = "auto" if f.kind == "auto-float" else ""
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            note = "; ".join(x for x in (f.unit, f.doc) if x)
            lines.append(f"{k} = {v}" + (f"  ; {note}" if note else ""))
        lines.append("")
    return "\n".join(lines)


class ScenarioConfig:
    """Validated configuration. ``raw[section][key]`` holds values as written,
    ``si[section][key]`` the converted ones."""

    def __init__(self, raw: dict, si: dict, text: str, path: str | None = None):
        self.raw = raw
        self.si = si
        self.text = text
        self.path = path

    def __getitem__(self, item):
        return self.si[item]

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def with_overrides(self, overrides: dict[str, str]) -> "ScenarioConfig":
        """Re-parse with ``{'section.key': text}`` substitutions."""
        cp = _reader()
        cp.read_string(self.text)
        for path, value in overrides.items():
            sec, key = path.split(".", 1)
            if not cp.has_section(sec):
                cp.add_section(sec)
            cp.set(sec, key, str(value))
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in cp.items(sec))
            lines.append("")
        return parse_text("\n".join(lines), self.path)

    # -- builders --------------------------------------------------------
    def system(self):
        from bflsim.consensus import Topology
        from bflsim.latency import ChannelModel, ComputeModel, MiningModel, SystemModel

        r, c, cp, mn, cs, ds = (self.si[s] for s in
                                ("run", "channel", "compute", "mining", "consensus", "dataset"))
        M = r["M"]
        topo = Topology.named(cs["topology"], M)
        return SystemModel(
            r["N"], M, r["G"],
            channel=ChannelModel(c["W"], c["noise"], c["P_max"], c["upload_bw"], c["es_rate"]),
            compute=ComputeModel(cp["cycles_md"], cp["cycles_es"], cp["F_max"], cp["f_es"],
                                 cp["kappa"], ds["md_batch_ratio"], ds["md_epochs"],
                                 ds["es_batch_ratio"], ds["es_epochs"]),
            mining=MiningModel(mn["hbar"], mn["psi_max"], mn["verify_coeff"], mn["block_size"],
                               mn["iota"], mn["tx_count"], mn["zeta_fork"], mn["c_blk"],
                               mn["joules_per_hash"]),
            model_bits=cs["model_size"], phi=cs["phi"], adjacency=topo.adjacency(),
            E_max=mn["E_max"],
        )

    def geometry(self):
        from bflsim.env import Geometry

        r, c = self.si["run"], self.si["channel"]
        return Geometry.clustered(r["N"], r["M"], c["es_spacing"], c["md_radius"],
                                  c["geometry_seed"])

    def env_config(self, seed: int | None = None):
        from bflsim.env import EnvConfig

        d, r, cp, mn = self.si["drl"], self.si["run"], self.si["compute"], self.si["mining"]
        return EnvConfig(d["tau"], d["gamma"], d["T"], r["loss_threshold"],
                         (d["data_min"], d["data_max"]), (cp["F_min"], cp["F_max"]),
                         d["p_floor"], d["b_floor"], mn["psi_min"],
                         r["seed"] if seed is None else seed)

    def env(self, seed: int | None = None):
        from bflsim.env import BFLEnv

        return BFLEnv(self.system(), self.geometry(), self.env_config(seed))

    def trpo(self):
        from bflsim.drl import TrpoConfig

        d = self.si["drl"]
        return TrpoConfig(d["eps_kl"], d["cg_iters"], d["cg_tol"], d["damping"], d["hvp_eps"],
                          d["backtrack"], d["max_backtracks"], d["actor_rate"],
                          d["critic_rate"], d["gamma"], critic=d["critic"])

    def round_options(self):
        from bflsim.bfl import RoundOptions
        from bflsim.chain import AttackSpec

        a, r = self.si["attack"], self.si["run"]
        spec = AttackSpec(a["es"], a["rounds"], a["scale"], r["seed"]) if a["enabled"] else None
        return RoundOptions(r["scheme"], spec, a["detect"], a["window"], a["z"])

    def scenario(self, seed: int | None = None):
        from bflsim.bfl import Scenario
        from bflsim.consensus import Topology
        from bflsim.fl_core import (TrainerConfig, load_dataset, make_model,
                                    make_synthetic_dataset, partition_noniid, train_test_split)

        r, ds, cs = self.si["run"], self.si["dataset"], self.si["consensus"]
        seed = r["seed"] if seed is None else seed
        if ds["source"] == "csv":
            p = Path(ds["path"])
            if not p.is_absolute() and self.path:
                p = Path(self.path).parent / p
            full = load_dataset(p, ds["classes"])
        else:
            full = make_synthetic_dataset(ds["features"], ds["classes"], ds["per_class"],
                                          ds["spread"], seed)
        train, test = train_test_split(full, 0.2, seed)
        shards = partition_noniid(train, r["N"], ds["labels_per_node"], seed)
        model = make_model(ds["model"], full.n_features, full.n_classes, ds["hidden"])
        return Scenario(
            model, tuple(shards), test, r["M"], r["G"], Topology.named(cs["topology"], r["M"]),
            d=cs["d"], phi=cs["phi"], eta=r["eta"],
            md_cfg=TrainerConfig(ds["md_epochs"], ds["md_batch_ratio"], r["eta"], seed),
            es_cfg=TrainerConfig(ds["es_epochs"], ds["es_batch_ratio"], r["eta"], seed),
            sys=self.system(), geometry=self.geometry(), env_cfg=self.env_config(seed),
            bits_per_point=ds["point_size"], options=self.round_options(),
        )


def _reader() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    cp.optionxform = str  # keys are case-sensitive (W, P_max, ...)
    return cp


def _convert(f: Field, text: str):
    t = text.strip()
    if f.kind == "int":
        v = float(t)
        if not v.is_integer():
            raise ValueError(f"expected an integer, got {t!r}")
        return int(v)
    if f.kind == "float":
        return float(t)
    if f.kind == "auto-float":
        return None if t.lower() in ("", "auto") else float(t)
    if f.kind == "bool":
        low = t.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected true/false, got {t!r}")
    if f.kind == "ints":
        return tuple(int(x) for x in t.split(",") if x.strip())
    return t


def _check(f: Field, v) -> str | None:
    if v is None:
        return None
    if f.check == "pos" and not v > 0:
        return f"must be positive, got {v}"
    if f.check == "nonneg" and not v >= 0:
        return f"must be non-negative, got {v}"
    if f.check == "prob" and not 0 < v <= 1:
        return f"must lie in (0, 1], got {v}"
    if "|" in f.check and v not in f.check.split("|"):
        return f"must be one of {f.check.split('|')}, got {v!r}"
    if isinstance(v, float) and math.isnan(v):
        return "must not be NaN"
    return None


def _suggest(name: str, options) -> str:
    close = difflib.get_close_matches(name, list(options), n=1, cutoff=0.5)
    return f" (did you mean {close[0]!r}?)" if close else ""


def parse_text(text: str, path: str | None = None) -> ScenarioConfig:
    cp = _reader()
    problems: list[tuple[str, str]] = []
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError([(path or "<config>", f"unreadable INI: {e}")]) from None
    raw: dict = {s: {} for s in SCHEMA}
    si: dict = {s: {} for s in SCHEMA}
    for sec in cp.sections():
        if sec not in SCHEMA:
            problems.append((sec, "unknown section" + _suggest(sec, SCHEMA)))
            continue
        for key, val in cp.items(sec):
            if key not in SCHEMA[sec]:
                problems.append((f"{sec}.{key}", "unknown key" + _suggest(key, SCHEMA[sec])))
                continue
            raw[sec][key] = val
    for sec, fields in SCHEMA.items():
        for key, f in fields.items():
            p = f"{sec}.{key}"
            if key in raw[sec]:
                try:
                    v = _convert(f, raw[sec][key])
                except ValueError as e:
                    problems.append((p, str(e)))
                    continue
            elif f.required:
                problems.append((p, "missing required field"))
                continue
            else:
                v = f.default
            msg = _check(f, v)
            if msg:
                problems.append((p, msg))
                continue
            si[sec][key] = f.scale(v) if (f.scale is not None and v is not None) else v
    if not problems:
        r = si["run"]
        d = si["consensus"]["d"]
        if d is not None and not 0 < d < 1.0 / r["M"]:
            problems.append(("consensus.d", f"must lie in (0, 1/M) = (0, {1.0 / r['M']}), got {d}"))
        dr = si["drl"]
        if dr["data_min"] > dr["data_max"]:
            problems.append(("drl.data_min", "must not exceed drl.data_max"))
        if si["compute"]["F_min"] > si["compute"]["F_max"]:
            problems.append(("compute.F_min", "must not exceed compute.F_max"))
        if si["attack"]["es"] >= r["M"]:
            problems.append(("attack.es", f"must be below M={r['M']}"))
        if si["dataset"]["source"] == "csv" and not si["dataset"]["path"]:
            problems.append(("dataset.path", "missing required field for source = csv"))
        if si["mining"]["E_max"] <= si["mining"]["joules_per_hash"] * si["mining"]["hbar"]:
            problems.append(("mining.E_max", "must exceed the mining energy joules_per_hash·hbar"))
        if dr["tau"] is not None and dr["tau"] <= 0:
            problems.append(("drl.tau", "must be positive"))
    if problems:
        raise ConfigError(problems)
    return ScenarioConfig(raw, si, text, path)


def parse_config(path) -> ScenarioConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError([(str(path), f"cannot read: {e.strerror}")]) from None
    return parse_text(text, str(p))


def bundled(name: str = "desk.cfg") -> Path:
    return Path(__file__).parent / "fixtures" / name

