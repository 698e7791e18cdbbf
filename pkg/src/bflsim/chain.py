"""A simulated ledger of model blocks, the mining race and poisoning checks.

Block digest layout (all integers little-endian)::

    u64 index | 32 bytes prev_digest | u32 len(role) | role (utf-8)
    | u64 len(payload) | payload | u64 tx_count | i64 miner

hashed with SHA-256. Vector payloads are ``u64 length`` followed by that many
float64 values.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from bflsim.latency import mine_latency
from bflsim.rng import stream

__all__ = [
    "ZERO_DIGEST",
    "Block",
    "Ledger",
    "AttackSpec",
    "encode_vector",
    "decode_vector",
    "block_digest",
    "make_block",
    "mine_race",
    "verify_chain",
    "poison_model",
    "detect_poison",
]

ZERO_DIGEST = bytes(32)


def encode_vector(v) -> bytes:
    a = np.ascontiguousarray(v, dtype="<f8")
    return struct.pack("<Q", a.size) + a.tobytes()


def decode_vector(data: bytes) -> np.ndarray:
    (n,) = struct.unpack_from("<Q", data)
    return np.frombuffer(data, dtype="<f8", count=n, offset=8).astype(float)


def block_digest(index: int, prev_digest: bytes, payload: bytes, role: str,
                 tx_count: int, miner: int) -> bytes:
    r = role.encode("utf-8")
    buf = b"".join([
        struct.pack("<Q", index), prev_digest, struct.pack("<I", len(r)), r,
        struct.pack("<Q", len(payload)), payload,
        struct.pack("<Q", tx_count), struct.pack("<q", miner),
    ])
    return hashlib.sha256(buf).digest()


@dataclass(frozen=True)
class Block:
    index: int
    prev_digest: bytes
    payload: bytes
    role: str
    tx_count: int
    miner: int
    digest: bytes

    def recompute(self) -> bytes:
        return block_digest(self.index, self.prev_digest, self.payload, self.role,
                            self.tx_count, self.miner)

    def vector(self) -> np.ndarray:
        return decode_vector(self.payload)

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "prev_digest": self.prev_digest.hex(),
            "digest": self.digest.hex(),
            "role": self.role,
            "tx_count": self.tx_count,
            "miner": self.miner,
            "payload_bytes": len(self.payload),
            "payload": self.payload.hex(),
        }


@dataclass
class Ledger:
    blocks: list[Block] = field(default_factory=list)
    winner_latency: list[float] = field(default_factory=list)
    es_latency: list[np.ndarray] = field(default_factory=list)
    update_norms: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def head(self) -> Block | None:
        return self.blocks[-1] if self.blocks else None

    def append(self, block: Block) -> None:
        prev = self.head.digest if self.blocks else ZERO_DIGEST
        if block.prev_digest != prev or block.index != len(self.blocks):
            raise ValueError("block does not extend the current head")
        self.blocks.append(block)

    def last_es_latency(self) -> np.ndarray | None:
        return self.es_latency[-1] if self.es_latency else None

    def norm_history(self, m: int) -> list[float]:
        return [float(row[m]) for row in self.update_norms]

    def export_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for b in self.blocks:
                fh.write(json.dumps(b.to_json(), sort_keys=True) + "\n")


@dataclass(frozen=True)
class AttackSpec:
    es: int = 0
    rounds: tuple[int, ...] = (20, 60)
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("attack scale must be non-negative")
        object.__setattr__(self, "rounds", tuple(int(r) for r in self.rounds))


def make_block(payload, prev: Ledger, miner: int, tx_count: int = 1,
               role: str = "global-model") -> Block:
    """Build the next block on ``prev``. ``payload`` is bytes or a vector."""
    data = payload if isinstance(payload, (bytes, bytearray)) else encode_vector(payload)
    data = bytes(data)
    index = len(prev.blocks)
    prev_digest = prev.head.digest if prev.blocks else ZERO_DIGEST
    digest = block_digest(index, prev_digest, data, role, int(tx_count), int(miner))
    return Block(index, prev_digest, data, role, int(tx_count), int(miner), digest)


def mine_race(psi: Sequence[float], ctx) -> tuple[int, float]:
    """Return ``(winner, T_mine)``: the MD with the smallest mining latency.

    ``ctx`` is a :class:`~bflsim.latency.SystemModel`; MDs with ``Ψ ≤ 0`` sit
    the race out. Ties go to the lowest index.
    """
    mn = ctx.mining
    best, best_t = -1, float("inf")
    for n, h in enumerate(psi):
        if h <= 0:
            continue
        t = mine_latency(mn.hbar, h, mn.verify_coeff, mn.block_bits, ctx.M, ctx.N,
                         mn.iota, mn.tx_count[n], mn.zeta_fork, mn.c_blk).T_mine
        if t < best_t:
            best, best_t = n, t
    if best < 0:
        raise ValueError("no eligible miner (all hash allocations are zero)")
    return best, best_t


def verify_chain(ledger: Ledger) -> bool:
    prev = ZERO_DIGEST
    for i, b in enumerate(ledger.blocks):
        if b.index != i or b.prev_digest != prev or b.recompute() != b.digest:
            return False
        prev = b.digest
    return True


def poison_model(w, scale: float, seed: int) -> np.ndarray:
    """``w − ϖ·q`` with ``q`` standard normal, drawn from the attack stream."""
    if scale < 0:
        raise ValueError("attack scale must be non-negative")
    w = np.asarray(w, dtype=float)
    q = stream(seed, 0, 0, "poison").standard_normal(w.shape)
    return w - scale * q


def detect_poison(update_norm_history: Sequence[Sequence[float]], window: int = 10,
                  z_threshold: float = 3.0) -> set[int]:
    """Flag ESs whose latest update norm is anomalously large.

    Each entry of ``update_norm_history`` is one ES's norms, oldest first, the
    last being the current round. The current value is compared with the
    mean and standard deviation of up to ``window`` preceding values; fewer
    than two prior values means warm-up, no flag.
    """
    flagged = set()
    for m, hist in enumerate(update_norm_history):
        hist = [float(x) for x in hist]
        if len(hist) < 3:
            continue
        prior = np.array(hist[-1 - window:-1])
        if prior.size < 2:
            continue
        mu, sd = prior.mean(), prior.std()
        if hist[-1] > mu + z_threshold * sd and hist[-1] > mu * (1 + 1e-9):
            flagged.add(m)
    return flagged
