import math

import numpy as np
import pytest

from bflsim.chain import (ZERO_DIGEST, AttackSpec, Ledger, block_digest, decode_vector,
                          detect_poison, encode_vector, make_block, mine_race, poison_model,
                          verify_chain)
from bflsim.latency import MiningModel, SystemModel


def _chain(n=5):
    led = Ledger()
    for i in range(n):
        led.append(make_block(np.arange(3.0) + i, led, miner=i % 2))
    return led


def test_digest_is_deterministic_and_sensitive():
    a = block_digest(0, ZERO_DIGEST, b"payload", "global-model", 1, 0)
    assert a == block_digest(0, ZERO_DIGEST, b"payload", "global-model", 1, 0)
    assert a != block_digest(0, ZERO_DIGEST, b"paylaad", "global-model", 1, 0)


def test_genesis_block():
    b = make_block(np.zeros(2), Ledger(), miner=0)
    assert b.index == 0 and b.prev_digest == bytes(32)


def test_vector_roundtrip():
    v = np.random.default_rng(0).standard_normal(7)
    assert np.array_equal(decode_vector(encode_vector(v)), v)


def test_verify_chain():
    led = _chain()
    assert verify_chain(led) and verify_chain(Ledger())
    blk = led.blocks[2]
    tampered = bytearray(blk.payload)
    tampered[0] ^= 1
    led.blocks[2] = type(blk)(blk.index, blk.prev_digest, bytes(tampered), blk.role,
                              blk.tx_count, blk.miner, blk.digest)
    assert not verify_chain(led)


def test_mine_race_examples():
    sys = SystemModel(2, 1, 1, mining=MiningModel(hbar=50e9))
    winner, t = mine_race([100e9, 200e9], sys)
    assert winner == 1
    mn = sys.mining
    prop = mn.verify_coeff * mn.block_bits * 2
    assert t == pytest.approx(mn.zeta_fork * (0.25 + prop))
    assert mine_race([0.0, 5e9], sys)[0] == 1
    assert mine_race([1e11, 1e11], sys)[0] == 0
    with pytest.raises(ValueError):
        mine_race([0.0, 0.0], sys)


def test_poison_model():
    w = np.arange(4.0)
    assert np.array_equal(poison_model(w, 0.0, 3), w)
    assert np.array_equal(poison_model(w, 2.0, 3), poison_model(w, 2.0, 3))
    d = 16
    norms = np.array([np.linalg.norm(poison_model(np.zeros(d), 1.0, s)) for s in range(10_000)])
    # mean of a chi distribution with d degrees of freedom
    mu = math.sqrt(2) * math.exp(math.lgamma((d + 1) / 2) - math.lgamma(d / 2))
    se = norms.std() / math.sqrt(norms.size)
    assert abs(norms.mean() - mu) <= 3 * se
    assert abs(mu - math.sqrt(d)) < 0.05 * math.sqrt(d)
    with pytest.raises(ValueError):
        AttackSpec(scale=-1)


def test_detect_poison_examples():
    assert detect_poison([[2.0] * 8 + [2.0]]) == set()
    hist = [0.0, 2.0] * 5 + [10.0]  # mean 1, std 1, z = 9
    assert detect_poison([hist], window=10, z_threshold=3.0) == {0}
    assert detect_poison([[1.0, 50.0]]) == set()  # warm-up


def test_ledger_export(tmp_path):
    led = _chain(3)
    led.export_jsonl(tmp_path / "l.jsonl")
    assert len((tmp_path / "l.jsonl").read_text().splitlines()) == 3
