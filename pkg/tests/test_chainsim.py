"""Mempool, replacement, block building, fee spikes and pinning."""

import json

from hypothesis import given, settings, strategies as st

from covault import crypto, txmodel
from covault.chainsim import Chain, ChainConfig, key_script
from covault.txmodel import A1CP_ALL, ALL, Transaction, TxInput, TxOutput

ALICE = crypto.keypair_from_label("chain/alice")
MALLORY = crypto.keypair_from_label("chain/mallory")
SEQ_RBF = 0xFFFFFFFD


def spend(chain, ops, kp, amounts, seq=SEQ_RBF, flag=ALL, annex=None, version=2):
    ins = tuple(TxInput(op[0], op[1], seq) for op in ops)
    outs = tuple(TxOutput(a, key_script(kp.pub)) for a in amounts)
    tx = Transaction(version, ins, outs)
    prevouts = [chain.output(op) for op in ops]
    for i in range(len(ins)):
        sig = txmodel.sign_input(tx, i, kp.priv, "segwit_v0", flag, prevouts)
        tx = tx.with_witness(i, (sig,) if annex is None else (sig, annex))
    return tx


def funded(amount=100_000, n=1):
    chain = Chain()
    return chain, [chain.fund(key_script(ALICE.pub), amount) for _ in range(n)]


# submit

def test_double_spend_rejected():
    chain, (op,) = funded()
    assert chain.submit(spend(chain, [op], ALICE, [90_000]))
    res = chain.submit(spend(chain, [op], ALICE, [80_000]))
    assert not res and res.reason == "DoubleSpend"


def test_child_of_mempool_parent_accepted():
    chain, (op,) = funded()
    parent = spend(chain, [op], ALICE, [90_000])
    assert chain.submit(parent)
    child = spend(chain, [(parent.txid, 0)], ALICE, [80_000])
    assert chain.submit(child)
    block = chain.mine_block()
    assert [t.txid for t in block.txs] == [parent.txid, child.txid]


def test_relative_lock_boundary():
    chain, (op,) = funded()
    tx = spend(chain, [op], ALICE, [90_000], seq=3)
    res = chain.submit(tx)
    assert not res and res.reason == "PrematureLock"
    chain.mine(1)
    assert chain.submit(tx).reason == "PrematureLock"
    chain.mine(1)
    assert chain.submit(tx)


def test_bad_witness_and_fee_floor():
    chain, (op,) = funded()
    tx = spend(chain, [op], ALICE, [90_000])
    forged = tx.with_witness(0, (bytes(65),))
    assert chain.submit(forged).reason == "BadWitness"
    greedy = spend(chain, [op], ALICE, [100_000])
    assert chain.submit(greedy).reason == "FeeTooLow"


def test_missing_inputs():
    chain = Chain()
    tx = Transaction(2, (TxInput(b"\x01" * 32, 0, SEQ_RBF),), (TxOutput(1, b"\x00"),), ((b"",),))
    assert chain.submit(tx).reason == "MissingInputs"


# replacement

def test_replacement_rules():
    chain, (op,) = funded()
    assert chain.submit(spend(chain, [op], ALICE, [90_000]))
    assert chain.replace(spend(chain, [op], ALICE, [89_000]))
    assert chain.replace(spend(chain, [op], ALICE, [89_000])).reason in ("Duplicate", "FeeNotHigher")
    same_fee = spend(chain, [op], ALICE, [44_500, 44_500])
    assert chain.replace(same_fee).reason == "FeeNotHigher"


def test_non_signaling_not_replaceable():
    chain, (op,) = funded()
    assert chain.submit(spend(chain, [op], ALICE, [90_000], seq=0xFFFFFFFF))
    assert chain.replace(spend(chain, [op], ALICE, [80_000])).reason == "NotSignaling"


# blocks

def test_empty_block():
    chain = Chain()
    assert chain.mine_block().txs == []
    assert chain.height == 1


def test_cpfp_package_mined_under_spike():
    chain, (op,) = funded(1_000_000)
    parent = spend(chain, [op], ALICE, [1_000_000 - 200])  # about 2 sat/byte
    assert chain.submit(parent)
    chain.fee_spike(20, 5)
    assert chain.mine_block().txs == []
    child = spend(chain, [(parent.txid, 0)], ALICE, [1_000_000 - 200 - 20_000])
    assert chain.submit(child)
    assert {t.txid for t in chain.mine_block().txs} == {parent.txid, child.txid}


def test_giant_low_feerate_excluded():
    chain, ops = funded(1_000_000, 6)
    giant = spend(chain, [ops[0]], ALICE, [1_000_000 - 100_000], annex=b"\x50" + bytes(99_500))
    assert 99_500 < giant.size < 100_000
    assert chain.submit(giant)
    small = [spend(chain, [op], ALICE, [1_000_000 - 5_000]) for op in ops[1:]]
    for tx in small:
        assert chain.submit(tx)
    mined = {t.txid for t in chain.mine_block().txs}
    assert mined == {t.txid for t in small}
    assert chain.in_mempool(giant.txid)


def test_spike_delays_low_rate_tx():
    chain, (op,) = funded(1_000_000)
    size = spend(chain, [op], ALICE, [1]).size
    tx = spend(chain, [op], ALICE, [1_000_000 - 40 * size])
    assert tx.size == size
    chain.submit(tx)
    chain.fee_spike(41, 3)
    for _ in range(3):
        assert chain.mine_block().txs == []
    assert chain.mine_block().txs[0].txid == tx.txid


def test_zero_spike_no_effect():
    chain, (op,) = funded()
    tx = spend(chain, [op], ALICE, [90_000])
    chain.submit(tx)
    chain.fee_spike(0, 10)
    assert chain.mine_block().txs == [tx]


def test_confirmations():
    chain, (op,) = funded()
    tx = spend(chain, [op], ALICE, [90_000])
    assert chain.confirmations(tx.txid) == 0
    chain.submit(tx)
    chain.mine(6)
    assert chain.confirmations(tx.txid) == 6
    chain.mine(1)
    assert chain.confirmations(tx.txid) == 7


# pinning

def test_pin_needs_anyonecanpay():
    chain, (op,) = funded(1_000_000)
    att = chain.fund(key_script(MALLORY.pub), 50_000)
    signed_all = spend(chain, [op], ALICE, [990_000])
    chain.submit(signed_all)
    assert chain.pin(signed_all.txid, 20_000, MALLORY.priv, att).reason == "Immutable"


def test_pin_lowers_package_feerate():
    chain, (op,) = funded(1_000_000)
    att = chain.fund(key_script(MALLORY.pub), 50_000)
    tx = spend(chain, [op], ALICE, [990_000], flag=A1CP_ALL)
    chain.submit(tx)
    rate = chain.mempool[tx.txid].feerate
    res = chain.pin(tx.txid, 20_000, MALLORY.priv, att)
    assert res
    pinned = chain.mempool[res.txid]
    assert pinned.fee > 10_000 and pinned.feerate < rate
    assert not chain.in_mempool(tx.txid)


# invariants

def _script_run(ops_script):
    chain = Chain(ChainConfig())
    coins = [chain.fund(key_script(ALICE.pub), 200_000) for _ in range(4)]
    for kind, a, b in ops_script:
        if kind == "mine":
            chain.mine(1 + a % 2)
        elif kind == "spend" and coins:
            op = coins.pop(a % len(coins))
            out = chain.output(op).amount - 500 - 100 * b
            if out <= 0:
                continue
            tx = spend(chain, [op], ALICE, [out // 2, out - out // 2])
            if chain.submit(tx):
                coins += [(tx.txid, 0), (tx.txid, 1)]
        elif kind == "spike":
            chain.fee_spike(1 + b, 1 + a % 3)
    chain.mine(3)
    return chain


steps = st.lists(st.tuples(st.sampled_from(["mine", "spend", "spend", "spike"]),
                           st.integers(0, 10), st.integers(0, 20)), max_size=25)


@settings(max_examples=40, deadline=None)
@given(steps)
def test_audit_conservation_and_locks(ops_script):
    assert _script_run(ops_script).audit() == []


@settings(max_examples=15, deadline=None)
@given(steps)
def test_deterministic_blocks(ops_script):
    a, b = _script_run(ops_script), _script_run(ops_script)
    assert [[t.txid for t in blk.txs] for blk in a.blocks] == [[t.txid for t in blk.txs] for blk in b.blocks]
    assert a.log.to_jsonl() == b.log.to_jsonl()


def test_event_log_records():
    chain, (op,) = funded()
    chain.submit(spend(chain, [op], ALICE, [90_000]))
    chain.mine_block()
    for line in chain.log.to_jsonl().splitlines():
        assert set(json.loads(line)) == {"height", "event", "txid", "detail"}
