"""Serialization, txid, sighash semantics and the mutability matrix."""

import random
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from covault import txmodel
from covault.txmodel import (
    A1CP_NONE, ALL, FIELDS, FLAGS, SINGLE, Semantics, Transaction, TxInput, TxOutput,
    committed, mutation_matrix, sighash_msg, sign_input, verify_input,
)

from mutations import INDEX, base_case, mutate, signer

u32 = st.integers(0, 2**32 - 1)
inputs = st.builds(TxInput, st.binary(min_size=32, max_size=32), u32, u32)
outputs = st.builds(TxOutput, st.integers(0, 2**63 - 1), st.binary(max_size=40))


@st.composite
def transactions(draw):
    ins = draw(st.lists(inputs, min_size=1, max_size=4))
    outs = draw(st.lists(outputs, min_size=1, max_size=4))
    wits = draw(st.one_of(st.just([]), st.lists(
        st.lists(st.binary(max_size=20), max_size=3), min_size=len(ins), max_size=len(ins))))
    return Transaction(draw(u32), ins, outs, wits, draw(u32))


# serialization

@settings(max_examples=200, deadline=None)
@given(transactions())
def test_serialize_parse_identity(tx):
    assert txmodel.parse(txmodel.serialize(tx)) == tx
    assert txmodel.from_json(txmodel.to_json(tx)) == tx


def test_parse_rejects_garbage():
    tx, _ = base_case()
    data = txmodel.serialize(tx)
    with pytest.raises(txmodel.ParseError):
        txmodel.parse(data[:-1])
    with pytest.raises(txmodel.ParseError):
        txmodel.parse(data + b"\x00")
    with pytest.raises(txmodel.ParseError):
        txmodel.from_json({"version": 2})


def test_json_field_names():
    tx, _ = base_case()
    obj = txmodel.to_json(tx)
    assert set(obj) == {"version", "inputs", "outputs", "witnesses", "locktime"}
    assert set(obj["inputs"][0]) == {"prev_txid", "prev_index", "sequence"}
    assert set(obj["outputs"][0]) == {"amount", "script_hex"}


# txid

def test_txid_ignores_witness():
    tx, _ = base_case()
    assert txmodel.txid(tx.with_witness(0, (b"other",))) == txmodel.txid(tx)
    assert txmodel.txid(tx.strip_witnesses()) == txmodel.txid(tx)


def test_txid_binds_outputs():
    tx, _ = base_case()
    changed = replace(tx, outputs=(replace(tx.outputs[0], amount=tx.outputs[0].amount + 1),) + tx.outputs[1:])
    assert txmodel.txid(changed) != txmodel.txid(tx)
    assert txmodel.txid(replace(tx)) == txmodel.txid(tx)


# relative locks

@given(st.integers(0, 0xFFFF))
def test_relative_lock_round_trip(blocks):
    seq = txmodel.encode_relative_lock(blocks)
    assert txmodel.signals_rbf(seq)
    assert txmodel.decode_relative_lock(2, seq) == blocks
    assert txmodel.decode_relative_lock(1, seq) is None


def test_lock_thresholds():
    assert txmodel.decode_relative_lock(2, 0xFFFFFFFE) is None
    assert not txmodel.signals_rbf(0xFFFFFFFE)
    assert txmodel.signals_rbf(0xFFFFFFFD)
    assert txmodel.decode_relative_lock(2, 1 << 31 | 5) is None


# sighash spot checks

def _digest(tx, pv, sem, flag, idx=INDEX):
    return sighash_msg(tx, idx, sem, flag, pv)


def test_taproot_all_binds_every_output():
    tx, pv = base_case()
    base = _digest(tx, pv, "taproot", ALL)
    for i in range(3):
        outs = list(tx.outputs)
        outs[i] = replace(outs[i], amount=outs[i].amount + 1)
        assert _digest(replace(tx, outputs=tuple(outs)), pv, "taproot", ALL) != base


def test_taproot_a1cp_none_ignores_added_input():
    tx, pv = base_case()
    more = replace(tx, inputs=tx.inputs + (TxInput(b"\x07" * 32, 0, 1),), witnesses=tx.witnesses + ((),))
    assert _digest(more, pv + [TxOutput(5, b"\x01")], "taproot", A1CP_NONE) == _digest(tx, pv, "taproot", A1CP_NONE)


def test_legacy_single_ignores_other_output():
    tx, pv = base_case()
    outs = list(tx.outputs)
    outs[0] = replace(outs[0], amount=1)
    assert _digest(replace(tx, outputs=tuple(outs)), pv, "legacy", SINGLE) == _digest(tx, pv, "legacy", SINGLE)


def test_single_without_output_errors():
    tx, pv = base_case()
    short = replace(tx, outputs=tx.outputs[:1])
    with pytest.raises(txmodel.NoCorrespondingOutput):
        sighash_msg(short, INDEX, "taproot", SINGLE, pv)


# signing

def test_sign_round_trip_and_flag_binding():
    tx, pv = base_case()
    kp = signer()
    sig = sign_input(tx, INDEX, kp.priv, "taproot", ALL, pv)
    assert verify_input(tx, INDEX, kp.pub, sig, "taproot", pv)
    relabeled = sig[:64] + bytes([SINGLE.to_byte()])
    assert not verify_input(tx, INDEX, kp.pub, relabeled, "taproot", pv)


def test_apoas_survives_prevout_swap_to_clone():
    tx, pv = base_case()
    kp = signer()
    sig = sign_input(tx, INDEX, kp.priv, "apoas", ALL, pv)
    ins = list(tx.inputs)
    ins[INDEX] = replace(ins[INDEX], prev_txid=b"\xcc" * 32, prev_index=9)
    clone = replace(tx, inputs=tuple(ins))
    assert verify_input(clone, INDEX, kp.pub, sig, "apoas", pv)
    tsig = sign_input(tx, INDEX, kp.priv, "taproot", ALL, pv)
    assert not verify_input(clone, INDEX, kp.pub, tsig, "taproot", pv)


# matrix

def test_matrix_taproot_all_only_witnesses():
    m = mutation_matrix("taproot", ALL)
    assert {f for f, mut in m.items() if mut} == {"witnesses"}


def test_matrix_taproot_single():
    m = mutation_matrix("taproot", SINGLE)
    assert m["other_outputs"] and m["output_count"]
    assert not m["current_output"]


def test_matrix_apoas_outpoint():
    assert mutation_matrix("apoas", ALL)["current_outpoint"]
    assert not mutation_matrix("taproot", ALL)["current_outpoint"]


def test_legacy_other_sequence_deviation():
    # documented deviation: committed under ALL
    assert committed("legacy", ALL, "other_sequences")
    assert not committed("legacy", SINGLE, "other_sequences")


@pytest.mark.parametrize("sem", list(Semantics))
@pytest.mark.parametrize("flag", FLAGS, ids=str)
def test_matrix_soundness_sample(sem, flag):
    """A small sample per cell; the acceptance suite runs 200 per cell."""
    tx, pv = base_case(7)
    kp = signer()
    sig = sign_input(tx, INDEX, kp.priv, sem, flag, pv)
    for f in FIELDS:
        rng = random.Random(f"sample/{sem.value}/{flag}/{f}")
        want = not committed(sem, flag, f)
        for _ in range(10):
            t2, pv2, idx = mutate(tx, pv, f, flag, rng)
            assert verify_input(t2, idx, kp.pub, sig, sem, pv2) == want, (sem, flag, f)
