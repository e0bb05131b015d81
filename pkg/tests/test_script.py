"""Policy compilation, satisfaction, execution and covenant opcodes."""

import hashlib
import itertools
import struct
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from covault import crypto, script
from covault.script import (
    And, Instr, Older, Or, Pk, SatisfactionContext, ScriptProgram, Thresh,
    and_, compile, digest_context, evaluate, execute, parse_policy, pk, satisfy, thresh,
)
from covault.txmodel import Transaction, TxInput, TxOutput

NAMES = ["A", "B", "C", "D", "E"]
KEYS = {n: crypto.keypair_from_label(f"script/{n}").priv for n in NAMES + [f"V{i}" for i in range(1, 6)]}
PUBS = {n: crypto.point_from_scalar(k) for n, k in KEYS.items()}


def run(policy, signers, age=0):
    ctx = digest_context(KEYS, signers, age)
    return execute(compile(policy, PUBS), satisfy(policy, ctx), ctx)


def ops(policy):
    return compile(policy, PUBS).render({v: k for k, v in PUBS.items()})


# compile

def test_compile_and():
    assert ops(and_("A", "B")) == "A CHECKSIGVERIFY B CHECKSIG"


def test_compile_thresh_checksigadd():
    p = thresh(2, *[f"V{i}" for i in range(1, 6)])
    assert ops(p) == "V1 CHECKSIG V2 CHECKSIGADD V3 CHECKSIGADD V4 CHECKSIGADD V5 CHECKSIGADD 2 NUMEQUAL"


def test_compile_pk():
    assert ops(pk("A")) == "A CHECKSIG"


def test_compile_errors():
    with pytest.raises(script.UnknownKey):
        compile(pk("Z"), PUBS)
    with pytest.raises(script.MalformedPolicy):
        thresh(3, "A", "B")
    with pytest.raises(script.MalformedPolicy):
        Older(0)


def test_program_bytes_round_trip():
    prog = compile(parse_policy("and(thresh(2,pk(A),pk(B),pk(C)),or(older(5),pk(D)))"), PUBS)
    assert ScriptProgram.from_bytes(prog.to_bytes()) == prog


# parser

def test_parse_policy_forms():
    assert parse_policy("thresh(2,pk(R1),pk(R2),pk(R3))") == thresh(2, "R1", "R2", "R3")
    assert parse_policy("older(144)") == Older(144)
    p = parse_policy("or(99@pk(A),1@and(pk(B),older(10)))")
    assert isinstance(p, Or) and p.weights == (99, 1)
    assert parse_policy(str(p)) == p


# execute

def test_execute_and_round_trip():
    assert run(and_("A", "B"), {"A", "B"})


def test_execute_missing_signature():
    p = and_("A", "B")
    ctx = digest_context(KEYS, {"B"})
    # top of stack (last element) feeds A's CHECKSIGVERIFY
    wit = script.Witness((crypto.sign(KEYS["B"], b"\x11" * 32), b""))
    res = execute(compile(p, PUBS), wit, ctx)
    assert not res and res.reason == "VerifyFailed"
    wit = script.Witness((b"", crypto.sign(KEYS["A"], b"\x11" * 32)))
    assert execute(compile(p, PUBS), wit, ctx).reason == "FalseResult"


def test_older_boundary():
    p = And(Older(5), Pk("A"))
    prog = compile(p, PUBS)
    wit = satisfy(p, digest_context(KEYS, {"A"}, 5))
    assert execute(prog, wit, digest_context(KEYS, {"A"}, 5))
    res = execute(prog, wit, digest_context(KEYS, {"A"}, 4))
    assert not res and res.reason == "PrematureLock"


def test_stack_underflow_and_unknown():
    ctx = SatisfactionContext()
    assert execute(ScriptProgram((Instr("CHECKSIG"),)), (), ctx).reason == "StackUnderflow"
    assert execute(ScriptProgram((Instr("BOGUS"),)), (), ctx).reason == "UnknownInstruction"


# satisfy

def test_satisfy_thresh_lowest_index():
    p = thresh(2, "A", "B", "C")
    ctx = digest_context(KEYS, {"A", "C"})
    wit = satisfy(p, ctx)
    # stack top is consumed first: A's signature sits on top
    assert wit.stack[1] == b""
    assert len(wit.stack[0]) == len(wit.stack[2]) == 64
    assert execute(compile(p, PUBS), wit, ctx)


def test_satisfy_thresh_insufficient():
    with pytest.raises(script.Unsatisfiable):
        satisfy(thresh(2, "A", "B", "C"), digest_context(KEYS, {"A"}))


def test_satisfy_older_at_boundary():
    assert run(And(Older(5), Pk("A")), {"A"}, 5)
    with pytest.raises(script.Unsatisfiable):
        run(And(Older(5), Pk("A")), {"A"}, 4)


def test_satisfier_deterministic():
    p = thresh(2, "A", "B", "C")
    assert satisfy(p, digest_context(KEYS, {"B", "C"})) == satisfy(p, digest_context(KEYS, {"B", "C"}))


# brute-force agreement on random policies

def _policies(depth):
    leaf = st.one_of(st.sampled_from(NAMES).map(Pk), st.integers(1, 4).map(Older))
    if depth == 0:
        return leaf
    sub = _policies(depth - 1)
    return st.one_of(
        leaf,
        st.builds(And, sub, sub),
        st.builds(Or, sub, sub),
        st.lists(sub, min_size=1, max_size=3).flatmap(
            lambda cs: st.integers(1, len(cs)).map(lambda k: Thresh(k, tuple(cs)))),
    )


@settings(max_examples=60, deadline=None)
@given(_policies(2))
def test_compile_matches_predicate(policy):
    names = sorted(set(script.keys_of(policy)))
    locks = script.locks_of(policy)
    ages = sorted({0} | set(locks) | {l - 1 for l in locks})
    prog = compile(policy, PUBS)
    for r in range(len(names) + 1):
        for signers in itertools.combinations(names, r):
            for age in ages:
                ctx = digest_context(KEYS, signers, age)
                want = evaluate(policy, signers, age)
                try:
                    wit = satisfy(policy, ctx)
                except script.Unsatisfiable:
                    assert not want
                    continue
                assert want
                assert execute(prog, wit, ctx), (policy, signers, age)


# tree equivalence

def test_equivalence_vault_and_fallback():
    V = [f"V{i}" for i in range(1, 6)]
    wit = and_("V1", "V2")
    enf = and_("E1", "E2")
    leaves = [And(wit, enf), And(enf, thresh(2, *V))]
    assert script.verify_tree_equivalence(leaves, And(thresh(2, *V), enf))
    F = [f"F{i}" for i in range(1, 6)]
    assert script.verify_tree_equivalence([thresh(3, "F1", "F2", "F3"), thresh(3, *F)], thresh(3, *F))


def test_equivalence_detects_mismatch():
    assert not script.verify_tree_equivalence([and_("A", "B")], script.or_("A", "B"))


def test_equivalence_too_large():
    big = thresh(1, *[f"K{i}" for i in range(17)])
    with pytest.raises(script.TooLarge):
        script.verify_tree_equivalence([big], big)


# covenant opcodes

def _tx(n_out=2):
    ins = (TxInput(b"\x01" * 32, 0, 5), TxInput(b"\x02" * 32, 1, 7))
    outs = tuple(TxOutput(1000 * (i + 1), b"\x01" + bytes([i]) * 32) for i in range(n_out))
    return Transaction(2, ins, outs, (), 0)


def _ctv_oracle(tx, index):
    # independent re-serialization of the default template
    seqs = hashlib.sha256(b"".join(struct.pack("<I", i.sequence) for i in tx.inputs)).digest()
    outs = hashlib.sha256(b"".join(
        struct.pack("<Q", o.amount) + struct.pack("<I", len(o.script)) + o.script for o in tx.outputs)).digest()
    body = struct.pack("<III", tx.version, tx.locktime, len(tx.inputs)) + seqs + \
        struct.pack("<I", len(tx.outputs)) + outs + struct.pack("<I", index)
    return crypto.tagged_hash("covault/ctv", body)


def _ctv_run(tx, h, enabled=True):
    ctx = SatisfactionContext(tx=tx, input_index=0, ctv_enabled=enabled)
    return execute(ScriptProgram((Instr("CTV_VERIFY", h),)), (b"\x01",), ctx)


def test_ctv_accepts_template():
    tx = _tx()
    assert _ctv_run(tx, _ctv_oracle(tx, 0))


@pytest.mark.parametrize("mutate", [
    lambda t: replace(t, version=3),
    lambda t: replace(t, locktime=9),
    lambda t: replace(t, inputs=(replace(t.inputs[0], sequence=6),) + t.inputs[1:]),
    lambda t: replace(t, outputs=(TxOutput(999, t.outputs[0].script),) + t.outputs[1:]),
    lambda t: replace(t, outputs=t.outputs[:1]),
])
def test_ctv_rejects_mutation(mutate):
    tx = _tx()
    res = _ctv_run(mutate(tx), _ctv_oracle(tx, 0))
    assert not res and res.reason == "TemplateMismatch"


def test_ctv_ignores_prevout_reference():
    tx = _tx()
    moved = replace(tx, inputs=(replace(tx.inputs[0], prev_txid=b"\x09" * 32),) + tx.inputs[1:])
    assert _ctv_run(moved, _ctv_oracle(tx, 0))


def test_ctv_disabled():
    tx = _tx()
    assert _ctv_run(tx, _ctv_oracle(tx, 0), enabled=False).reason == "DisabledOpcode"


def test_inspect_output_count():
    prog = ScriptProgram((Instr("INSPECT", ("output_count", None, "==", 2)),))
    ctx = SatisfactionContext(tx=_tx(2), inspect_enabled=True)
    assert execute(prog, (b"\x01",), ctx)
    assert execute(prog, (b"\x01",), replace(ctx, tx=_tx(3))).reason == "InspectFailed"
    assert execute(prog, (b"\x01",), replace(ctx, inspect_enabled=False)).reason == "DisabledOpcode"
    oob = ScriptProgram((Instr("INSPECT", ("output_amount", 5, "==", 1)),))
    assert execute(oob, (b"\x01",), ctx).reason == "IndexOutOfRange"


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(script.OPS[1:15]), max_size=30),
       st.lists(st.binary(max_size=3), max_size=6))
def test_execute_total(op_names, stack):
    prog = ScriptProgram(tuple(Instr(o) for o in op_names))
    res = execute(prog, stack, SatisfactionContext())
    assert isinstance(res, (script.Accept, script.Reject))
