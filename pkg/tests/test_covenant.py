"""Deleted-key covenant sessions, status, composition, fees and reserves."""

import json
from dataclasses import replace

import pytest

from covault import covenant as cv, crypto
from covault.chainsim import Chain
from covault.covenant import (
    ComposeMode, CovenantSpec, FeeStrategy, FeeStrategyKind, StatusKind, Tamper,
)
from covault.txmodel import A1CP_ALL, SINGLE


def honest(n=2, m=2, k=2, j=2, seed=0, confirm=1, **kw):
    spec, actors, chain, custodians = cv.demo_session(n, m, k, j, seed, **kw)
    res = cv.run_session(spec, actors, cv.default_channels(actors), chain, seed=seed, confirm_blocks=confirm)
    assert res.ok, res.abort
    return res.covenant, chain, custodians, res


# session

def test_honest_session_pending_then_active():
    cov, chain, _, res = honest()
    assert res.step == 11
    assert cv.check_enforcement(cov, chain).kind is StatusKind.PENDING
    assert set(cov.deletions) == {"E1", "E2"}
    assert cov.stored_at == {"C1", "C2"}
    chain.mine(2)
    assert chain.confirmations(cov.tx_dep.txid) == 3
    assert cv.check_enforcement(cov, chain).kind is StatusKind.PENDING
    chain.mine(3)
    assert cv.check_enforcement(cov, chain).kind is StatusKind.ACTIVE


def test_enforcement_keys_deleted():
    cov, _, _, _ = honest()
    for rec in cov.deletions.values():
        assert crypto.attempt_recovery(rec, "high") is None


def test_transcript_json_deterministic():
    a = honest()[3].to_json()
    b = honest()[3].to_json()
    assert a == b
    steps = [e["step"] for e in json.loads(a)["transcript"]]
    # steps 9 and 10 repeat per custodian
    assert steps[0] == 1 and steps[-1] == 11
    assert set(steps) == set(range(1, 12)) - {5}


def test_bad_enforcement_signature_aborts_at_8():
    spec, actors, chain, _ = cv.demo_session(2, 2, 2, 2)
    res = cv.run_session(spec, actors, cv.default_channels(actors), chain, tamper=Tamper("bad_enf_sig", "E2"))
    assert not res.ok
    assert (res.abort.step, res.abort.reason, res.abort.party) == (8, "BadSignature", "depositor")


def test_omitted_custodian_aborts_at_6():
    spec, actors, chain, _ = cv.demo_session(2, 2, 3, 2)
    t = Tamper("omit_custodian", "C2", credentials=("depositor",))
    res = cv.run_session(spec, actors, cv.default_channels(actors), chain, tamper=t)
    assert (res.abort.step, res.abort.reason, res.abort.party) == (6, "BadScript", "C2")


def test_tamper_without_credentials_blocked():
    spec, actors, chain, _ = cv.demo_session(2, 2, 3, 2)
    res = cv.run_session(spec, actors, cv.default_channels(actors), chain, tamper=Tamper("omit_custodian", "C2"))
    assert res.ok and res.tamper_blocked


def test_corrupted_signature_set_detected_by_custodian():
    spec, actors, chain, _ = cv.demo_session(2, 2, 2, 2)
    t = Tamper("corrupt_sig_set", "C2", credentials=("depositor",))
    res = cv.run_session(spec, actors, cv.default_channels(actors), chain, tamper=t)
    assert (res.abort.step, res.abort.reason, res.abort.party) == (10, "BadSignature", "C2")


def test_swapped_custodian_detected_after_inclusion():
    spec, actors, chain, _ = cv.demo_session(2, 2, 3, 2)
    t = Tamper("swap_custodians", count=1, credentials=("depositor",))
    res = cv.run_session(spec, actors, cv.default_channels(actors), chain, tamper=t)
    assert res.ok and res.aware == ["C1"]


def test_timeout_and_missing_channel():
    spec, actors, chain, _ = cv.demo_session(2, 2, 2, 2)
    res = cv.run_session(spec, actors, cv.default_channels(actors), chain, unresponsive=["E1"])
    assert res.abort.reason == "Timeout"
    with pytest.raises(cv.MissingChannel):
        cv.run_session(spec, actors, cv.default_channels(actors)[1:], chain)


# status

def test_recovered_dispose_keys_break_covenant():
    cov, chain, _, _ = honest(method="dispose")
    chain.mine(6)
    attempts = [("E1", crypto.AttackerLevel.LOW), ("E2", crypto.AttackerLevel.LOW)]
    assert cv.check_enforcement(cov, chain, attempts[:1]).kind is StatusKind.ACTIVE
    assert cv.check_enforcement(cov, chain, attempts).kind is StatusKind.BROKEN


def test_destroyed_keys_survive_strong_attacker():
    cov, chain, _, _ = honest()
    chain.mine(6)
    attempts = [("E1", crypto.AttackerLevel.HIGH), ("E2", crypto.AttackerLevel.HIGH)]
    assert cv.check_enforcement(cov, chain, attempts).kind is StatusKind.ACTIVE


def test_lost_storage_breaks_covenant():
    cov, chain, _, _ = honest()
    cov.stored_at.clear()
    assert cv.check_enforcement(cov, chain).kind is StatusKind.BROKEN


# finalize

def test_finalize_thresholds():
    cov, chain, custodians, _ = honest(k=3, j=2)
    chain.mine(5)
    with pytest.raises(cv.Unsatisfiable):
        cv.finalize(cov, cv.key_oracle(cov, cov.tx_cov, custodians[:1]))
    with pytest.raises(cv.Unsatisfiable):
        cv.finalize(cov, lambda q: None)
    tx = cv.finalize(cov, cv.key_oracle(cov, cov.tx_cov, custodians[1:]))
    assert chain.submit(tx)


def test_lock_script_shape():
    cov, *_ = honest(n=3, m=2, k=5, j=3)
    P, m, Q, j = cv.parse_covenant_program(cov.program)
    assert (len(P), m, len(Q), j) == (3, 2, 5, 3)
    ops = [i.op for i in cov.program.ops]
    assert ops.count("NUMEQUALVERIFY") == 1 and ops[-1] == "NUMEQUAL"


# boundary

def test_integrity_bound():
    assert cv.integrity_bound(2, 2) == 1
    assert cv.integrity_bound(3, 5) == 3
    assert cv.integrity_bound(2, 5) == 2


def test_small_coalition_search():
    rep = cv.coalition_search(2, 2, 2, 2)
    assert rep.ok and rep.cases == 4 * 4 + 4


# composition

def _compose(mode, count=2, **kw):
    chain = Chain()
    depositor = crypto.keypair_from_label("compose/depositor")
    custodians = [crypto.keypair_from_label(f"compose/c{i}") for i in range(2)]
    dests = [cv.key_output(crypto.keypair_from_label(f"compose/dest/{i}").pub) for i in range(count)]
    specs = [CovenantSpec(2, 2, tuple(c.pub for c in custodians), 2, 500_000, d, **kw) for d in dests]
    fundings = [chain.fund(cv.key_output(depositor.pub), 600_000) for _ in range(count)]
    return chain, cv.compose(specs, mode, chain, depositor, fundings, custodians)


def test_multi_deposit_needs_every_deposit():
    chain, g = _compose(ComposeMode.MULTI_DEPOSIT, 3)
    for d in g.deposits[:2]:
        assert chain.submit(d)
    chain.mine(6)
    assert g.status(chain).kind is StatusKind.PENDING
    assert not chain.submit(g.covs[0])
    assert chain.submit(g.deposits[2])
    chain.mine(6)
    assert g.status(chain).kind is StatusKind.ACTIVE
    assert chain.submit(g.covs[0])


def test_joint_chain_order():
    chain, g = _compose(ComposeMode.JOINT_CHAIN)
    assert chain.submit(g.deposits[0])
    chain.mine(1)
    assert chain.submit(g.covs[1]).reason == "MissingInputs"
    assert chain.submit(g.covs[0])
    assert chain.submit(g.covs[1])


def test_joint_chain_rejects_mutable_intermediate():
    with pytest.raises(cv.UnsafeChain):
        _compose(ComposeMode.JOINT_CHAIN, cust_flag=A1CP_ALL)


def test_disjoint_pair_exclusive():
    chain, g = _compose(ComposeMode.DISJOINT)
    chain.submit(g.deposits[0])
    chain.mine(1)
    assert chain.submit(g.covs[0])
    chain.mine(1)
    assert chain.submit(g.covs[1]).reason == "DoubleSpend"


# fee strategies

def test_fee_table_rows():
    t = cv.FEE_TABLE
    assert (t[FeeStrategyKind.UNSECURED_FEE_INPUTS].pinnable, t[FeeStrategyKind.UNSECURED_FEE_INPUTS].malleable) == (True, True)
    assert t[FeeStrategyKind.CPFP_OUTPUTS].works_with_dependents
    assert not t[FeeStrategyKind.FEE_INPUTS].works_with_dependents
    assert t[FeeStrategyKind.CHANGE_OUTPUTS].enf_flag == SINGLE


def test_fee_inputs_refuse_dependents():
    cov, chain, custodians, _ = honest(enf_flags=(A1CP_ALL, A1CP_ALL))
    with pytest.raises(cv.UnsafeWithDependents):
        cv.apply_fee_strategy(cov, FeeStrategy(FeeStrategyKind.FEE_INPUTS), chain,
                              crypto.keypair_from_label("fee"), has_dependents=True, custodians=custodians)


def test_prepared_variants_grow_exponentially():
    assert cv.prepared_variant_count(3, 1) == 3
    assert cv.prepared_variant_count(3, 4) == 81


def test_prepare_fee_range_picks_level():
    fee_key = crypto.keypair_from_label("fee")
    cov, chain, custodians, _ = honest(fee_levels=(5, 20, 80))
    out = cv.apply_fee_strategy(cov, FeeStrategy(FeeStrategyKind.PREPARE_FEE_RANGE), chain, fee_key,
                                target_feerate=15, custodians=custodians)
    tx = out.txs[0]
    fee = cov.prevout.amount - tx.output_total()
    assert 20 * tx.size - 200 <= fee <= 20 * tx.size + 200
    assert chain.submit(tx)


def test_cpfp_package_under_spike():
    adv = cv.cpfp_chain_under_spike(spike_level=50)
    assert adv.advanced
    stuck = cv.cpfp_chain_under_spike(spike_level=50, bump=False)
    assert not stuck.advanced


# proof of reserves

def test_proof_of_reserves():
    cov, chain, custodians, _ = honest(k=3, j=2)
    por = cv.proof_of_reserves(cov, custodians)
    assert cv.verify_por(por)
    with pytest.raises(cv.Unsatisfiable):
        cv.finalize_with_por(cov, por)
    assert not chain.submit(por.demo_tx)


def test_por_rejects_valid_demo():
    cov, _, custodians, _ = honest()
    por = cv.proof_of_reserves(cov, custodians)
    assert not cv.verify_por(replace(por, demo_prevout=replace(por.demo_prevout, amount=10**12)))


def test_por_needs_custodial_script():
    cov, chain, custodians, _ = honest()
    object.__setattr__(cov.spec, "custodial", ())
    cov.program = cv.covenant_program(cov.P, cov.spec.m, (), 1)
    with pytest.raises(cv.Unsupported):
        cv.proof_of_reserves(cov, custodians)
