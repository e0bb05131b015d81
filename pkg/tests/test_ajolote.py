"""Ajolote wallet: policies, state, ceremonies, watchtowers and coin control."""

import pytest
from hypothesis import given, settings, strategies as st

from covault import ajolote as aj, crypto, script, taproot
from covault.ajolote import Config, WithdrawalConstraints


def world(N=2, seed=0, deposits=(5_000_000, 5_000_000), **kw):
    w = aj.World.create(aj.default_config(N), seed, **kw)
    assert all(r.ok for r in aj.setup_world(w))
    if deposits:
        assert aj.run_ceremony(w, "receive", amount=sum(deposits) + 10_000_000).ok
        dep = aj.run_ceremony(w, "vault_deposit", amounts=list(deposits))
        assert dep.ok, dep.abort
    return w


def _accounts(N):
    accts = {n: aj.account_of(crypto.master_key(bytes([n]) * 32), 0) for n in range(1, 6)}
    wts = {k: aj.account_of(crypto.master_key(bytes([100 + k]) * 32), 0) for k in range(1, N + 1)}
    return accts, wts


# configuration

def test_config_validation():
    with pytest.raises(aj.AjoloteError):
        Config(6, 10, 5, 2)
    with pytest.raises(aj.AjoloteError):
        Config(0, 1, 5, 2)
    with pytest.raises(aj.AjoloteError):
        WithdrawalConstraints(max_amount=-1)
    cfg = Config(6, 1, 5, 2, WithdrawalConstraints(2, 10, 100, 24, (9, 10)))
    assert Config.from_dict(cfg.to_dict()) == cfg
    assert Config.from_dict({"T": 6, "V_min": 1, "V_max": 5, "N": 2, "w": None}).w is None


def test_withdrawal_violations():
    w = WithdrawalConstraints(max_withdrawals=1, window=10, max_amount=100)
    assert w.violations([], 50, 100) == []
    assert w.violations([(45, 10)], 50, 10) == ["rate"]
    assert w.violations([(40, 10)], 50, 10) == []
    assert w.violations([], 50, 101) == ["amount"]
    hours = WithdrawalConstraints(phase_period=24, allowed_phases=(9,))
    assert hours.violations([], 24 * 3 + 9, 1) == []
    assert hours.violations([], 24 * 3 + 10, 1) == ["hours"]


@given(st.lists(st.tuples(st.integers(0, 300), st.integers(0, 50)), max_size=8),
       st.integers(0, 300), st.integers(0, 50))
def test_violations_monotone_in_history(history, height, amount):
    w = WithdrawalConstraints(max_withdrawals=2, window=30, max_amount=80)
    fewer = set(w.violations(history[:-1], height, amount))
    assert fewer <= set(w.violations(history, height, amount))


# policies and trees

@pytest.mark.parametrize("N", [1, 3, 5])
def test_leaf_counts(N):
    assert len(aj.leaf_policies("receive", 6, N)) == 2
    assert len(aj.leaf_policies("vault", 6, N)) == 2
    assert len(aj.leaf_policies("unvault", 6, N)) == 2 + 5 + N
    assert len(aj.leaf_policies("fallback", 6, N)) == 2


def test_named_policies():
    p = aj.named_policies(6, 3)
    assert set(p) == {"l_receive", "l_wit", "l_enf", "l_pay_to_fb", "l_spend", "l_fb", "l_test"}
    assert p["l_test"].k == 8 and len(p["l_test"].children) == 8
    assert p["l_receive"] == script.thresh(2, "R1", "R2", "R3")


@pytest.mark.parametrize("kind", ["vault", "unvault", "fallback"])
@pytest.mark.parametrize("N", [1, 2])
def test_tree_equivalence(kind, N):
    assert script.verify_tree_equivalence(aj.leaf_policies(kind, 6, N), aj.top_policy(kind, 6, N))


def test_receive_equivalence_corrected_vs_literal():
    top = aj.top_policy("receive", 6, 2)
    assert script.verify_tree_equivalence(aj.leaf_policies("receive", 6, 2), top)
    # the literal 3-of-3 second leaf misses the {R1, R3} and {R2, R3} signer sets
    assert not script.verify_tree_equivalence(aj.leaf_policies("receive", 6, 2, True), top)


def test_incomplete_setup():
    accts, wts = _accounts(2)
    del accts[4]
    with pytest.raises(aj.IncompleteSetup):
        aj.policies_from_accounts(accts, wts, 6, 2)
    accts, wts = _accounts(2)
    with pytest.raises(aj.IncompleteSetup):
        aj.policies_from_accounts(accts, wts, 6, 3)


def test_test_tree_uses_test_keys():
    accts, wts = _accounts(2)
    ps = aj.policies_from_accounts(accts, wts, 6, 2)
    ot = aj.build_taptree(ps, "test")
    assert set(ot.leaves[0].script.keys()) == set(ps.test_keys.values())
    assert not set(ps.test_keys.values()) & set(ps.keys.values())


def test_all_trees_round_trip():
    accts, wts = _accounts(2)
    enf = [crypto.keypair_from_label(f"aj/E{i}").pub for i in (1, 2)]
    ps = aj.policies_from_accounts(accts, wts, 6, 2, 0, 0, enf)
    for kind in aj.OUTPUT_TYPES:
        ot = aj.build_taptree(ps, kind)
        for i, lf in enumerate(ot.leaves):
            assert taproot.verify_control_block(ot.spk[1:], lf, ot.control_block(i))


# state tables and hashes

def test_setup_state_matches_table():
    w = world(deposits=())
    assert w.mobile.fields() == aj.SETUP_STATE_TABLE["mobile"]
    for hs in aj.HARDWARE:
        assert w.devices[hs].fields() == aj.SETUP_STATE_TABLE["signer"]
    for wt in w.watchtowers.values():
        assert wt.fields() == aj.SETUP_STATE_TABLE["watchtower"]


def test_vault_state_matches_table():
    w = world()
    for v, rec in w.mobile.vaults.items():
        assert rec.fields() == aj.VAULT_STATE_TABLE["mobile"]
        assert w.devices["home"].vaults[v].fields() == aj.VAULT_STATE_TABLE["signer"]
        for wt in w.watchtowers.values():
            assert wt.vaults[v].fields() == aj.VAULT_STATE_TABLE["watchtower"]


def test_setup_hash_agrees_across_devices():
    w = world(deposits=())
    hashes = {aj.system_hashes(w, d)[0] for d in aj.SIGNERS}
    assert len(hashes) == 1
    assert aj.system_hashes(w, "wt1")[0] is None


def test_setup_hash_detects_changed_config():
    w = world(deposits=())
    before = aj.h_setup(w.devices["office"])
    w.devices["office"].config = Config(1, 1, 2, 2)
    assert aj.h_setup(w.devices["office"]) != before


def test_operation_hash_tracks_deposits():
    w = world(deposits=())
    empty = aj.system_hashes(w, "mobile")[1]
    aj.run_ceremony(w, "receive", amount=20_000_000)
    aj.run_ceremony(w, "vault_deposit", amounts=[5_000_000])
    one = aj.system_hashes(w, "mobile")[1]
    aj.run_ceremony(w, "vault_deposit", amounts=[5_000_000])
    two = aj.system_hashes(w, "mobile")[1]
    assert len({empty, one, two}) == 3
    assert {aj.system_hashes(w, d)[1] for d in ("mobile", "home", "wt1", "wt2")} == {two}


def test_health_check_passes():
    w = world()
    assert aj.run_ceremony(w, "health_check").ok


# withdraw, spend and watchtowers

def test_spend_waits_for_lock():
    w = world()
    v = min(w.mobile.vaults)
    wd = aj.run_ceremony(w, "withdraw", v=v)
    assert wd.ok
    acts = w.advance(1)
    assert {a["action"] for a in acts} == {"none"}
    w.advance(w.config.T - 2)
    early = aj.run_ceremony(w, "spend", v=v)
    assert not early.ok and early.abort.reason == "SpendRejected:PrematureLock"
    w.advance(1)
    assert aj.run_ceremony(w, "spend", v=v).ok


def test_rate_violation_triggers_fallback():
    w = world()
    v1, v2 = sorted(w.mobile.vaults)
    aj.run_ceremony(w, "withdraw", v=v1)
    w.advance(1)
    aj.run_ceremony(w, "withdraw", v=v2)
    acts = w.advance(1)
    assert {a["action"] for a in acts} == {"broadcast"}
    assert all(a["violations"] == ["rate"] for a in acts)
    w.advance(1)
    assert w.chain.is_confirmed(w.mobile.vaults[v2].tx_fb.txid)
    assert aj.value_at_risk(w)["tier3"] > 0


def test_unregistered_withdrawal_raises_alert():
    w = world()
    v = min(w.mobile.vaults)
    w.watchtowers[1].vaults.clear()
    aj.run_ceremony(w, "withdraw", v=v)
    acts = w.advance(1)
    assert any(a["action"] == "alert" and a["watchtower"] == "wt1" for a in acts)


@pytest.mark.parametrize("kind", ["fallback_v1", "fallback_v2", "fallback_v3"])
def test_fallback_moves_every_vault(kind):
    w = world(deposits=(5_000_000,) * 3)
    res = aj.run_ceremony(w, kind)
    assert res.ok, res.abort
    assert sorted(res.data["fallback_vaults"]) == sorted(w.mobile.vaults)
    w.advance(1)
    _, n_v, n_u = w.output_counts()
    assert (n_v, n_u) == (0, 0)
    assert len(w.utxos_by_type()["fallback"]) == 3


def test_timeout_aborts_ceremony():
    w = world()
    res = aj.run_ceremony(w, "withdraw", v=min(w.mobile.vaults), signers=("mobile", "office"),
                          unresponsive=["office"])
    assert not res.ok and res.abort.reason == "Timeout"


# coin control

def test_coin_control_create():
    cfg = Config(6, 1_000_000, 5_000_000, 2)
    assert aj.coin_control_create(100_000_000, cfg) == [5_000_000] * 20
    assert aj.coin_control_create(12_500_000, cfg) == [5_000_000, 5_000_000, 2_500_000]
    assert aj.coin_control_create(10_500_000, cfg) == [5_000_000, 5_000_000]  # residual below V_min
    assert aj.coin_control_create(999_999, cfg) == []


def test_coin_control_one_percent_target():
    vaults = {v: 5_000_000 for v in range(20)}
    sel = aj.coin_control_select(vaults, 1_000_000, fee=2_000)
    assert len(sel.vaults) == 1 and sel.change == 5_000_000 - 1_002_000
    with pytest.raises(aj.Insufficient):
        aj.coin_control_select(vaults, 100_000_001)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=8), st.integers(1, 200))
def test_coin_control_select_minimal(amounts, target):
    vaults = dict(enumerate(amounts))
    if sum(amounts) < target:
        with pytest.raises(aj.Insufficient):
            aj.coin_control_select(vaults, target)
        return
    sel = aj.coin_control_select(vaults, target)
    assert sel.covered == sum(vaults[v] for v in sel.vaults) >= target
    assert sel.change == sel.covered - target
    # no smaller set covers the target
    top = sorted(amounts, reverse=True)
    assert sum(top[:len(sel.vaults) - 1]) < target


@settings(max_examples=60)
@given(st.integers(0, 10**9), st.integers(10**5, 10**7), st.integers(0, 10**7))
def test_coin_control_create_partition(balance, vmin, extra):
    cfg = Config(6, vmin, vmin + extra, 1)
    parts = aj.coin_control_create(balance, cfg)
    assert all(cfg.V_min <= p <= cfg.V_max for p in parts)
    assert 0 <= balance - sum(parts) < cfg.V_min


# value at risk

def test_value_at_risk_storage():
    w = world(N=2)
    var = aj.value_at_risk(w)
    per = sum(r.covenant_bytes() for r in w.mobile.vaults.values())
    # two signer copies plus one per watchtower
    assert var["stored_covenant_bytes"] == per * 4
    assert var["tier2"] == 10_000_000 and var["unlocked_tier2"] == 0


# adversary capabilities

def test_capabilities_table():
    assert aj.capabilities("mobile", "home") == ()
    assert aj.capabilities("mobile", "sp1") == aj.CAPS_FULL
    assert aj.capabilities("mobile", "home", ["mobile"]) == aj.CAPS_COMPROMISED_COORDINATOR
    assert aj.capabilities("mobile", "home", ["home"]) == aj.CAPS_COMPROMISED_SIGNER
    assert aj.capabilities("mobile", "home", ["mobile", "home"]) == aj.CAPS_FULL
    assert aj.capabilities("home", "user", ["home"]) == aj.CAPS_COMPROMISED_SIGNER
    assert aj.capabilities("user", "mobile", ["mobile"]) == aj.CAPS_COMPROMISED_COORDINATOR


def test_adversary_act_starred_rules():
    msg = aj.Message("hs-config", {})
    assert aj.adversary_act(["mobile"], "mobile", "home", "fabricate", msg, expected="hs-config")
    with pytest.raises(aj.Denied):
        aj.adversary_act(["mobile"], "mobile", "home", "fabricate", msg, expected="accounts")
    with pytest.raises(aj.Denied):
        aj.adversary_act(["mobile"], "mobile", "home", "fabricate", "raw bytes")
    with pytest.raises(aj.Denied):
        aj.adversary_act([], "mobile", "home", "block", msg)
    with pytest.raises(aj.Denied):
        aj.adversary_act(["home"], "mobile", "home", "eavesdrop", msg)


# tampers and attacks

@pytest.mark.parametrize("scenario", aj.tamper_catalogue() + aj.out_of_capability_tampers(), ids=lambda s: s.name)
def test_tamper_outcome(scenario):
    out = aj.run_tamper(scenario)
    assert out.as_expected, out.to_dict()


def test_theft_needs_two_active_keys():
    w = world(adversary=aj.Adversary(frozenset({"mobile"})))
    with pytest.raises(aj.Denied):
        aj.theft_spend(w, min(w.mobile.vaults), b"\x00" * 33)


@pytest.mark.parametrize("T", [2, 6, 144])
def test_reject_race_cancels(T):
    r = aj.reject_race(T)
    assert r.cancelled and not r.theft
    assert r.fb_height < r.expiry_height


def test_reject_race_spike():
    short = aj.reject_race(2, spike_level=80)
    assert short.theft and not short.cancelled
    long = aj.reject_race(144, spike_level=80)
    assert long.cancelled and not long.theft


def test_reject_race_deterministic():
    assert aj.reject_race(6, seed=3).to_dict() == aj.reject_race(6, seed=3).to_dict()


def test_lifecycle_small():
    res = aj.lifecycle(n_vaults=4, blocks=200, vault_amount=5_000_000)
    assert res.withdrawals == res.spends == 4
    assert res.timeline[:3] == [(0, 0, 0), (1, 0, 0), (1, 4, 0)]
    assert res.timeline[-1][1:] == (0, 0)
    assert res.max_unlocked_fraction <= 0.25
