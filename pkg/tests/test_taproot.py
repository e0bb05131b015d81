"""TapTree hashing, output keys and control blocks."""

import hashlib

import pytest
from hypothesis import given, settings, strategies as st

from covault import ajolote as aj, crypto, script, taproot
from covault.taproot import TapBranch, TapLeaf

KEYS = {n: crypto.keypair_from_label(f"tap/{n}").pub for n in "ABCDEFGH"}


def leaf(name):
    return TapLeaf(script.compile(script.pk(name), KEYS))


def _tag(tag, data):
    th = hashlib.sha256(tag.encode()).digest()
    return hashlib.sha256(th + th + data).digest()


def _leaf_hash_oracle(lf):
    body = lf.script.to_bytes()
    return _tag("TapLeaf", bytes([0xC0]) + len(body).to_bytes(4, "little") + body)


def _branch_oracle(a, b):
    return _tag("TapBranch", min(a, b) + max(a, b))


def _accounts(N):
    accts = {n: aj.account_of(crypto.master_key(bytes([n]) * 32), 0) for n in range(1, 6)}
    wts = {k: aj.account_of(crypto.master_key(bytes([100 + k]) * 32), 0) for k in range(1, N + 1)}
    return accts, wts


def _policy_set(N, j=0):
    accts, wts = _accounts(N)
    enf = [crypto.keypair_from_label(f"tap/E{i}/{j}").pub for i in (1, 2)]
    return aj.policies_from_accounts(accts, wts, 6, N, 0, j, enf)


# merkle root

def test_single_leaf_root():
    a = leaf("A")
    assert taproot.merkle_root(a) == a.leaf_hash() == _leaf_hash_oracle(a)


def test_three_leaf_root():
    a, b, c = leaf("A"), leaf("B"), leaf("C")
    tree = TapBranch(TapBranch(a, b), c)
    want = _branch_oracle(_branch_oracle(_leaf_hash_oracle(a), _leaf_hash_oracle(b)), _leaf_hash_oracle(c))
    assert taproot.merkle_root(tree) == want


def test_child_swap_same_root():
    a, b, c = leaf("A"), leaf("B"), leaf("C")
    assert taproot.merkle_root(TapBranch(TapBranch(a, b), c)) == taproot.merkle_root(TapBranch(c, TapBranch(b, a)))


# output keys

def test_output_key_deterministic_and_tree_sensitive():
    P = crypto.keypair_from_label("tap/internal").pub
    t1 = TapBranch(leaf("A"), leaf("B"))
    t2 = TapBranch(leaf("A"), leaf("C"))
    assert taproot.output_key(P, t1) == taproot.output_key(P, t1)
    assert taproot.output_key(P, t1).Q != taproot.output_key(P, t2).Q


def test_output_key_matches_tweak_oracle():
    kp = crypto.keypair_from_label("tap/internal")
    tree = TapBranch(leaf("A"), leaf("B"))
    t = int.from_bytes(_tag("TapTweak", kp.pub.data + taproot.merkle_root(tree)), "big") % crypto.ORDER
    out = taproot.output_key(kp.pub, tree)
    assert out.Q == crypto.point_from_scalar((kp.priv + t) % crypto.ORDER)


def test_nums_point():
    assert taproot.nums_internal_key() == taproot.nums_internal_key() == taproot.NUMS
    assert taproot.NUMS.is_valid()
    # no keystore scalar maps to it
    assert all(crypto.keypair_from_label(f"tap/{n}").pub != taproot.NUMS for n in range(50))


# control blocks

def test_round_trip_and_tamper():
    leaves = [leaf(n) for n in "ABCDE"]
    tree = taproot.comb(leaves)
    P = taproot.NUMS
    Q = taproot.output_key(P, tree).Q
    for lf in leaves:
        cb = taproot.prove_inclusion(tree, lf, P)
        assert taproot.verify_control_block(Q, lf, taproot.ControlBlock.from_bytes(cb.to_bytes()))
        if cb.path:
            bad = taproot.ControlBlock(P, (bytes(32),) + cb.path[1:])
            assert not taproot.verify_control_block(Q, lf, bad)
    with pytest.raises(taproot.NotALeaf):
        taproot.prove_inclusion(tree, leaf("H"), P)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from("ABCDEFGH"), min_size=1, max_size=8, unique=True), st.booleans())
def test_round_trip_property(names, use_comb):
    leaves = [leaf(n) for n in names]
    tree = taproot.comb(leaves) if use_comb else taproot.balanced(leaves)
    Q = taproot.output_key(taproot.NUMS, tree).Q
    for lf in leaves:
        assert taproot.verify_control_block(Q, lf, taproot.prove_inclusion(tree, lf, taproot.NUMS))


@pytest.mark.parametrize("N", [1, 3, 5])
def test_unvault_tree(N):
    ps = _policy_set(N)
    ot = aj.build_taptree(ps, "unvault")
    assert len(ot.leaves) == 2 + 5 + N
    spk = ot.spk
    depths = []
    for i, lf in enumerate(ot.leaves):
        cb = ot.control_block(i)
        assert taproot.verify_control_block(spk[1:], lf, cb)
        depths.append(len(cb.path))
    assert max(depths) == N + 5


def test_control_block_reveals_no_scripts():
    ot = aj.build_taptree(_policy_set(2), "unvault")
    cb = ot.control_block(0).to_bytes()
    for other in ot.leaves[1:]:
        assert other.script.to_bytes() not in cb
    for k in ot.leaves[3].script.keys():
        assert k.data not in cb


@pytest.mark.parametrize("kind", aj.OUTPUT_TYPES)
def test_per_vault_roots_distinct(kind):
    roots = {taproot.merkle_root(aj.build_taptree(_policy_set(1, j), kind).tree) for j in range(100)}
    expected = 1 if kind == "receive" else 100  # receive keys follow h, not the vault cursor
    assert len(roots) == expected


def test_script_path_witness_split():
    a, b = leaf("A"), leaf("B")
    tree = TapBranch(a, b)
    cb = taproot.prove_inclusion(tree, a, taproot.NUMS)
    w = taproot.script_path_witness((b"sig",), a, cb, annex=b"\x50x")
    stack, lf, cb2, annex = taproot.split_script_path_witness(w)
    assert (stack, lf, cb2, annex) == ((b"sig",), a, cb, b"\x50x")
