"""The eleven acceptance criteria, each reported as one pass/fail line."""

import os
import random

import pytest

from covault import ajolote as aj, analysis as an, cli, covenant as cv, crypto, script, taproot
from covault.covenant import FeeStrategyKind
from covault.txmodel import ALL, FIELDS, FLAGS, Semantics, committed, sign_input, verify_input

from mutations import INDEX, base_case, mutate, signer

BOUNDARY_NM = [(2, 2), (3, 2)]
BOUNDARY_KJ = [(2, 2), (5, 2), (5, 3)]
MUTATIONS_PER_CELL = 200


def test_ac01_covenant_boundary(criterion):
    with criterion(1, "covenant boundary: no theft below (m, j), denial at k-j+1"):
        for n, m in BOUNDARY_NM:
            for k, j in BOUNDARY_KJ:
                rep = cv.coalition_search(n, m, k, j)
                assert rep.ok, rep.to_dict()
                assert rep.cases > 0
        assert [cv.integrity_bound(j, k) for k, j in BOUNDARY_KJ] == [1, 2, 3]


def test_ac02_sighash_matrix(criterion):
    with criterion(2, f"sighash mutation matrix, {MUTATIONS_PER_CELL} mutations per cell"):
        tx, pv = base_case()
        kp = signer()
        disagreements = []
        for sem in Semantics:
            for flag in FLAGS:
                sig = sign_input(tx, INDEX, kp.priv, sem, flag, pv)
                assert verify_input(tx, INDEX, kp.pub, sig, sem, pv)
                for f in FIELDS:
                    rng = random.Random(f"{sem.value}/{flag}/{f}")
                    want = not committed(sem, flag, f)
                    for _ in range(MUTATIONS_PER_CELL):
                        t2, pv2, idx = mutate(tx, pv, f, flag, rng)
                        if verify_input(t2, idx, kp.pub, sig, sem, pv2) != want:
                            disagreements.append((sem.value, str(flag), f))
                            break
        assert disagreements == []
        # the one documented deviation from the printed legacy table
        assert committed(Semantics.LEGACY, ALL, "other_sequences")


def test_ac03_fee_strategies(criterion):
    with criterion(3, "fee-strategy matrix, pinning and malleability, CPFP under a spike"):
        matrix = cv.fee_strategy_matrix(0)
        for kind in FeeStrategyKind:
            row = matrix[kind.value]
            assert row["broadcast"], kind
            assert row["pinned"] == row["table_pinnable"] == (kind is FeeStrategyKind.UNSECURED_FEE_INPUTS)
            assert row["malleable"] == row["table_malleable"]
        assert cv.cpfp_chain_under_spike(spike_level=50).advanced
        assert not cv.cpfp_chain_under_spike(spike_level=50, bump=False).advanced


def _policy_set(N):
    accts = {n: aj.account_of(crypto.master_key(bytes([n]) * 32), 0) for n in range(1, 6)}
    wts = {k: aj.account_of(crypto.master_key(bytes([100 + k]) * 32), 0) for k in range(1, N + 1)}
    enf = [crypto.keypair_from_label(f"acceptance/E{i}").pub for i in (1, 2)]
    return aj.policies_from_accounts(accts, wts, 6, N, 0, 0, enf)


def test_ac04_taptrees(criterion):
    with criterion(4, "TapTrees: control blocks, unvault depth N+5, tree-policy equivalence"):
        for N in (1, 3, 5):
            ps = _policy_set(N)
            for kind in aj.OUTPUT_TYPES:
                ot = aj.build_taptree(ps, kind)
                depths = []
                for i, lf in enumerate(ot.leaves):
                    cb = taproot.ControlBlock.from_bytes(ot.control_block(i).to_bytes())
                    assert taproot.verify_control_block(ot.spk[1:], lf, cb), (N, kind, i)
                    depths.append(len(cb.path))
                if kind == "unvault":
                    assert max(depths) == N + 5
            for kind in ("vault", "unvault", "fallback"):
                assert script.verify_tree_equivalence(aj.leaf_policies(kind, 6, N), aj.top_policy(kind, 6, N))
            top = aj.top_policy("receive", 6, N)
            assert script.verify_tree_equivalence(aj.leaf_policies("receive", 6, N), top)
            # expected failure: the literal table row for the second receive leaf
            assert not script.verify_tree_equivalence(aj.leaf_policies("receive", 6, N, True), top)


def test_ac05_lifecycle(criterion):
    with criterion(5, "lifecycle: simple-case timeline and 20-vault exposure under 5%"):
        w = aj.World.create(aj.default_config(2), 0)
        assert aj.setup_world(w)[-1].ok
        timeline = [w.output_counts()]
        assert aj.run_ceremony(w, "receive", amount=10_000_000).ok
        timeline.append(w.output_counts())
        dep = aj.run_ceremony(w, "vault_deposit", amounts=[10_000_000])
        assert dep.ok
        timeline.append(w.output_counts())
        v = dep.data["vaults"][0]
        assert aj.run_ceremony(w, "withdraw", v=v).ok
        w.advance(1)
        timeline.append(w.output_counts())
        w.advance(w.config.T - 1)
        assert aj.run_ceremony(w, "spend", v=v).ok
        w.advance(1)
        timeline.append(w.output_counts())
        assert timeline == [(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]

        res = aj.lifecycle(n_vaults=20, blocks=1000)
        assert res.withdrawals == res.spends == 20
        assert res.max_unlocked_fraction <= 0.05
        assert res.timeline[2] == (1, 20, 0)
        assert res.timeline[-1][1:] == (0, 0)


def test_ac06_reject_race(criterion):
    with criterion(6, "reject race at 40 sat/byte; spike to 80 wins at T=2, loses at T=144"):
        assert aj.FALLBACK_FEERATE == 40
        for T in (2, 6, 144):
            r = aj.reject_race(T)
            assert r.cancelled and not r.theft and r.fb_height < r.expiry_height, r.to_dict()
        short = aj.reject_race(2, spike_level=80)
        assert short.theft and not short.cancelled
        long = aj.reject_race(144, spike_level=80)
        assert long.cancelled and not long.theft


def test_ac07_proof_of_reserves(criterion):
    with criterion(7, "proof of reserves verifies, cannot finalize, demo tx rejected"):
        spec, actors, chain, custodians = cv.demo_session(2, 2, 3, 2, 0)
        res = cv.run_session(spec, actors, cv.default_channels(actors), chain)
        assert res.ok
        por = cv.proof_of_reserves(res.covenant, custodians)
        assert cv.verify_por(por)
        with pytest.raises(cv.Unsatisfiable):
            cv.finalize_with_por(res.covenant, por)
        assert not chain.submit(por.demo_tx)


def test_ac08_attack_trees(criterion):
    with criterion(8, "attack trees: 22 trees x 3 seeds agree with the cutset oracle"):
        lib = an.load_revault_library()
        assert len(lib) == 22
        checked = 0
        for tid in sorted(lib):
            params = an.oracle_params(tid)
            assert params.get("N", 0) <= 3
            node = an.instantiate(lib, tid, params)
            for seed in (0, 1, 2):
                tree = an.attach_attributes(node, an.random_attributes(node, seed))
                budget = sum(l.attrs.cost for l in an.leaves(tree)) / 3
                for q in an.QUERIES:
                    got = an.eval_tree(tree, q, budget).value
                    assert got == pytest.approx(an.oracle_eval(tree, q, budget)), (tid, seed, q)
                    checked += 1
        assert checked == 22 * 3 * 3
        with pytest.raises(an.BadParameters):
            an.instantiate(lib, "i", {"N": 3, "A": 4, "B": 1})
        with pytest.raises(an.BadParameters):
            an.instantiate(lib, "K", {"M": 3, "K": 2, "A": 1, "B": 1, "C": 1})


def test_ac09_observer(criterion):
    with criterion(9, "observer: full recall and precision on 50 planted + 500 noise"):
        corpus = an.build_observer_corpus(seed=0, n_sequences=50, n_noise=500)
        assert len(corpus.planted) == 50 and len(corpus.noise_txids) == 500
        detections, graph = an.observer_scan(corpus.chain)
        score = an.score_detections(detections, corpus)
        assert score["recall"] == 1.0 and score["precision"] == 1.0
        reuse = graph.edges_of("enforcement-key-reuse")
        rejects = [d for d in detections if d.kind == "reject"]
        assert rejects
        for d in rejects:
            assert any(set(e[:2]) & set(d.outputs) for e in reuse), d.txids


def test_ac10_tamper_detection(criterion):
    with criterion(10, "tamper detection: all in-capability tampers caught but the double compromise"):
        outcomes = [aj.run_tamper(s) for s in aj.tamper_catalogue()]
        assert all(o.as_expected for o in outcomes), [o.to_dict() for o in outcomes if not o.as_expected]
        undetected = [o.name for o in outcomes if not o.detected]
        assert undetected == ["mobile-and-computer-consistent-substitution"]
        denied = [aj.run_tamper(s) for s in aj.out_of_capability_tampers()]
        assert all(o.as_expected and o.denied for o in denied)


def test_ac11_determinism(criterion, tmp_path):
    with criterion(11, "determinism: bundled scenarios give byte-identical reports"):
        names = cli.bundled_scenarios()
        assert names
        for name in names:
            blobs = []
            for run in ("a", "b"):
                out = tmp_path / run / f"{name}.json"
                code, report = cli.run_scenario(name, out=str(out))
                assert code == cli.EXIT_PASS, name
                files = [out] + [out.parent / f for f in report["figures"]]
                blobs.append([(os.path.basename(p), open(p, "rb").read()) for p in files])
            assert blobs[0] == blobs[1], name
