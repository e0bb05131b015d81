"""Deleted-key covenants: lock scripts, the eleven-step construction
session, enforcement status, composition, fee strategies and
proof-of-reserves.

The covenant-bound output is a taproot output with a NUMS internal key and
a single leaf ``l_cov = l_enf || l_cust``. Both halves are CHECKSIGADD
multisigs; the enforcement half ends in NUMEQUALVERIFY so the two can be
concatenated.
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from . import crypto, script, taproot, txmodel
from .chainsim import Accepted, Chain, Outpoint, Rejected, key_script
from .crypto import GroupPoint, KeyPair
from .script import Instr, ScriptProgram
from .txmodel import ALL, SighashFlag, Transaction, TxInput, TxOutput

SEQ_RBF = 0xFFFFFFFD
A1CP_ALL = SighashFlag(txmodel.Base.ALL, True)
TAPROOT = txmodel.Semantics.TAPROOT


class CovenantError(Exception):
    pass


class Abort(CovenantError):
    def __init__(self, step: int, reason: str, party: str):
        super().__init__(f"step {step}: {reason} ({party})")
        self.step, self.reason, self.party = step, reason, party


class UnsafeChain(CovenantError):
    pass


class UnsafeWithDependents(CovenantError):
    pass


class Unsupported(CovenantError):
    pass


class MissingChannel(CovenantError):
    pass


Unsatisfiable = script.Unsatisfiable


# lock scripts


def multisig_ops(keys: Sequence[GroupPoint], threshold: int, verify: bool) -> List[Instr]:
    """``K1 CHECKSIG K2 CHECKSIGADD ... Kn CHECKSIGADD t NUMEQUAL[VERIFY]``."""
    if not 1 <= threshold <= len(keys):
        raise CovenantError(f"threshold {threshold} of {len(keys)}")
    ops = [Instr("PUSH", keys[0]), Instr("CHECKSIG")]
    for k in keys[1:]:
        ops += [Instr("PUSH", k), Instr("CHECKSIGADD")]
    return ops + [Instr("PUSH", threshold), Instr("NUMEQUALVERIFY" if verify else "NUMEQUAL")]


def covenant_program(P: Sequence[GroupPoint], m: int, Q: Sequence[GroupPoint], j: int) -> ScriptProgram:
    if not Q:
        return ScriptProgram(tuple(multisig_ops(P, m, verify=False)))
    return ScriptProgram(tuple(multisig_ops(P, m, verify=True) + multisig_ops(Q, j, verify=False)))


def custodial_program(Q: Sequence[GroupPoint], j: int) -> ScriptProgram:
    return ScriptProgram(tuple(multisig_ops(Q, j, verify=False)))


def parse_covenant_program(prog: ScriptProgram) -> Tuple[List[GroupPoint], int, List[GroupPoint], int]:
    """Inverse of ``covenant_program``; raises CovenantError on any other shape."""
    ops = list(prog.ops)

    def take_multisig(pos, terminal):
        keys = []
        while pos + 1 < len(ops) and ops[pos].op == "PUSH" and isinstance(ops[pos].arg, GroupPoint):
            want = "CHECKSIG" if not keys else "CHECKSIGADD"
            if ops[pos + 1].op != want:
                raise CovenantError("bad multisig body")
            keys.append(ops[pos].arg)
            pos += 2
        if not keys or pos + 1 >= len(ops) or ops[pos].op != "PUSH" or not isinstance(ops[pos].arg, int):
            raise CovenantError("missing threshold")
        t = ops[pos].arg
        if ops[pos + 1].op != terminal or not 1 <= t <= len(keys):
            raise CovenantError("bad threshold terminal")
        return keys, t, pos + 2

    P, m, pos = take_multisig(0, "NUMEQUALVERIFY")
    Q, j, pos = take_multisig(pos, "NUMEQUAL")
    if pos != len(ops):
        raise CovenantError("trailing instructions")
    return P, m, Q, j


def multisig_witness(keys: Sequence[GroupPoint], sigs: Mapping[GroupPoint, bytes]) -> List[bytes]:
    """Stack items consumed in key order: a signature or an empty element."""
    return [sigs.get(k, b"") for k in keys]


def covenant_witness(P, Q, enf_sigs: Mapping[GroupPoint, bytes], cust_sigs: Mapping[GroupPoint, bytes],
                     leaf: taproot.TapLeaf) -> Tuple[bytes, ...]:
    consumed = multisig_witness(P, enf_sigs) + multisig_witness(Q, cust_sigs)
    cb = taproot.prove_inclusion(leaf, leaf, taproot.NUMS)
    return taproot.script_path_witness(tuple(reversed(consumed)), leaf, cb)


# single-key taproot outputs used for funding and fee wallets


def key_leaf(pub: GroupPoint) -> taproot.TapLeaf:
    return taproot.TapLeaf(ScriptProgram((Instr("PUSH", pub), Instr("CHECKSIG"))))


def key_output(pub: GroupPoint) -> bytes:
    return taproot.output_key(taproot.NUMS, key_leaf(pub)).script_pubkey


def key_witness(sig: bytes, pub: GroupPoint) -> Tuple[bytes, ...]:
    leaf = key_leaf(pub)
    return taproot.script_path_witness((sig,), leaf, taproot.prove_inclusion(leaf, leaf, taproot.NUMS))


def sign_key_input(tx: Transaction, i: int, kp: KeyPair, prevouts, flag: SighashFlag = ALL) -> Transaction:
    sig = txmodel.sign_input(tx, i, kp.priv, TAPROOT, flag, prevouts)
    return tx.with_witness(i, key_witness(sig, kp.pub))


# specification and artifacts


@dataclass
class CovenantSpec:
    """Parameters of one covenant; enforcement keys are produced in-session."""

    n: int
    m: int
    custodial: Tuple[GroupPoint, ...]
    j: int
    amount: int
    destination: bytes
    cov_fee: int = 2_000
    enf_flags: Tuple[SighashFlag, ...] = ()
    cust_flag: SighashFlag = ALL
    extra_outputs: Tuple[TxOutput, ...] = ()
    deposit_feerate: int = 10
    fee_levels: Tuple[int, ...] = ()  # sat/byte variants signed up front

    def __post_init__(self):
        self.custodial = tuple(self.custodial)
        if not 1 <= self.m <= self.n:
            raise CovenantError("need 1 <= m <= n")
        if self.custodial and not 1 <= self.j <= len(self.custodial):
            raise CovenantError("need 1 <= j <= k")
        if not self.enf_flags:
            self.enf_flags = (ALL,) * self.n
        if len(self.enf_flags) != self.n:
            raise CovenantError("one sighash flag per enforcer")

    @property
    def k(self) -> int:
        return len(self.custodial)

    def cov_outputs(self) -> Tuple[TxOutput, ...]:
        rest = self.amount - self.cov_fee - sum(o.amount for o in self.extra_outputs)
        if rest <= 0:
            raise CovenantError("covenant amount does not cover fee and extra outputs")
        return (TxOutput(rest, self.destination),) + tuple(self.extra_outputs)


@dataclass
class Covenant:
    spec: CovenantSpec
    P: Tuple[GroupPoint, ...]
    program: ScriptProgram
    tx_dep: Transaction
    dep_index: int
    tx_cov: Transaction  # unsigned template
    enf_sigs: Dict[GroupPoint, bytes]
    deletions: Dict[str, crypto.DeletionRecord] = field(default_factory=dict)
    stored_at: Set[str] = field(default_factory=set)
    attacker_enf: Dict[GroupPoint, int] = field(default_factory=dict)  # never-deleted scalars
    variants: Dict[int, Tuple[Transaction, Dict[GroupPoint, bytes]]] = field(default_factory=dict)

    @property
    def leaf(self) -> taproot.TapLeaf:
        return taproot.TapLeaf(self.program)

    @property
    def Q(self) -> Tuple[GroupPoint, ...]:
        return parse_covenant_program(self.program)[2] if self.spec.custodial else ()

    @property
    def outpoint(self) -> Outpoint:
        return (self.tx_dep.txid, self.dep_index)

    @property
    def prevout(self) -> TxOutput:
        return self.tx_dep.outputs[self.dep_index]

    def prevouts_for(self, tx: Transaction, chain: Optional[Chain] = None) -> List[TxOutput]:
        outs = []
        for txin in tx.inputs:
            if txin.outpoint == self.outpoint:
                outs.append(self.prevout)
            elif chain is not None and chain.output(txin.outpoint) is not None:
                outs.append(chain.output(txin.outpoint))
            else:
                raise CovenantError("unknown prevout")
        return outs


def covenant_lock(P, m, Q, j) -> Tuple[ScriptProgram, bytes]:
    prog = covenant_program(P, m, Q, j)
    return prog, taproot.output_key(taproot.NUMS, taproot.TapLeaf(prog)).script_pubkey


def build_cov_tx(spec: CovenantSpec, outpoint: Outpoint) -> Transaction:
    return Transaction(2, (TxInput(outpoint[0], outpoint[1], SEQ_RBF),), spec.cov_outputs(), ())


def fee_variant(spec: CovenantSpec, outpoint: Outpoint, rate: int, P, Q, leaf) -> Transaction:
    """TX_cov paying ``rate`` sat/byte of its finalized size."""
    base = build_cov_tx(spec, outpoint)
    dummy = {p: b"\x00" * 65 for p in list(P)[:spec.m]}
    dummy_c = {q: b"\x00" * 65 for q in list(Q)[:spec.j]}
    size = base.with_witness(0, covenant_witness(P, Q, dummy, dummy_c, leaf)).size
    first = base.outputs[0]
    amount = spec.amount - rate * size - sum(o.amount for o in base.outputs[1:])
    if amount <= 0:
        raise CovenantError(f"fee level {rate} exceeds the covenant amount")
    return Transaction(base.version, base.inputs, (TxOutput(amount, first.script),) + base.outputs[1:], ())


def build_deposit(depositor: KeyPair, funding: Outpoint, funding_out: TxOutput, cov_script: bytes,
                  amount: int, feerate: int) -> Transaction:
    """TX_dep: pays ``amount`` to the covenant output, change back to the depositor."""
    change_script = key_output(depositor.pub)
    draft = Transaction(2, (TxInput(funding[0], funding[1], SEQ_RBF),),
                        (TxOutput(amount, cov_script), TxOutput(0, change_script)), ())
    draft = draft.with_witness(0, key_witness(b"\x00" * 65, depositor.pub))
    fee = feerate * draft.size
    change = funding_out.amount - amount - fee
    if change < 0:
        raise CovenantError("depositor funding too small")
    outs = (TxOutput(amount, cov_script),) + ((TxOutput(change, change_script),) if change else ())
    tx = Transaction(2, draft.inputs, outs, ())
    return sign_key_input(tx, 0, depositor, [funding_out])


def enforcement_sign(tx_cov: Transaction, priv: int, flag: SighashFlag, prevout: TxOutput) -> bytes:
    return txmodel.sign_input(tx_cov, 0, priv, TAPROOT, flag, [prevout])


# session


@dataclass(frozen=True)
class Channel:
    a: str
    b: str
    authenticated: bool = True
    encrypted: bool = True


@dataclass
class Actors:
    depositor: KeyPair
    funding: Outpoint
    custodians: Dict[str, KeyPair]  # name -> key, in l_cust order
    enforcers: Tuple[str, ...]
    deletion_method: crypto.DeletionMethod = crypto.DeletionMethod.DESTROY


@dataclass(frozen=True)
class Tamper:
    """A single adversarial act against the session.

    kinds:
      bad_enf_sig        enforcer ``target`` returns a corrupted signature
      omit_custodian     l_cov sent to custodian ``target`` lacks its key
      swap_custodians    ``count`` custodial keys replaced on chain, victims shown the honest l_cov
      swap_enforcers     ``count`` enforcement keys replaced on chain, victims shown the honest l_cov
      corrupt_sig_set    step-9 signature set altered in transit to custodian ``target``
    ``credentials`` names parties whose channel credentials the adversary holds
    (or who are themselves corrupt).
    """

    kind: str
    target: str = ""
    count: int = 1
    credentials: Tuple[str, ...] = ()


@dataclass
class SessionResult:
    ok: bool
    step: int
    covenant: Optional[Covenant]
    transcript: List[dict]
    abort: Optional[Abort] = None
    aware: List[str] = field(default_factory=list)
    tamper_blocked: bool = False
    attacker_custodial: Dict[GroupPoint, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"ok": self.ok, "step": self.step, "transcript": self.transcript,
                           "abort": None if self.abort is None else
                           {"step": self.abort.step, "reason": self.abort.reason, "party": self.abort.party},
                           "aware": self.aware, "tamper_blocked": self.tamper_blocked}, sort_keys=True)


def _needs_credentials(t: Tamper) -> Optional[str]:
    """Whose credentials a tamper needs; None for a party misbehaving itself."""
    if t.kind == "bad_enf_sig":
        return None
    if t.kind in ("omit_custodian", "swap_custodians", "swap_enforcers", "corrupt_sig_set"):
        return "depositor"
    return t.target


def run_session(spec: CovenantSpec, actors: Actors, channels: Iterable[Channel], chain: Chain,
                tamper: Optional[Tamper] = None, seed: int = 0, unresponsive: Iterable[str] = (),
                deadline: int = 10, confirm_blocks: int = 1) -> SessionResult:
    """Run the eleven steps; ``confirm_blocks`` blocks are mined after broadcast."""
    chans = {frozenset((c.a, c.b)): c for c in channels}
    cust_names = list(actors.custodians)
    if len(cust_names) != spec.k:
        raise CovenantError("custodian count does not match spec")
    for party in cust_names + list(actors.enforcers):
        if frozenset(("depositor", party)) not in chans:
            raise MissingChannel(party)
    if len(actors.enforcers) != spec.n:
        raise CovenantError("enforcer count does not match spec")
    transcript: List[dict] = []
    silent = set(unresponsive)
    tick = 0

    def log(step, frm, to, msg, **kw):
        transcript.append({"step": step, "tick": tick, "from": frm, "to": to, "msg": msg, **kw})

    def fail(step, reason, party):
        ab = Abort(step, reason, party)
        log(step, party, "*", "abort", reason=reason)
        return SessionResult(False, step, None, transcript, ab)

    # a tamper lands only if the adversary holds the needed credentials or
    # the channel is unauthenticated
    blocked = False
    if tamper is not None:
        need = _needs_credentials(tamper)
        peer = tamper.target or (cust_names[0] if cust_names else "")
        ch = chans.get(frozenset(("depositor", peer)))
        if need is not None and need not in tamper.credentials and (ch is None or ch.authenticated):
            blocked = True
            log(0, "adversary", need, "tamper-denied", kind=tamper.kind)
            tamper = None

    def wait_for(step, party):
        nonlocal tick
        if party in silent:
            tick += deadline
            return fail(step, "Timeout", "depositor")
        tick += 1
        return None

    # step 1
    Q_honest = [actors.custodians[c].pub for c in cust_names]
    for c in cust_names:
        if (r := wait_for(1, c)):
            return r
        log(1, c, "depositor", "custodial-key", key=actors.custodians[c].pub.hex())

    # step 2: ephemeral enforcement keys
    stores: Dict[str, crypto.Keystore] = {}
    P_honest: List[GroupPoint] = []
    for e in actors.enforcers:
        if (r := wait_for(2, e)):
            return r
        kp = crypto.keypair_gen(crypto.tagged_hash("covault/enforcer", f"{seed}/{e}".encode()))
        stores[e] = crypto.Keystore(e)
        stores[e].add("p", kp.priv)
        P_honest.append(kp.pub)
        log(2, e, "depositor", "enforcement-key", key=kp.pub.hex())

    # step 3: the depositor assembles TX_dep, possibly with swapped keys
    P_chain, Q_chain = list(P_honest), list(Q_honest)
    attacker_enf: Dict[GroupPoint, int] = {}
    attacker_cust: Dict[GroupPoint, int] = {}
    victims: List[str] = []
    if tamper is not None and tamper.kind == "swap_enforcers":
        for idx in range(min(tamper.count, spec.n)):
            kp = crypto.keypair_from_label(f"attacker-enf/{seed}/{idx}")
            P_chain[idx] = kp.pub
            attacker_enf[kp.pub] = kp.priv
            victims.append(actors.enforcers[idx])
    if tamper is not None and tamper.kind == "swap_custodians":
        for idx in range(min(tamper.count, spec.k)):
            kp = crypto.keypair_from_label(f"attacker-cust/{seed}/{idx}")
            Q_chain[idx] = kp.pub
            attacker_cust[kp.pub] = kp.priv
            victims.append(cust_names[idx])
    program, cov_script = covenant_lock(P_chain, spec.m, Q_chain, spec.j)
    fund_out = chain.output(actors.funding)
    if fund_out is None:
        return fail(3, "MissingFunding", "depositor")
    tx_dep = build_deposit(actors.depositor, actors.funding, fund_out, cov_script, spec.amount, spec.deposit_feerate)
    outpoint = (tx_dep.txid, 0)
    log(3, "depositor", "depositor", "assemble-deposit", txid=tx_dep.txid.hex())

    # step 4: deposit details; victims of a swap see the honest l_cov
    honest_prog = covenant_program(P_honest, spec.m, Q_honest, spec.j)
    views: Dict[str, ScriptProgram] = {}
    for party in list(actors.enforcers) + cust_names:
        view = honest_prog if party in victims else program
        if tamper is not None and tamper.kind == "omit_custodian" and party == tamper.target:
            i = cust_names.index(party)
            fake = crypto.keypair_from_label(f"omitted/{seed}").pub
            Qv = list(Q_chain)
            Qv[i] = fake
            view = covenant_program(P_chain, spec.m, Qv, spec.j)
        views[party] = view
        log(4, "depositor", party, "deposit-details", txid=tx_dep.txid.hex(), index=0,
            amount=spec.amount, l_cov=view.to_bytes().hex())

    # steps 5-6: fill TX_cov input, check l_cov format and own-key inclusion
    tx_cov = build_cov_tx(spec, outpoint)
    for e_idx, e in enumerate(actors.enforcers):
        try:
            Pv, mv, Qv, jv = parse_covenant_program(views[e])
        except CovenantError:
            return fail(6, "BadScript", e)
        if len(Pv) <= e_idx or Pv[e_idx] != P_honest[e_idx] or mv != spec.m or jv != spec.j:
            return fail(6, "BadScript", e)
    for c_idx, c in enumerate(cust_names):
        try:
            Pv, mv, Qv, jv = parse_covenant_program(views[c])
        except CovenantError:
            return fail(6, "BadScript", c)
        if len(Qv) <= c_idx or Qv[c_idx] != Q_honest[c_idx] or jv != spec.j or mv != spec.m:
            return fail(6, "BadScript", c)
        log(6, c, c, "verified-l_cov")

    # step 7: sign over each party's own view, then delete
    deletions: Dict[str, crypto.DeletionRecord] = {}
    sigs: Dict[GroupPoint, bytes] = {}
    leaf_chain = taproot.TapLeaf(program)
    variant_txs = {rate: fee_variant(spec, outpoint, rate, P_chain, Q_chain, leaf_chain) for rate in spec.fee_levels}
    variant_sigs: Dict[int, Dict[GroupPoint, bytes]] = {rate: {} for rate in spec.fee_levels}
    for e_idx, e in enumerate(actors.enforcers):
        if (r := wait_for(7, e)):
            return r
        view_script = taproot.output_key(taproot.NUMS, taproot.TapLeaf(views[e])).script_pubkey
        msg = txmodel.sighash_msg(tx_cov, 0, TAPROOT, spec.enf_flags[e_idx], [TxOutput(spec.amount, view_script)])
        sig = stores[e].sign("p", msg) + bytes([spec.enf_flags[e_idx].to_byte()])
        if tamper is not None and tamper.kind == "bad_enf_sig" and tamper.target == e:
            sig = bytes([sig[0] ^ 1]) + sig[1:]
        for rate, vtx in variant_txs.items():
            vmsg = txmodel.sighash_msg(vtx, 0, TAPROOT, spec.enf_flags[e_idx], [TxOutput(spec.amount, view_script)])
            variant_sigs[rate][P_honest[e_idx]] = stores[e].sign("p", vmsg) + bytes([spec.enf_flags[e_idx].to_byte()])
        deletions[e] = crypto.delete_key(stores[e], "p", actors.deletion_method)
        sigs[P_honest[e_idx]] = sig
        log(7, e, "depositor", "enforcement-signature", sig=sig.hex(), deleted=actors.deletion_method.value)

    # a key-swapping depositor forges signatures for the replaced keys
    for pub, priv in attacker_enf.items():
        sigs[pub] = enforcement_sign(tx_cov, priv, ALL, tx_dep.outputs[0])
        for rate, vtx in variant_txs.items():
            variant_sigs[rate][pub] = enforcement_sign(vtx, priv, ALL, tx_dep.outputs[0])

    # step 8: depositor verifies each enforcement signature it will use
    prevout = tx_dep.outputs[0]
    for e_idx, e in enumerate(actors.enforcers):
        pub = P_chain[e_idx]
        if not txmodel.verify_input(tx_cov, 0, pub, sigs[pub], TAPROOT, [prevout]):
            return fail(8, "BadSignature", "depositor")
    res = chain.submit(tx_dep)
    if not res:
        return fail(8, f"DepositRejected:{res.reason}", "depositor")
    log(8, "depositor", "network", "broadcast-deposit", txid=tx_dep.txid.hex())

    # steps 9-10: signature set to custodians
    enf_sigs = {pub: sigs[pub] for pub in P_chain}
    stored: Set[str] = set()
    for c in cust_names:
        delivered = dict(enf_sigs)
        if tamper is not None and tamper.kind == "corrupt_sig_set" and tamper.target == c:
            first = P_chain[0]
            delivered[first] = bytes([delivered[first][0] ^ 1]) + delivered[first][1:]
        log(9, "depositor", c, "enforcement-signatures", count=len(delivered))
        for pub in P_chain:
            if not txmodel.verify_input(tx_cov, 0, pub, delivered[pub], TAPROOT, [prevout]):
                return fail(10, "BadSignature", c)
        stored.add(c)
        log(10, c, c, "stored-covenant-tx")

    # step 11: inclusion, then everyone compares the chain with their view
    chain.mine(confirm_blocks)
    aware = []
    for party in list(actors.enforcers) + cust_names:
        if views[party] != program:
            aware.append(party)
            log(11, party, party, "exclusion-detected")
        else:
            log(11, party, party, "deposit-verified", confirmations=chain.confirmations(tx_dep.txid))
    variants = {rate: (variant_txs[rate], {p: variant_sigs[rate][p] for p in P_chain}) for rate in spec.fee_levels}
    cov = Covenant(spec, tuple(P_chain), program, tx_dep, 0, tx_cov, enf_sigs, deletions, stored, attacker_enf,
                   variants)
    return SessionResult(True, 11, cov, transcript, None, aware, blocked, attacker_cust)


def default_channels(actors: Actors, authenticated: bool = True) -> List[Channel]:
    return [Channel("depositor", p, authenticated, authenticated)
            for p in list(actors.custodians) + list(actors.enforcers)]


# status


class StatusKind(str, enum.Enum):
    PENDING = "Pending"
    ACTIVE = "Active"
    BROKEN = "Broken"


@dataclass(frozen=True)
class CovenantStatus:
    kind: StatusKind
    reason: str = ""

    def __str__(self):
        return self.kind.value + (f"({self.reason})" if self.reason else "")


def check_enforcement(cov: Covenant, chain: Chain,
                      recovery_attempts: Iterable[Tuple[str, crypto.AttackerLevel]] = ()) -> CovenantStatus:
    """Conditions: signed TX_cov stored, enforcement keys gone, deposit deep."""
    if not cov.stored_at:
        return CovenantStatus(StatusKind.BROKEN, "covenant transaction lost at every custodian")
    recovered = set(cov.attacker_enf)
    for enforcer, level in recovery_attempts:
        rec = cov.deletions.get(enforcer)
        if rec is not None and crypto.attempt_recovery(rec, level) is not None:
            recovered.add(rec.pub)
    if len(recovered) >= cov.spec.m:
        return CovenantStatus(StatusKind.BROKEN, f"{len(recovered)} enforcement keys recovered")
    if chain.confirmations(cov.tx_dep.txid) >= chain.config.deep_confirmations:
        return CovenantStatus(StatusKind.ACTIVE)
    return CovenantStatus(StatusKind.PENDING)


# finalisation


def sign_custodial(cov: Covenant, tx: Transaction, key: KeyPair, chain: Optional[Chain] = None,
                   flag: Optional[SighashFlag] = None) -> bytes:
    i = [t.outpoint for t in tx.inputs].index(cov.outpoint)
    return txmodel.sign_input(tx, i, key.priv, TAPROOT, flag or cov.spec.cust_flag, cov.prevouts_for(tx, chain))


def finalize(cov: Covenant, oracle: Callable[[GroupPoint], Optional[bytes]],
             tx: Optional[Transaction] = None, enf_sigs: Optional[Mapping[GroupPoint, bytes]] = None) -> Transaction:
    """Attach enforcement and custodial signatures; ``oracle`` returns a
    custodial signature for a key or None."""
    tx = tx or cov.tx_cov
    enf = dict(cov.enf_sigs if enf_sigs is None else enf_sigs)
    if sum(1 for p in cov.P if enf.get(p)) < cov.spec.m:
        raise Unsatisfiable("not enough enforcement signatures")
    enf_used = {}
    for p in cov.P:
        if enf.get(p) and len(enf_used) < cov.spec.m:
            enf_used[p] = enf[p]
    cust_used = {}
    for q in cov.Q:
        if len(cust_used) >= cov.spec.j:
            break
        s = oracle(q)
        if s:
            cust_used[q] = s
    if len(cust_used) < cov.spec.j:
        raise Unsatisfiable(f"{len(cust_used)} of {cov.spec.j} custodial signatures")
    i = [t.outpoint for t in tx.inputs].index(cov.outpoint)
    return tx.with_witness(i, covenant_witness(cov.P, cov.Q, enf_used, cust_used, cov.leaf))


def key_oracle(cov: Covenant, tx: Transaction, keys: Iterable[KeyPair], chain: Optional[Chain] = None,
               flag: Optional[SighashFlag] = None):
    by_pub = {k.pub: k for k in keys}

    def oracle(q):
        kp = by_pub.get(q)
        return None if kp is None else sign_custodial(cov, tx, kp, chain, flag)

    return oracle


# boundary properties


def theft_attempt(cov: Covenant, chain: Chain, recovered_enf: Mapping[GroupPoint, int],
                  cust_keys: Iterable[KeyPair], thief_script: bytes) -> Rejected | Accepted:
    """Best-effort theft: fresh signatures from held keys, replayed stored
    enforcement signatures for the rest. Checked, not submitted."""
    prev = cov.prevout
    tx = Transaction(2, (TxInput(cov.outpoint[0], cov.outpoint[1], SEQ_RBF),),
                     (TxOutput(prev.amount - cov.spec.cov_fee, thief_script),), ())
    enf = {}
    for p in cov.P:
        if p in recovered_enf:
            enf[p] = txmodel.sign_input(tx, 0, recovered_enf[p], TAPROOT, ALL, [prev])
    for p in cov.P:
        if len(enf) >= cov.spec.m:
            break
        if p not in enf:
            enf[p] = cov.enf_sigs[p]  # replay
    held = {k.pub: k for k in cust_keys}
    cust = {}
    for q in cov.Q:
        if q in held and len(cust) < cov.spec.j:
            cust[q] = txmodel.sign_input(tx, 0, held[q].priv, TAPROOT, ALL, [prev])
    enf_pick = {p: enf[p] for p in cov.P[:] if p in enf}
    enf_pick = dict(list(enf_pick.items())[:cov.spec.m])
    tx = tx.with_witness(0, covenant_witness(cov.P, cov.Q, enf_pick, cust, cov.leaf))
    fee, err = chain.check_tx(tx)
    return err if err is not None else Accepted(tx.txid)


def denial_blocks(cov: Covenant, chain: Chain, custodians: Sequence[KeyPair], withholding: Iterable[int]) -> bool:
    """True when the custodians outside ``withholding`` cannot finalize TX_cov."""
    held = set(withholding)
    honest = [k for i, k in enumerate(custodians) if i not in held]
    try:
        tx = finalize(cov, key_oracle(cov, cov.tx_cov, honest))
    except Unsatisfiable:
        return True
    fee, err = chain.check_tx(tx)
    return err is not None


def integrity_bound(j: int, k: int) -> int:
    """Custodial compromises tolerated: up to but not including min(j, k-j+1)."""
    return min(j, k - j + 1)


def demo_session(n: int, m: int, k: int, j: int, seed: int = 0, amount: int = 1_000_000,
                 chain: Optional[Chain] = None, method=crypto.DeletionMethod.DESTROY,
                 **spec_kw) -> Tuple[CovenantSpec, Actors, Chain, List[KeyPair]]:
    """A funded depositor with ``k`` labelled custodians and ``n`` enforcers."""
    chain = chain or Chain()
    depositor = crypto.keypair_from_label(f"depositor/{seed}")
    custodians = [crypto.keypair_from_label(f"custodian/{seed}/{i}") for i in range(k)]
    funding = chain.fund(key_output(depositor.pub), amount + 100_000)
    spec = CovenantSpec(n, m, tuple(c.pub for c in custodians), j, amount,
                        key_output(crypto.keypair_from_label(f"destination/{seed}").pub), **spec_kw)
    actors = Actors(depositor, funding, {f"C{i + 1}": c for i, c in enumerate(custodians)},
                    tuple(f"E{i + 1}" for i in range(n)), crypto.DeletionMethod(method))
    return spec, actors, chain, custodians


@dataclass
class BoundaryReport:
    n: int
    m: int
    k: int
    j: int
    cases: int
    theft_counterexamples: List[Tuple[Tuple[int, ...], Tuple[int, ...]]]
    denial_counterexamples: List[Tuple[int, ...]]

    @property
    def ok(self) -> bool:
        return not self.theft_counterexamples and not self.denial_counterexamples

    def to_dict(self) -> dict:
        return {"n": self.n, "m": self.m, "k": self.k, "j": self.j, "cases": self.cases,
                "theft_counterexamples": [list(map(list, c)) for c in self.theft_counterexamples],
                "denial_counterexamples": [list(c) for c in self.denial_counterexamples],
                "integrity_bound": integrity_bound(self.j, self.k), "ok": self.ok}


def _subsets(size: int) -> List[Tuple[int, ...]]:
    return [c for r in range(size + 1) for c in itertools.combinations(range(size), r)]


def coalition_search(n: int, m: int, k: int, j: int, seed: int = 0) -> BoundaryReport:
    """Exhaustive check of every (recovered enforcers, corrupt custodians)
    coalition and every withholding set against the thresholds.

    Theft must succeed iff at least m enforcement keys are recovered and j
    custodial keys are held; denial must hold iff at least k-j+1 custodians
    withhold.
    """
    spec, actors, chain, custodians = demo_session(n, m, k, j, seed, method=crypto.DeletionMethod.DISPOSE)
    res = run_session(spec, actors, default_channels(actors), chain, seed=seed,
                      confirm_blocks=chain.config.deep_confirmations)
    if not res.ok:
        raise CovenantError(f"session failed: {res.abort}")
    cov = res.covenant
    recovered = {e: crypto.attempt_recovery(cov.deletions[e], crypto.AttackerLevel.LOW) for e in actors.enforcers}
    thief = key_output(crypto.keypair_from_label(f"thief/{seed}").pub)
    theft_bad, denial_bad = [], []
    cases = 0
    for R in _subsets(n):
        enf = {cov.P[i]: recovered[actors.enforcers[i]] for i in R}
        for C in _subsets(k):
            cases += 1
            got = bool(theft_attempt(cov, chain, enf, [custodians[i] for i in C], thief))
            if got != (len(R) >= m and len(C) >= j):
                theft_bad.append((R, C))
    for W in _subsets(k):
        cases += 1
        if denial_blocks(cov, chain, custodians, W) != (len(W) >= k - j + 1):
            denial_bad.append(W)
    return BoundaryReport(n, m, k, j, cases, theft_bad, denial_bad)


# composition


class ComposeMode(str, enum.Enum):
    MULTI_DEPOSIT = "multi_deposit"
    JOINT_CHAIN = "joint_chain"
    DISJOINT = "disjoint"


@dataclass
class CovenantGraph:
    mode: ComposeMode
    deposits: List[Transaction]
    covs: List[Transaction]  # finalized, in broadcast order
    deep: int = 6

    def status(self, chain: Chain) -> CovenantStatus:
        if all(chain.confirmations(d.txid) >= chain.config.deep_confirmations for d in self.deposits):
            return CovenantStatus(StatusKind.ACTIVE)
        return CovenantStatus(StatusKind.PENDING)


def _ephemeral(n: int, label: str) -> List[KeyPair]:
    return [crypto.keypair_from_label(f"{label}/enf/{i}") for i in range(n)]


def compose(specs: Sequence[CovenantSpec], mode, chain: Chain, depositor: KeyPair,
            fundings: Sequence[Outpoint], custodians: Sequence[KeyPair], label: str = "compose") -> CovenantGraph:
    """Build and sign a composed covenant directly (no messaging).

    multi_deposit: one TX_cov spending one deposit per spec.
    joint_chain: spec i's destination is replaced by spec i+1's covenant output.
    disjoint: every spec spends the first deposit output.
    """
    mode = ComposeMode(mode)
    enf = [_ephemeral(s.n, f"{label}/{i}") for i, s in enumerate(specs)]
    locks = [covenant_lock([k.pub for k in enf[i]], s.m, s.custodial, s.j) for i, s in enumerate(specs)]

    def sign_all(tx, i, spec_idx, prevouts):
        s = specs[spec_idx]
        P = [k.pub for k in enf[spec_idx]]
        enf_sigs = {k.pub: txmodel.sign_input(tx, i, k.priv, TAPROOT, s.enf_flags[n], prevouts)
                    for n, k in enumerate(enf[spec_idx][:s.m])}
        by = {k.pub: k for k in custodians}
        cust = {}
        for q in s.custodial[:]:
            if q in by and len(cust) < s.j:
                cust[q] = txmodel.sign_input(tx, i, by[q].priv, TAPROOT, s.cust_flag, prevouts)
        leaf = taproot.TapLeaf(locks[spec_idx][0])
        return tx.with_witness(i, covenant_witness(P, s.custodial, enf_sigs, cust, leaf))

    if mode is ComposeMode.JOINT_CHAIN:
        for s in specs[:-1]:
            if s.cust_flag != ALL or any(f != ALL for f in s.enf_flags):
                raise UnsafeChain("intermediate covenant transactions must be fully committed")
        dep = build_deposit(depositor, fundings[0], chain.output(fundings[0]), locks[0][1],
                            specs[0].amount, specs[0].deposit_feerate)
        covs = []
        prev_out, prev_op = dep.outputs[0], (dep.txid, 0)
        for i, s in enumerate(specs):
            rest = prev_out.amount - s.cov_fee - sum(o.amount for o in s.extra_outputs)
            if i + 1 < len(specs):
                outs = (TxOutput(rest, locks[i + 1][1]),) + s.extra_outputs
                specs[i + 1].amount = rest
            else:
                outs = (TxOutput(rest, s.destination),) + s.extra_outputs
            tx = Transaction(2, (TxInput(prev_op[0], prev_op[1], SEQ_RBF),), outs, ())
            tx = sign_all(tx, 0, i, [prev_out])
            covs.append(tx)
            prev_out, prev_op = tx.outputs[0], (tx.txid, 0)
        return CovenantGraph(mode, [dep], covs)

    if mode is ComposeMode.MULTI_DEPOSIT:
        deps = [build_deposit(depositor, f, chain.output(f), locks[i][1], specs[i].amount, specs[i].deposit_feerate)
                for i, f in enumerate(fundings[:len(specs)])]
        total = sum(s.amount for s in specs) - specs[0].cov_fee
        tx = Transaction(2, tuple(TxInput(d.txid, 0, SEQ_RBF) for d in deps),
                         (TxOutput(total, specs[0].destination),), ())
        prevouts = [d.outputs[0] for d in deps]
        for i in range(len(deps)):
            tx = sign_all(tx, i, i, prevouts)
        return CovenantGraph(mode, deps, [tx])

    dep = build_deposit(depositor, fundings[0], chain.output(fundings[0]), locks[0][1],
                        specs[0].amount, specs[0].deposit_feerate)
    covs = []
    for i, s in enumerate(specs):
        tx = Transaction(2, (TxInput(dep.txid, 0, SEQ_RBF),),
                         (TxOutput(dep.outputs[0].amount - s.cov_fee, s.destination),), ())
        covs.append(sign_all(tx, 0, 0, [dep.outputs[0]]))
    return CovenantGraph(mode, [dep], covs)


# fee strategies


class FeeStrategyKind(str, enum.Enum):
    FEE_INPUTS = "FeeInputs"
    CHANGE_OUTPUTS = "ChangeOutputs"
    CPFP_OUTPUTS = "CpfpOutputs"
    PREPARE_FEE_RANGE = "PrepareFeeRange"
    UNSECURED_FEE_INPUTS = "UnsecuredFeeInputs"


@dataclass(frozen=True)
class FeeStrategy:
    kind: FeeStrategyKind
    levels: Tuple[int, ...] = ()  # feerates for PrepareFeeRange


@dataclass(frozen=True)
class StrategyRow:
    enf_flag: SighashFlag
    cust_flag: SighashFlag
    works_with_dependents: bool
    pinnable: bool
    malleable: bool


# the comparative summary of fee strategies
FEE_TABLE: Dict[FeeStrategyKind, StrategyRow] = {
    FeeStrategyKind.FEE_INPUTS: StrategyRow(A1CP_ALL, ALL, False, False, False),
    FeeStrategyKind.CHANGE_OUTPUTS: StrategyRow(txmodel.SINGLE, ALL, False, False, False),
    FeeStrategyKind.CPFP_OUTPUTS: StrategyRow(ALL, ALL, True, False, False),
    FeeStrategyKind.PREPARE_FEE_RANGE: StrategyRow(ALL, ALL, True, False, False),
    FeeStrategyKind.UNSECURED_FEE_INPUTS: StrategyRow(A1CP_ALL, A1CP_ALL, False, True, True),
}


@dataclass
class FeeResult:
    txs: List[Transaction]
    works_with_dependents: bool
    pinnable: bool
    malleable: bool


def prepared_variant_count(levels: int, chain_length: int) -> int:
    """Signed variants needed at the last step of a chain of covenant txs."""
    return levels ** chain_length


def apply_fee_strategy(cov: Covenant, strategy: FeeStrategy, chain: Chain, fee_key: KeyPair,
                       fee_funding: Optional[Outpoint] = None, target_feerate: int = 10,
                       has_dependents: bool = False, custodians: Sequence[KeyPair] = ()) -> FeeResult:
    """Return the transactions to broadcast under ``strategy``.

    FeeInputs / UnsecuredFeeInputs add ``fee_funding`` as a second input.
    ChangeOutputs appends a change output returning the excess.
    CpfpOutputs expects TX_cov to carry an output locked to ``fee_key`` and
    emits a child spending it together with ``fee_funding``.
    PrepareFeeRange picks the cheapest pre-signed variant meeting the target.
    """
    kind = strategy.kind
    row = FEE_TABLE[kind]
    if has_dependents and not row.works_with_dependents:
        raise UnsafeWithDependents(kind.value)
    attrs = dict(works_with_dependents=row.works_with_dependents, pinnable=row.pinnable, malleable=row.malleable)
    base = cov.tx_cov

    if kind in (FeeStrategyKind.FEE_INPUTS, FeeStrategyKind.UNSECURED_FEE_INPUTS):
        for f in cov.spec.enf_flags:
            if f != A1CP_ALL:
                raise CovenantError(f"{kind.value} needs A1CP|ALL enforcement signatures")
        if fee_funding is None:
            raise CovenantError("fee input required")
        fee_out = chain.output(fee_funding)
        tx = Transaction(base.version, base.inputs + (TxInput(fee_funding[0], fee_funding[1], SEQ_RBF),),
                         base.outputs, (), base.locktime)
        cust_flag = A1CP_ALL if kind is FeeStrategyKind.UNSECURED_FEE_INPUTS else ALL
        prevouts = [cov.prevout, fee_out]
        tx = finalize(cov, key_oracle(cov, tx, custodians, chain, cust_flag), tx)
        tx = sign_key_input(tx, 1, fee_key, prevouts, cust_flag)
        return FeeResult([tx], **attrs)

    if kind is FeeStrategyKind.CHANGE_OUTPUTS:
        if any(f.base is not txmodel.Base.SINGLE for f in cov.spec.enf_flags):
            raise CovenantError("ChangeOutputs needs SINGLE enforcement signatures")
        draft = Transaction(base.version, base.inputs, base.outputs + (TxOutput(0, key_output(fee_key.pub)),), ())
        draft = finalize(cov, key_oracle(cov, draft, custodians, chain), draft)
        need = target_feerate * draft.size
        excess = cov.prevout.amount - base.output_total() - need
        if excess <= 0:
            tx = finalize(cov, key_oracle(cov, base, custodians, chain), base)
        else:
            tx = Transaction(base.version, base.inputs, base.outputs + (TxOutput(excess, key_output(fee_key.pub)),), ())
            tx = finalize(cov, key_oracle(cov, tx, custodians, chain), tx)
        return FeeResult([tx], **attrs)

    if kind is FeeStrategyKind.CPFP_OUTPUTS:
        parent = finalize(cov, key_oracle(cov, base, custodians, chain), base)
        if fee_funding is None:
            raise CovenantError("fee funding required for the child")
        child = cpfp_child(chain, parent, cov.prevout.amount - parent.output_total(), fee_key, fee_funding,
                           target_feerate)
        return FeeResult([parent, child], **attrs)

    # PrepareFeeRange: cheapest pre-signed variant meeting the target
    if not cov.variants:
        raise CovenantError("no prepared variants")
    rates = sorted(cov.variants)
    rate = next((r for r in rates if r >= target_feerate), rates[-1])
    vtx, vsigs = cov.variants[rate]
    return FeeResult([finalize(cov, key_oracle(cov, vtx, custodians, chain), vtx, vsigs)], **attrs)


def cpfp_child(chain: Chain, parent: Transaction, parent_fee: int, fee_key: KeyPair, fee_funding: Outpoint,
               target_feerate: int) -> Transaction:
    """Child spending the parent's anchor output (locked to ``fee_key``) plus
    a fee input, sized so the package pays ``target_feerate``."""
    anchor_script = key_output(fee_key.pub)
    idx = next((i for i, o in enumerate(parent.outputs) if o.script == anchor_script), None)
    if idx is None:
        raise CovenantError("covenant transaction has no CPFP output for the fee key")
    fee_out = chain.output(fee_funding)
    anchor = parent.outputs[idx]
    draft = Transaction(2, (TxInput(parent.txid, idx, SEQ_RBF), TxInput(fee_funding[0], fee_funding[1], SEQ_RBF)),
                        (TxOutput(0, anchor_script),), ())
    draft = draft.with_witness(0, key_witness(b"\x00" * 65, fee_key.pub)).with_witness(
        1, key_witness(b"\x00" * 65, fee_key.pub))
    package_fee = target_feerate * (draft.size + parent.size)
    child_fee = max(package_fee - parent_fee, chain.config.min_relay_feerate * draft.size)
    change = anchor.amount + fee_out.amount - child_fee
    if change < 0:
        raise CovenantError("fee funding too small")
    child = Transaction(2, draft.inputs, (TxOutput(change, anchor_script),), ())
    prevouts = [anchor, fee_out]
    child = sign_key_input(child, 0, fee_key, prevouts)
    return sign_key_input(child, 1, fee_key, prevouts)


def malleate(chain: Chain, txid: bytes, attacker_priv: int, funding: Outpoint) -> Rejected | Accepted:
    """Third-party txid change: the same move as pinning with no padding."""
    return chain.pin(txid, 1, attacker_priv, funding)


def _strategy_spec_kw(kind: FeeStrategyKind, fee_key: KeyPair) -> dict:
    row = FEE_TABLE[kind]
    kw: dict = {"cust_flag": row.cust_flag}
    if kind is FeeStrategyKind.CPFP_OUTPUTS:
        kw["extra_outputs"] = (TxOutput(1_000, key_output(fee_key.pub)),)
    if kind is FeeStrategyKind.PREPARE_FEE_RANGE:
        kw["fee_levels"] = (5, 20, 80)
    if kind is FeeStrategyKind.CHANGE_OUTPUTS:
        kw["cov_fee"] = 50_000
    return kw


@dataclass
class StrategyOutcome:
    strategy: str
    broadcast: bool
    pinned: bool
    child_broken: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _strategy_run(kind: FeeStrategyKind, seed: int, attack: str) -> StrategyOutcome:
    fee_key = crypto.keypair_from_label(f"fee/{seed}")
    row = FEE_TABLE[kind]
    kw = _strategy_spec_kw(kind, fee_key)
    n = 2
    spec, actors, chain, custodians = demo_session(n, 2, 3, 2, seed, enf_flags=(row.enf_flag,) * n, **kw)
    res = run_session(spec, actors, default_channels(actors), chain, seed=seed)
    if not res.ok:
        raise CovenantError(f"session failed: {res.abort}")
    cov = res.covenant
    fee_funding = chain.fund(key_output(fee_key.pub), 200_000)
    out = apply_fee_strategy(cov, FeeStrategy(kind), chain, fee_key, fee_funding, 10, custodians=custodians)
    results = chain.submit_package(out.txs)
    broadcast = all(bool(r) for r in results)
    tx_cov = out.txs[0]
    # a dependent spend of the covenant destination
    dest = crypto.keypair_from_label(f"destination/{seed}")
    paid = tx_cov.outputs[0]
    child = Transaction(2, (TxInput(tx_cov.txid, 0, SEQ_RBF),), (TxOutput(paid.amount - 5_000, paid.script),), ())
    child = sign_key_input(child, 0, dest, [paid])
    chain.submit(child)
    attacker = crypto.keypair_from_label(f"attacker/{seed}")
    funding = chain.fund(key_script(attacker.pub), 500_000)
    if attack == "pin":
        r = chain.pin(tx_cov.txid, 20_000, attacker.priv, funding)
    else:
        r = malleate(chain, tx_cov.txid, attacker.priv, funding)
    broken = bool(r) and not chain.in_mempool(child.txid)
    return StrategyOutcome(kind.value, broadcast, bool(r), broken)


def fee_strategy_matrix(seed: int = 0) -> Dict[str, Dict[str, bool]]:
    """Measured (pinnable, malleable) per strategy, next to the table."""
    out = {}
    for kind in FeeStrategyKind:
        pin = _strategy_run(kind, seed, "pin")
        mal = _strategy_run(kind, seed, "malleate")
        row = FEE_TABLE[kind]
        out[kind.value] = {"broadcast": pin.broadcast and mal.broadcast, "pinned": pin.pinned,
                           "malleable": mal.child_broken, "table_pinnable": row.pinnable,
                           "table_malleable": row.malleable}
    return out


@dataclass
class ChainAdvance:
    spike_level: int
    heights: List[Optional[int]]  # confirmation height per covenant step, None if stuck
    start: int

    @property
    def advanced(self) -> bool:
        return all(h is not None for h in self.heights)

    def to_dict(self) -> dict:
        return {"spike_level": self.spike_level, "heights": self.heights, "start": self.start,
                "advanced": self.advanced}


def cpfp_chain_under_spike(seed: int = 0, spike_level: int = 50, steps: int = 2, bump: bool = True,
                           max_blocks: int = 10) -> ChainAdvance:
    """A joint-chain covenant whose steps carry CPFP anchors, broadcast during
    a fee spike. With ``bump`` each step gets a child outbidding the spike."""
    chain = Chain()
    fee_key = crypto.keypair_from_label(f"fee/{seed}")
    depositor = crypto.keypair_from_label(f"depositor/{seed}")
    custodians = [crypto.keypair_from_label(f"custodian/{seed}/{i}") for i in range(2)]
    anchor = (TxOutput(1_000, key_output(fee_key.pub)),)
    dest = key_output(crypto.keypair_from_label(f"destination/{seed}").pub)
    specs = [CovenantSpec(2, 2, tuple(c.pub for c in custodians), 2, 1_000_000, dest, cov_fee=500,
                          extra_outputs=anchor) for _ in range(steps)]
    funding = chain.fund(key_output(depositor.pub), 1_100_000)
    graph = compose(specs, ComposeMode.JOINT_CHAIN, chain, depositor, [funding], custodians, f"chain/{seed}")
    chain.submit(graph.deposits[0])
    chain.mine(1)
    start = chain.height
    chain.fee_spike(spike_level, max_blocks + 5)
    heights: List[Optional[int]] = []
    prev_out = graph.deposits[0].outputs[0]
    for step, tx in enumerate(graph.covs):
        pkg = [tx]
        if bump:
            ff = chain.fund(key_output(fee_key.pub), 200_000)
            pkg.append(cpfp_child(chain, tx, prev_out.amount - tx.output_total(), fee_key, ff, 2 * spike_level))
        chain.submit_package(pkg)
        for _ in range(max_blocks):
            chain.mine_block()
            if chain.is_confirmed(tx.txid):
                break
        heights.append(chain.tx_height.get(tx.txid))
        if heights[-1] is None:
            heights += [None] * (len(graph.covs) - step - 1)
            break
        prev_out = tx.outputs[0]
    return ChainAdvance(spike_level, heights, start)


# proof of reserves


FAKE_PREV_TXID = crypto.tagged_hash("covault/por-fake-outpoint", b"")


@dataclass
class PoR:
    demo_tx: Transaction
    demo_prevout: TxOutput
    custodial_program: ScriptProgram
    enf_sigs: Dict[GroupPoint, bytes]
    l_cov: ScriptProgram
    tx_cov: Transaction
    cov_prevout: TxOutput


def proof_of_reserves(cov: Covenant, custodians: Sequence[KeyPair]) -> PoR:
    """Signed demonstration spend of a fake output locked by l_cust that
    creates more value than it consumes, bundled with the covenant data."""
    Q = cov.Q
    if not Q:
        raise Unsupported("empty custodial script")
    cust_prog = custodial_program(Q, cov.spec.j)
    leaf = taproot.TapLeaf(cust_prog)
    fake_prev = TxOutput(cov.prevout.amount, taproot.output_key(taproot.NUMS, leaf).script_pubkey)
    demo = Transaction(2, (TxInput(FAKE_PREV_TXID, 0, txmodel.SEQUENCE_FINAL),),
                       (TxOutput(fake_prev.amount + 1, fake_prev.script),), ())
    by = {k.pub: k for k in custodians}
    sigs = {}
    for q in Q:
        if q in by and len(sigs) < cov.spec.j:
            sigs[q] = txmodel.sign_input(demo, 0, by[q].priv, TAPROOT, ALL, [fake_prev])
    if len(sigs) < cov.spec.j:
        raise Unsatisfiable("not enough custodians for the demonstration")
    cb = taproot.prove_inclusion(leaf, leaf, taproot.NUMS)
    demo = demo.with_witness(0, taproot.script_path_witness(
        tuple(reversed(multisig_witness(Q, sigs))), leaf, cb))
    return PoR(demo, fake_prev, cust_prog, dict(cov.enf_sigs), cov.program, cov.tx_cov, cov.prevout)


def verify_por(por: PoR) -> bool:
    demo = por.demo_tx
    if demo.output_total() <= por.demo_prevout.amount:
        return False  # must be invalid by construction
    try:
        P, m, Q, j = parse_covenant_program(por.l_cov)
    except CovenantError:
        return False
    if custodial_program(Q, j) != por.custodial_program:
        return False
    stack, leaf, cb, _ = taproot.split_script_path_witness(demo.witnesses[0])
    if leaf.script != por.custodial_program or not taproot.verify_control_block(por.demo_prevout.script[1:], leaf, cb):
        return False
    ctx = script.SatisfactionContext(
        check_sig=lambda pub, sig: txmodel.verify_tapscript_sig(demo, 0, pub, sig, [por.demo_prevout]))
    if not script.execute(leaf.script, stack, ctx):
        return False
    expected_spk = taproot.output_key(taproot.NUMS, taproot.TapLeaf(por.l_cov)).script_pubkey
    if por.cov_prevout.script != expected_spk:
        return False
    good = sum(1 for p in P if p in por.enf_sigs and
               txmodel.verify_input(por.tx_cov, 0, p, por.enf_sigs[p], TAPROOT, [por.cov_prevout]))
    return good >= m


def finalize_with_por(cov: Covenant, por: PoR) -> Transaction:
    """What an auditor holding only the PoR can do: reuse the demonstration
    signatures on TX_cov. They do not cover TX_cov, so this fails."""
    prevouts = [por.cov_prevout]
    usable = {}
    demo_stack = taproot.split_script_path_witness(por.demo_tx.witnesses[0])[0]
    for sig in demo_stack:
        for q in cov.Q:
            if sig and txmodel.verify_input(por.tx_cov, 0, q, sig, TAPROOT, prevouts):
                usable[q] = sig
    return finalize(cov, lambda q: usable.get(q), por.tx_cov, por.enf_sigs)
