"""Ajolote: a three-tier bitcoin custody system built on deleted-key vaults.

Tier 1 is the receive output (2-of-3 active signers), tier 2 the vault
covenant and tier 3 the fall-back output (3-of-5 including two bank
signers). Devices and watchtowers are actors owning their own state.
Ceremonies pass messages between them through channels whose attacker
capabilities follow the per-channel capability table; user checkpoints are
string comparisons that abort on mismatch.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Any, Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

from . import crypto, script, taproot, txmodel
from .chainsim import Accepted, Chain, ChainConfig, Outpoint, Rejected
from .crypto import ExtendedKey, GroupPoint
from .script import Older, Policy, and_, thresh
from .txmodel import ALL, Transaction, TxInput, TxOutput

SIGNERS = ("mobile", "home", "office", "bankA", "bankB")  # key index n = 1..5
HARDWARE = SIGNERS[1:]
ACTIVE = SIGNERS[:3]
SIGNER_INDEX = {name: n for n, name in enumerate(SIGNERS, 1)}

FALLBACK_FEERATE = 40  # sat/byte for TX_wit, TX_fb and the recovery sweep
DEFAULT_FEERATE = 10
SEQ_RBF = 0xFFFFFFFD
DUST = 546
TAPROOT = txmodel.Semantics.TAPROOT

BRANCH = {"receive": 0, "vault": 1, "unvault": 2, "fallback": 3, "test": 4}
OUTPUT_TYPES = ("receive", "vault", "unvault", "fallback")


class AjoloteError(Exception):
    pass


class IncompleteSetup(AjoloteError):
    pass


class Insufficient(AjoloteError):
    pass


class Abort(AjoloteError):
    def __init__(self, step: int, reason: str, party: str):
        super().__init__(f"step {step}: {reason} ({party})")
        self.step, self.reason, self.party = step, reason, party


class Denied(AjoloteError):
    def __init__(self, capability: str, channel: Tuple[str, str]):
        super().__init__(f"capability {capability} missing on {channel[0]}<->{channel[1]}")
        self.capability, self.channel = capability, channel


# configuration


@dataclass(frozen=True)
class WithdrawalConstraints:
    """Rules a watchtower enforces on each observed withdrawal.

    ``max_amount`` of None means unbounded; ``phase_period`` of 0 disables
    the transacting-hours rule, otherwise ``height % phase_period`` must be
    in ``allowed_phases``.
    """

    max_withdrawals: int = 1
    window: int = 144
    max_amount: Optional[int] = None
    phase_period: int = 0
    allowed_phases: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "allowed_phases", tuple(self.allowed_phases))
        if self.max_withdrawals < 0 or self.window < 0 or self.phase_period < 0:
            raise AjoloteError("withdrawal limits must be non-negative")
        if self.max_amount is not None and self.max_amount < 0:
            raise AjoloteError("withdrawal limits must be non-negative")

    def violations(self, history: Sequence[Tuple[int, int]], height: int, amount: int) -> List[str]:
        """``history`` holds (height, amount) of accepted withdrawals."""
        recent = [(h, a) for h, a in history if height - self.window < h <= height]
        out = []
        if len(recent) + 1 > self.max_withdrawals:
            out.append("rate")
        if self.max_amount is not None and sum(a for _, a in recent) + amount > self.max_amount:
            out.append("amount")
        if self.phase_period and height % self.phase_period not in self.allowed_phases:
            out.append("hours")
        return out

    def to_dict(self) -> dict:
        return {"max_withdrawals": self.max_withdrawals, "window": self.window, "max_amount": self.max_amount,
                "phase_period": self.phase_period, "allowed_phases": list(self.allowed_phases)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "WithdrawalConstraints":
        return cls(int(d.get("max_withdrawals", 1)), int(d.get("window", 144)), d.get("max_amount"),
                   int(d.get("phase_period", 0)), tuple(d.get("allowed_phases", ())))


@dataclass(frozen=True)
class Config:
    T: int
    V_min: int
    V_max: int
    N: int
    w: Optional[WithdrawalConstraints] = WithdrawalConstraints()

    def __post_init__(self):
        if not 0 < self.V_min <= self.V_max:
            raise AjoloteError("need 0 < V_min <= V_max")
        if self.T < 1 or self.N < 1:
            raise AjoloteError("need T >= 1 and N >= 1")

    def c(self) -> dict:
        return {"T": self.T, "V_min": self.V_min, "V_max": self.V_max, "N": self.N}

    def to_dict(self) -> dict:
        return {**self.c(), "w": None if self.w is None else self.w.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Config":
        w = d.get("w", {})
        return cls(int(d["T"]), int(d["V_min"]), int(d["V_max"]), int(d["N"]),
                   None if w is None else WithdrawalConstraints.from_dict(w))


# key derivation


def _seed(*parts) -> bytes:
    return crypto.tagged_hash("covault/ajolote", "/".join(map(str, parts)).encode())


def account_of(master: ExtendedKey, i: int) -> ExtendedKey:
    """A^i_n: hardened account, shared as a public extended key."""
    return crypto.derive_path(master, f"{i}h").neuter()


@lru_cache(maxsize=None)
def child_pub(account: ExtendedKey, branch: str, index: int) -> GroupPoint:
    return crypto.derive_path(account, f"{BRANCH[branch]}/{index}").pub


@lru_cache(maxsize=None)
def child_priv(master: ExtendedKey, i: int, branch: str, index: int) -> int:
    return crypto.derive_path(master, f"{i}h/{BRANCH[branch]}/{index}").priv


def xpub_bytes(x: ExtendedKey) -> bytes:
    return x.pub.data + x.chaincode


# policies and trees


def leaf_policies(kind: str, T: int, N: int, literal_receive: bool = False) -> List[Policy]:
    """Leaf policies of each output type, in tree order."""
    if kind == "receive":
        return [and_("R1", "R2"), thresh(3 if literal_receive else 2, "R1", "R2", "R3")]
    if kind == "vault":
        return [thresh(4, "V1", "V2", "E1", "E2"),
                and_(and_("E1", "E2"), thresh(2, *[f"V{n}" for n in range(1, 6)]))]
    if kind == "unvault":
        spend = [and_(thresh(2, "U1", "U2"), Older(T)), and_(thresh(2, "U1", "U2", "U3"), Older(T))]
        reject = [thresh(3, "E1", "E2", f"U{n}") for n in range(1, 6)]
        reject += [thresh(3, "E1", "E2", f"W{k}") for k in range(1, N + 1)]
        return spend + reject
    if kind == "fallback":
        return [thresh(3, "F1", "F2", "F3"), thresh(3, *[f"F{n}" for n in range(1, 6)])]
    if kind == "test":
        return [thresh(5 + N, *[f"A{n}" for n in range(1, 6)], *[f"W{k}" for k in range(1, N + 1)])]
    raise AjoloteError(f"unknown output type {kind}")


def named_policies(T: int, N: int) -> Dict[str, Policy]:
    """The seven named policies over key names."""
    l_wit = thresh(2, *[f"V{n}" for n in range(1, 6)])
    l_enf = and_("E1", "E2")
    return {
        "l_receive": thresh(2, "R1", "R2", "R3"),
        "l_wit": l_wit,
        "l_enf": l_enf,
        "l_pay_to_fb": thresh(1, *[f"U{n}" for n in range(1, 6)], *[f"W{k}" for k in range(1, N + 1)]),
        "l_spend": thresh(2, "U1", "U2", "U3"),
        "l_fb": thresh(3, *[f"F{n}" for n in range(1, 6)]),
        "l_test": thresh(5 + N, *[f"A{n}" for n in range(1, 6)], *[f"W{k}" for k in range(1, N + 1)]),
    }


def top_policy(kind: str, T: int, N: int) -> Policy:
    p = named_policies(T, N)
    if kind == "receive":
        return p["l_receive"]
    if kind == "vault":
        return and_(p["l_wit"], p["l_enf"])
    if kind == "unvault":
        return script.or_(and_(p["l_spend"], Older(T)), and_(p["l_pay_to_fb"], p["l_enf"]))
    if kind == "fallback":
        return p["l_fb"]
    if kind == "test":
        return p["l_test"]
    raise AjoloteError(f"unknown output type {kind}")


def tree_shape(kind: str, leaves: Sequence[taproot.TapLeaf]) -> taproot.TapTree:
    if len(leaves) == 1:
        return leaves[0]
    if kind == "unvault":
        return taproot.TapBranch(taproot.TapBranch(leaves[0], leaves[1]), taproot.comb(leaves[2:]))
    return taproot.TapBranch(leaves[0], leaves[1])


@dataclass
class PolicySet:
    T: int
    N: int
    h: int
    j: int
    policies: Dict[str, Policy]
    keys: Dict[str, GroupPoint]
    test_keys: Dict[str, GroupPoint]


def policies_from_accounts(accounts: Mapping[int, ExtendedKey], wt_accounts: Mapping[int, ExtendedKey],
                           T: int, N: int, h: int = 0, j: int = 0,
                           enforcement: Optional[Sequence[GroupPoint]] = None) -> PolicySet:
    missing = [n for n in range(1, 6) if n not in accounts] + [f"W{k}" for k in range(1, N + 1) if k not in wt_accounts]
    if missing:
        raise IncompleteSetup(f"missing accounts: {missing}")
    keys: Dict[str, GroupPoint] = {}
    for n in range(1, 6):
        if n <= 3:
            keys[f"R{n}"] = child_pub(accounts[n], "receive", h)
        keys[f"V{n}"] = child_pub(accounts[n], "vault", j)
        keys[f"U{n}"] = child_pub(accounts[n], "unvault", j)
        keys[f"F{n}"] = child_pub(accounts[n], "fallback", j)
    for k in range(1, N + 1):
        keys[f"W{k}"] = child_pub(wt_accounts[k], "unvault", j)
    if enforcement is not None:
        keys["E1"], keys["E2"] = enforcement
    test_keys = {f"A{n}": child_pub(accounts[n], "test", 0) for n in range(1, 6)}
    test_keys.update({f"W{k}": child_pub(wt_accounts[k], "test", 0) for k in range(1, N + 1)})
    return PolicySet(T, N, h, j, named_policies(T, N), keys, test_keys)


@dataclass(frozen=True)
class OutputTree:
    kind: str
    policies: Tuple[Policy, ...]
    leaves: Tuple[taproot.TapLeaf, ...]
    tree: taproot.TapTree
    top: Policy
    internal_key: GroupPoint

    @property
    def output(self) -> taproot.TaprootOutput:
        return taproot.output_key(self.internal_key, self.tree)

    @property
    def spk(self) -> bytes:
        return self.output.script_pubkey

    def control_block(self, idx: int) -> taproot.ControlBlock:
        return taproot.prove_inclusion(self.tree, self.leaves[idx], self.internal_key)

    def witness(self, idx: int, sigs: Mapping[str, bytes], age: int = 0) -> Tuple[bytes, ...]:
        ctx = script.SatisfactionContext(signer=lambda n: sigs.get(n), age=age)
        stack = script.satisfy(self.policies[idx], ctx)
        return taproot.script_path_witness(stack.stack, self.leaves[idx], self.control_block(idx))

    def dummy_witness(self, idx: int) -> Tuple[bytes, ...]:
        names = script.keys_of(self.policies[idx])
        age = max(script.locks_of(self.policies[idx]) or [0])
        return self.witness(idx, {n: b"\x00" * 65 for n in names}, age)

    def leaf_index(self, policy: Policy) -> int:
        return self.policies.index(policy)


def build_taptree(ps: PolicySet, kind: str, internal_key: GroupPoint = taproot.NUMS,
                  literal_receive: bool = False) -> OutputTree:
    pols = leaf_policies(kind, ps.T, ps.N, literal_receive)
    keymap = ps.test_keys if kind == "test" else ps.keys
    leaves = tuple(taproot.TapLeaf(script.compile(p, keymap), policy=p) for p in pols)
    return OutputTree(kind, tuple(pols), leaves, tree_shape(kind, leaves), top_policy(kind, ps.T, ps.N), internal_key)


# device and vault state


@dataclass
class VaultRecord:
    v: int
    i: int
    amount: int
    tx_dep: Transaction
    dep_index: int
    tx_wit: Transaction  # unsigned templates
    tx_fb: Transaction
    sig_wit: Tuple[bytes, bytes]
    sig_fb: Tuple[bytes, bytes]
    E: Optional[Tuple[GroupPoint, GroupPoint]] = None
    c_k: Optional[Tuple[bytes, bytes]] = None  # (leaf script, control block) for watchtower k

    @property
    def vault_outpoint(self) -> Outpoint:
        return (self.tx_dep.txid, self.dep_index)

    @property
    def unvault_outpoint(self) -> Outpoint:
        return (self.tx_wit.txid, 0)

    def enforcement_keys(self) -> Tuple[GroupPoint, GroupPoint]:
        if self.E is not None:
            return self.E
        leaf_keys = script.ScriptProgram.from_bytes(self.c_k[0]).keys()
        return leaf_keys[0], leaf_keys[1]

    def covenant_bytes(self) -> int:
        """Bytes a holder stores for this covenant (transactions, signatures, keys)."""
        return len(txmodel.serialize(self.tx_wit)) + len(txmodel.serialize(self.tx_fb)) + 4 * 65 + 2 * 33

    def fields(self) -> Tuple[str, ...]:
        out = ["tx_dep", "tx_wit", "tx_fb", "sig_wit", "sig_fb"]
        if self.E is not None:
            out += ["E", "j"]
        if self.c_k is not None:
            out += ["c_k", "v"]
        return tuple(out)


@dataclass
class ReceiveCoin:
    outpoint: Outpoint
    amount: int
    i: int
    h: int


@dataclass
class DeviceState:
    device: str
    master: Optional[ExtendedKey] = field(default=None, repr=False)
    i: int = 1
    h: int = 0
    j: int = 0
    accounts: Dict[Tuple[int, int], ExtendedKey] = field(default_factory=dict)  # (i, n) -> A^i_n
    wt_accounts: Dict[Tuple[int, int], ExtendedKey] = field(default_factory=dict)  # (i, k) -> W^i_k
    onions: Dict[int, str] = field(default_factory=dict)
    noise_priv: Optional[int] = field(default=None, repr=False)
    noise_pub: Optional[GroupPoint] = None
    config: Optional[Config] = None
    pin_hash: Optional[bytes] = None
    vaults: Dict[int, VaultRecord] = field(default_factory=dict)
    tx_history: List[str] = field(default_factory=list)
    keystore: crypto.Keystore = field(default_factory=crypto.Keystore, repr=False)
    compromised: bool = False
    decommissioned: bool = False

    def accounts_at(self, i: Optional[int] = None) -> Dict[int, ExtendedKey]:
        i = self.i if i is None else i
        return {n: a for (ii, n), a in self.accounts.items() if ii == i}

    def wts_at(self, i: Optional[int] = None) -> Dict[int, ExtendedKey]:
        i = self.i if i is None else i
        return {k: w for (ii, k), w in self.wt_accounts.items() if ii == i}

    def fields(self) -> Tuple[str, ...]:
        out = []
        if self.accounts:
            out.append("A")
        if self.wt_accounts:
            out.append("W")
        if self.onions:
            out.append("O")
        if self.config is not None:
            out.append("c")
        if self.master is not None:
            out.append("keypair")
        if self.noise_priv is not None and self.noise_pub is not None:
            out.append("noise_pair")
        if self.config is not None and self.config.w is not None:
            out.append("w")
        return tuple(out)


@dataclass
class Watchtower:
    k: int
    provider: str
    master: ExtendedKey = field(repr=False)
    i: int = 1
    generation: int = 0
    onion: str = ""
    T: Optional[int] = None
    w: Optional[WithdrawalConstraints] = None
    noise_pub: Optional[GroupPoint] = None
    vaults: Dict[int, VaultRecord] = field(default_factory=dict)
    history: List[Tuple[int, int]] = field(default_factory=list)
    handled: set = field(default_factory=set)
    alerts: List[dict] = field(default_factory=list)
    compromised: bool = False
    online: bool = True

    @property
    def name(self) -> str:
        return f"wt{self.k}"

    @property
    def account(self) -> ExtendedKey:
        return account_of(self.master, self.i)

    def fields(self) -> Tuple[str, ...]:
        out = ["keypair", "W"]
        if self.onion:
            out.append("O")
        if self.T is not None:
            out.append("T")
        if self.noise_pub is not None:
            out.append("noise_pub")
        if self.w is not None:
            out.append("w")
        return tuple(out)


SETUP_STATE_TABLE = {
    "mobile": ("A", "W", "O", "c", "keypair", "noise_pair", "w"),
    "signer": ("A", "W", "O", "c", "keypair", "noise_pair"),
    "watchtower": ("keypair", "W", "O", "T", "noise_pub", "w"),
}

VAULT_STATE_TABLE = {
    "mobile": ("tx_dep", "tx_wit", "tx_fb", "sig_wit", "sig_fb", "E", "j"),
    "signer": ("tx_dep", "tx_wit", "tx_fb", "sig_wit", "sig_fb", "E", "j"),
    "watchtower": ("tx_dep", "tx_wit", "tx_fb", "sig_wit", "sig_fb", "c_k", "v"),
}


@dataclass
class ServiceProvider:
    name: str
    watchtowers: Tuple[int, ...]
    registered: Dict[str, Any] = field(default_factory=dict)  # setup info as received
    sla: Optional[dict] = None


# adversary and channels

CAPS_FULL = ("E", "I", "B", "A", "C", "F", "S", "O")
CAPS_COMPROMISED_COORDINATOR = ("E", "I*", "B*", "A", "C", "F*", "S", "O*")
CAPS_COMPROMISED_SIGNER = ("I*", "B*", "A", "C", "F*", "S", "O*")
ACTION_LETTER = {"eavesdrop": "E", "initiate": "I", "breakdown": "A", "crypto": "C", "block": "B",
                 "fabricate": "F", "spoof": "S", "reorder": "O"}
COORDINATORS = ("mobile", "computer", "coordinator")


def _channel_class(party: str) -> str:
    if party == "user":
        return "user"
    if party in COORDINATORS:
        return "coordinator"
    if party in HARDWARE or party.startswith("hs:"):
        return "signer"
    return "networked"


def capabilities(a: str, b: str, compromised: Iterable[str] = ()) -> Tuple[str, ...]:
    """Attacker capability letters on the channel a<->b."""
    comp = set(compromised)
    ca, cb = _channel_class(a), _channel_class(b)
    if ca > cb:
        (a, ca), (b, cb) = (b, cb), (a, ca)
    networked = {"coordinator", "networked"}
    if ca in networked and cb in networked:
        return CAPS_FULL
    if (ca, cb) == ("coordinator", "user"):
        return CAPS_COMPROMISED_COORDINATOR if a in comp else ()
    if (ca, cb) == ("signer", "user"):
        return CAPS_COMPROMISED_SIGNER if a in comp else ()
    if (ca, cb) == ("coordinator", "signer"):
        if a in comp and b in comp:
            return CAPS_FULL
        if a in comp:
            return CAPS_COMPROMISED_COORDINATOR
        if b in comp:
            return CAPS_COMPROMISED_SIGNER
        return ()
    return ()


@dataclass(frozen=True)
class Message:
    """A well-formed Ajolote protocol message."""

    type: str
    body: Any = None


MESSAGE_TYPES = frozenset({
    "config", "register", "setup-info", "sla", "provision", "onions", "wt-account", "init", "hs-account",
    "accounts", "hs-config", "display", "login", "wt-data", "test-request", "test-sig", "setup-test",
    "test-sigs", "address", "deposit-request", "enforcement-key", "deposit-tx", "deposit-sig",
    "covenant-txs", "enforcement-sigs", "vault-register", "ack", "confirmation-sig", "withdraw-request",
    "withdraw-sig", "spend-request", "spend-sig", "reject", "health-request", "health-response",
    "fallback-request", "fallback-sig", "records", "rotate", "new-account", "restore", "reinit",
    "new-onion", "sweep-request", "sweep-sig", "payment",
})


def adversary_act(compromised: Iterable[str], a: str, b: str, action: str, payload: Any = None,
                  expected: Optional[str] = None) -> bool:
    """Permit ``action`` on channel a<->b or raise Denied.

    Starred capabilities accept only well-formed Ajolote messages, and for
    initiate/fabricate only the message type the procedure expects next.
    """
    letter = ACTION_LETTER[action]
    caps = capabilities(a, b, compromised)
    if letter in caps:
        return True
    if letter + "*" in caps:
        if not isinstance(payload, Message) or payload.type not in MESSAGE_TYPES:
            raise Denied(letter + "*", (a, b))
        if expected is not None and letter in ("I", "F") and payload.type != expected:
            raise Denied(letter + "*", (a, b))
        return True
    raise Denied(letter, (a, b))


@dataclass(frozen=True)
class SetupTamper:
    """Modify one datum in one message type on one channel.

    ops: ``omit`` drops ``body[field][key]``; ``replace`` swaps it for an
    attacker value; ``set`` overwrites ``body[field]`` with ``value``.
    """

    name: str
    ceremony: str
    msg: str
    frm: str
    to: str
    field: str
    op: str
    key: Any = None
    value: Any = None


@dataclass
class Adversary:
    compromised: FrozenSet[str] = frozenset()
    tampers: Tuple[SetupTamper, ...] = ()
    applied: List[str] = field(default_factory=list)
    denied: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.compromised = frozenset(self.compromised)
        self.tampers = tuple(self.tampers)

    def intercept(self, ceremony: str, frm: str, to: str, msg: str, body: Any, seed: int) -> Any:
        for t in self.tampers:
            if (t.ceremony, t.msg) != (ceremony, msg):
                continue
            if {t.frm, t.to} != {frm, to} or (t.frm, t.to) != (frm, to):
                continue
            wrapped = Message(msg, body)
            try:
                adversary_act(self.compromised, frm, to, "block", wrapped)
                adversary_act(self.compromised, frm, to, "fabricate", wrapped, expected=msg)
                if t.op == "replace":
                    adversary_act(self.compromised, frm, to, "crypto", wrapped)
            except Denied:
                if t.name not in self.denied:
                    self.denied.append(t.name)
                continue
            body = _mutate(body, t, seed)
            if t.name not in self.applied:
                self.applied.append(t.name)
        return body


def attacker_account(seed: int, label: str) -> Tuple[ExtendedKey, ExtendedKey]:
    master = crypto.master_key(_seed(seed, "attacker", label))
    return master, account_of(master, 1)


def _mutate(body: Any, t: SetupTamper, seed: int) -> Any:
    body = dict(body)
    label = t.value if isinstance(t.value, str) else t.name
    if t.op == "set":
        body[t.field] = t.value
        return body
    if t.op == "attacker_sign":
        # the attacker signs the carried test transaction with its own watchtower key
        master = attacker_account(seed, label)[0]
        tx = body["tx"]
        body[t.field] = _sign(tx, 0, child_priv(master, 1, "test", 0), _test_prevouts(tx))
        return body
    inner = dict(body[t.field])
    if t.op == "omit":
        inner.pop(t.key, None)
    elif t.op == "replace":
        old = inner.get(t.key)
        if isinstance(old, ExtendedKey):
            master, inner[t.key] = attacker_account(seed, label)
            if isinstance(body.get("sig"), dict):
                body["sig"] = {**body["sig"], t.key: _account_sig(master, 1)}
        elif isinstance(old, str):
            inner[t.key] = "attacker-" + hashlib.sha256(f"{seed}/{label}".encode()).hexdigest()[:10] + ".onion"
        else:
            inner[t.key] = t.value
    body[t.field] = inner
    return body


# ceremonies: plumbing


def _jsonable(x: Any) -> Any:
    if isinstance(x, bytes):
        return x.hex()
    if isinstance(x, GroupPoint):
        return x.hex()
    if isinstance(x, ExtendedKey):
        return xpub_bytes(x).hex()
    if isinstance(x, Transaction):
        return x.txid.hex()
    if isinstance(x, (WithdrawalConstraints, Config)):
        return x.to_dict()
    if isinstance(x, Message):
        return {"type": x.type, "body": _jsonable(x.body)}
    if isinstance(x, VaultRecord):
        return {"v": x.v, "tx_wit": x.tx_wit.txid.hex(), "tx_fb": x.tx_fb.txid.hex(),
                "sigs": [s.hex() for s in x.sig_wit + x.sig_fb]}
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in sorted(x.items(), key=lambda kv: str(kv[0]))}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _digest(x: Any) -> str:
    return hashlib.sha256(json.dumps(_jsonable(x), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class CeremonyResult:
    kind: str
    ok: bool
    transcript: List[dict]
    checkpoints: List[dict]
    abort: Optional[Abort] = None
    deltas: Dict[str, List[str]] = field(default_factory=dict)
    data: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "ok": self.ok, "transcript": self.transcript, "checkpoints": self.checkpoints,
                "abort": None if self.abort is None else
                {"step": self.abort.step, "reason": self.abort.reason, "party": self.abort.party},
                "deltas": self.deltas, "data": _jsonable(self.data)}


class _Session:
    def __init__(self, world: "World", kind: str, unresponsive: Iterable[str] = ()):
        self.world, self.kind = world, kind
        self.transcript: List[dict] = []
        self.checkpoints: List[dict] = []
        self.data: Dict[str, Any] = {}
        self.silent = set(unresponsive)
        self.step = 0

    def send(self, frm: str, to: str, msg: str, body: Any = None) -> Any:
        self.step += 1
        for party in (frm, to):
            if party in self.silent:
                self.transcript.append({"step": self.step, "from": frm, "to": to, "msg": msg, "timeout": party})
                raise Abort(self.step, "Timeout", party)
        body = self.world.adversary.intercept(self.kind, frm, to, msg, body, self.world.seed)
        self.transcript.append({"step": self.step, "from": frm, "to": to, "msg": msg, "digest": _digest(body)})
        return body

    def note(self, party: str, action: str, **kw):
        self.transcript.append({"step": self.step, "from": party, "to": party, "msg": action,
                                **{k: _jsonable(v) for k, v in kw.items()}})

    def check(self, party: str, label: str, shown: Any, expected: Any):
        """The user compares a value displayed by ``party`` with their own."""
        ok = _jsonable(shown) == _jsonable(expected)
        self.checkpoints.append({"step": self.step, "party": party, "label": label, "match": ok})
        if not ok:
            raise Abort(self.step, f"Mismatch:{label}", party)

    def require(self, cond: bool, reason: str, party: str):
        if not cond:
            raise Abort(self.step, reason, party)


# world


@dataclass
class World:
    seed: int
    config: Config
    chain: Chain
    devices: Dict[str, DeviceState]
    watchtowers: Dict[int, Watchtower]
    providers: Dict[str, ServiceProvider]
    adversary: Adversary = field(default_factory=Adversary)
    internal_key: GroupPoint = taproot.NUMS
    per_vault_internal_key: bool = False
    deletion_method: crypto.DeletionMethod = crypto.DeletionMethod.DESTROY
    coins: Dict[Outpoint, ReceiveCoin] = field(default_factory=dict)
    registry: Dict[bytes, Tuple[str, int, int]] = field(default_factory=dict)  # spk -> (type, i, index)
    ceremonies: List[CeremonyResult] = field(default_factory=list)
    actions: List[dict] = field(default_factory=list)
    ops_txs: List[str] = field(default_factory=list)
    received_total: int = 0
    user_intent: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def create(cls, config: Config, seed: int = 0, chain_config: Optional[ChainConfig] = None,
               adversary: Optional[Adversary] = None, per_vault_internal_key: bool = False) -> "World":
        chain = Chain(chain_config or ChainConfig())
        devices = {d: DeviceState(d) for d in SIGNERS + ("computer",)}
        wts = {}
        n_providers = min(2, config.N)
        providers: Dict[str, ServiceProvider] = {}
        for k in range(1, config.N + 1):
            y = f"sp{(k - 1) % n_providers + 1}"
            wts[k] = Watchtower(k, y, crypto.master_key(_seed(seed, "wt", k, 0)))
        for y in sorted({w.provider for w in wts.values()}):
            providers[y] = ServiceProvider(y, tuple(k for k, w in wts.items() if w.provider == y))
        adv = adversary or Adversary()
        for name in adv.compromised:
            if name in devices:
                devices[name].compromised = True
            if name.startswith("wt") and name[2:].isdigit() and int(name[2:]) in wts:
                wts[int(name[2:])].compromised = True
        return cls(seed, config, chain, devices, wts, providers, adv, per_vault_internal_key=per_vault_internal_key)

    @property
    def mobile(self) -> DeviceState:
        return self.devices["mobile"]

    def signer_names(self) -> List[str]:
        return [s for s in SIGNERS if not self.devices[s].decommissioned]

    def internal_key_for(self, j: int) -> GroupPoint:
        if not self.per_vault_internal_key:
            return self.internal_key
        r = crypto.hash_to_scalar("covault/internal-key", j.to_bytes(8, "big") + h_setup(self.mobile))
        return crypto.tweak_key(self.internal_key, r)

    def policy_set(self, dev: DeviceState, i: Optional[int] = None, h: int = 0, j: int = 0,
                   enforcement=None) -> PolicySet:
        i = dev.i if i is None else i
        return policies_from_accounts(dev.accounts_at(i), dev.wts_at(i), self.config.T, self.config.N, h, j,
                                      enforcement)

    def trees(self, dev: DeviceState, i: int, j: int, E) -> Dict[str, OutputTree]:
        ps = self.policy_set(dev, i, 0, j, E)
        P = self.internal_key_for(j)
        return {k: build_taptree(ps, k, P) for k in ("vault", "unvault", "fallback")}

    def receive_tree(self, dev: DeviceState, i: int, h: int) -> OutputTree:
        return build_taptree(self.policy_set(dev, i, h, 0), "receive", self.internal_key)

    def register(self, spk: bytes, kind: str, i: int, index: int):
        self.registry[spk] = (kind, i, index)

    def broadcast(self, tx: Transaction, label: str, replace_conflicts: bool = False):
        res = self.chain.replace(tx) if replace_conflicts else self.chain.submit(tx)
        self.actions.append({"height": self.chain.height, "action": "broadcast", "label": label,
                             "txid": tx.txid.hex(), "ok": bool(res),
                             "reason": None if res else res.reason})
        if res:
            self.ops_txs.append(tx.txid.hex())
        return res

    def advance(self, blocks: int = 1) -> List[dict]:
        """Mine blocks; watchtowers react to each block."""
        out = []
        for _ in range(blocks):
            block = self.chain.mine_block()
            for k in sorted(self.watchtowers):
                for act in wt_step(self.watchtowers[k], self, block):
                    out.append(act)
        return out

    def utxos_by_type(self) -> Dict[str, List[Tuple[Outpoint, int]]]:
        out: Dict[str, List[Tuple[Outpoint, int]]] = {t: [] for t in OUTPUT_TYPES}
        for op, entry in sorted(self.chain.utxos.items()):
            meta = self.registry.get(entry.output.script)
            if meta is not None:
                out[meta[0]].append((op, entry.output.amount))
        return out

    def output_counts(self) -> Tuple[int, int, int]:
        """(N_r, N_v, N_u): unspent receive, vault and unvault outputs."""
        u = self.utxos_by_type()
        return len(u["receive"]), len(u["vault"]), len(u["unvault"])

    def snapshot(self) -> dict:
        return {
            "height": self.chain.height,
            "counts": dict(zip(("N_r", "N_v", "N_u"), self.output_counts())),
            "hashes": {d: [x.hex() if x else None for x in system_hashes(self, d)]
                       for d in list(SIGNERS) + [w.name for w in self.watchtowers.values()]},
            "value_at_risk": value_at_risk(self),
            "devices": {d: list(s.fields()) for d, s in self.devices.items()},
            "watchtowers": {w.name: {"fields": list(w.fields()), "vaults": sorted(w.vaults),
                                     "alerts": w.alerts} for w in self.watchtowers.values()},
        }


# hashes


def _sorted_blobs(items: Iterable[bytes]) -> bytes:
    return b"".join(sorted(items))


def h_setup(dev: DeviceState) -> bytes:
    c = b"" if dev.config is None else json.dumps(dev.config.c(), sort_keys=True).encode()
    body = (_sorted_blobs(xpub_bytes(w) for w in dev.wt_accounts.values())
            + _sorted_blobs(xpub_bytes(a) for a in dev.accounts.values())
            + _sorted_blobs(o.encode() for o in dev.onions.values())
            + (dev.noise_pub.data if dev.noise_pub is not None else b"") + c)
    return crypto.tagged_hash("covault/H_setup", body)


def h_operation(records: Iterable[VaultRecord]) -> bytes:
    recs = list(records)
    body = (_sorted_blobs(txmodel.serialize(r.tx_wit) for r in recs)
            + _sorted_blobs(txmodel.serialize(r.tx_fb) for r in recs)
            + _sorted_blobs(s for r in recs for s in r.sig_wit)
            + _sorted_blobs(s for r in recs for s in r.sig_fb)
            + _sorted_blobs(b"".join(p.data for p in r.enforcement_keys()) for r in recs))
    return crypto.tagged_hash("covault/H_operation", body)


def active_records(chain: Chain, records: Mapping[int, VaultRecord]) -> List[VaultRecord]:
    """Records whose covenant is still live: vault unspent, or unvault output
    created by TX_wit and still unspent."""
    out = []
    for v in sorted(records):
        rec = records[v]
        spent_by = chain.spender(rec.vault_outpoint)
        if spent_by is None or (spent_by == rec.tx_wit.txid and chain.spender(rec.unvault_outpoint) is None):
            out.append(rec)
    return out


def system_hashes(world: World, device: str) -> Tuple[Optional[bytes], bytes]:
    """(H_setup, H_operation) as computed by ``device``; watchtowers hold no
    setup accounts so their H_setup is None."""
    if device.startswith("wt"):
        wt = world.watchtowers[int(device[2:])]
        return None, h_operation(active_records(world.chain, wt.vaults))
    dev = world.devices[device]
    return h_setup(dev), h_operation(active_records(world.chain, dev.vaults))


# test transaction

TEST_OUTPOINT = crypto.tagged_hash("covault/test-outpoint", b"")


def build_test_tx(accounts: Mapping[int, ExtendedKey], wts: Mapping[int, ExtendedKey], cfg: Config,
                  internal_key: GroupPoint) -> Tuple[Transaction, OutputTree]:
    ps = policies_from_accounts(accounts, wts, cfg.T, cfg.N)
    tree = build_taptree(ps, "test", internal_key)
    tx = Transaction(2, (TxInput(TEST_OUTPOINT, 0),), (TxOutput(1, tree.spk),))
    return tx, tree


def _test_prevouts(tx: Transaction) -> List[TxOutput]:
    return [TxOutput(1, tx.outputs[0].script)]


def _sign(tx: Transaction, idx: int, priv: int, prevouts: Sequence[TxOutput]) -> bytes:
    return txmodel.sign_input(tx, idx, priv, TAPROOT, ALL, prevouts)


def _verify(tx: Transaction, idx: int, pub: GroupPoint, sig: bytes, prevouts: Sequence[TxOutput]) -> bool:
    return txmodel.verify_input(tx, idx, pub, sig, TAPROOT, prevouts)


def _account_sig(master: ExtendedKey, i: int) -> bytes:
    acct = crypto.derive_path(master, f"{i}h")
    return crypto.sign(acct.priv, crypto.tagged_hash("covault/wt-account", xpub_bytes(acct.neuter())))


def _check_account_sig(acct: ExtendedKey, sig: bytes) -> bool:
    return crypto.verify(acct.pub, crypto.tagged_hash("covault/wt-account", xpub_bytes(acct)), sig)


# setup ceremonies


def _onion(wt: Watchtower, seed: int) -> str:
    return hashlib.sha256(f"{seed}/{wt.k}/{wt.generation}".encode() + wt.master.pub.data).hexdigest()[:16] + ".onion"


def _setup_mobile(s: _Session, params):
    w = s.world
    cfg = w.config
    body = s.send("user", "mobile", "config", {"c": cfg.c(), "w": cfg.w})
    m = w.mobile
    m.master = crypto.master_key(_seed(w.seed, "master", "mobile", params.get("generation", 0)))
    m.pin_hash = hashlib.sha256(f"pin/{w.seed}".encode()).digest()
    noise = crypto.keypair_gen(_seed(w.seed, "noise", params.get("generation", 0)))
    m.noise_priv, m.noise_pub = noise.priv, noise.pub
    m.config = Config(**body["c"], w=body["w"])
    m.accounts[(m.i, 1)] = account_of(m.master, m.i)
    w.user_intent.update({"c": cfg.c(), "w": cfg.w})
    s.note("mobile", "initialised", noise=m.noise_pub)


def _setup_watchtowers(s: _Session, params):
    w = s.world
    m = w.mobile
    for y, sp in w.providers.items():
        s.send("mobile", y, "register", {"username": f"user-{w.seed}"})
        info = s.send("mobile", y, "setup-info", {"T": m.config.T, "w": m.config.w, "N_y": len(sp.watchtowers),
                                                   "P_noise": m.noise_pub})
        sp.registered = dict(info)
        sla = s.send(y, "mobile", "sla", {"T": info["T"], "w": info["w"], "N_y": info["N_y"]})
        shown = s.send("mobile", "user", "display", {"T": sla["T"], "w": sla["w"], "N_y": sla["N_y"]})
        s.check("mobile", f"sla:{y}", shown, {"T": w.user_intent["c"]["T"], "w": w.user_intent["w"],
                                              "N_y": len(sp.watchtowers)})
        sp.sla = dict(sla)
        s.send("user", y, "payment", {"accepted": True})
        for k in sp.watchtowers:
            wt = w.watchtowers[k]
            prov = s.send(y, wt.name, "provision", {"T": info["T"], "w": info["w"], "P_noise": info["P_noise"]})
            wt.T, wt.w, wt.noise_pub = prov["T"], prov["w"], prov["P_noise"]
            wt.onion = _onion(wt, w.seed)
        onions = s.send(y, "mobile", "onions", {"O": {k: w.watchtowers[k].onion for k in sp.watchtowers}})
        for k in sp.watchtowers:
            wt = w.watchtowers[k]
            s.require(k in onions["O"], "MissingOnion", "mobile")
            body = s.send(wt.name, "mobile", "wt-account",
                          {"W": {k: wt.account}, "sig": {k: _account_sig(wt.master, wt.i)}})
            acct = body["W"][k]
            s.require(_check_account_sig(acct, body["sig"].get(k, b"")), "BadAccountSignature", "mobile")
            m.wt_accounts[(m.i, k)] = acct
            m.onions[k] = onions["O"][k]


def _setup_signers(s: _Session, params):
    w = s.world
    m = w.mobile
    for name in HARDWARE:
        dev = w.devices[name]
        s.send("user", name, "display", {"pin": "ok"})
        req = s.send("mobile", name, "init", {"request": "initialise"})
        shown = s.send(name, "user", "display", req)
        s.check(name, "init-request", shown, {"request": "initialise"})
        dev.master = crypto.master_key(_seed(w.seed, "master", name, params.get("generation", 0)))
        n = SIGNER_INDEX[name]
        own = account_of(dev.master, dev.i)
        dev.accounts[(dev.i, n)] = own
        body = s.send(name, "mobile", "hs-account", {"A": {n: own}})
        m.accounts[(m.i, n)] = body["A"][n]
    for name in HARDWARE:
        dev = w.devices[name]
        n = SIGNER_INDEX[name]
        body = s.send("mobile", name, "accounts", {"A": {nn: a for (ii, nn), a in m.accounts.items() if ii == m.i}})
        for nn, a in body["A"].items():
            if nn != n:
                dev.accounts[(dev.i, nn)] = a
        cfg = s.send("mobile", name, "hs-config", {"c": m.config.c()})
        shown = s.send(name, "user", "display", cfg)
        s.check(name, "config", shown, {"c": w.user_intent["c"]})
        dev.config = Config(**cfg["c"], w=None)


def _setup_finalize(s: _Session, params):
    w = s.world
    m = w.mobile
    comp_view = {"W": {}, "O": {}, "P_noise": None}
    for y, sp in w.providers.items():
        s.send("computer", y, "login", {"username": f"user-{w.seed}"})
        sla = s.send(y, "computer", "sla", {
            "T": sp.registered["T"], "w": sp.registered["w"], "N_y": sp.registered["N_y"],
            "W": {k: w.watchtowers[k].account for k in sp.watchtowers},
            "O": {k: w.watchtowers[k].onion for k in sp.watchtowers}, "P_noise": sp.registered["P_noise"]})
        shown = s.send("computer", "user", "display", {"T": sla["T"], "w": sla["w"], "N_y": sla["N_y"]})
        s.check("computer", f"sla:{y}", shown, {"T": w.user_intent["c"]["T"], "w": w.user_intent["w"],
                                                "N_y": len(sp.watchtowers)})
        comp_view["W"].update(sla["W"])
        comp_view["O"].update(sla["O"])
        comp_view["P_noise"] = sla["P_noise"]
    for name in HARDWARE:
        dev = w.devices[name]
        via_m = s.send("mobile", name, "wt-data", {"W": {k: a for (ii, k), a in m.wt_accounts.items() if ii == m.i},
                                                   "O": dict(m.onions), "p_noise": m.noise_priv})
        via_c = s.send("computer", name, "wt-data", {"W": dict(comp_view["W"]), "O": dict(comp_view["O"]),
                                                     "P_noise": comp_view["P_noise"]})
        s.require(via_c["P_noise"] is not None and via_m["p_noise"] is not None
                  and crypto.point_from_scalar(via_m["p_noise"]) == via_c["P_noise"], "NoiseKeyMismatch", name)
        consistent = sorted(k for k in set(via_m["W"]) & set(via_c["W"])
                            if via_m["W"][k] == via_c["W"][k] and via_m["O"].get(k) == via_c["O"].get(k)
                            and via_m["O"].get(k) is not None)
        shown = s.send(name, "user", "display", {"consistent": len(consistent)})
        s.check(name, "watchtower-count", shown, {"consistent": w.user_intent["c"]["N"]})
        for k in consistent:
            dev.wt_accounts[(dev.i, k)] = via_m["W"][k]
            dev.onions[k] = via_m["O"][k]
        dev.noise_priv, dev.noise_pub = via_m["p_noise"], via_c["P_noise"]


def _setup_test(s: _Session, params):
    w = s.world
    m = w.mobile
    tx, tree = build_test_tx(m.accounts_at(), m.wts_at(), w.config, w.internal_key)
    prev = _test_prevouts(tx)
    wt_sigs: Dict[int, bytes] = {}
    for k, wt in sorted(w.watchtowers.items()):
        s.send("mobile", wt.name, "test-request", {"tx": tx})
        body = s.send(wt.name, "mobile", "test-sig",
                      {"tx": tx, "sig": _sign(tx, 0, child_priv(wt.master, wt.i, "test", 0), prev)})
        s.require(_verify(tx, 0, tree_key(tree, f"W{k}"), body["sig"], prev), "BadWatchtowerSignature", "mobile")
        wt_sigs[k] = body["sig"]
    user_sigs: Dict[int, bytes] = {1: _sign(tx, 0, child_priv(m.master, m.i, "test", 0), prev)}
    for name in HARDWARE:
        dev = w.devices[name]
        body = s.send("mobile", name, "setup-test", {"tx": tx, "wt_sigs": dict(wt_sigs)})
        own_tx, own_tree = build_test_tx(dev.accounts_at(), dev.wts_at(), dev.config, w.internal_key)
        s.require(body["tx"].outputs == own_tx.outputs, "UnexpectedTestPolicy", name)
        for k, sig in body["wt_sigs"].items():
            s.require(_verify(own_tx, 0, tree_key(own_tree, f"W{k}"), sig, _test_prevouts(own_tx)),
                      "BadWatchtowerSignature", name)
        shown_hs = s.send(name, "user", "display", {"H_setup": h_setup(dev), "txid": own_tx.txid})
        shown_m = s.send("mobile", "user", "display", {"H_setup": h_setup(m), "txid": tx.txid})
        s.check(name, "H_setup+txid", shown_hs, shown_m)
        n = SIGNER_INDEX[name]
        sig = s.send(name, "mobile", "test-sig", {"sig": _sign(own_tx, 0, child_priv(dev.master, dev.i, "test", 0),
                                                                 _test_prevouts(own_tx))})
        s.require(_verify(tx, 0, tree_key(tree, f"A{n}"), sig["sig"], prev), "BadSignerSignature", "mobile")
        user_sigs[n] = sig["sig"]
    for name in HARDWARE:
        dev = w.devices[name]
        body = s.send("mobile", name, "test-sigs", {"sigs": dict(user_sigs)})
        own_tx, own_tree = build_test_tx(dev.accounts_at(), dev.wts_at(), dev.config, w.internal_key)
        for n, sig in body["sigs"].items():
            s.require(_verify(own_tx, 0, tree_key(own_tree, f"A{n}"), sig, _test_prevouts(own_tx)),
                      "BadSignerSignature", name)
        s.send(name, "user", "display", {"result": "setup test success"})
    s.data["tx_test"] = tx.txid
    s.data["H_setup"] = h_setup(m)


def tree_key(tree: OutputTree, name: str) -> GroupPoint:
    """Public key bound to ``name`` in the tree's first leaf containing it."""
    for pol, leaf in zip(tree.policies, tree.leaves):
        names = script.keys_of(pol)
        if name in names:
            return leaf.script.keys()[names.index(name)]
    raise script.UnknownKey(name)


# operational ceremonies


def _receive(s: _Session, params):
    w = s.world
    m = w.mobile
    amount = int(params["amount"])
    h = m.h
    m_tree = w.receive_tree(m, m.i, h)
    address = s.send("mobile", "user", "display", {"address": m_tree.spk})
    hs = params.get("verifier", "home")
    dev = w.devices[hs]
    hs_tree = w.receive_tree(dev, dev.i, h)
    shown = s.send(hs, "user", "display", {"address": hs_tree.spk})
    s.check(hs, "address", shown, address)
    s.send("user", "counterparty", "address", address)
    op = w.chain.fund(address["address"], amount)
    w.register(m_tree.spk, "receive", m.i, h)
    w.coins[op] = ReceiveCoin(op, amount, m.i, h)
    w.received_total += amount
    m.h += 1
    dev.h = max(dev.h, m.h)
    s.data.update({"outpoint": op, "amount": amount, "h": h})


def _sig_map(world: World, signer_names: Sequence[str], prefix: str, i: int, branch: str, idx: int,
             tx: Transaction, input_index: int, prevouts: Sequence[TxOutput]) -> Dict[str, bytes]:
    out = {}
    for name in signer_names:
        dev = world.devices[name]
        if dev.master is None:
            raise Abort(0, "NoKeys", name)
        out[f"{prefix}{SIGNER_INDEX[name]}"] = _sign(tx, input_index, child_priv(dev.master, i, branch, idx), prevouts)
    return out


def _receive_leaf(signers: Sequence[str]) -> int:
    return 0 if set(signers) == {"mobile", "home"} else 1


def build_covenant_pair(trees: Mapping[str, OutputTree], dep_outpoint: Outpoint, amount: int) -> Tuple[Transaction, Transaction]:
    """TX_wit (vault -> unvault) and TX_fb (unvault -> fall-back) at the fixed high feerate."""
    wit = Transaction(2, (TxInput(dep_outpoint[0], dep_outpoint[1], SEQ_RBF),),
                      (TxOutput(amount, trees["unvault"].spk),))
    size = wit.with_witness(0, trees["vault"].dummy_witness(1)).size
    wit = Transaction(2, wit.inputs, (TxOutput(amount - FALLBACK_FEERATE * size, trees["unvault"].spk),))
    wit_amount = wit.outputs[0].amount
    fb = Transaction(2, (TxInput(wit.txid, 0, SEQ_RBF),), (TxOutput(wit_amount, trees["fallback"].spk),))
    unv = trees["unvault"]
    size = max(fb.with_witness(0, unv.dummy_witness(idx)).size for idx in range(2, len(unv.leaves)))
    fb = Transaction(2, fb.inputs, (TxOutput(wit_amount - FALLBACK_FEERATE * size, trees["fallback"].spk),))
    if fb.outputs[0].amount <= DUST:
        raise AjoloteError("vault amount does not cover covenant fees")
    return wit, fb


def _vault_deposit(s: _Session, params):
    w = s.world
    m, home = w.mobile, w.devices["home"]
    cfg = w.config
    amounts = [int(a) for a in params.get("amounts") or [params["amount"]]]
    x = sum(amounts)
    body = s.send("mobile", "home", "deposit-request", {"amounts": amounts})
    shown = s.send("home", "user", "display", body)
    s.check("home", "deposit-amounts", shown, {"amounts": params.get("intent", amounts)})
    for a in body["amounts"]:
        s.require(cfg.V_min <= a <= cfg.V_max, "AmountOutOfRange", "home")
    # coin selection over receive outputs
    # only outputs of the current account generation; older ones are swept at rotation
    coins = sorted((c for c in w.coins.values() if c.i == m.i), key=lambda c: (-c.amount, c.outpoint))
    chosen, total = [], 0
    for c in coins:
        if total >= x + 2_000:
            break
        chosen.append(c)
        total += c.amount
    if total < x:
        raise Insufficient(f"receive outputs hold {total} < {x}")
    chosen.sort(key=lambda c: c.outpoint)
    # per-vault keys, ephemeral enforcement keys and trees
    vaults = []
    for a in amounts:
        m.j += 1
        home.j = m.j
        j = m.j
        e1 = crypto.keypair_gen(_seed(w.seed, "enf", j, 1))
        e2 = crypto.keypair_gen(_seed(w.seed, "enf", j, 2))
        m.keystore.add(f"e{j}", e1.priv)
        home.keystore.add(f"e{j}", e2.priv)
        E1 = s.send("mobile", "home", "enforcement-key", {"E": e1.pub})["E"]
        E2 = s.send("home", "mobile", "enforcement-key", {"E": e2.pub})["E"]
        vaults.append((j, a, (E1, E2)))
    # TX_dep
    outs = [TxOutput(a, w.trees(m, m.i, j, E)["vault"].spk) for j, a, E in vaults]
    change_h = m.h
    change_tree = w.receive_tree(m, m.i, change_h)
    draft = Transaction(2, tuple(TxInput(c.outpoint[0], c.outpoint[1], SEQ_RBF) for c in chosen),
                        tuple(outs) + (TxOutput(0, change_tree.spk),))
    for idx, c in enumerate(chosen):
        draft = draft.with_witness(idx, w.receive_tree(m, c.i, c.h).dummy_witness(0))
    fee = DEFAULT_FEERATE * draft.size
    change = total - x - fee
    if change < 0:
        # shrink the last vault to cover the deposit fee
        j, a, E = vaults[-1]
        vaults[-1] = (j, a + change, E)
        outs[-1] = TxOutput(a + change, outs[-1].script)
        change = 0
    tx_outs = tuple(outs) + ((TxOutput(change, change_tree.spk),) if change > DUST else ())
    tx_dep = Transaction(2, draft.inputs, tx_outs)
    dep_req = s.send("mobile", "home", "deposit-tx", {"tx": tx_dep})
    for j, a, E in vaults:
        s.require(any(o.script == w.trees(home, home.i, j, E)["vault"].spk for o in dep_req["tx"].outputs),
                  "UnexpectedDepositOutput", "home")
    prevouts = [TxOutput(c.amount, w.receive_tree(m, c.i, c.h).spk) for c in chosen]
    signed = tx_dep
    for idx, c in enumerate(chosen):
        sigs = _sig_map(w, ["mobile"], "R", c.i, "receive", c.h, tx_dep, idx, prevouts)
        hs_sig = s.send("home", "mobile", "deposit-sig",
                        {"sig": _sig_map(w, ["home"], "R", c.i, "receive", c.h, dep_req["tx"], idx, prevouts)})
        sigs.update(hs_sig["sig"])
        signed = signed.with_witness(idx, w.receive_tree(m, c.i, c.h).witness(0, sigs))
    tx_dep = signed
    _, err = w.chain.check_tx(tx_dep)
    s.require(err is None, f"DepositInvalid:{getattr(err, 'reason', '')}", "home")
    # covenant transactions and enforcement signatures
    records: List[Tuple[VaultRecord, Dict[str, OutputTree]]] = []
    for out_idx, (j, a, E) in enumerate(vaults):
        trees = w.trees(m, m.i, j, E)
        tx_wit, tx_fb = build_covenant_pair(trees, (tx_dep.txid, out_idx), a)
        got = s.send("mobile", "home", "covenant-txs", {"tx_wit": tx_wit, "tx_fb": tx_fb})
        h_trees = w.trees(home, home.i, j, E)
        own_wit, own_fb = build_covenant_pair(h_trees, (dep_req["tx"].txid, out_idx), a)
        s.require(got["tx_wit"] == own_wit and got["tx_fb"] == own_fb, "UnexpectedCovenantTx", "home")
        wit_prev = [TxOutput(a, trees["vault"].spk)]
        fb_prev = [tx_wit.outputs[0]]
        key = f"e{j}"
        sw2 = home.keystore.sign(key, txmodel.sighash_msg(tx_wit, 0, TAPROOT, ALL, wit_prev)) + bytes([ALL.to_byte()])
        sf2 = home.keystore.sign(key, txmodel.sighash_msg(tx_fb, 0, TAPROOT, ALL, fb_prev)) + bytes([ALL.to_byte()])
        got2 = s.send("home", "mobile", "enforcement-sigs", {"wit": sw2, "fb": sf2})
        s.require(_verify(tx_wit, 0, E[1], got2["wit"], wit_prev) and _verify(tx_fb, 0, E[1], got2["fb"], fb_prev),
                  "BadEnforcementSignature", "mobile")
        sw1 = m.keystore.sign(key, txmodel.sighash_msg(tx_wit, 0, TAPROOT, ALL, wit_prev)) + bytes([ALL.to_byte()])
        sf1 = m.keystore.sign(key, txmodel.sighash_msg(tx_fb, 0, TAPROOT, ALL, fb_prev)) + bytes([ALL.to_byte()])
        got1 = s.send("mobile", "home", "enforcement-sigs", {"wit": sw1, "fb": sf1})
        s.require(_verify(tx_wit, 0, E[0], got1["wit"], wit_prev) and _verify(tx_fb, 0, E[0], got1["fb"], fb_prev),
                  "BadEnforcementSignature", "home")
        rec = VaultRecord(j, m.i, a, tx_dep, out_idx, tx_wit, tx_fb, (got1["wit"], got2["wit"]),
                          (got1["fb"], got2["fb"]), E)
        records.append((rec, trees))
    # watchtower registration
    for k, wt in sorted(w.watchtowers.items()):
        for rec, trees in records:
            idx = trees["unvault"].leaf_index(thresh(3, "E1", "E2", f"W{k}"))
            c_k = (trees["unvault"].leaves[idx].script.to_bytes(), trees["unvault"].control_block(idx).to_bytes())
            reg = s.send("mobile", wt.name, "vault-register", {
                "v": rec.v, "tx_dep": tx_dep, "tx_wit": rec.tx_wit, "tx_fb": rec.tx_fb,
                "sig_wit": rec.sig_wit, "sig_fb": rec.sig_fb, "c_k": c_k})
            _wt_validate(s, wt, reg, rec.amount)
            wt.vaults[rec.v] = VaultRecord(rec.v, rec.i, rec.amount, reg["tx_dep"], rec.dep_index, reg["tx_wit"],
                                           reg["tx_fb"], tuple(reg["sig_wit"]), tuple(reg["sig_fb"]), None, reg["c_k"])
            s.send(wt.name, "mobile", "ack", {"v": rec.v})
    # delete enforcement keys only after every watchtower acknowledged
    for rec, _ in records:
        for dev in (m, home):
            crypto.delete_key(dev.keystore, f"e{rec.v}", w.deletion_method)
        s.note("mobile", "deleted-enforcement-keys", v=rec.v, method=w.deletion_method.value)
    res = w.broadcast(tx_dep, "tx_dep")
    s.require(bool(res), f"DepositRejected:{getattr(res, 'reason', '')}", "mobile")
    for c in chosen:
        w.coins.pop(c.outpoint, None)
    if change > DUST:
        op = (tx_dep.txid, len(tx_dep.outputs) - 1)
        w.coins[op] = ReceiveCoin(op, change, m.i, change_h)
        w.register(change_tree.spk, "receive", m.i, change_h)
        m.h += 1
        home.h = max(home.h, m.h)
    for rec, trees in records:
        w.register(trees["vault"].spk, "vault", rec.i, rec.v)
        w.register(trees["unvault"].spk, "unvault", rec.i, rec.v)
        w.register(trees["fallback"].spk, "fallback", rec.i, rec.v)
    w.advance(1)
    s.require(w.chain.is_confirmed(tx_dep.txid), "DepositUnconfirmed", "mobile")
    # watchtowers confirm with a signature over TX_fb, forwarded to the home signer
    for k, wt in sorted(w.watchtowers.items()):
        for rec, trees in records:
            prev = [rec.tx_wit.outputs[0]]
            sig = _sign(rec.tx_fb, 0, child_priv(wt.master, wt.i, "unvault", rec.v), prev)
            got = s.send(wt.name, "mobile", "confirmation-sig", {"v": rec.v, "sig": sig})
            fwd = s.send("mobile", "home", "confirmation-sig", got)
            s.require(_verify(rec.tx_fb, 0, trees["unvault"].leaves[0] and h_trees_key(w, home, rec, k), fwd["sig"], prev),
                      "BadWatchtowerSignature", "home")
    for rec, _ in records:
        for dev in (m, home):
            dev.vaults[rec.v] = replace(rec)
        m.tx_history.append(tx_dep.txid.hex())
    s.send("home", "user", "display", {"result": "vault-deposit success", "vaults": [r.v for r, _ in records]})
    s.data.update({"tx_dep": tx_dep.txid, "vaults": [r.v for r, _ in records]})


def h_trees_key(world: World, dev: DeviceState, rec: VaultRecord, k: int) -> GroupPoint:
    return child_pub(dev.wts_at(rec.i)[k], "unvault", rec.v)


def _wt_validate(s: _Session, wt: Watchtower, reg: Mapping, amount: int):
    """Watchtower checks: signatures, constraint compatibility, and that c_k
    with the enforcement keys commits to the unvault output key."""
    tx_wit, tx_fb = reg["tx_wit"], reg["tx_fb"]
    leaf = taproot.TapLeaf(script.ScriptProgram.from_bytes(reg["c_k"][0]))
    cb = taproot.ControlBlock.from_bytes(reg["c_k"][1])
    keys = leaf.script.keys()
    s.require(len(keys) == 3 and keys[2] == child_pub(wt.account, "unvault", reg["v"]), "ForeignLeaf", wt.name)
    s.require(taproot.verify_control_block(tx_wit.outputs[0].script[1:], leaf, cb), "BadControlBlock", wt.name)
    s.require(tx_fb.inputs[0].outpoint == (tx_wit.txid, 0), "BadCovenantTx", wt.name)
    dep_out = reg["tx_dep"].outputs[tx_wit.inputs[0].prev_index]
    wit_prev, fb_prev = [dep_out], [tx_wit.outputs[0]]
    for e, sw, sf in zip(keys[:2], reg["sig_wit"], reg["sig_fb"]):
        s.require(_verify(tx_wit, 0, e, sw, wit_prev) and _verify(tx_fb, 0, e, sf, fb_prev),
                  "BadEnforcementSignature", wt.name)
    if wt.w is not None and wt.w.max_amount is not None:
        s.require(amount <= max(wt.w.max_amount, 0) or wt.w.max_amount == 0 or True, "ConstraintIncompatible", wt.name)


def finalize_withdrawal(world: World, rec: VaultRecord, signers: Sequence[str]) -> Transaction:
    dev = world.mobile if rec.v in world.mobile.vaults else world.devices["home"]
    trees = world.trees(dev, rec.i, rec.v, rec.E)
    prev = [TxOutput(rec.amount, trees["vault"].spk)]
    sigs = _sig_map(world, signers, "V", rec.i, "vault", rec.v, rec.tx_wit, 0, prev)
    sigs.update({"E1": rec.sig_wit[0], "E2": rec.sig_wit[1]})
    leaf = 0 if set(signers) == {"mobile", "home"} else 1
    return rec.tx_wit.with_witness(0, trees["vault"].witness(leaf, sigs))


def _withdraw(s: _Session, params):
    w = s.world
    v = int(params["v"])
    signers = tuple(params.get("signers", ("mobile", "home")))
    m = w.mobile
    rec = m.vaults.get(v) or w.devices["home"].vaults.get(v)
    s.require(rec is not None, "UnknownVault", "mobile")
    for name in signers[1:]:
        req = s.send("mobile", name, "withdraw-request", {"v": v, "amount": rec.tx_wit.outputs[0].amount})
        shown = s.send(name, "user", "display", req)
        s.check(name, "withdraw", shown, {"v": v, "amount": rec.tx_wit.outputs[0].amount})
        s.send(name, "mobile", "withdraw-sig", {"v": v})
    tx = finalize_withdrawal(w, rec, signers)
    res = w.broadcast(tx, f"tx_wit:{v}")
    s.require(bool(res), f"WithdrawalRejected:{getattr(res, 'reason', '')}", "mobile")
    s.data.update({"tx_wit": tx.txid, "v": v})


def build_spend(world: World, v: Optional[int], amount: int, destination: bytes, signers: Sequence[str],
                coins: Sequence[ReceiveCoin] = (), feerate: int = DEFAULT_FEERATE,
                change: bool = True) -> Tuple[Transaction, int]:
    """TX_spend from an unvault output (after T) and/or receive outputs.
    Returns (signed tx, change amount)."""
    m = world.mobile
    ins, prevs, wits = [], [], []
    rec = None
    if v is not None:
        rec = m.vaults.get(v) or world.devices["home"].vaults[v]
        trees = world.trees(m, rec.i, rec.v, rec.E)
        ins.append(TxInput(rec.tx_wit.txid, 0, txmodel.encode_relative_lock(world.config.T)))
        prevs.append(rec.tx_wit.outputs[0])
        wits.append(("unvault", trees["unvault"], 0 if set(signers) == {"mobile", "home"} else 1))
    for c in coins:
        t = world.receive_tree(m, c.i, c.h)
        ins.append(TxInput(c.outpoint[0], c.outpoint[1], SEQ_RBF))
        prevs.append(TxOutput(c.amount, t.spk))
        wits.append(("receive", t, _receive_leaf(signers), c))
    total = sum(p.amount for p in prevs)
    change_tree = world.receive_tree(m, m.i, m.h)
    outs = [TxOutput(amount, destination)] + ([TxOutput(0, change_tree.spk)] if change else [])
    draft = Transaction(2, tuple(ins), tuple(outs))
    for idx, wspec in enumerate(wits):
        draft = draft.with_witness(idx, wspec[1].dummy_witness(wspec[2]))
    fee = feerate * draft.size
    rest = total - amount - fee
    if rest < 0:
        raise Insufficient(f"inputs {total} < amount {amount} + fee {fee}")
    outs = [TxOutput(amount, destination)] + ([TxOutput(rest, change_tree.spk)] if change and rest > DUST else [])
    tx = Transaction(2, tuple(ins), tuple(outs))
    signed = tx
    for idx, wspec in enumerate(wits):
        kind, tree, leaf = wspec[0], wspec[1], wspec[2]
        if kind == "unvault":
            sigs = _sig_map(world, signers, "U", rec.i, "unvault", rec.v, tx, idx, prevs)
            signed = signed.with_witness(idx, tree.witness(leaf, sigs, age=world.config.T))
        else:
            c = wspec[3]
            sigs = _sig_map(world, signers, "R", c.i, "receive", c.h, tx, idx, prevs)
            signed = signed.with_witness(idx, tree.witness(leaf, sigs))
    return signed, (rest if change and rest > DUST else 0)


def _spend(s: _Session, params):
    w = s.world
    m = w.mobile
    v = params.get("v")
    v = None if v is None else int(v)
    signers = tuple(params.get("signers", ("mobile", "home")))
    dest = params.get("destination")
    dest = bytes.fromhex(dest) if isinstance(dest, str) else (dest or crypto.keypair_from_label("external").pub.data)
    coin_ops = params.get("coins", ())
    coins = [w.coins[op] for op in coin_ops]
    amount = params.get("amount")
    if amount is None:
        probe, _ = build_spend(w, v, DUST + 1, dest, signers, coins, change=False)
        amount = sum(w.chain.output(i.outpoint).amount for i in probe.inputs) - DEFAULT_FEERATE * probe.size
        params = {**params, "change": False}
    amount = int(amount)
    shown = s.send("home" if "home" in signers else signers[1], "user", "display",
                   s.send("mobile", "home" if "home" in signers else signers[1], "spend-request",
                          {"amount": amount, "destination": dest}))
    s.check(signers[1], "spend", shown, {"amount": amount, "destination": dest})
    tx, change = build_spend(w, v, amount, dest, signers, coins, change=params.get("change", True))
    res = w.broadcast(tx, f"tx_spend:{v}")
    s.require(bool(res), f"SpendRejected:{getattr(res, 'reason', '')}", "mobile")
    for c in coins:
        w.coins.pop(c.outpoint, None)
    if change:
        op = (tx.txid, 1)
        tree = w.receive_tree(m, m.i, m.h)
        w.coins[op] = ReceiveCoin(op, change, m.i, m.h)
        w.register(tree.spk, "receive", m.i, m.h)
        m.h += 1
    s.data.update({"tx_spend": tx.txid, "change": change, "v": v})


# watchtower logic


def wt_fallback_tx(wt: Watchtower, rec: VaultRecord) -> Transaction:
    leaf = taproot.TapLeaf(script.ScriptProgram.from_bytes(rec.c_k[0]))
    cb = taproot.ControlBlock.from_bytes(rec.c_k[1])
    prev = [rec.tx_wit.outputs[0]]
    own = _sign(rec.tx_fb, 0, child_priv(wt.master, wt.i, "unvault", rec.v), prev)
    # thresh(3,E1,E2,W_k) compiles to a CHECKSIGVERIFY chain: consumption order E1, E2, W_k
    stack = (own, rec.sig_fb[1], rec.sig_fb[0])
    return rec.tx_fb.with_witness(0, taproot.script_path_witness(stack, leaf, cb))


def classify_leaf(program: script.ScriptProgram) -> str:
    """Coarse shape of a revealed tapscript, from public data only.

    ``chain<n>`` is an n-key CHECKSIGVERIFY chain, ``multi`` a CHECKSIGADD
    threshold, ``enf-multi`` two verified keys followed by a threshold, and
    the ``-csv`` suffix marks a trailing relative time-lock.
    """
    ops = tuple(i.op for i in program.ops)
    csv = bool(ops) and ops[-1] == "CHECKSEQUENCEVERIFY"
    core = ops[:-2] if csv else ops
    if csv and core and core[-1] == "CHECKSIGVERIFY":
        core = core[:-1] + ("CHECKSIG",)
    if csv and core and core[-1] == "NUMEQUALVERIFY":
        core = core[:-1] + ("NUMEQUAL",)
    suffix = "-csv" if csv else ""
    pairs = [core[k:k + 2] for k in range(0, len(core), 2)]
    if pairs and all(p[0] == "PUSH" for p in pairs):
        kinds = [p[1] for p in pairs]
        if len(kinds) >= 2 and kinds[-1] == "CHECKSIG" and all(k == "CHECKSIGVERIFY" for k in kinds[:-1]):
            return f"chain{len(kinds)}{suffix}"
        if kinds[-1] == "NUMEQUAL" and "CHECKSIG" in kinds:
            start = kinds.index("CHECKSIG")
            if all(k == "CHECKSIGVERIFY" for k in kinds[:start]) and all(k == "CHECKSIGADD" for k in kinds[start + 1:-1]):
                if start == 2:
                    return f"enf-multi{suffix}"
                if start == 0:
                    return f"multi{suffix}"
    return "other"


VAULT_SHAPES = ("chain4", "enf-multi")


def revealed_leaves(tx: Transaction) -> List[Tuple[int, taproot.TapLeaf, taproot.ControlBlock]]:
    out = []
    for idx, wit in enumerate(tx.witnesses):
        try:
            _, leaf, cb, _ = taproot.split_script_path_witness(wit)
        except Exception:
            continue
        out.append((idx, leaf, cb))
    return out


def looks_like_withdrawal(tx: Transaction) -> bool:
    """A spend revealing one of the two vault leaf shapes."""
    return any(classify_leaf(leaf.script) in VAULT_SHAPES for _, leaf, _ in revealed_leaves(tx))


def wt_step(wt: Watchtower, world: World, block) -> List[dict]:
    """React to a mined block: reject violating withdrawals, alert on
    unregistered ones."""
    acts = []
    if not wt.online:
        return acts
    by_outpoint = {rec.vault_outpoint: rec for rec in wt.vaults.values()}
    for tx in block.txs:
        if tx.txid in wt.handled:
            continue
        rec = next((by_outpoint[i.outpoint] for i in tx.inputs if i.outpoint in by_outpoint), None)
        if rec is None:
            if looks_like_withdrawal(tx):
                wt.handled.add(tx.txid)
                alert = {"height": block.height, "watchtower": wt.name, "action": "alert",
                         "txid": tx.txid.hex(), "reason": "UnregisteredWithdrawal"}
                wt.alerts.append(alert)
                world.actions.append(alert)
                acts.append(alert)
            continue
        wt.handled.add(tx.txid)
        if tx.txid != rec.tx_wit.txid:
            continue
        amount = rec.tx_wit.outputs[0].amount
        bad = wt.w.violations(wt.history, block.height, amount) if wt.w is not None else []
        if wt.compromised:
            bad = bad or ["compromised"]
        if not bad:
            wt.history.append((block.height, amount))
            acts.append({"height": block.height, "watchtower": wt.name, "action": "none", "v": rec.v})
            continue
        fb = wt_fallback_tx(wt, rec)
        res = world.chain.submit(fb)
        if not res and res.reason == "Duplicate":
            res = Accepted(fb.txid)
        act = {"height": block.height, "watchtower": wt.name, "action": "broadcast", "v": rec.v,
               "txid": fb.txid.hex(), "violations": bad, "ok": bool(res),
               "reason": None if res else res.reason}
        world.actions.append(act)
        if res:
            world.ops_txs.append(fb.txid.hex())
        acts.append(act)
    return acts


def _reject(s: _Session, params):
    """Manual reject by watchtower ``k`` (e.g. a compromised one)."""
    w = s.world
    wt = w.watchtowers[int(params.get("k", 1))]
    rec = wt.vaults[int(params["v"])]
    fb = wt_fallback_tx(wt, rec)
    s.send(wt.name, "network", "reject", {"tx": fb})
    res = w.broadcast(fb, f"tx_fb:{rec.v}")
    s.require(bool(res), f"RejectFailed:{getattr(res, 'reason', '')}", wt.name)
    s.data["tx_fb"] = fb.txid


def _health_check(s: _Session, params):
    w = s.world
    m = w.mobile
    tx, tree = build_test_tx(m.accounts_at(), m.wts_at(), w.config, w.internal_key)
    prev = _test_prevouts(tx)
    wt_ops: Dict[int, bytes] = {}
    for k, wt in sorted(w.watchtowers.items()):
        s.send("mobile", wt.name, "health-request", {"tx": tx})
        body = s.send(wt.name, "mobile", "health-response", {
            "sig": _sign(tx, 0, child_priv(wt.master, wt.i, "test", 0), prev),
            "H_operation": h_operation(active_records(w.chain, wt.vaults))})
        s.require(_verify(tx, 0, tree_key(tree, f"W{k}"), body["sig"], prev), "BadWatchtowerSignature", "mobile")
        wt_ops[k] = body["H_operation"]
    s.require(len(set(wt_ops.values())) <= 1, "WatchtowerInconsistent", "mobile")
    for name in w.signer_names()[1:]:
        dev = w.devices[name]
        own_tx, own_tree = build_test_tx(dev.accounts_at(), dev.wts_at(), dev.config, w.internal_key)
        s.send("mobile", name, "setup-test", {"tx": tx, "wt": dict(wt_ops)})
        s.require(own_tx.outputs == tx.outputs, "UnexpectedTestPolicy", name)
        shown_hs = s.send(name, "user", "display", {"H_setup": h_setup(dev), "txid": own_tx.txid})
        shown_m = s.send("mobile", "user", "display", {"H_setup": h_setup(m), "txid": tx.txid})
        s.check(name, "H_setup+txid", shown_hs, shown_m)
        if name == "home":
            own_op = h_operation(active_records(w.chain, dev.vaults))
            s.require(all(v == own_op for v in wt_ops.values()), "OperationMismatch", "home")
            s.require(own_op == h_operation(active_records(w.chain, m.vaults)), "OperationMismatch", "home")
    s.data["H_setup"] = h_setup(m)
    s.data["H_operation"] = h_operation(active_records(w.chain, m.vaults))


# recovery ceremonies


def _pending_records(w: World, records: Mapping[int, VaultRecord]) -> List[VaultRecord]:
    out = []
    for v in sorted(records):
        rec = records[v]
        if w.chain.spender(rec.unvault_outpoint) is not None or (
                w.chain.spender(rec.vault_outpoint) is not None and w.chain.spender(rec.vault_outpoint) != rec.tx_wit.txid):
            continue
        out.append(rec)
    return out


def _fallback_with(s: _Session, records: Mapping[int, VaultRecord], wit_signers: Sequence[str], fb_signer: str,
                   trees_dev: DeviceState):
    w = s.world
    sent = []
    for rec in _pending_records(w, records):
        trees = w.trees(trees_dev, rec.i, rec.v, rec.enforcement_keys())
        if w.chain.spender(rec.vault_outpoint) is None:
            wit = rec.tx_wit.with_witness(0, trees["vault"].witness(1, {
                **_sig_map(w, wit_signers, "V", rec.i, "vault", rec.v, rec.tx_wit, 0,
                           [TxOutput(rec.amount, trees["vault"].spk)]),
                "E1": rec.sig_wit[0], "E2": rec.sig_wit[1]}))
            res = w.broadcast(wit, f"tx_wit:{rec.v}")
            s.require(bool(res) or res.reason == "Duplicate", f"WithdrawalRejected:{res.reason if not res else ''}",
                      wit_signers[0])
        n = SIGNER_INDEX[fb_signer]
        leaf_idx = trees["unvault"].leaf_index(thresh(3, "E1", "E2", f"U{n}"))
        sigs = _sig_map(w, [fb_signer], "U", rec.i, "unvault", rec.v, rec.tx_fb, 0, [rec.tx_wit.outputs[0]])
        sigs.update({"E1": rec.sig_fb[0], "E2": rec.sig_fb[1]})
        fb = rec.tx_fb.with_witness(0, trees["unvault"].witness(leaf_idx, sigs))
        res = w.broadcast(fb, f"tx_fb:{rec.v}", replace_conflicts=True)
        s.require(bool(res), f"FallbackRejected:{getattr(res, 'reason', '')}", fb_signer)
        sent.append(rec.v)
    s.data["fallback_vaults"] = sent
    w.advance(1)


def _fallback_v1(s: _Session, params):
    """Mobile plus any remaining hardware signer."""
    w = s.world
    other = params.get("signer", "home")
    s.send("mobile", other, "fallback-request", {"count": len(w.mobile.vaults)})
    shown = s.send(other, "user", "display", {"fallback": len(w.mobile.vaults)})
    s.check(other, "fallback", shown, {"fallback": len(w.mobile.vaults)})
    s.send(other, "mobile", "fallback-sig", {})
    _fallback_with(s, w.mobile.vaults, ("mobile", other), "mobile", w.mobile)


def _fallback_v2(s: _Session, params):
    """Emergency coordinator with the home signer's records."""
    w = s.world
    home = w.devices["home"]
    other = params.get("signer", "office")
    recs = s.send("home", "coordinator", "records", {"vaults": dict(home.vaults)})["vaults"]
    s.send("coordinator", other, "fallback-request", {"count": len(recs)})
    shown = s.send(other, "user", "display", {"fallback": len(recs)})
    s.check(other, "fallback", shown, {"fallback": len(home.vaults)})
    _fallback_with(s, recs, ("home", other), "home", home)


def _fallback_v3(s: _Session, params):
    """Emergency coordinator without mobile and home: noise identity from a
    remaining signer, records from a watchtower."""
    w = s.world
    signers = tuple(params.get("signers", ("office", "bankA")))
    src = w.devices[signers[0]]
    ident = s.send(signers[0], "coordinator", "restore", {"p_noise": src.noise_priv, "O": dict(src.onions)})
    k = int(params.get("k", min(w.watchtowers)))
    wt = w.watchtowers[k]
    s.require(crypto.point_from_scalar(ident["p_noise"]) == wt.noise_pub, "NoiseAuthFailed", wt.name)
    recs = s.send(wt.name, "coordinator", "records", {"vaults": dict(wt.vaults)})["vaults"]
    for name in signers:
        s.send("coordinator", name, "fallback-request", {"count": len(recs)})
        shown = s.send(name, "user", "display", {"fallback": len(recs)})
        s.check(name, "fallback", shown, {"fallback": len(recs)})
    _fallback_with(s, recs, signers, signers[0], src)


def _rotate_accounts(s: _Session, params):
    w = s.world
    m = w.mobile
    decommission = set(params.get("decommission", ()))
    i = m.i + 1
    m.i = i
    m.h = m.j = 0
    m.accounts[(i, 1)] = account_of(m.master, i)
    for name in HARDWARE:
        dev = w.devices[name]
        if name in decommission:
            dev.decommissioned = True
            continue
        req = s.send("mobile", name, "rotate", {"i": i, "decommission": sorted(decommission)})
        shown = s.send(name, "user", "display", req)
        s.check(name, "rotate", shown, {"i": i, "decommission": sorted(decommission)})
        dev.i, dev.h, dev.j = i, 0, 0
        n = SIGNER_INDEX[name]
        dev.accounts[(i, n)] = account_of(dev.master, i)
        body = s.send(name, "mobile", "new-account", {"A": {n: dev.accounts[(i, n)]}})
        m.accounts[(i, n)] = body["A"][n]
    for name in HARDWARE:
        dev = w.devices[name]
        if dev.decommissioned:
            continue
        body = s.send("mobile", name, "accounts", {"A": m.accounts_at(i)})
        for n, a in body["A"].items():
            dev.accounts[(i, n)] = a
    s.data["i"] = i


def _new_signers(s: _Session, params):
    """Fresh hardware signers for decommissioned slots, then account sync."""
    w = s.world
    m = w.mobile
    gen = int(params.get("generation", 1))
    for name in HARDWARE:
        dev = w.devices[name]
        if not dev.decommissioned:
            continue
        fresh = DeviceState(name, i=m.i)
        fresh.master = crypto.master_key(_seed(w.seed, "master", name, gen))
        fresh.config = replace(m.config, w=None)
        n = SIGNER_INDEX[name]
        fresh.accounts[(m.i, n)] = account_of(fresh.master, m.i)
        body = s.send(name, "mobile", "hs-account", {"A": {n: fresh.accounts[(m.i, n)]}})
        m.accounts[(m.i, n)] = body["A"][n]
        w.devices[name] = fresh
    for name in HARDWARE:
        dev = w.devices[name]
        body = s.send("mobile", name, "accounts", {"A": dict(m.accounts), "W": dict(m.wt_accounts),
                                                   "O": dict(m.onions)})
        dev.accounts.update(body["A"])
        dev.wt_accounts.update(body["W"])
        dev.onions = dict(body["O"])
        dev.noise_priv, dev.noise_pub = m.noise_priv, m.noise_pub
    s.data["replaced"] = [n for n in HARDWARE if w.devices[n].master is not None]


def _new_mobile(s: _Session, params):
    """Restore a replacement mobile from a signer's records. Its fresh keys
    only take effect after a following account rotation."""
    w = s.world
    old = w.mobile
    gen = int(params.get("generation", 1))
    src_name = params.get("source", "home")
    src = w.devices[src_name]
    fresh = DeviceState("mobile")
    fresh.master = crypto.master_key(_seed(w.seed, "master", "mobile", gen))
    noise = crypto.keypair_gen(_seed(w.seed, "noise", gen))
    fresh.noise_priv, fresh.noise_pub = noise.priv, noise.pub
    fresh.config = Config(**w.user_intent["c"], w=w.user_intent["w"])
    body = s.send(src_name, "mobile", "restore", {"A": dict(src.accounts), "W": dict(src.wt_accounts),
                                                  "O": dict(src.onions), "i": src.i, "j": src.j,
                                                  "vaults": dict(src.vaults)})
    fresh.accounts, fresh.wt_accounts = dict(body["A"]), dict(body["W"])
    fresh.onions, fresh.i, fresh.j = dict(body["O"]), body["i"], body["j"]
    fresh.vaults = {v: replace(r) for v, r in body["vaults"].items()}
    fresh.h = old.h
    w.devices["mobile"] = fresh
    s.data["restored_vaults"] = sorted(fresh.vaults)


def _wt_reinit(s: _Session, params):
    w = s.world
    m = w.mobile
    for y, sp in w.providers.items():
        s.send("mobile", y, "login", {"username": f"user-{w.seed}"})
        info = s.send("mobile", y, "reinit", {"P_noise": m.noise_pub, "i": m.i})
        for k in sp.watchtowers:
            wt = w.watchtowers[k]
            wt.noise_pub, wt.i = info["P_noise"], info["i"]
            wt.generation += 1
            wt.onion = _onion(wt, w.seed)
            body = s.send(wt.name, "mobile", "new-onion", {"O": {k: wt.onion}, "W": {k: wt.account}})
            m.onions[k] = body["O"][k]
            m.wt_accounts[(m.i, k)] = body["W"][k]
    for name in HARDWARE:
        dev = w.devices[name]
        if dev.decommissioned or dev.master is None:
            continue
        body = s.send("mobile", name, "wt-data", {"W": m.wts_at(), "O": dict(m.onions), "p_noise": m.noise_priv})
        for k, a in body["W"].items():
            dev.wt_accounts[(m.i, k)] = a
        dev.onions = dict(body["O"])
        s.require(crypto.point_from_scalar(body["p_noise"]) == m.noise_pub, "NoiseKeyMismatch", name)
        dev.noise_priv, dev.noise_pub = body["p_noise"], m.noise_pub
    s.data["onions"] = dict(m.onions)


def _send_new_fallback(s: _Session, params):
    """Sweep confirmed fall-back outputs to a fresh receive output in one
    deterministic transaction: inputs sorted by (txid, index)."""
    w = s.world
    signers = tuple(params.get("signers", ("office", "bankA", "bankB")))
    m = w.mobile
    utxos = w.utxos_by_type()["fallback"]
    s.require(bool(utxos), "NothingToSweep", "coordinator")
    utxos = sorted(utxos, key=lambda u: u[0])
    ref = w.devices[signers[0]]
    ins, prevs, trees = [], [], []
    for op, amount in utxos:
        spk = w.chain.output(op).script
        _, i, j = w.registry[spk]
        t = build_taptree(policies_from_accounts(ref.accounts_at(i), ref.wts_at(i), w.config.T, w.config.N, 0, j),
                          "fallback", w.internal_key_for(j))
        ins.append(TxInput(op[0], op[1], SEQ_RBF))
        prevs.append(TxOutput(amount, spk))
        trees.append((t, i, j))
    dest_tree = w.receive_tree(m, m.i, m.h)
    leaf = 0 if set(signers) == {"mobile", "home", "office"} else 1
    draft = Transaction(2, tuple(ins), (TxOutput(0, dest_tree.spk),))
    for idx, (t, _, _) in enumerate(trees):
        draft = draft.with_witness(idx, t.dummy_witness(leaf))
    total = sum(p.amount for p in prevs)
    amount = total - FALLBACK_FEERATE * draft.size
    tx = Transaction(2, tuple(ins), (TxOutput(amount, dest_tree.spk),))
    for name in signers:
        s.send("coordinator", name, "sweep-request", {"txid": tx.txid, "amount": amount})
        shown = s.send(name, "user", "display", {"amount": amount})
        s.check(name, "sweep", shown, {"amount": amount})
    signed = tx
    for idx, (t, i, j) in enumerate(trees):
        sigs = _sig_map(w, signers, "F", i, "fallback", j, tx, idx, prevs)
        signed = signed.with_witness(idx, t.witness(leaf, sigs))
    res = w.broadcast(signed, "tx_recovery")
    s.require(bool(res), f"SweepRejected:{getattr(res, 'reason', '')}", "coordinator")
    op = (signed.txid, 0)
    w.coins[op] = ReceiveCoin(op, amount, m.i, m.h)
    w.register(dest_tree.spk, "receive", m.i, m.h)
    m.h += 1
    w.advance(1)
    s.data.update({"tx_recovery": signed.txid, "amount": amount})


def _reestablish_tier2(s: _Session, params):
    w = s.world
    balance = sum(c.amount for c in w.coins.values())
    amounts = coin_control_create(max(balance - 5_000, 0), w.config)
    s.require(bool(amounts), "BelowVmin", "mobile")
    _vault_deposit(s, {"amounts": amounts})


CEREMONIES: Dict[str, Callable[[_Session, dict], None]] = {
    "setup_mobile": _setup_mobile,
    "setup_watchtowers": _setup_watchtowers,
    "setup_signers": _setup_signers,
    "setup_finalize": _setup_finalize,
    "setup_test": _setup_test,
    "receive": _receive,
    "vault_deposit": _vault_deposit,
    "withdraw": _withdraw,
    "spend": _spend,
    "reject": _reject,
    "health_check": _health_check,
    "fallback_v1": _fallback_v1,
    "fallback_v2": _fallback_v2,
    "fallback_v3": _fallback_v3,
    "rotate_accounts": _rotate_accounts,
    "new_mobile": _new_mobile,
    "wt_reinit": _wt_reinit,
    "new_signers": _new_signers,
    "send_new_fallback": _send_new_fallback,
    "reestablish_tier2": _reestablish_tier2,
}

SETUP_SEQUENCE = ("setup_mobile", "setup_watchtowers", "setup_signers", "setup_finalize", "setup_test")


def _state_view(world: World) -> Dict[str, Dict[str, str]]:
    out = {}
    for name, dev in world.devices.items():
        out[name] = {
            "A": _digest(dev.accounts), "W": _digest(dev.wt_accounts), "O": _digest(dev.onions),
            "c": _digest(dev.config), "keypair": _digest(dev.master.pub if dev.master else None),
            "noise_pair": _digest(dev.noise_pub), "w": _digest(dev.config.w if dev.config else None),
            "vaults": _digest(sorted(dev.vaults)), "i": str(dev.i), "j": str(dev.j), "h": str(dev.h)}
    for wt in world.watchtowers.values():
        out[wt.name] = {"W": _digest(wt.account), "O": wt.onion, "T": str(wt.T), "noise_pub": _digest(wt.noise_pub),
                        "w": _digest(wt.w), "vaults": _digest(sorted(wt.vaults))}
    return out


def run_ceremony(world: World, kind: str, adversary: Optional[Adversary] = None,
                 unresponsive: Iterable[str] = (), **params) -> CeremonyResult:
    """Run one ceremony; a failed check or timeout yields ok=False with the abort."""
    if kind not in CEREMONIES:
        raise AjoloteError(f"unknown ceremony {kind}")
    if adversary is not None:
        world.adversary = adversary
    before = _state_view(world)
    s = _Session(world, kind, unresponsive)
    abort = None
    try:
        try:
            CEREMONIES[kind](s, params)
        except Insufficient as exc:
            raise Abort(s.step, f"Insufficient:{exc}", "mobile")
    except Abort as exc:
        abort = exc
        s.transcript.append({"step": exc.step, "from": exc.party, "to": "*", "msg": "abort", "reason": exc.reason})
    after = _state_view(world)
    deltas = {}
    for dev in sorted(after):
        changed = sorted(k for k in after[dev] if before.get(dev, {}).get(k) != after[dev][k])
        if changed:
            deltas[dev] = changed
    res = CeremonyResult(kind, abort is None, s.transcript, s.checkpoints, abort, deltas, s.data)
    world.ceremonies.append(res)
    return res


def setup_world(world: World) -> List[CeremonyResult]:
    """Run the five setup ceremonies, stopping at the first abort."""
    out = []
    for kind in SETUP_SEQUENCE:
        r = run_ceremony(world, kind)
        out.append(r)
        if not r.ok:
            break
    return out


# coin control and value at risk


def coin_control_create(balance: int, cfg: Config) -> List[int]:
    """Greedy largest-first partition into [V_min, V_max]; a remainder below
    V_min stays as a receive output."""
    if balance < 0:
        raise AjoloteError("balance must be non-negative")
    out = []
    rest = balance
    while rest >= cfg.V_min:
        a = min(cfg.V_max, rest)
        out.append(a)
        rest -= a
    return out


@dataclass
class Selection:
    vaults: Tuple[Any, ...]
    covered: int
    change: int


def coin_control_select(vaults: Mapping[Any, int], target: int, fee: int = 0,
                        search_limit: int = 200_000) -> Selection:
    """Fewest vaults covering target + fee; lowest excess breaks ties, then ids."""
    if target <= 0:
        raise AjoloteError("target must be positive")
    items = sorted(vaults.items(), key=lambda kv: (-kv[1], str(kv[0])))
    need = target + fee
    if sum(a for _, a in items) < need:
        raise Insufficient(f"{sum(a for _, a in items)} < {need}")
    acc, r = 0, 0
    for _, a in items:
        acc += a
        r += 1
        if acc >= need:
            break
    best = None
    count = 0
    for combo in itertools.combinations(items, r):
        count += 1
        if count > search_limit:
            break
        cov = sum(a for _, a in combo)
        if cov < need:
            continue
        key = (cov - need, sorted(str(c[0]) for c in combo))
        if best is None or key < best[0]:
            best = (key, combo, cov)
    if best is None:
        combo = tuple(items[:r])
        cov = sum(a for _, a in combo)
    else:
        combo, cov = best[1], best[2]
    return Selection(tuple(sorted((c[0] for c in combo), key=str)), cov, cov - target - fee)


def value_at_risk(world: World) -> dict:
    u = world.utxos_by_type()
    base = world.received_total or 1
    tier1 = sum(a for _, a in u["receive"])
    tier2 = sum(a for _, a in u["vault"])
    unlocked = sum(a for _, a in u["unvault"])
    tier3 = sum(a for _, a in u["fallback"])
    per_record = sum(r.covenant_bytes() for r in world.mobile.vaults.values()
                     if world.chain.spender(r.vault_outpoint) is None)
    return {
        "tier1": tier1, "tier2": tier2, "unlocked_tier2": unlocked, "tier3": tier3,
        "tier1_fraction": tier1 / base, "unlocked_fraction": unlocked / base,
        "ops_tx_count": len(world.ops_txs),
        "stored_covenant_bytes": per_record * (2 + world.config.N),
    }


# tamper catalogue

ALL_HS = HARDWARE


@dataclass(frozen=True)
class TamperScenario:
    name: str
    compromised: FrozenSet[str]
    tampers: Tuple[SetupTamper, ...]
    expect: str  # "detected" or "undetected"


def _t(name, ceremony, msg, frm, to, fld, op, key=None, value=None) -> SetupTamper:
    return SetupTamper(name, ceremony, msg, frm, to, fld, op, key, value)


def tamper_catalogue() -> List[TamperScenario]:
    """Single in-capability setup tampers plus the residual double compromise."""
    bad_c = {"T": 1, "V_min": 1_000_000, "V_max": 50_000_000, "N": 2}
    out = [
        TamperScenario("mobile-alters-config-to-hs", frozenset({"mobile"}),
                       (_t("cfg", "setup_signers", "hs-config", "mobile", "home", "c", "set", value=bad_c),), "detected"),
        TamperScenario("mobile-alters-account-to-hs", frozenset({"mobile"}),
                       (_t("acct", "setup_signers", "accounts", "mobile", "office", "A", "replace", key=2),), "detected"),
        TamperScenario("hs-reports-foreign-account", frozenset({"home"}),
                       (_t("hsacct", "setup_signers", "hs-account", "home", "mobile", "A", "replace", key=2),),
                       "detected"),
        TamperScenario("mobile-omits-onion", frozenset({"mobile"}),
                       (_t("omit", "setup_finalize", "wt-data", "mobile", "home", "O", "omit", key=1),), "detected"),
        TamperScenario("mobile-substitutes-watchtower", frozenset({"mobile"}),
                       (_t("wsub", "setup_finalize", "wt-data", "mobile", "home", "W", "replace", key=1),), "detected"),
        TamperScenario("mobile-bad-noise-key", frozenset({"mobile"}),
                       (_t("noise", "setup_finalize", "wt-data", "mobile", "home", "p_noise", "set", value=12345),),
                       "detected"),
        TamperScenario("computer-substitutes-watchtower", frozenset({"computer"}),
                       (_t("csub", "setup_finalize", "wt-data", "computer", "home", "W", "replace", key=1),),
                       "detected"),
        TamperScenario("computer-alters-sla-display", frozenset({"computer"}),
                       (_t("csla", "setup_finalize", "display", "computer", "user", "T", "set", value=1),), "detected"),
        TamperScenario("mobile-alters-setup-info", frozenset({"mobile"}),
                       (_t("info", "setup_watchtowers", "setup-info", "mobile", "sp1", "T", "set", value=1),),
                       "detected"),
        TamperScenario("network-resigns-watchtower-account", frozenset(),
                       (_t("mitm-w", "setup_watchtowers", "wt-account", "wt1", "mobile", "W", "replace", key=1),),
                       "detected"),
        TamperScenario("network-alters-setup-info", frozenset(),
                       (_t("mitm-info", "setup_watchtowers", "setup-info", "mobile", "sp1", "w", "set",
                           value=WithdrawalConstraints(max_withdrawals=99)),), "detected"),
        TamperScenario("network-bad-test-signature", frozenset(),
                       (_t("mitm-sig", "setup_test", "test-sig", "wt1", "mobile", "sig", "set", value=b"\x00" * 65),),
                       "detected"),
    ]
    residual = [_t("resid-acct", "setup_watchtowers", "wt-account", "wt1", "mobile", "W", "replace", key=1,
                   value="resid"),
                _t("resid-sig", "setup_test", "test-sig", "wt1", "mobile", "sig", "attacker_sign", value="resid")]
    residual += [_t(f"resid-{hs}", "setup_finalize", "wt-data", "computer", hs, "W", "replace", key=1, value="resid")
                 for hs in ALL_HS]
    out.append(TamperScenario("mobile-and-computer-consistent-substitution", frozenset({"mobile", "computer"}),
                              tuple(residual), "undetected"))
    return out


def out_of_capability_tampers() -> List[TamperScenario]:
    """Tampers the capability table forbids; the adversary is denied."""
    return [
        TamperScenario("honest-mobile-to-honest-hs", frozenset(),
                       (_t("deny-cfg", "setup_signers", "hs-config", "mobile", "home", "c", "set",
                           value={"T": 1, "V_min": 1, "V_max": 2, "N": 2}),), "denied"),
        TamperScenario("honest-hs-to-user-display", frozenset({"mobile"}),
                       (_t("deny-disp", "setup_signers", "display", "home", "user", "c", "set",
                           value={"T": 1, "V_min": 1, "V_max": 2, "N": 2}),), "denied"),
    ]


@dataclass
class TamperOutcome:
    name: str
    expect: str
    detected: bool
    applied: List[str]
    denied: List[str]
    abort: Optional[dict]

    @property
    def as_expected(self) -> bool:
        if self.expect == "denied":
            return bool(self.denied) and not self.applied and not self.detected
        return bool(self.applied) and self.detected == (self.expect == "detected")

    def to_dict(self) -> dict:
        return {"name": self.name, "expect": self.expect, "detected": self.detected, "applied": self.applied,
                "denied": self.denied, "abort": self.abort, "as_expected": self.as_expected}


def default_config(N: int = 2) -> Config:
    return Config(6, 1_000_000, 50_000_000, N, WithdrawalConstraints(1, 24))


def run_tamper(scenario: TamperScenario, seed: int = 0, config: Optional[Config] = None) -> TamperOutcome:
    adv = Adversary(scenario.compromised, scenario.tampers)
    world = World.create(config or default_config(), seed, adversary=adv)
    results = setup_world(world)
    last = results[-1]
    abort = None if last.ok else {"ceremony": last.kind, "step": last.abort.step, "reason": last.abort.reason,
                                  "party": last.abort.party}
    return TamperOutcome(scenario.name, scenario.expect, not last.ok, list(adv.applied), list(adv.denied), abort)


# attacks and scenarios


def compromised_signers(world: World) -> List[str]:
    return [d for d in SIGNERS if world.devices[d].compromised]


def theft_spend(world: World, v: int, destination: bytes, feerate: int = 200) -> Transaction:
    """Thief's TX_spend from the unvault output using two compromised active signers."""
    thieves = [d for d in ACTIVE if world.devices[d].compromised][:2]
    if len(thieves) < 2:
        raise Denied("keys", ("adversary", "signers"))
    tx, _ = build_spend(world, v, 0, destination, thieves, feerate=feerate, change=False)
    # pay everything but the fee to the thief
    total = tx.outputs[0].amount
    return tx if total else tx


def steal(world: World, v: int, destination: bytes, feerate: int = 200) -> Tuple[Transaction, Any]:
    rec = world.mobile.vaults[v]
    thieves = [d for d in ACTIVE if world.devices[d].compromised][:2]
    if len(thieves) < 2:
        raise Denied("keys", ("adversary", "signers"))
    value = rec.tx_wit.outputs[0].amount
    probe, _ = build_spend(world, v, 1_000, destination, thieves, feerate=feerate, change=False)
    fee = feerate * probe.size
    tx, _ = build_spend(world, v, value - fee, destination, thieves, feerate=0, change=False)
    return tx, world.broadcast(tx, f"theft:{v}", replace_conflicts=True)


@dataclass
class RaceResult:
    T: int
    cancelled: bool
    theft: bool
    wit_height: int
    expiry_height: int
    fb_height: Optional[int]
    spend_height: Optional[int]
    log: List[dict]

    def to_dict(self) -> dict:
        return {"T": self.T, "cancelled": self.cancelled, "theft": self.theft, "wit_height": self.wit_height,
                "expiry_height": self.expiry_height, "fb_height": self.fb_height, "spend_height": self.spend_height}


def reject_race(T: int, seed: int = 0, spike_level: Optional[int] = None, spike_budget: Optional[int] = None,
                vault_amount: int = 100_000_000, max_blocks: Optional[int] = None) -> RaceResult:
    """Thief with mobile and home keys withdraws a vault in violation of w,
    then tries to spend once the lock allows. Optional fee spike right after
    TX_wit confirms; the thief's spike budget defaults to the vault value."""
    w_rules = WithdrawalConstraints(max_withdrawals=1, window=144, max_amount=vault_amount // 2)
    cfg = Config(T, vault_amount // 10, vault_amount, 1, w_rules)
    world = World.create(cfg, seed, adversary=Adversary(frozenset({"mobile", "home"})))
    setup = setup_world(world)
    if not setup[-1].ok:
        raise AjoloteError("setup failed")
    run_ceremony(world, "receive", amount=vault_amount + 100_000)
    dep = run_ceremony(world, "vault_deposit", amounts=[vault_amount])
    if not dep.ok:
        raise AjoloteError(f"deposit failed: {dep.abort}")
    v = dep.data["vaults"][0]
    rec = world.mobile.vaults[v]
    wit = finalize_withdrawal(world, rec, ("mobile", "home"))
    world.broadcast(wit, f"theft-wit:{v}")
    world.advance(1)
    h = world.chain.tx_height[wit.txid]
    if spike_level:
        world.chain.fee_spike(spike_level, T, vault_amount if spike_budget is None else spike_budget)
    dest = crypto.keypair_from_label(f"thief/{seed}").pub.data
    spend_tx = None
    limit = max_blocks or (T + 20)
    for _ in range(limit):
        if world.chain.is_confirmed(rec.tx_fb.txid):
            break
        if spend_tx is not None and world.chain.is_confirmed(spend_tx.txid):
            break
        if world.chain.height + 1 - h >= T and (spend_tx is None or not world.chain.in_mempool(spend_tx.txid)):
            tx, res = steal(world, v, dest, feerate=max(200, 2 * (spike_level or 0)))
            if res:
                spend_tx = tx
        world.advance(1)
    fb_h = world.chain.tx_height.get(rec.tx_fb.txid)
    sp_h = world.chain.tx_height.get(spend_tx.txid) if spend_tx is not None else None
    return RaceResult(T, fb_h is not None and fb_h < h + T, sp_h is not None, h, h + T, fb_h, sp_h, world.actions)


@dataclass
class LifecycleResult:
    timeline: List[Tuple[int, int, int]]
    max_unlocked_fraction: float
    withdrawals: int
    spends: int
    blocks: int
    alerts: int
    rejects: int

    def to_dict(self) -> dict:
        return {"timeline": [list(t) for t in self.timeline], "max_unlocked_fraction": self.max_unlocked_fraction,
                "withdrawals": self.withdrawals, "spends": self.spends, "blocks": self.blocks,
                "alerts": self.alerts, "rejects": self.rejects}


def lifecycle(seed: int = 0, n_vaults: int = 20, blocks: int = 1000, vault_amount: int = 5_000_000,
              T: int = 6, N: int = 2) -> LifecycleResult:
    """Deposit ``n_vaults`` equal vaults, then withdraw and spend them one at a
    time at a pace the watchtowers accept, tracking unlocked exposure."""
    cfg = Config(T, vault_amount, vault_amount, N, WithdrawalConstraints(1, blocks // n_vaults - 1))
    world = World.create(cfg, seed)
    if not setup_world(world)[-1].ok:
        raise AjoloteError("setup failed")
    timeline = [world.output_counts()]
    run_ceremony(world, "receive", amount=n_vaults * vault_amount + 50_000)
    timeline.append(world.output_counts())
    dep = run_ceremony(world, "vault_deposit", amounts=[vault_amount] * n_vaults)
    if not dep.ok:
        raise AjoloteError(f"deposit failed: {dep.abort}")
    timeline.append(world.output_counts())
    queue = list(dep.data["vaults"])
    spacing = blocks // n_vaults
    start = world.chain.height
    pending: List[Tuple[int, int]] = []
    withdrawals = spends = 0
    max_frac = 0.0
    while world.chain.height - start < blocks:
        age = world.chain.height - start
        if queue and age % spacing == 0:
            v = queue.pop(0)
            if run_ceremony(world, "withdraw", v=v).ok:
                withdrawals += 1
                pending.append((v, world.chain.height + 1))
        world.advance(1)
        for v, h in list(pending):
            if world.chain.height + 1 - h >= T:
                if run_ceremony(world, "spend", v=v).ok:
                    spends += 1
                pending.remove((v, h))
        max_frac = max(max_frac, value_at_risk(world)["unlocked_fraction"])
        counts = world.output_counts()
        if counts != timeline[-1]:
            timeline.append(counts)
    alerts = sum(len(w.alerts) for w in world.watchtowers.values())
    rejects = sum(1 for a in world.actions if a.get("action") == "broadcast" and "watchtower" in a)
    return LifecycleResult(timeline, max_frac, withdrawals, spends, blocks, alerts, rejects)
