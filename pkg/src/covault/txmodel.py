"""Transaction data model, canonical serialization, txid, sighash digests
for four signature semantics, and the field-mutability matrix.

Byte layouts are artifact-defined (see docs/serialization.md); only the
*set of fields* each digest commits to is meant to follow the deployed
semantics.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from . import crypto

SEQUENCE_FINAL = 0xFFFFFFFF
SEQUENCE_RBF_LIMIT = 0xFFFFFFFE  # below this value a tx signals replaceability
LOCK_DISABLE_FLAG = 1 << 31
LOCK_TYPE_FLAG = 1 << 22
LOCK_MASK = 0xFFFF
ANNEX_TAG = 0x50
APOAS_MARKER = 0x40  # flag-byte bit marking an APOAS signature


class TxError(Exception):
    pass


class NoCorrespondingOutput(TxError):
    pass


class ParseError(TxError):
    pass


@dataclass(frozen=True)
class TxInput:
    prev_txid: bytes
    prev_index: int
    sequence: int = SEQUENCE_FINAL

    @property
    def outpoint(self) -> Tuple[bytes, int]:
        return (self.prev_txid, self.prev_index)


@dataclass(frozen=True)
class TxOutput:
    amount: int
    script: bytes

    def __post_init__(self):
        if self.amount < 0:
            raise TxError("negative amount")


@dataclass(frozen=True)
class Transaction:
    version: int
    inputs: Tuple[TxInput, ...]
    outputs: Tuple[TxOutput, ...]
    witnesses: Tuple[Tuple[bytes, ...], ...] = ()
    locktime: int = 0

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        wits = tuple(tuple(w) for w in self.witnesses)
        if len(wits) < len(self.inputs):
            wits = wits + ((),) * (len(self.inputs) - len(wits))
        object.__setattr__(self, "witnesses", wits)

    def with_witness(self, index: int, stack: Sequence[bytes]) -> "Transaction":
        wits = list(self.witnesses)
        wits[index] = tuple(stack)
        return replace(self, witnesses=tuple(wits))

    def strip_witnesses(self) -> "Transaction":
        return replace(self, witnesses=())

    def annex(self, index: int) -> Optional[bytes]:
        w = self.witnesses[index] if index < len(self.witnesses) else ()
        if len(w) >= 2 and w[-1][:1] == bytes([ANNEX_TAG]):
            return w[-1]
        return None

    @property
    def txid(self) -> bytes:
        return txid(self)

    @property
    def size(self) -> int:
        return len(serialize(self))

    def output_total(self) -> int:
        return sum(o.amount for o in self.outputs)


# canonical serialization


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _u64(n: int) -> bytes:
    return struct.pack("<Q", n)


def _blob(b: bytes) -> bytes:
    return _u32(len(b)) + b


def serialize_input(txin: TxInput) -> bytes:
    return txin.prev_txid + _u32(txin.prev_index) + _u32(txin.sequence)


def serialize_output(out: TxOutput) -> bytes:
    return _u64(out.amount) + _blob(out.script)


def serialize(tx: Transaction, with_witness: bool = True) -> bytes:
    parts = [_u32(tx.version), _u32(len(tx.inputs))]
    parts += [serialize_input(i) for i in tx.inputs]
    parts.append(_u32(len(tx.outputs)))
    parts += [serialize_output(o) for o in tx.outputs]
    has_wit = with_witness and any(tx.witnesses)
    parts.append(b"\x01" if has_wit else b"\x00")
    if has_wit:
        for stack in tx.witnesses:
            parts.append(_u32(len(stack)))
            parts += [_blob(e) for e in stack]
    parts.append(_u32(tx.locktime))
    return b"".join(parts)


def parse(data: bytes) -> Transaction:
    r = io.BytesIO(data)

    def take(n: int) -> bytes:
        b = r.read(n)
        if len(b) != n:
            raise ParseError("truncated transaction")
        return b

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    version = u32()
    inputs = []
    for _ in range(u32()):
        inputs.append(TxInput(take(32), u32(), u32()))
    outputs = []
    for _ in range(u32()):
        amount = struct.unpack("<Q", take(8))[0]
        outputs.append(TxOutput(amount, take(u32())))
    flag = take(1)
    witnesses = []
    if flag == b"\x01":
        for _ in inputs:
            witnesses.append(tuple(take(u32()) for _ in range(u32())))
    elif flag != b"\x00":
        raise ParseError("bad witness flag")
    locktime = u32()
    if r.read(1):
        raise ParseError("trailing bytes")
    return Transaction(version, inputs, outputs, witnesses, locktime)


def txid(tx: Transaction) -> bytes:
    return hashlib.sha256(hashlib.sha256(serialize(tx, with_witness=False)).digest()).digest()


def to_json(tx: Transaction) -> dict:
    return {
        "version": tx.version,
        "inputs": [
            {"prev_txid": i.prev_txid.hex(), "prev_index": i.prev_index, "sequence": i.sequence}
            for i in tx.inputs
        ],
        "outputs": [{"amount": o.amount, "script_hex": o.script.hex()} for o in tx.outputs],
        "witnesses": [[e.hex() for e in w] for w in tx.witnesses],
        "locktime": tx.locktime,
    }


def from_json(obj) -> Transaction:
    if isinstance(obj, str):
        obj = json.loads(obj)
    try:
        return Transaction(
            version=int(obj["version"]),
            inputs=[TxInput(bytes.fromhex(i["prev_txid"]), int(i["prev_index"]), int(i["sequence"]))
                    for i in obj["inputs"]],
            outputs=[TxOutput(int(o["amount"]), bytes.fromhex(o["script_hex"])) for o in obj["outputs"]],
            witnesses=[[bytes.fromhex(e) for e in w] for w in obj.get("witnesses", [])],
            locktime=int(obj.get("locktime", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(str(exc)) from exc


# sequences and relative locks


def signals_rbf(sequence: int) -> bool:
    return sequence < SEQUENCE_RBF_LIMIT


def encode_relative_lock(blocks: int) -> int:
    if not 0 <= blocks <= LOCK_MASK:
        raise TxError("relative lock out of range")
    return blocks


def decode_relative_lock(tx_version: int, sequence: int) -> Optional[int]:
    """Block count encoded by ``sequence``; None when no relative lock applies."""
    if tx_version < 2 or sequence >= SEQUENCE_RBF_LIMIT or sequence & LOCK_DISABLE_FLAG:
        return None
    if sequence & LOCK_TYPE_FLAG:
        return None  # time-based locks are not modeled
    return sequence & LOCK_MASK


# sighash


class Base(str, enum.Enum):
    ALL = "ALL"
    NONE = "NONE"
    SINGLE = "SINGLE"


_BASE_BYTE = {Base.ALL: 1, Base.NONE: 2, Base.SINGLE: 3}


@dataclass(frozen=True)
class SighashFlag:
    base: Base = Base.ALL
    anyonecanpay: bool = False

    def to_byte(self) -> int:
        return _BASE_BYTE[self.base] | (0x80 if self.anyonecanpay else 0)

    @classmethod
    def from_byte(cls, b: int) -> "SighashFlag":
        for base, v in _BASE_BYTE.items():
            if b & 0x7F == v and 0 <= b <= 0xFF:
                return cls(base, bool(b & 0x80))
        raise TxError(f"unknown sighash byte {b:#x}")

    @classmethod
    def parse(cls, text: str) -> "SighashFlag":
        t = text.upper().replace("||", "|").replace(" ", "")
        a1cp = t.startswith("A1CP|") or t.startswith("ANYONECANPAY|")
        return cls(Base(t.split("|")[-1]), a1cp)

    def __str__(self) -> str:
        return ("A1CP|" if self.anyonecanpay else "") + self.base.value


ALL = SighashFlag(Base.ALL)
SINGLE = SighashFlag(Base.SINGLE)
NONE = SighashFlag(Base.NONE)
A1CP_ALL = SighashFlag(Base.ALL, True)
A1CP_SINGLE = SighashFlag(Base.SINGLE, True)
A1CP_NONE = SighashFlag(Base.NONE, True)
FLAGS: Tuple[SighashFlag, ...] = (ALL, SINGLE, NONE, A1CP_ALL, A1CP_SINGLE, A1CP_NONE)


class Semantics(str, enum.Enum):
    LEGACY = "legacy"
    SEGWIT_V0 = "segwit_v0"
    TAPROOT = "taproot"
    APOAS = "apoas"


def _sha(*parts: bytes) -> bytes:
    return hashlib.sha256(b"".join(parts)).digest()


def _outpoint(txin: TxInput) -> bytes:
    return txin.prev_txid + _u32(txin.prev_index)


def _check_single(tx: Transaction, index: int, flag: SighashFlag) -> None:
    if flag.base is Base.SINGLE and index >= len(tx.outputs):
        raise NoCorrespondingOutput(f"no output at index {index}")


def _legacy_msg(tx, index, flag, prevouts) -> bytes:
    cur = tx.inputs[index]
    parts = [b"legacy", _u32(tx.version)]
    if not flag.anyonecanpay:
        parts += [_u32(len(tx.inputs)), _u32(index)]
        for j, other in enumerate(tx.inputs):
            if j == index:
                continue
            parts += [_u32(j), _outpoint(other), _blob(prevouts[j].script)]
            # committed under ALL only; the printed table inverts this row
            if flag.base is Base.ALL:
                parts.append(_u32(other.sequence))
    parts += [_outpoint(cur), _blob(prevouts[index].script), _u32(cur.sequence)]
    if not (flag.anyonecanpay and flag.base is not Base.ALL):
        parts.append(_u32(len(tx.outputs)))
    if flag.base is Base.ALL:
        parts += [serialize_output(o) for o in tx.outputs]
    elif flag.base is Base.SINGLE:
        parts.append(serialize_output(tx.outputs[index]))
    parts.append(_u32(tx.locktime))
    return b"".join(parts)


def _segwit_msg(tx, index, flag, prevouts) -> bytes:
    cur = tx.inputs[index]
    zero = b"\x00" * 32
    hash_prevouts = zero if flag.anyonecanpay else _sha(*(_outpoint(i) for i in tx.inputs))
    commit_seq = flag.base is Base.ALL and not flag.anyonecanpay
    hash_sequence = _sha(*(_u32(i.sequence) for i in tx.inputs)) if commit_seq else zero
    if flag.base is Base.ALL:
        hash_outputs = _sha(*(serialize_output(o) for o in tx.outputs))
    elif flag.base is Base.SINGLE:
        hash_outputs = _sha(serialize_output(tx.outputs[index]))
    else:
        hash_outputs = zero
    parts = [b"segwit_v0", _u32(tx.version), hash_prevouts, hash_sequence,
             _u32(0xFFFFFFFF if flag.anyonecanpay else index),
             _outpoint(cur), _blob(prevouts[index].script), _u64(prevouts[index].amount),
             _u32(cur.sequence), hash_outputs, _u32(tx.locktime)]
    return b"".join(parts)


def _taproot_msg(tx, index, flag, prevouts, apoas: bool) -> bytes:
    cur = tx.inputs[index]
    annex = tx.annex(index)
    parts = [b"apoas" if apoas else b"taproot", _u32(tx.version), _u32(tx.locktime)]
    if not flag.anyonecanpay:
        if not apoas:
            parts.append(_sha(*(_outpoint(i) for i in tx.inputs)))
            parts.append(_sha(*(_u64(p.amount) for p in prevouts)))
            parts.append(_sha(*(_blob(p.script) for p in prevouts)))
        parts.append(_sha(*(_u32(i.sequence) for i in tx.inputs)))
    if flag.base is Base.ALL:
        parts.append(_sha(*(serialize_output(o) for o in tx.outputs)))
    parts.append(bytes([2 | (1 if annex is not None else 0)]))  # spend type: script path
    if flag.anyonecanpay:
        if not apoas:
            parts.append(_outpoint(cur))
        parts += [_u64(prevouts[index].amount), _blob(prevouts[index].script), _u32(cur.sequence)]
    else:
        if apoas:
            parts += [_u64(prevouts[index].amount), _blob(prevouts[index].script)]
        parts += [_u32(cur.sequence), _u32(index)]
    if annex is not None:
        parts.append(_sha(_blob(annex)))
    if flag.base is Base.SINGLE:
        parts.append(_sha(serialize_output(tx.outputs[index])))
    return b"".join(parts)


def sighash_msg(tx: Transaction, input_index: int, semantics, flag: SighashFlag,
                prevouts: Sequence[TxOutput]) -> bytes:
    """32-byte digest a signature on input ``input_index`` commits to."""
    semantics = Semantics(semantics)
    if not 0 <= input_index < len(tx.inputs):
        raise TxError("input index out of range")
    if len(prevouts) != len(tx.inputs):
        raise TxError("prevout view must cover every input")
    _check_single(tx, input_index, flag)
    if semantics is Semantics.LEGACY:
        body = _legacy_msg(tx, input_index, flag, prevouts)
    elif semantics is Semantics.SEGWIT_V0:
        body = _segwit_msg(tx, input_index, flag, prevouts)
    else:
        body = _taproot_msg(tx, input_index, flag, prevouts, semantics is Semantics.APOAS)
    return crypto.tagged_hash("covault/sighash", body + bytes([flag.to_byte()]))


def sign_input(tx: Transaction, input_index: int, priv: int, semantics, flag: SighashFlag,
               prevouts: Sequence[TxOutput]) -> bytes:
    semantics = Semantics(semantics)
    msg = sighash_msg(tx, input_index, semantics, flag, prevouts)
    marker = APOAS_MARKER if semantics is Semantics.APOAS else 0
    return crypto.sign(priv, msg) + bytes([flag.to_byte() | marker])


def verify_input(tx: Transaction, input_index: int, pub: crypto.GroupPoint, sig: bytes,
                 semantics, prevouts: Sequence[TxOutput]) -> bool:
    semantics = Semantics(semantics)
    if len(sig) != 65:
        return False
    if bool(sig[64] & APOAS_MARKER) != (semantics is Semantics.APOAS):
        return False
    try:
        flag = SighashFlag.from_byte(sig[64] & ~APOAS_MARKER)
        msg = sighash_msg(tx, input_index, semantics, flag, prevouts)
    except TxError:
        return False
    return crypto.verify(pub, msg, sig[:64])


def verify_tapscript_sig(tx: Transaction, input_index: int, pub: crypto.GroupPoint, sig: bytes,
                         prevouts: Sequence[TxOutput]) -> bool:
    """Signature check inside a tapscript: taproot, or APOAS when marked."""
    if len(sig) != 65:
        return False
    semantics = Semantics.APOAS if sig[64] & APOAS_MARKER else Semantics.TAPROOT
    return verify_input(tx, input_index, pub, sig, semantics, prevouts)


def sig_flag(sig: bytes) -> SighashFlag:
    return SighashFlag.from_byte(sig[64] & ~APOAS_MARKER)


# mutability matrix

FIELDS: Tuple[str, ...] = (
    "version", "locktime", "input_count", "current_outpoint", "current_sequence",
    "current_index", "current_prevout_amount", "current_prevout_script",
    "other_outpoints", "other_sequences", "other_prevout_amounts", "other_prevout_scripts",
    "output_count", "current_output", "other_outputs", "annex", "witnesses",
)

_Y6 = (True,) * 6
_N6 = (False,) * 6
_NON_A1CP = (True, True, True, False, False, False)
_ALL_ONLY = (True, False, False, False, False, False)
_WITH_CUR_OUT = (True, True, False, True, True, False)
_ALL_OUTPUTS = (True, False, False, True, False, False)

# committed? per field, columns in FLAGS order
_COMMITS: Dict[Semantics, Dict[str, Tuple[bool, ...]]] = {
    Semantics.LEGACY: {
        "version": _Y6, "locktime": _Y6, "input_count": _NON_A1CP,
        "current_outpoint": _Y6, "current_sequence": _Y6, "current_index": _NON_A1CP,
        "current_prevout_amount": _N6, "current_prevout_script": _Y6,
        "other_outpoints": _NON_A1CP, "other_sequences": _ALL_ONLY,
        "other_prevout_amounts": _N6, "other_prevout_scripts": _NON_A1CP,
        "output_count": (True, True, True, True, False, False),
        "current_output": _WITH_CUR_OUT, "other_outputs": _ALL_OUTPUTS,
        "annex": _N6, "witnesses": _N6,
    },
    Semantics.SEGWIT_V0: {
        "version": _Y6, "locktime": _Y6, "input_count": _NON_A1CP,
        "current_outpoint": _Y6, "current_sequence": _Y6, "current_index": _NON_A1CP,
        "current_prevout_amount": _Y6, "current_prevout_script": _Y6,
        "other_outpoints": _NON_A1CP, "other_sequences": _ALL_ONLY,
        "other_prevout_amounts": _N6, "other_prevout_scripts": _N6,
        "output_count": _ALL_OUTPUTS,
        "current_output": _WITH_CUR_OUT, "other_outputs": _ALL_OUTPUTS,
        "annex": _N6, "witnesses": _N6,
    },
    Semantics.TAPROOT: {
        "version": _Y6, "locktime": _Y6, "input_count": _NON_A1CP,
        "current_outpoint": _Y6, "current_sequence": _Y6, "current_index": _NON_A1CP,
        "current_prevout_amount": _Y6, "current_prevout_script": _Y6,
        "other_outpoints": _NON_A1CP, "other_sequences": _NON_A1CP,
        "other_prevout_amounts": _NON_A1CP, "other_prevout_scripts": _NON_A1CP,
        "output_count": _ALL_OUTPUTS,
        "current_output": _WITH_CUR_OUT, "other_outputs": _ALL_OUTPUTS,
        "annex": _Y6, "witnesses": _N6,
    },
}
_COMMITS[Semantics.APOAS] = dict(
    _COMMITS[Semantics.TAPROOT],
    current_outpoint=_N6, other_outpoints=_N6,
    other_prevout_amounts=_N6, other_prevout_scripts=_N6,
)


def committed(semantics, flag: SighashFlag, field_name: str) -> bool:
    return _COMMITS[Semantics(semantics)][field_name][FLAGS.index(flag)]


def mutation_matrix(semantics, flag: SighashFlag) -> Dict[str, bool]:
    """field -> True when every signature of (semantics, flag) ignores it."""
    return {f: not committed(semantics, flag, f) for f in FIELDS}


# covenant template hash (CTV-style)


def ctv_template_hash(tx: Transaction, input_index: int) -> bytes:
    """Default template: everything but prevout references and witnesses."""
    body = b"".join([
        _u32(tx.version), _u32(tx.locktime), _u32(len(tx.inputs)),
        _sha(*(_u32(i.sequence) for i in tx.inputs)),
        _u32(len(tx.outputs)), _sha(*(serialize_output(o) for o in tx.outputs)),
        _u32(input_index),
    ])
    return crypto.tagged_hash("covault/ctv", body)
