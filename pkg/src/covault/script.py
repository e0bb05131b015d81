"""Miniscript-like policies, their compilation to a small tapscript-style
instruction set, a canonical satisfier and an interpreter.

Witness stacks are listed bottom to top; the last element is consumed
first.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from . import crypto, txmodel
from .crypto import GroupPoint

STACK_LIMIT = 1000
MAX_BRUTE_KEYS = 16


class ScriptError(Exception):
    pass


class UnknownKey(ScriptError):
    pass


class MalformedPolicy(ScriptError):
    pass


class Unsatisfiable(ScriptError):
    pass


class TooLarge(ScriptError):
    pass


# policy AST


@dataclass(frozen=True)
class Pk:
    name: str

    def __str__(self):
        return f"pk({self.name})"


@dataclass(frozen=True)
class Older:
    blocks: int

    def __post_init__(self):
        if self.blocks < 1:
            raise MalformedPolicy("older() needs at least one block")

    def __str__(self):
        return f"older({self.blocks})"


@dataclass(frozen=True)
class And:
    left: "Policy"
    right: "Policy"

    def __str__(self):
        return f"and({self.left},{self.right})"


@dataclass(frozen=True)
class Or:
    left: "Policy"
    right: "Policy"
    weights: Optional[Tuple[int, int]] = None

    def __str__(self):
        if self.weights:
            return f"or({self.weights[0]}@{self.left},{self.weights[1]}@{self.right})"
        return f"or({self.left},{self.right})"


@dataclass(frozen=True)
class Thresh:
    k: int
    children: Tuple["Policy", ...]

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if not 1 <= self.k <= len(self.children):
            raise MalformedPolicy(f"thresh k={self.k} with {len(self.children)} children")

    def __str__(self):
        return f"thresh({self.k},{','.join(map(str, self.children))})"


Policy = Union[Pk, Older, And, Or, Thresh]


def thresh(k: int, *children) -> Thresh:
    return Thresh(k, tuple(Pk(c) if isinstance(c, str) else c for c in children))


def pk(name: str) -> Pk:
    return Pk(name)


def and_(left, right) -> And:
    return And(Pk(left) if isinstance(left, str) else left, Pk(right) if isinstance(right, str) else right)


def or_(left, right) -> Or:
    return Or(Pk(left) if isinstance(left, str) else left, Pk(right) if isinstance(right, str) else right)


def keys_of(policy: Policy) -> List[str]:
    """Key names in first-appearance order."""
    out: List[str] = []

    def walk(p):
        if isinstance(p, Pk):
            if p.name not in out:
                out.append(p.name)
        elif isinstance(p, (And, Or)):
            walk(p.left)
            walk(p.right)
        elif isinstance(p, Thresh):
            for c in p.children:
                walk(c)

    walk(policy)
    return out


def locks_of(policy: Policy) -> List[int]:
    out = set()

    def walk(p):
        if isinstance(p, Older):
            out.add(p.blocks)
        elif isinstance(p, (And, Or)):
            walk(p.left)
            walk(p.right)
        elif isinstance(p, Thresh):
            for c in p.children:
                walk(c)

    walk(policy)
    return sorted(out)


def evaluate(policy: Policy, signers: Iterable[str], age: int) -> bool:
    """Direct predicate: does this signer set at this age satisfy the policy?"""
    signers = set(signers)

    def ev(p) -> bool:
        if isinstance(p, Pk):
            return p.name in signers
        if isinstance(p, Older):
            return age >= p.blocks
        if isinstance(p, And):
            return ev(p.left) and ev(p.right)
        if isinstance(p, Or):
            return ev(p.left) or ev(p.right)
        return sum(ev(c) for c in p.children) >= p.k

    return ev(policy)


# text syntax

_TOKEN = re.compile(r"\s*(?:(\d+)@)?\s*([A-Za-z_][A-Za-z0-9_]*|\d+)\s*")


def parse_policy(text: str) -> Policy:
    """Parse e.g. ``thresh(2,pk(R1),pk(R2),pk(R3))`` or ``or(9@pk(A),pk(B))``."""
    pos = 0

    def expect(ch):
        nonlocal pos
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if text[pos:pos + 1] != ch:
            raise MalformedPolicy(f"expected {ch!r} at {pos} in {text!r}")
        pos += 1

    def peek():
        p = pos
        while p < len(text) and text[p].isspace():
            p += 1
        return text[p:p + 1]

    def word():
        nonlocal pos
        m = _TOKEN.match(text, pos)
        if not m:
            raise MalformedPolicy(f"unexpected input at {pos} in {text!r}")
        pos = m.end()
        return (int(m.group(1)) if m.group(1) else None), m.group(2)

    def node():
        weight, name = word()
        if peek() != "(":
            raise MalformedPolicy(f"bare token {name!r}")
        expect("(")
        args = []
        if name == "pk":
            _, key = word()
            args = [key]
        elif name == "older":
            _, n = word()
            args = [int(n)]
        elif name == "thresh":
            _, k = word()
            args.append(int(k))
            while peek() == ",":
                expect(",")
                args.append(node())
        else:
            args.append(node())
            while peek() == ",":
                expect(",")
                args.append(node())
        expect(")")
        if name == "pk":
            pol = Pk(args[0])
        elif name == "older":
            pol = Older(args[0])
        elif name == "and":
            if len(args) != 2:
                raise MalformedPolicy("and() takes two arguments")
            pol = And(args[0][1], args[1][1])
        elif name == "or":
            if len(args) != 2:
                raise MalformedPolicy("or() takes two arguments")
            w = (args[0][0] or 1, args[1][0] or 1) if (args[0][0] or args[1][0]) else None
            pol = Or(args[0][1], args[1][1], w)
        elif name == "thresh":
            pol = Thresh(args[0], tuple(a[1] for a in args[1:]))
        else:
            raise MalformedPolicy(f"unknown fragment {name!r}")
        return weight, pol

    _, pol = node()
    if text[pos:].strip():
        raise MalformedPolicy(f"trailing input in {text!r}")
    return pol


# instructions

OPS = (
    "PUSH", "CHECKSIG", "CHECKSIGVERIFY", "CHECKSIGADD", "NUMEQUAL", "NUMEQUALVERIFY",
    "CHECKSEQUENCEVERIFY", "DROP", "VERIFY", "ADD", "IF", "ELSE", "ENDIF",
    "TOALTSTACK", "FROMALTSTACK", "CTV_VERIFY", "INSPECT",
)
_OPCODE = {name: 0xB0 + i for i, name in enumerate(OPS)}
_OPNAME = {v: k for k, v in _OPCODE.items()}

INSPECT_FIELDS = (
    "output_count", "output_amount", "output_script", "input_count", "input_script",
    "input_sum", "output_sum", "all_input_scripts",
)
_CMPS = ("==", ">=", "<=")


@dataclass(frozen=True)
class Instr:
    op: str
    arg: object = None

    def __str__(self):
        if self.op == "PUSH":
            a = self.arg
            return a.hex()[:8] if isinstance(a, GroupPoint) else str(a) if isinstance(a, int) else a.hex()
        if self.arg is None:
            return self.op
        return f"{self.op}({self.arg})"


def _enc_push(arg) -> bytes:
    if isinstance(arg, GroupPoint):
        return b"K" + arg.data
    if isinstance(arg, int):
        b = arg.to_bytes(8, "little", signed=True)
        return b"N" + b
    return b"B" + len(arg).to_bytes(4, "little") + bytes(arg)


@dataclass(frozen=True)
class ScriptProgram:
    ops: Tuple[Instr, ...]

    def to_bytes(self) -> bytes:
        out = bytearray()
        for ins in self.ops:
            out.append(_OPCODE[ins.op])
            if ins.op == "PUSH":
                out += _enc_push(ins.arg)
            elif ins.op == "CTV_VERIFY":
                out += ins.arg
            elif ins.op == "INSPECT":
                fld, idx, cmp, target = ins.arg
                out.append(INSPECT_FIELDS.index(fld))
                out += (idx if idx is not None else 0xFFFFFFFF).to_bytes(4, "little")
                out.append(_CMPS.index(cmp))
                out += _enc_push(target)
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ScriptProgram":
        ops: List[Instr] = []
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(data):
                raise ScriptError("truncated script")
            chunk = data[pos:pos + n]
            pos += n
            return chunk

        def push_arg():
            tag = take(1)
            if tag == b"K":
                return GroupPoint(take(33))
            if tag == b"N":
                return int.from_bytes(take(8), "little", signed=True)
            if tag == b"B":
                return take(int.from_bytes(take(4), "little"))
            raise ScriptError("bad push tag")

        while pos < len(data):
            code = take(1)[0]
            if code not in _OPNAME:
                raise ScriptError(f"unknown opcode {code:#x}")
            op = _OPNAME[code]
            if op == "PUSH":
                ops.append(Instr(op, push_arg()))
            elif op == "CTV_VERIFY":
                ops.append(Instr(op, take(32)))
            elif op == "INSPECT":
                fld = INSPECT_FIELDS[take(1)[0]]
                idx = int.from_bytes(take(4), "little")
                cmp = _CMPS[take(1)[0]]
                ops.append(Instr(op, (fld, None if idx == 0xFFFFFFFF else idx, cmp, push_arg())))
            else:
                ops.append(Instr(op))
        return cls(tuple(ops))

    def __len__(self):
        return len(self.ops)

    def __str__(self):
        return " ".join(map(str, self.ops))

    def keys(self) -> List[GroupPoint]:
        return [i.arg for i in self.ops if i.op == "PUSH" and isinstance(i.arg, GroupPoint)]

    def render(self, names: Mapping[GroupPoint, str]) -> str:
        """Human form with key names, e.g. ``A CHECKSIGVERIFY B CHECKSIG``."""
        out = []
        for ins in self.ops:
            if ins.op == "PUSH" and isinstance(ins.arg, GroupPoint):
                out.append(names.get(ins.arg, ins.arg.hex()[:8]))
            else:
                out.append(str(ins))
        return " ".join(out)


# compiler


def _all_pk(children) -> bool:
    return all(isinstance(c, Pk) for c in children)


def compile(policy: Policy, key_map: Mapping[str, GroupPoint]) -> ScriptProgram:
    """Compile a policy; k-of-k thresholds become CHECKSIGVERIFY chains."""

    def key(name):
        if name not in key_map:
            raise UnknownKey(name)
        return key_map[name]

    def as_chain(p) -> Optional[List[Policy]]:
        if isinstance(p, Thresh) and p.k == len(p.children):
            return list(p.children)
        return None

    def b(p) -> List[Instr]:
        if isinstance(p, Pk):
            return [Instr("PUSH", key(p.name)), Instr("CHECKSIG")]
        if isinstance(p, Older):
            return [Instr("PUSH", p.blocks), Instr("CHECKSEQUENCEVERIFY")]
        if isinstance(p, And):
            return v(p.left) + b(p.right)
        if isinstance(p, Or):
            return [Instr("IF")] + b(p.left) + [Instr("ELSE")] + b(p.right) + [Instr("ENDIF")]
        chain = as_chain(p)
        if chain is not None:
            out = []
            for c in chain[:-1]:
                out += v(c)
            return out + b(chain[-1])
        return thresh_body(p) + [Instr("PUSH", p.k), Instr("NUMEQUAL")]

    def v(p) -> List[Instr]:
        if isinstance(p, Pk):
            return [Instr("PUSH", key(p.name)), Instr("CHECKSIGVERIFY")]
        if isinstance(p, Older):
            return [Instr("PUSH", p.blocks), Instr("CHECKSEQUENCEVERIFY"), Instr("DROP")]
        if isinstance(p, And):
            return v(p.left) + v(p.right)
        if isinstance(p, Or):
            return [Instr("IF")] + v(p.left) + [Instr("ELSE")] + v(p.right) + [Instr("ENDIF")]
        chain = as_chain(p)
        if chain is not None:
            out = []
            for c in chain:
                out += v(c)
            return out
        return thresh_body(p) + [Instr("PUSH", p.k), Instr("NUMEQUALVERIFY")]

    def wrapped(c) -> List[Instr]:
        # unit result: exactly 1 on success, 0 when skipped
        return [Instr("IF")] + v(c) + [Instr("PUSH", 1), Instr("ELSE"), Instr("PUSH", 0), Instr("ENDIF")]

    def thresh_body(p: Thresh) -> List[Instr]:
        out: List[Instr] = []
        for i, c in enumerate(p.children):
            if i == 0:
                out += b(c) if isinstance(c, Pk) else wrapped(c)
            elif isinstance(c, Pk):
                out += [Instr("PUSH", key(c.name)), Instr("CHECKSIGADD")]
            else:
                out += [Instr("TOALTSTACK")] + wrapped(c) + [Instr("FROMALTSTACK"), Instr("ADD")]
        return out

    return ScriptProgram(tuple(b(policy)))


# execution context


@dataclass
class SatisfactionContext:
    """Execution environment for one input.

    ``signer`` maps a key name to a signature (or None if that key cannot
    sign); ``check_sig`` validates a witness signature against a key.
    """

    signer: Callable[[str], Optional[bytes]] = lambda name: None
    check_sig: Callable[[GroupPoint, bytes], bool] = lambda pub, sig: False
    age: int = 0
    tx: Optional[txmodel.Transaction] = None
    input_index: int = 0
    prevouts: Optional[Sequence[txmodel.TxOutput]] = None
    ctv_enabled: bool = False
    inspect_enabled: bool = False

    def __post_init__(self):
        if self.age < 0:
            raise ValueError("confirmed age must be non-negative")


def digest_context(keys: Mapping[str, int], signers: Iterable[str], age: int = 0,
                   msg: bytes = b"\x11" * 32) -> SatisfactionContext:
    """Context signing a fixed digest; used for policy-level checks."""
    allowed = set(signers)
    cache: Dict[str, bytes] = {}

    def signer(name):
        if name not in allowed or name not in keys:
            return None
        if name not in cache:
            cache[name] = crypto.sign(keys[name], msg)
        return cache[name]

    return SatisfactionContext(signer=signer, check_sig=lambda pub, sig: crypto.verify(pub, msg, sig), age=age)


@dataclass(frozen=True)
class Witness:
    stack: Tuple[bytes, ...]

    def __iter__(self):
        return iter(self.stack)

    def __len__(self):
        return len(self.stack)


@dataclass(frozen=True)
class Accept:
    ok: bool = True
    reason: str = ""

    def __bool__(self):
        return True


@dataclass(frozen=True)
class Reject:
    reason: str
    ok: bool = False

    def __bool__(self):
        return False


def _num(x) -> int:
    if isinstance(x, int):
        return x
    if len(x) > 8:
        raise ScriptError("number too large")
    return int.from_bytes(x, "little") if x else 0


def _truthy(x) -> bool:
    if isinstance(x, int):
        return x != 0
    return any(x)


def _inspect_value(fld, idx, ctx: SatisfactionContext):
    tx = ctx.tx
    if fld == "output_count":
        return len(tx.outputs)
    if fld == "output_amount":
        return tx.outputs[idx].amount
    if fld == "output_script":
        return tx.outputs[idx].script
    if fld == "input_count":
        return len(tx.inputs)
    if fld == "output_sum":
        return sum(o.amount for o in tx.outputs)
    if ctx.prevouts is None:
        raise IndexError("no prevout view")
    if fld == "input_script":
        return ctx.prevouts[idx].script
    if fld == "input_sum":
        return sum(p.amount for p in ctx.prevouts)
    if fld == "all_input_scripts":
        return tuple(p.script for p in ctx.prevouts)
    raise ScriptError(f"unknown inspect field {fld}")


def _compare(value, cmp, target) -> bool:
    if isinstance(value, tuple):
        return cmp == "==" and all(v == target for v in value)
    if cmp == "==":
        return value == target
    if cmp == ">=":
        return value >= target
    return value <= target


def execute(program: ScriptProgram, witness, ctx: SatisfactionContext):
    """Run ``program`` on an initial stack; return Accept or Reject(reason)."""
    stack: List = list(witness)
    alt: List = []
    cond: List[bool] = []
    if len(stack) > STACK_LIMIT:
        return Reject("StackOverflow")

    def pop():
        if not stack:
            raise IndexError("StackUnderflow")
        return stack.pop()

    try:
        for ins in program.ops:
            op = ins.op
            executing = all(cond)
            if op == "IF":
                if executing:
                    top = pop()
                    if isinstance(top, int):
                        top = b"\x01" if top == 1 else b"" if top == 0 else b"\x02"
                    if top not in (b"", b"\x01"):
                        return Reject("MinimalIf")
                    cond.append(top == b"\x01")
                else:
                    cond.append(False)
                continue
            if op == "ELSE":
                if not cond:
                    return Reject("UnbalancedConditional")
                if all(cond[:-1]):
                    cond[-1] = not cond[-1]
                continue
            if op == "ENDIF":
                if not cond:
                    return Reject("UnbalancedConditional")
                cond.pop()
                continue
            if not executing:
                continue
            if op == "PUSH":
                a = ins.arg
                stack.append(a.data if isinstance(a, GroupPoint) else a)
            elif op in ("CHECKSIG", "CHECKSIGVERIFY", "CHECKSIGADD"):
                pub = GroupPoint(pop())
                n = _num(pop()) if op == "CHECKSIGADD" else None
                sig = pop()
                if isinstance(sig, int):
                    return Reject("BadSignature")
                if len(sig) == 0:
                    ok = False
                elif ctx.check_sig(pub, sig):
                    ok = True
                else:
                    return Reject("BadSignature")
                if op == "CHECKSIG":
                    stack.append(1 if ok else 0)
                elif op == "CHECKSIGADD":
                    stack.append(n + (1 if ok else 0))
                elif not ok:
                    return Reject("VerifyFailed")
            elif op in ("NUMEQUAL", "NUMEQUALVERIFY"):
                a, b = _num(pop()), _num(pop())
                if op == "NUMEQUAL":
                    stack.append(1 if a == b else 0)
                elif a != b:
                    return Reject("VerifyFailed")
            elif op == "ADD":
                stack.append(_num(pop()) + _num(pop()))
            elif op == "CHECKSEQUENCEVERIFY":
                if not stack:
                    raise IndexError("StackUnderflow")
                need = _num(stack[-1])
                if ctx.age < need:
                    return Reject("PrematureLock")
            elif op == "DROP":
                pop()
            elif op == "VERIFY":
                if not _truthy(pop()):
                    return Reject("VerifyFailed")
            elif op == "TOALTSTACK":
                alt.append(pop())
            elif op == "FROMALTSTACK":
                if not alt:
                    raise IndexError("StackUnderflow")
                stack.append(alt.pop())
            elif op == "CTV_VERIFY":
                if not ctx.ctv_enabled:
                    return Reject("DisabledOpcode")
                if ctx.tx is None:
                    return Reject("NoTransaction")
                if txmodel.ctv_template_hash(ctx.tx, ctx.input_index) != ins.arg:
                    return Reject("TemplateMismatch")
            elif op == "INSPECT":
                if not ctx.inspect_enabled:
                    return Reject("DisabledOpcode")
                if ctx.tx is None:
                    return Reject("NoTransaction")
                fld, idx, cmp, target = ins.arg
                try:
                    value = _inspect_value(fld, idx, ctx)
                except IndexError:
                    return Reject("IndexOutOfRange")
                if not _compare(value, cmp, target):
                    return Reject("InspectFailed")
            else:
                return Reject("UnknownInstruction")
            if len(stack) + len(alt) > STACK_LIMIT:
                return Reject("StackOverflow")
    except IndexError:
        return Reject("StackUnderflow")
    except ScriptError:
        return Reject("BadNumber")
    if cond:
        return Reject("UnbalancedConditional")
    if len(stack) != 1:
        return Reject("CleanStack")
    if not _truthy(stack[0]):
        return Reject("FalseResult")
    return Accept()


# satisfier


def satisfy(policy: Policy, ctx: SatisfactionContext) -> Witness:
    """Canonical witness; thresholds use the lowest-index satisfiable children."""
    sigs: Dict[str, Optional[bytes]] = {}

    def sig(name):
        if name not in sigs:
            sigs[name] = ctx.signer(name)
        return sigs[name]

    def can(p) -> bool:
        if isinstance(p, Pk):
            return sig(p.name) is not None
        if isinstance(p, Older):
            return ctx.age >= p.blocks
        if isinstance(p, And):
            return can(p.left) and can(p.right)
        if isinstance(p, Or):
            return can(p.left) or can(p.right)
        return sum(can(c) for c in p.children) >= p.k

    def sat(p) -> List[bytes]:
        # consumption order: first element is consumed first
        if isinstance(p, Pk):
            s = sig(p.name)
            if s is None:
                raise Unsatisfiable(f"no signature for {p.name}")
            return [s]
        if isinstance(p, Older):
            if ctx.age < p.blocks:
                raise Unsatisfiable(f"older({p.blocks}) not expired at age {ctx.age}")
            return []
        if isinstance(p, And):
            return sat(p.left) + sat(p.right)
        if isinstance(p, Or):
            if can(p.left):
                return [b"\x01"] + sat(p.left)
            return [b""] + sat(p.right)
        if p.k == len(p.children):
            out = []
            for c in p.children:
                out += sat(c)
            return out
        chosen = []
        for i, c in enumerate(p.children):
            if len(chosen) < p.k and can(c):
                chosen.append(i)
        if len(chosen) < p.k:
            raise Unsatisfiable(f"thresh({p.k}) has only {len(chosen)} satisfiable children")
        out = []
        for i, c in enumerate(p.children):
            if isinstance(c, Pk):
                out.append(sig(c.name) if i in chosen else b"")
            elif i in chosen:
                out += [b"\x01"] + sat(c)
            else:
                out.append(b"")
        return out

    return Witness(tuple(reversed(sat(policy))))


def verify_tree_equivalence(leaf_policies: Sequence[Policy], top_policy: Policy) -> bool:
    """Brute force: OR over leaves equals the top policy for every signer
    subset and every relevant lock state."""
    names = []
    for p in list(leaf_policies) + [top_policy]:
        for k in keys_of(p):
            if k not in names:
                names.append(k)
    if len(names) > MAX_BRUTE_KEYS:
        raise TooLarge(f"{len(names)} keys")
    locks = set()
    for p in list(leaf_policies) + [top_policy]:
        locks.update(locks_of(p))
    ages = sorted({0} | locks | {l - 1 for l in locks if l > 0})
    for mask in range(1 << len(names)):
        signers = {n for i, n in enumerate(names) if mask >> i & 1}
        for age in ages:
            if any(evaluate(l, signers, age) for l in leaf_policies) != evaluate(top_policy, signers, age):
                return False
    return True
