"""TapTrees: leaf and branch hashing, output-key tweaking, control blocks
and script-path witnesses."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

from . import crypto
from .crypto import GroupPoint
from .script import Policy, ScriptProgram

LEAF_VERSION = 0xC0
MAX_PATH = 128
P2TR_VERSION = 0x01


class TaprootError(Exception):
    pass


class NotALeaf(TaprootError):
    pass


@dataclass(frozen=True)
class TapLeaf:
    script: ScriptProgram
    version: int = LEAF_VERSION
    policy: Optional[Policy] = None  # informational, not committed

    def leaf_hash(self) -> bytes:
        body = self.script.to_bytes()
        return crypto.tagged_hash("TapLeaf", bytes([self.version]) + len(body).to_bytes(4, "little") + body)

    def __eq__(self, other):
        return isinstance(other, TapLeaf) and self.version == other.version and self.script == other.script

    def __hash__(self):
        return hash((self.version, self.script))


@dataclass(frozen=True)
class TapBranch:
    left: "TapTree"
    right: "TapTree"


TapTree = Union[TapLeaf, TapBranch]


def branch_hash(a: bytes, b: bytes) -> bytes:
    lo, hi = sorted((a, b))
    return crypto.tagged_hash("TapBranch", lo + hi)


def node_hash(tree: TapTree) -> bytes:
    if isinstance(tree, TapLeaf):
        return tree.leaf_hash()
    return branch_hash(node_hash(tree.left), node_hash(tree.right))


def merkle_root(tree: TapTree) -> bytes:
    """Root commitment; a single-leaf tree's root is its leaf hash."""
    return node_hash(tree)


def leaves(tree: TapTree) -> List[TapLeaf]:
    if isinstance(tree, TapLeaf):
        return [tree]
    return leaves(tree.left) + leaves(tree.right)


def depth_of(tree: TapTree, leaf: TapLeaf) -> int:
    return len(_path(tree, leaf))


def comb(items: Sequence[TapTree]) -> TapTree:
    """Right-descending comb: (a, (b, (c, d)))."""
    if not items:
        raise TaprootError("empty tree")
    node = items[-1]
    for item in reversed(items[:-1]):
        node = TapBranch(item, node)
    return node


def balanced(items: Sequence[TapTree]) -> TapTree:
    if not items:
        raise TaprootError("empty tree")
    if len(items) == 1:
        return items[0]
    mid = (len(items) + 1) // 2
    return TapBranch(balanced(items[:mid]), balanced(items[mid:]))


def tap_tweak(P: GroupPoint, root: bytes) -> int:
    return int.from_bytes(crypto.tagged_hash("TapTweak", P.data + root), "big") % crypto.ORDER


@dataclass(frozen=True)
class TaprootOutput:
    Q: GroupPoint
    P: GroupPoint
    root: bytes

    @property
    def script_pubkey(self) -> bytes:
        return bytes([P2TR_VERSION]) + self.Q.data[1:]


def output_key(P: GroupPoint, tree: Optional[TapTree]) -> TaprootOutput:
    root = merkle_root(tree) if tree is not None else b""
    Q = crypto.tweak_key(P, tap_tweak(P, root))
    return TaprootOutput(Q, P, root)


def nums_internal_key() -> GroupPoint:
    """Point with no known discrete log: hash of G's uncompressed encoding,
    incremented until it is a valid x-coordinate."""
    x = int.from_bytes(hashlib.sha256(b"\x04" + crypto.GX.to_bytes(32, "big") + crypto.GY.to_bytes(32, "big")).digest(), "big")
    while True:
        cand = b"\x02" + (x % crypto.FIELD_PRIME).to_bytes(32, "big")
        try:
            return GroupPoint.from_bytes(cand)
        except Exception:
            x += 1


NUMS = nums_internal_key()


@dataclass(frozen=True)
class ControlBlock:
    internal_key: GroupPoint
    path: Tuple[bytes, ...]

    def to_bytes(self) -> bytes:
        return self.internal_key.data + b"".join(self.path)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ControlBlock":
        if len(data) < 33 or (len(data) - 33) % 32:
            raise TaprootError("bad control block length")
        path = tuple(data[i:i + 32] for i in range(33, len(data), 32))
        if len(path) > MAX_PATH:
            raise TaprootError("control block path too long")
        return cls(GroupPoint.from_bytes(data[:33]), path)


def _path(tree: TapTree, leaf: TapLeaf) -> List[bytes]:
    if isinstance(tree, TapLeaf):
        if tree == leaf:
            return []
        raise NotALeaf("leaf not in tree")
    for here, other in ((tree.left, tree.right), (tree.right, tree.left)):
        try:
            return _path(here, leaf) + [node_hash(other)]
        except NotALeaf:
            pass
    raise NotALeaf("leaf not in tree")


def prove_inclusion(tree: TapTree, leaf: TapLeaf, internal_key: GroupPoint) -> ControlBlock:
    path = _path(tree, leaf)
    if len(path) > MAX_PATH:
        raise TaprootError("tree too deep")
    return ControlBlock(internal_key, tuple(path))


def root_from_path(leaf: TapLeaf, path: Sequence[bytes]) -> bytes:
    h = leaf.leaf_hash()
    for sibling in path:
        h = branch_hash(h, sibling)
    return h


def verify_control_block(Q: Union[GroupPoint, bytes], leaf: TapLeaf, cb: ControlBlock) -> bool:
    """Recompute the root from leaf and path, re-tweak, compare to Q (x-only)."""
    if len(cb.path) > MAX_PATH:
        return False
    try:
        expect = crypto.tweak_key(cb.internal_key, tap_tweak(cb.internal_key, root_from_path(leaf, cb.path)))
    except crypto.CryptoError:
        return False
    qx = Q.data[1:] if isinstance(Q, GroupPoint) else bytes(Q)
    return expect.data[1:] == qx


def script_path_witness(stack: Sequence[bytes], leaf: TapLeaf, cb: ControlBlock,
                        annex: Optional[bytes] = None) -> Tuple[bytes, ...]:
    out = tuple(stack) + (leaf.script.to_bytes(), cb.to_bytes())
    if annex is not None:
        out += (annex,)
    return out


def split_script_path_witness(witness: Sequence[bytes]):
    """-> (stack, leaf, control block, annex)."""
    w = list(witness)
    annex = None
    if len(w) >= 2 and w[-1][:1] == b"\x50":
        annex = w.pop()
    if len(w) < 2:
        raise TaprootError("witness too short for a script-path spend")
    cb = ControlBlock.from_bytes(w.pop())
    leaf = TapLeaf(ScriptProgram.from_bytes(w.pop()))
    return tuple(w), leaf, cb, annex
