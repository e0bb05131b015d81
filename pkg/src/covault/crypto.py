"""Group arithmetic, Schnorr signatures, tagged hashes, key derivation and
the key-deletion model.

Point arithmetic runs on secp256k1 through ``coincurve``. The signature
scheme is Schnorr-shaped but not BIP-340 byte compatible: the challenge
commits to the full compressed public key.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Dict, Optional, Union

from coincurve import PublicKey

ORDER = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
FIELD_PRIME = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEFFFFFC2F
GX = 0x79BE667EF9DCBBAC55A06295CE870B07029BFCDB2DCE28D959F2815B16F81798
GY = 0x483ADA7726A3C4655DA4FBFC0E1108A8FD17B448A68554199C47D08FFB10D4B8

Scalar = int


class CryptoError(Exception):
    pass


class InvalidSeed(CryptoError):
    pass


class InvalidTweak(CryptoError):
    pass


class InvalidScalar(CryptoError):
    pass


class HardenedFromPublic(CryptoError):
    pass


class NotFound(CryptoError):
    pass


class KeyDeleted(CryptoError):
    pass


class RawMessage(CryptoError):
    """Signing is only defined over 32-byte digests."""


_IDENTITY = b"\x00"


@dataclass(frozen=True, order=True)
class GroupPoint:
    """A secp256k1 point held in 33-byte compressed form.

    The identity is representable (one zero byte) but is never a valid
    public key.
    """

    data: bytes

    @classmethod
    def identity(cls) -> "GroupPoint":
        return cls(_IDENTITY)

    @classmethod
    def generator(cls) -> "GroupPoint":
        return cls(b"\x02" + GX.to_bytes(32, "big"))

    @classmethod
    def from_bytes(cls, data: bytes) -> "GroupPoint":
        if data == _IDENTITY:
            return cls.identity()
        PublicKey(data)  # raises on invalid encodings
        return cls(bytes(data))

    @property
    def is_identity(self) -> bool:
        return self.data == _IDENTITY

    def is_valid(self) -> bool:
        if self.is_identity or len(self.data) != 33:
            return False
        try:
            PublicKey(self.data)
        except Exception:
            return False
        return True

    def xy(self) -> tuple[int, int]:
        if self.is_identity:
            raise CryptoError("identity has no affine coordinates")
        return PublicKey(self.data).point()

    def has_even_y(self) -> bool:
        return self.data[0] == 2

    def __add__(self, other: "GroupPoint") -> "GroupPoint":
        if self.is_identity:
            return other
        if other.is_identity:
            return self
        try:
            combined = PublicKey.combine_keys([PublicKey(self.data), PublicKey(other.data)])
        except Exception:
            return GroupPoint.identity()
        return GroupPoint(combined.format(compressed=True))

    def __neg__(self) -> "GroupPoint":
        if self.is_identity:
            return self
        return GroupPoint(bytes([self.data[0] ^ 1]) + self.data[1:])

    def __sub__(self, other: "GroupPoint") -> "GroupPoint":
        return self + (-other)

    def mul(self, k: int) -> "GroupPoint":
        k %= ORDER
        if k == 0 or self.is_identity:
            return GroupPoint.identity()
        return GroupPoint(PublicKey(self.data).multiply(k.to_bytes(32, "big")).format(compressed=True))

    def hex(self) -> str:
        return self.data.hex()

    def __repr__(self) -> str:
        return f"GroupPoint({self.data.hex()[:16]}..)"


G = GroupPoint.generator()


def point_from_scalar(k: int) -> GroupPoint:
    """Return k*G."""
    k %= ORDER
    if k == 0:
        return GroupPoint.identity()
    return GroupPoint(PublicKey.from_secret(k.to_bytes(32, "big")).format(compressed=True))


def _check_scalar(k: int) -> int:
    if not isinstance(k, int) or not 0 < k < ORDER:
        raise InvalidScalar("private scalar out of range")
    return k


def tagged_hash(tag: str, data: bytes) -> bytes:
    th = hashlib.sha256(tag.encode()).digest()
    return hashlib.sha256(th + th + data).digest()


def hash_to_scalar(tag: str, data: bytes) -> int:
    return int.from_bytes(tagged_hash(tag, data), "big") % ORDER


@dataclass(frozen=True)
class KeyPair:
    priv: int
    pub: GroupPoint


def keypair_gen(seed: bytes) -> KeyPair:
    """Deterministic key pair from 32 bytes of entropy (direct reduction)."""
    if len(seed) != 32:
        raise InvalidSeed("seed must be 32 bytes")
    k = int.from_bytes(seed, "big") % ORDER
    if k == 0:
        raise InvalidSeed("seed reduces to the zero scalar")
    return KeyPair(k, point_from_scalar(k))


def keypair_from_label(label: str) -> KeyPair:
    """Convenience for tests and scenarios: key pair from a text label."""
    return keypair_gen(tagged_hash("covault/label", label.encode()))


# Schnorr


def sign(priv: int, msg: bytes) -> bytes:
    """Deterministic Schnorr signature R.x || s over a 32-byte digest."""
    _check_scalar(priv)
    if len(msg) != 32:
        raise RawMessage("message must be a 32-byte digest")
    pub = point_from_scalar(priv)
    for ctr in itertools.count():
        k = hash_to_scalar("covault/nonce", priv.to_bytes(32, "big") + msg + ctr.to_bytes(4, "big"))
        if k:
            break
    R = point_from_scalar(k)
    if not R.has_even_y():
        k = ORDER - k
        R = -R
    rx = R.data[1:]
    e = hash_to_scalar("covault/challenge", rx + pub.data + msg)
    s = (k + e * priv) % ORDER
    return rx + s.to_bytes(32, "big")


def verify(pub: GroupPoint, msg: bytes, sig: bytes) -> bool:
    if len(msg) != 32 or len(sig) != 64 or not pub.is_valid():
        return False
    rx, s = sig[:32], int.from_bytes(sig[32:], "big")
    if s >= ORDER or int.from_bytes(rx, "big") >= FIELD_PRIME:
        return False
    e = hash_to_scalar("covault/challenge", rx + pub.data + msg)
    R = point_from_scalar(s) - pub.mul(e)
    if R.is_identity:
        return False
    return R.has_even_y() and R.data[1:] == rx


# tweaks


def tweak_key(P: GroupPoint, t: int) -> GroupPoint:
    """Q = P + t*G."""
    Q = P + point_from_scalar(t % ORDER)
    if Q.is_identity:
        raise InvalidTweak("tweaked key is the identity")
    return Q


def tweak_priv(k: int, t: int) -> int:
    r = (k + t) % ORDER
    if r == 0:
        raise InvalidTweak("tweaked scalar is zero")
    return r


# hierarchical derivation


class KeyKind(str, enum.Enum):
    PRIVATE = "private-extended"
    PUBLIC = "public-extended"


@dataclass(frozen=True)
class ExtendedKey:
    key: Union[int, GroupPoint]
    chaincode: bytes
    depth: int
    kind: KeyKind

    @property
    def pub(self) -> GroupPoint:
        if self.kind is KeyKind.PRIVATE:
            return point_from_scalar(self.key)
        return self.key

    @property
    def priv(self) -> int:
        if self.kind is not KeyKind.PRIVATE:
            raise CryptoError("public-extended key has no private scalar")
        return self.key

    def neuter(self) -> "ExtendedKey":
        return ExtendedKey(self.pub, self.chaincode, self.depth, KeyKind.PUBLIC)


def master_key(seed: bytes) -> ExtendedKey:
    k = hash_to_scalar("covault/master-key", seed)
    if k == 0:
        raise InvalidSeed("seed reduces to the zero scalar")
    cc = tagged_hash("covault/master-chain", seed)
    return ExtendedKey(k, cc, 0, KeyKind.PRIVATE)


def derive_child(parent: ExtendedKey, index: int, hardened: bool) -> ExtendedKey:
    """One derivation step.

    Non-hardened children are tweaked by a hash of the parent public key, so
    the public child is computable from the public parent. Hardened children
    hash the parent private scalar instead.
    """
    if not 0 <= index < 2**31:
        raise ValueError("index out of range")
    if hardened:
        if parent.kind is not KeyKind.PRIVATE:
            raise HardenedFromPublic("hardened derivation needs the private parent")
        material = b"\x01" + parent.priv.to_bytes(32, "big")
    else:
        material = b"\x00" + parent.pub.data
    data = parent.chaincode + material + index.to_bytes(4, "big")
    t = hash_to_scalar("covault/child-tweak", data)
    cc = tagged_hash("covault/child-chain", data)
    if parent.kind is KeyKind.PRIVATE:
        return ExtendedKey(tweak_priv(parent.priv, t), cc, parent.depth + 1, KeyKind.PRIVATE)
    return ExtendedKey(tweak_key(parent.pub, t), cc, parent.depth + 1, KeyKind.PUBLIC)


def derive_path(parent: ExtendedKey, path: str) -> ExtendedKey:
    """Derive along a path like ``"3h/1/7"`` (``h`` marks hardened)."""
    node = parent
    for part in filter(None, path.split("/")):
        hardened = part.endswith(("h", "'"))
        node = derive_child(node, int(part.rstrip("h'")), hardened)
    return node


# key deletion


class DeletionMethod(str, enum.Enum):
    DISPOSE = "dispose"
    CLEAR = "clear"
    PURGE = "purge"
    DESTROY = "destroy"


class AttackerLevel(enum.IntEnum):
    LOW = 1
    MEDIUM = 2
    HIGH = 3


# relative difficulty per method; None = impossible
DELETION_DIFFICULTY: Dict[DeletionMethod, Optional[AttackerLevel]] = {
    DeletionMethod.DISPOSE: AttackerLevel.LOW,
    DeletionMethod.CLEAR: AttackerLevel.MEDIUM,
    DeletionMethod.PURGE: AttackerLevel.HIGH,
    DeletionMethod.DESTROY: None,
}


@dataclass
class DeletionRecord:
    key_id: str
    method: DeletionMethod
    pub: GroupPoint
    _residual: Optional[int] = field(default=None, repr=False)


class Keystore:
    """Private scalars owned by one device."""

    def __init__(self, owner: str = ""):
        self.owner = owner
        self._keys: Dict[str, int] = {}
        self._deleted: set[str] = set()

    def add(self, key_id: str, priv: int) -> GroupPoint:
        _check_scalar(priv)
        self._keys[key_id] = priv
        self._deleted.discard(key_id)
        return point_from_scalar(priv)

    def __contains__(self, key_id: str) -> bool:
        return key_id in self._keys

    def pub(self, key_id: str) -> GroupPoint:
        if key_id not in self._keys:
            raise NotFound(key_id)
        return point_from_scalar(self._keys[key_id])

    def sign(self, key_id: str, msg: bytes) -> bytes:
        if key_id in self._deleted:
            raise KeyDeleted(key_id)
        if key_id not in self._keys:
            raise NotFound(key_id)
        return sign(self._keys[key_id], msg)

    def ids(self) -> list[str]:
        return sorted(self._keys)


def delete_key(store: Keystore, key_id: str, method: Union[DeletionMethod, str]) -> DeletionRecord:
    if key_id not in store._keys:
        raise NotFound(key_id)
    method = DeletionMethod(method)
    priv = store._keys.pop(key_id)
    store._deleted.add(key_id)
    return DeletionRecord(key_id, method, point_from_scalar(priv), priv)


def attempt_recovery(record: DeletionRecord, attacker_level: Union[AttackerLevel, str]) -> Optional[int]:
    if isinstance(attacker_level, str):
        attacker_level = AttackerLevel[attacker_level.upper()]
    need = DELETION_DIFFICULTY[record.method]
    if need is None or attacker_level < need:
        return None
    return record._residual
