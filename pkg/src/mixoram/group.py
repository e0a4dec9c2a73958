"""Prime-order group arithmetic, key agreement and blinding-factor chains.

Two group backends are provided.  ``P256Group`` is the production group:
NIST P-256 has prime order (cofactor 1) and is a standard choice for
protocols that assume decisional Diffie-Hellman.  ``ToyGroup`` is the
multiplicative group mod 23 with generator 5; its order (22) is tiny and
composite, so it is only suitable as an arithmetic oracle in tests, never
for security.

All protocol secrets flow through three operations:

* ``agree``      shared secret  ss = other_public ** own_private
* ``derive``     HKDF-SHA256 split of a shared secret into an encryption
                 key and a permutation seed, each exactly kappa bits
* ``blind_*``    per-round refresh of group elements by a hash-derived
                 exponent, so one element shipped at eviction start yields
                 a whole schedule of keys and seeds
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass

from .errors import IdentityElement, UnsupportedKappa

SUPPORTED_KAPPA = (128, 256)


def hkdf_sha256(ikm: bytes, salt: bytes, info: bytes, length: int) -> bytes:
    """HKDF per RFC 5869 with SHA-256 (extract then expand)."""
    if not salt:
        salt = bytes(32)
    prk = hmac.new(salt, ikm, hashlib.sha256).digest()
    okm = b""
    t = b""
    counter = 1
    while len(okm) < length:
        t = hmac.new(prk, t + info + bytes([counter]), hashlib.sha256).digest()
        okm += t
        counter += 1
    return okm[:length]


# ---------------------------------------------------------------------------
# group backends


class ToyGroup:
    """Multiplicative group mod 23 with generator 5 (order 22).

    Arithmetic oracle only: the order is composite and 8 bits long.
    """

    name = "toy"
    order = 22
    modulus = 23
    generator_value = 5
    element_size = 4

    def exp(self, value: int, scalar: int) -> int:
        return pow(value, scalar % self.order if scalar >= self.order else scalar, self.modulus)

    def is_identity(self, value: int) -> bool:
        return value == 1

    def encode(self, value: int) -> bytes:
        return int(value).to_bytes(self.element_size, "big")

    def decode(self, data: bytes) -> int:
        if len(data) != self.element_size:
            raise ValueError("bad toy element encoding")
        value = int.from_bytes(data, "big")
        if not 1 <= value < self.modulus:
            raise ValueError("toy element out of range")
        return value


# NIST P-256 domain parameters.
_P = 0xFFFFFFFF00000001000000000000000000000000FFFFFFFFFFFFFFFFFFFFFFFF
_A = -3 % _P
_B = 0x5AC635D8AA3A93E7B3EBBD55769886BC651D06B0CC53B0F63BCE3C3E27D2604B
_N = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
_GX = 0x6B17D1F2E12C4247F8BCE6E563A440F277037D812DEB33A0F4A13945D898C296
_GY = 0x4FE342E2FE1A7F9B8EE7EB4A7C0F9E162BCE33576B315ECECBB6406837BF51F5


def _jdbl(X1, Y1, Z1):
    p = _P
    if not Y1 or not Z1:
        return (0, 1, 0)
    YY = Y1 * Y1 % p
    S = 4 * X1 * YY % p
    ZZ = Z1 * Z1 % p
    M = (3 * X1 * X1 + _A * ZZ % p * ZZ) % p
    X3 = (M * M - 2 * S) % p
    Y3 = (M * (S - X3) - 8 * YY * YY) % p
    Z3 = 2 * Y1 * Z1 % p
    return (X3, Y3, Z3)


def _jadd(X1, Y1, Z1, X2, Y2, Z2):
    p = _P
    if not Z1:
        return (X2, Y2, Z2)
    if not Z2:
        return (X1, Y1, Z1)
    Z1Z1 = Z1 * Z1 % p
    Z2Z2 = Z2 * Z2 % p
    U1 = X1 * Z2Z2 % p
    U2 = X2 * Z1Z1 % p
    S1 = Y1 * Z2 % p * Z2Z2 % p
    S2 = Y2 * Z1 % p * Z1Z1 % p
    H = (U2 - U1) % p
    r = (S2 - S1) % p
    if not H:
        if not r:
            return _jdbl(X1, Y1, Z1)
        return (0, 1, 0)
    HH = H * H % p
    HHH = H * HH % p
    V = U1 * HH % p
    X3 = (r * r - HHH - 2 * V) % p
    Y3 = (r * (V - X3) - S1 * HHH) % p
    Z3 = Z1 * Z2 % p * H % p
    return (X3, Y3, Z3)


def _jmul(k: int, point):
    """Scalar multiply an affine point, 4-bit fixed window, Jacobian ladder."""
    if point is None or k == 0:
        return None
    k %= _N
    if k == 0:
        return None
    x, y = point
    table = [None] * 16
    table[1] = (x, y, 1)
    for i in range(2, 16):
        table[i] = _jadd(*table[i - 1], *table[1])
    R = (0, 1, 0)
    started = False
    for shift in range(252, -4, -4):
        if started:
            R = _jdbl(*R)
            R = _jdbl(*R)
            R = _jdbl(*R)
            R = _jdbl(*R)
        w = (k >> shift) & 0xF
        if w:
            R = _jadd(*R, *table[w]) if started else table[w]
            started = True
    if not R[2]:
        return None
    zi = pow(R[2], _P - 2, _P)
    zi2 = zi * zi % _P
    return (R[0] * zi2 % _P, R[1] * zi2 % _P * zi % _P)


class P256Group:
    """NIST P-256, prime order, canonical 33-byte compressed encoding."""

    name = "p256"
    order = _N
    generator_value = (_GX, _GY)
    element_size = 33

    def exp(self, value, scalar: int):
        return _jmul(scalar, value)

    def is_identity(self, value) -> bool:
        return value is None

    def encode(self, value) -> bytes:
        if value is None:
            return bytes(self.element_size)
        x, y = value
        return bytes([2 + (y & 1)]) + x.to_bytes(32, "big")

    def decode(self, data: bytes):
        if len(data) != self.element_size:
            raise ValueError("bad p256 element encoding")
        if data == bytes(self.element_size):
            return None
        prefix = data[0]
        if prefix not in (2, 3):
            raise ValueError("bad p256 point prefix")
        x = int.from_bytes(data[1:], "big")
        if x >= _P:
            raise ValueError("p256 x out of range")
        y2 = (pow(x, 3, _P) + _A * x + _B) % _P
        y = pow(y2, (_P + 1) // 4, _P)
        if y * y % _P != y2:
            raise ValueError("point not on curve")
        if (y & 1) != (prefix & 1):
            y = _P - y
        return (x, y)


_GROUPS = {"toy": ToyGroup(), "p256": P256Group()}


def get_group(name: str):
    return _GROUPS[name]


# ---------------------------------------------------------------------------
# elements, scalars and derived secrets


@dataclass(frozen=True)
class GroupElement:
    """An element of one of the backends, immutable and hashable."""

    group: object
    value: object

    def __pow__(self, scalar: int) -> "GroupElement":
        return GroupElement(self.group, self.group.exp(self.value, scalar))

    def encode(self) -> bytes:
        return self.group.encode(self.value)

    @property
    def is_identity(self) -> bool:
        return self.group.is_identity(self.value)

    def __eq__(self, other) -> bool:
        return isinstance(other, GroupElement) and self.value == other.value \
            and self.group.name == other.group.name

    def __hash__(self) -> int:
        return hash((self.group.name, self.value))


def generator(group) -> GroupElement:
    return GroupElement(group, group.generator_value)


def element_from_bytes(group, data: bytes) -> GroupElement:
    return GroupElement(group, group.decode(data))


def random_scalar(group, rng) -> int:
    """Uniform nonzero exponent below the group order."""
    bits = group.order.bit_length()
    while True:
        value = rng.getrandbits(bits)
        if 0 < value < group.order:
            return value


def keygen(group, rng) -> tuple[int, GroupElement]:
    """Sample a private exponent and return it with its public element."""
    private = random_scalar(group, rng)
    return private, generator(group) ** private


def agree(own_private: int, other_public: GroupElement) -> GroupElement:
    """Diffie-Hellman shared secret.  agree(x, g^z) == agree(z, g^x)."""
    if other_public.is_identity:
        raise IdentityElement("peer element is the group identity")
    return other_public ** own_private


@dataclass(frozen=True)
class DerivedSecrets:
    """Per-mix symmetric material: an AES key and a permutation seed."""

    enc_key: bytes
    perm_seed: bytes


def derive(ss: GroupElement, kappa: int) -> DerivedSecrets:
    """Stretch a shared secret into kappa-bit key material, key then seed."""
    if kappa not in SUPPORTED_KAPPA:
        raise UnsupportedKappa(f"kappa={kappa}")
    okm = hkdf_sha256(ss.encode(), b"", b"", 2 * kappa // 8)
    half = kappa // 8
    return DerivedSecrets(enc_key=okm[:half], perm_seed=okm[half:])


def hash_to_scalar(group, kappa: int, *elements: GroupElement) -> int:
    """Blinding-factor hash: kappa bits of SHA-256 over canonical encodings,
    reduced mod the group order, zero rejected by re-hashing."""
    material = b"".join(e.encode() for e in elements)
    counter = 0
    while True:
        digest = hashlib.sha256(material + counter.to_bytes(2, "big")).digest()
        value = int.from_bytes(digest[: kappa // 8], "big") % group.order
        if value != 0:
            return value
        counter += 1


def blind_alpha(prev_alpha: GroupElement, prev_ss: GroupElement, kappa: int,
                blinder=None) -> tuple[GroupElement, GroupElement, int]:
    """Advance a private chain one round.

    b = h(alpha_j, ss_j); both sides raise their element to b, so a mix
    holding (alpha_j, ss_j) and a client holding the exponent product stay
    in lockstep.  Returns (alpha_{j+1}, ss_{j+1}, b); ``blinder`` is a test
    hook replacing the hash.
    """
    b = blinder(prev_alpha, prev_ss) if blinder is not None \
        else hash_to_scalar(prev_alpha.group, kappa, prev_alpha, prev_ss)
    return prev_alpha ** b, prev_ss ** b, b


def blind_beta(prev_beta: GroupElement, prev_sk: GroupElement, kappa: int,
               client_public: GroupElement | None = None) -> tuple[GroupElement, GroupElement, int]:
    """Advance the shared public chain one round.

    Every mix holds the same sk_j, so b_pub = h(sk_j) (or h(y_client, sk_j)
    for the rebuild variant) is computable by all of them without
    interaction, keeping the per-round public seeds in consensus.
    """
    if client_public is not None:
        b = hash_to_scalar(prev_sk.group, kappa, client_public, prev_sk)
    else:
        b = hash_to_scalar(prev_sk.group, kappa, prev_sk)
    return prev_beta ** b, prev_sk ** b, b


def private_chain(alpha0: GroupElement, ss0: GroupElement, kappa: int,
                  count: int) -> list[tuple[GroupElement, GroupElement]]:
    """(alpha_j, ss_j) for j = 0..count-1, blinding between rounds."""
    chain = [(alpha0, ss0)]
    for _ in range(count - 1):
        a, s, _ = blind_alpha(*chain[-1], kappa)
        chain.append((a, s))
    return chain


def public_chain(beta0: GroupElement, sk0: GroupElement, kappa: int, count: int,
                 client_public: GroupElement | None = None) -> list[tuple[GroupElement, GroupElement]]:
    """(beta_j, sk_j) for j = 0..count-1 of the shared public chain."""
    chain = [(beta0, sk0)]
    for _ in range(count - 1):
        b, s, _ = blind_beta(*chain[-1], kappa, client_public)
        chain.append((b, s))
    return chain
