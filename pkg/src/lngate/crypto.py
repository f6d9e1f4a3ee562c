"""Elliptic-curve arithmetic, ECDSA, hashing and Paillier encryption.

Curve parameters are carried in :class:`CurveParams` so every routine works on
secp256k1 as well as on the tiny prime-order curve used for exhaustive tests.
Nothing here is constant time.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import gmpy2


class CryptoError(ValueError):
    pass


@dataclass(frozen=True)
class CurveParams:
    """Short Weierstrass curve y^2 = x^3 + a*x + b over F_p."""

    name: str
    p: int
    a: int
    b: int
    gx: int
    gy: int
    n: int
    h: int = 1

    @property
    def G(self) -> "Point":
        return Point(self.gx, self.gy, self)

    @cached_property
    def coord_size(self) -> int:
        return (self.p.bit_length() + 7) // 8

    @cached_property
    def scalar_size(self) -> int:
        return (self.n.bit_length() + 7) // 8

    def on_curve(self, x: int, y: int) -> bool:
        return (y * y - (x * x * x + self.a * x + self.b)) % self.p == 0

    @cached_property
    def _g_table(self) -> list:
        # 2^i * G in Jacobian form, for fixed-base multiplication
        table = []
        P = (self.gx, self.gy, 1)
        for _ in range(self.n.bit_length() + 1):
            table.append(P)
            P = _jac_double(P, self)
        return table


SECP256K1 = CurveParams(
    name="secp256k1",
    p=0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEFFFFFC2F,
    a=0,
    b=7,
    gx=0x79BE667EF9DCBBAC55A06295CE870B07029BFCDB2DCE28D959F2815B16F81798,
    gy=0x483ADA7726A3C4655DA4FBFC0E1108A8FD17B448A68554199C47D08FFB10D4B8,
    n=0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141,
)

# y^2 = x^3 + 7 over F_1051 has prime order 1093; small enough to enumerate.
TINY = CurveParams(name="tiny1051", p=1051, a=0, b=7, gx=3, gy=666, n=1093)


# Jacobian coordinates: (X, Y, Z) represents (X/Z^2, Y/Z^3); Z == 0 is infinity.
_INF = (1, 1, 0)


def _jac_double(P, c: CurveParams):
    X, Y, Z = P
    if Z == 0 or Y == 0:
        return _INF
    p = c.p
    YY = Y * Y % p
    S = 4 * X * YY % p
    M = (3 * X * X + c.a * pow(Z, 4, p)) % p
    X3 = (M * M - 2 * S) % p
    Y3 = (M * (S - X3) - 8 * YY * YY) % p
    Z3 = 2 * Y * Z % p
    return (X3, Y3, Z3)


def _jac_add(P, Q, c: CurveParams):
    if P[2] == 0:
        return Q
    if Q[2] == 0:
        return P
    p = c.p
    X1, Y1, Z1 = P
    X2, Y2, Z2 = Q
    Z1Z1 = Z1 * Z1 % p
    Z2Z2 = Z2 * Z2 % p
    U1 = X1 * Z2Z2 % p
    U2 = X2 * Z1Z1 % p
    S1 = Y1 * Z2 * Z2Z2 % p
    S2 = Y2 * Z1 * Z1Z1 % p
    if U1 == U2:
        if S1 != S2:
            return _INF
        return _jac_double(P, c)
    H = (U2 - U1) % p
    R = (S2 - S1) % p
    HH = H * H % p
    HHH = H * HH % p
    V = U1 * HH % p
    X3 = (R * R - HHH - 2 * V) % p
    Y3 = (R * (V - X3) - S1 * HHH) % p
    Z3 = H * Z1 * Z2 % p
    return (X3, Y3, Z3)


def _jac_mul(k: int, P, c: CurveParams):
    R = _INF
    for bit in bin(k)[2:]:
        R = _jac_double(R, c)
        if bit == "1":
            R = _jac_add(R, P, c)
    return R


class Point:
    """Affine curve point; ``Point.infinity(curve)`` is the identity."""

    __slots__ = ("x", "y", "curve")

    def __init__(self, x: Optional[int], y: Optional[int], curve: CurveParams = SECP256K1):
        if x is not None and not curve.on_curve(x, y):
            raise CryptoError("point not on curve")
        self.x = x
        self.y = y
        self.curve = curve

    @classmethod
    def infinity(cls, curve: CurveParams = SECP256K1) -> "Point":
        return cls(None, None, curve)

    @classmethod
    def _from_jacobian(cls, J, curve: CurveParams) -> "Point":
        X, Y, Z = J
        if Z == 0:
            return cls.infinity(curve)
        zi = pow(Z, -1, curve.p)
        zi2 = zi * zi % curve.p
        pt = object.__new__(cls)
        pt.x = X * zi2 % curve.p
        pt.y = Y * zi2 * zi % curve.p
        pt.curve = curve
        return pt

    @property
    def is_infinity(self) -> bool:
        return self.x is None

    def _jac(self):
        return _INF if self.x is None else (self.x, self.y, 1)

    def __add__(self, other: "Point") -> "Point":
        return Point._from_jacobian(_jac_add(self._jac(), other._jac(), self.curve), self.curve)

    def __neg__(self) -> "Point":
        if self.is_infinity:
            return self
        return Point(self.x, (-self.y) % self.curve.p, self.curve)

    def __sub__(self, other: "Point") -> "Point":
        return self + (-other)

    def __rmul__(self, k: int) -> "Point":
        k %= self.curve.n
        if k == 0 or self.is_infinity:
            return Point.infinity(self.curve)
        return Point._from_jacobian(_jac_mul(k, self._jac(), self.curve), self.curve)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Point):
            return NotImplemented
        return (self.x, self.y, self.curve.name) == (other.x, other.y, other.curve.name)

    def __hash__(self) -> int:
        return hash((self.x, self.y, self.curve.name))

    def __repr__(self) -> str:
        if self.is_infinity:
            return "Point(infinity)"
        return f"Point({self.encode().hex()[:16]}...)"

    def encode(self) -> bytes:
        """Compressed encoding: parity byte followed by big-endian x."""
        if self.is_infinity:
            raise CryptoError("cannot encode the point at infinity")
        return bytes([2 + (self.y & 1)]) + self.x.to_bytes(self.curve.coord_size, "big")

    @classmethod
    def decode(cls, data: bytes, curve: CurveParams = SECP256K1) -> "Point":
        if len(data) != 1 + curve.coord_size or data[0] not in (2, 3):
            raise CryptoError("bad point encoding")
        x = int.from_bytes(data[1:], "big")
        p = curve.p
        rhs = (x * x * x + curve.a * x + curve.b) % p
        if p % 4 != 3:
            raise CryptoError("decompression needs p = 3 mod 4")
        y = pow(rhs, (p + 1) // 4, p)
        if y * y % p != rhs:
            raise CryptoError("x is not on the curve")
        if (y & 1) != data[0] - 2:
            y = p - y
        return cls(x, y, curve)


def point_size(curve: CurveParams = SECP256K1) -> int:
    return 1 + curve.coord_size


def base_mul(k: int, curve: CurveParams = SECP256K1) -> Point:
    """k*G using the precomputed doubling table."""
    return Point._from_jacobian(_jac_mul_base(k % curve.n, curve), curve)


def encode_scalar(k: int, curve: CurveParams = SECP256K1) -> bytes:
    return (k % curve.n).to_bytes(curve.scalar_size, "big")


def decode_scalar(data: bytes, curve: CurveParams = SECP256K1) -> int:
    if len(data) != curve.scalar_size:
        raise CryptoError("bad scalar length")
    return int.from_bytes(data, "big")


def random_scalar(rng: random.Random, curve: CurveParams = SECP256K1) -> int:
    return rng.randrange(1, curve.n)


# --- hashing -----------------------------------------------------------------


@dataclass(frozen=True)
class MessageDigest:
    digest: bytes

    def scalar(self, curve: CurveParams = SECP256K1) -> int:
        # leftmost bits, as in ECDSA's bits2int
        e = int.from_bytes(self.digest, "big")
        excess = len(self.digest) * 8 - curve.n.bit_length()
        if excess > 0:
            e >>= excess
        return e % curve.n

    def hex(self) -> str:
        return self.digest.hex()


def hash_digest(message: bytes) -> MessageDigest:
    return MessageDigest(hashlib.sha256(message).digest())


def sha256(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(part)
    return h.digest()


# --- ECDSA ---------------------------------------------------------------------


@dataclass(frozen=True)
class EcdsaSignature:
    r: int
    s: int

    def encode(self, curve: CurveParams = SECP256K1) -> bytes:
        return encode_scalar(self.r, curve) + encode_scalar(self.s, curve)

    @classmethod
    def decode(cls, data: bytes, curve: CurveParams = SECP256K1) -> "EcdsaSignature":
        size = curve.scalar_size
        if len(data) != 2 * size:
            raise CryptoError("bad signature length")
        return cls(decode_scalar(data[:size], curve), decode_scalar(data[size:], curve))


class ZeroSignatureComponent(CryptoError):
    """r or s came out zero; retry with a fresh nonce."""


def low_s(s: int, curve: CurveParams = SECP256K1) -> int:
    return min(s, curve.n - s)


def ecdsa_sign(
    private_key: int, digest: MessageDigest, nonce: int, curve: CurveParams = SECP256K1
) -> EcdsaSignature:
    n = curve.n
    if not 1 <= private_key < n:
        raise CryptoError("private key out of range")
    if not 1 <= nonce < n:
        raise CryptoError("nonce out of range")
    R = base_mul(nonce, curve)
    r = R.x % n
    if r == 0:
        raise ZeroSignatureComponent("r == 0")
    s = pow(nonce, -1, n) * (digest.scalar(curve) + r * private_key) % n
    if s == 0:
        raise ZeroSignatureComponent("s == 0")
    return EcdsaSignature(r, low_s(s, curve))


def ecdsa_verify(public_key: Point, digest: MessageDigest, sig: EcdsaSignature) -> bool:
    curve = public_key.curve
    n = curve.n
    if public_key.is_infinity:
        return False
    if not (0 < sig.r < n and 0 < sig.s < n):
        return False
    w = pow(sig.s, -1, n)
    u1 = digest.scalar(curve) * w % n
    u2 = sig.r * w % n
    J = _jac_add(
        _jac_mul_base(u1, curve), _jac_mul(u2, public_key._jac(), curve), curve
    )
    R = Point._from_jacobian(J, curve)
    if R.is_infinity:
        return False
    return R.x % n == sig.r


def _jac_mul_base(k: int, curve: CurveParams):
    R = _INF
    table = curve._g_table
    i = 0
    while k:
        if k & 1:
            R = _jac_add(R, table[i], curve)
        k >>= 1
        i += 1
    return R


# --- Schnorr proof of discrete-log knowledge -------------------------------------


@dataclass(frozen=True)
class DlogProof:
    commitment: Point
    response: int

    def encode(self) -> bytes:
        return self.commitment.encode() + encode_scalar(self.response, self.commitment.curve)

    @classmethod
    def decode(cls, data: bytes, curve: CurveParams = SECP256K1) -> "DlogProof":
        ps = point_size(curve)
        return cls(Point.decode(data[:ps], curve), decode_scalar(data[ps:], curve))


def _challenge(public: Point, commitment: Point, context: bytes) -> int:
    e = sha256(b"dlog", context, public.encode(), commitment.encode())
    return int.from_bytes(e, "big") % public.curve.n


def prove_dlog(secret: int, public: Point, rng: random.Random, context: bytes = b"") -> DlogProof:
    curve = public.curve
    v = random_scalar(rng, curve)
    A = base_mul(v, curve)
    e = _challenge(public, A, context)
    return DlogProof(A, (v + e * secret) % curve.n)


def verify_dlog(public: Point, proof: DlogProof, context: bytes = b"") -> bool:
    curve = public.curve
    if public.is_infinity or proof.commitment.is_infinity:
        return False
    e = _challenge(public, proof.commitment, context)
    return base_mul(proof.response, curve) == proof.commitment + e * public


# --- Paillier ----------------------------------------------------------------------


@dataclass(frozen=True)
class PaillierPublicKey:
    N: int

    @cached_property
    def N2(self) -> int:
        return self.N * self.N

    @property
    def plaintext_bound(self) -> int:
        return self.N

    def encrypt(self, m: int, rng: random.Random) -> "Ciphertext":
        if not 0 <= m < self.N:
            raise CryptoError("plaintext out of range")
        while True:
            r = rng.randrange(1, self.N)
            if gmpy2.gcd(r, self.N) == 1:
                break
        N2 = self.N2
        # g = N + 1, so g^m = 1 + m*N mod N^2
        c = (1 + m * self.N) * gmpy2.powmod(r, self.N, N2) % N2
        return Ciphertext(int(c), self)


@dataclass(frozen=True)
class Ciphertext:
    value: int
    pk: PaillierPublicKey = field(repr=False)

    def __add__(self, other: "Ciphertext") -> "Ciphertext":
        if other.pk != self.pk:
            raise CryptoError("ciphertexts under different keys")
        return Ciphertext(self.value * other.value % self.pk.N2, self.pk)

    def __mul__(self, t: int) -> "Ciphertext":
        return Ciphertext(int(gmpy2.powmod(self.value, t, self.pk.N2)), self.pk)

    __rmul__ = __mul__

    def encode(self) -> bytes:
        size = (self.pk.N2.bit_length() + 7) // 8
        return self.value.to_bytes(size, "big")


@dataclass(frozen=True)
class PaillierKeyPair:
    public: PaillierPublicKey
    lam: int = field(repr=False)
    mu: int = field(repr=False)

    def decrypt(self, c: Ciphertext) -> int:
        if c.pk != self.public:
            raise CryptoError("ciphertext encrypted under another key")
        N = self.public.N
        N2 = self.public.N2
        if not 0 < c.value < N2 or gmpy2.gcd(c.value, N) != 1:
            raise CryptoError("ciphertext out of range")
        u = gmpy2.powmod(c.value, self.lam, N2)
        L = (u - 1) // N
        return int(L * self.mu % N)


def paillier_keygen(bits: int, rng: random.Random) -> PaillierKeyPair:
    half = bits // 2
    while True:
        p = int(gmpy2.next_prime(rng.getrandbits(half) | (3 << (half - 2))))
        q = int(gmpy2.next_prime(rng.getrandbits(half) | (3 << (half - 2))))
        if p != q and gmpy2.gcd(p * q, (p - 1) * (q - 1)) == 1:
            break
    N = p * q
    lam = (p - 1) * (q - 1)
    mu = pow(lam, -1, N)
    return PaillierKeyPair(PaillierPublicKey(N), lam, mu)


def he_bits_for(curve: CurveParams) -> int:
    """Modulus size leaving room for n^3 plaintexts (the signing blinding term)."""
    return max(128, 4 * curve.n.bit_length())


def he_encrypt(pk: PaillierPublicKey, m: int, rng: random.Random) -> Ciphertext:
    return pk.encrypt(m, rng)


def he_add(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    return c1 + c2


def he_scalar_mul(c: Ciphertext, t: int) -> Ciphertext:
    return c * t


def he_decrypt(keys: PaillierKeyPair, c: Ciphertext) -> int:
    return keys.decrypt(c)
