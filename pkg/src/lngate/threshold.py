"""(2,2)-threshold ECDSA between the IoT device and the gateway.

The joint key is shared multiplicatively, x = x1 * x2 mod n.  The device holds
x1 and the Paillier decryption key; the gateway holds x2 and Enc(x1).  Signing
follows the usual two-party shape: nonce commit/reveal with proofs of
discrete-log knowledge, a homomorphic partial signature computed by the gateway,
and a final decryption by the device.

Every protocol is written as a pair of message-driven parties exchanging framed
rounds (see :func:`encode_round`).  The gateway side is a generator that yields
outgoing frames and receives the device's replies, so the same code runs
in-memory (:func:`run_exchange`) or over the simulator's transport.
"""

from __future__ import annotations

import enum
import random
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Generator, Iterable, List, Optional, Tuple

from .crypto import (
    SECP256K1,
    Ciphertext,
    CryptoError,
    CurveParams,
    DlogProof,
    EcdsaSignature,
    MessageDigest,
    PaillierKeyPair,
    PaillierPublicKey,
    Point,
    ZeroSignatureComponent,
    base_mul,
    decode_scalar,
    ecdsa_verify,
    encode_scalar,
    he_bits_for,
    low_s,
    paillier_keygen,
    point_size,
    prove_dlog,
    random_scalar,
    sha256,
    verify_dlog,
)


class ThresholdAbort(Exception):
    """A threshold protocol run stopped without producing its output."""


class PartyRole(enum.Enum):
    DEVICE = "device"
    GATEWAY = "gateway"


class Phase(enum.IntEnum):
    NONCE_COMMIT = 1
    NONCE_REVEAL = 2
    PARTIAL_CIPHERTEXT = 3
    COMPLETE = 4
    ABORTED = 5


# key slots established by one keygen run
FUNDING = 0
COMMITMENT_BASE = 1

MASTER = 0xFFFFFFFF  # derivation index meaning "no tweak"


@dataclass(frozen=True)
class KeyShare:
    role: PartyRole
    share: int
    joint_public_key: Point
    chain_code: bytes
    encrypted_counterparty_material: Optional[Ciphertext] = None
    he_keys: Optional[PaillierKeyPair] = field(default=None, repr=False)
    # set on derived children
    parent_public_key: Optional[Point] = None
    index: Optional[int] = None
    tweak: int = 1

    @property
    def curve(self) -> CurveParams:
        return self.joint_public_key.curve


@dataclass
class SigningSession:
    session_id: bytes
    digest: Optional[MessageDigest] = None
    phase: Phase = Phase.NONCE_COMMIT
    transcript: List[bytes] = field(default_factory=list)
    signature: Optional[EcdsaSignature] = None

    def advance(self, phase: Phase) -> None:
        if phase < self.phase:
            raise ThresholdAbort(f"phase regression {self.phase.name} -> {phase.name}")
        self.phase = phase

    def abort(self) -> None:
        self.phase = Phase.ABORTED


# --- round framing ---------------------------------------------------------------
#
# frame = tag (1 byte) | payload length (4 bytes, big-endian) | payload
# payload fields are fixed-width points/scalars; big integers and ciphertexts carry
# their own 4-byte length prefix; lists carry a 1-byte count.


class Tag(enum.IntEnum):
    KEYGEN_INIT = 0x01
    KEYGEN_COMMIT = 0x02
    KEYGEN_SHARE = 0x03
    KEYGEN_REVEAL = 0x04
    KEYGEN_CONFIRM = 0x05
    SIGN_INIT = 0x10
    SIGN_NONCE_COMMIT = 0x11
    SIGN_NONCE_SHARE = 0x12
    SIGN_NONCE_REVEAL = 0x13
    SIGN_PARTIAL = 0x14
    SIGN_RESULT = 0x15
    DERIVE = 0x20
    DERIVE_ACK = 0x21
    REVEAL_REQUEST = 0x30
    REVEAL_SHARE = 0x31
    ABORT = 0x7F


_LAYOUT: Dict[Tag, Tuple[str, ...]] = {
    Tag.KEYGEN_INIT: ("b16", "u8"),
    Tag.KEYGEN_COMMIT: ("b16", "b32"),
    Tag.KEYGEN_SHARE: ("b16", "point[]", "proof[]", "b32"),
    Tag.KEYGEN_REVEAL: ("b16", "point[]", "proof[]", "b32", "int", "int[]"),
    Tag.KEYGEN_CONFIRM: ("b16", "point[]"),
    Tag.SIGN_INIT: ("b16", "b32", "u8", "u32"),
    Tag.SIGN_NONCE_COMMIT: ("b16", "b32"),
    Tag.SIGN_NONCE_SHARE: ("b16", "point", "proof"),
    Tag.SIGN_NONCE_REVEAL: ("b16", "point", "proof"),
    Tag.SIGN_PARTIAL: ("b16", "int"),
    Tag.SIGN_RESULT: ("b16", "sig"),
    Tag.DERIVE: ("b16", "u8", "u32", "u32"),
    Tag.DERIVE_ACK: ("b16", "point", "scalar?"),
    Tag.REVEAL_REQUEST: ("b16", "u8", "u32"),
    Tag.REVEAL_SHARE: ("b16", "scalar"),
    Tag.ABORT: ("b16", "bytes"),
}

NO_REVEAL = 0xFFFFFFFF


def _enc_int(v: int) -> bytes:
    raw = v.to_bytes(max(1, (v.bit_length() + 7) // 8), "big")
    return struct.pack(">I", len(raw)) + raw


def encode_round(tag: Tag, *fields, curve: CurveParams = SECP256K1) -> bytes:
    layout = _LAYOUT[tag]
    if len(fields) != len(layout):
        raise ValueError(f"{tag.name} takes {len(layout)} fields")
    out = bytearray()
    for kind, value in zip(layout, fields):
        if kind in ("b16", "b32"):
            size = int(kind[1:])
            if len(value) != size:
                raise ValueError(f"{tag.name}: expected {size} bytes")
            out += value
        elif kind == "u8":
            out += struct.pack(">B", value)
        elif kind == "u32":
            out += struct.pack(">I", value)
        elif kind == "point":
            out += value.encode()
        elif kind == "proof":
            out += value.encode()
        elif kind == "scalar":
            out += encode_scalar(value, curve)
        elif kind == "scalar?":
            if value is None:
                out += b"\x00"
            else:
                out += b"\x01" + encode_scalar(value, curve)
        elif kind == "sig":
            out += value.encode(curve)
        elif kind == "int":
            out += _enc_int(value)
        elif kind == "bytes":
            out += struct.pack(">I", len(value)) + value
        elif kind.endswith("[]"):
            item = kind[:-2]
            out += struct.pack(">B", len(value))
            for v in value:
                if item == "int":
                    out += _enc_int(v)
                else:
                    out += v.encode()
        else:  # pragma: no cover
            raise ValueError(kind)
    return struct.pack(">BI", int(tag), len(out)) + bytes(out)


def decode_round(frame: bytes, curve: CurveParams = SECP256K1) -> Tuple[Tag, tuple]:
    if len(frame) < 5:
        raise ThresholdAbort("short frame")
    tag_byte, length = struct.unpack(">BI", frame[:5])
    try:
        tag = Tag(tag_byte)
    except ValueError:
        raise ThresholdAbort(f"unknown round tag {tag_byte:#x}") from None
    body = frame[5:]
    if len(body) != length:
        raise ThresholdAbort("frame length mismatch")
    ps = point_size(curve)
    ss = curve.scalar_size
    pos = 0

    def take(k: int) -> bytes:
        nonlocal pos
        if pos + k > len(body):
            raise ThresholdAbort("truncated frame")
        chunk = body[pos:pos + k]
        pos += k
        return chunk

    def take_int() -> int:
        (k,) = struct.unpack(">I", take(4))
        return int.from_bytes(take(k), "big")

    def take_item(item: str):
        if item == "point":
            return Point.decode(take(ps), curve)
        if item == "proof":
            return DlogProof.decode(take(ps + ss), curve)
        if item == "int":
            return take_int()
        raise ValueError(item)  # pragma: no cover

    fields = []
    try:
        for kind in _LAYOUT[tag]:
            if kind in ("b16", "b32"):
                fields.append(take(int(kind[1:])))
            elif kind == "u8":
                fields.append(take(1)[0])
            elif kind == "u32":
                fields.append(struct.unpack(">I", take(4))[0])
            elif kind in ("point", "proof", "int"):
                fields.append(take_item(kind))
            elif kind == "scalar":
                fields.append(decode_scalar(take(ss), curve))
            elif kind == "scalar?":
                fields.append(decode_scalar(take(ss), curve) if take(1)[0] else None)
            elif kind == "sig":
                fields.append(EcdsaSignature.decode(take(2 * ss), curve))
            elif kind == "bytes":
                (k,) = struct.unpack(">I", take(4))
                fields.append(take(k))
            elif kind.endswith("[]"):
                count = take(1)[0]
                fields.append(tuple(take_item(kind[:-2]) for _ in range(count)))
    except CryptoError as exc:
        raise ThresholdAbort(f"malformed {tag.name}: {exc}") from None
    if pos != len(body):
        raise ThresholdAbort("trailing bytes in frame")
    return tag, tuple(fields)


# --- public derivation -------------------------------------------------------------


def derivation_tweak(parent: Point, chain_code: bytes, index: int) -> int:
    """Public tweak for child ``index``; a zero tweak is re-derived with a counter byte."""
    n = parent.curve.n
    data = parent.encode() + chain_code + struct.pack(">I", index)
    t = int.from_bytes(sha256(data), "big") % n
    counter = 0
    while t == 0:
        counter += 1
        t = int.from_bytes(sha256(data + bytes([counter])), "big") % n
    return t


def derive_child(share: Optional[KeyShare], index: int) -> KeyShare:
    """Local half of 2P-HD: the gateway multiplies its share by the tweak.

    Both parties call this with the same index and end up with the same child
    public key.  The device share is left untouched, so the gateway's Enc(x1)
    stays valid for signing under the child.
    """
    if share is None:
        raise ThresholdAbort("derive_child needs this party's key share")
    if index < 0 or index >= MASTER:
        raise ValueError("derivation index out of range")
    t = derivation_tweak(share.joint_public_key, share.chain_code, index)
    n = share.curve.n
    new_share = share.share * t % n if share.role is PartyRole.GATEWAY else share.share
    return replace(
        share,
        share=new_share,
        joint_public_key=t * share.joint_public_key,
        parent_public_key=share.joint_public_key,
        index=index,
        tweak=share.tweak * t % n,
    )


def _child(share: KeyShare, index: int) -> KeyShare:
    return share if index == MASTER else derive_child(share, index)


# --- the two parties -------------------------------------------------------------------


Exchange = Generator[bytes, Optional[bytes], object]


class DeviceParty:
    """IoT-device side: responds to rounds started by the gateway."""

    role = PartyRole.DEVICE

    def __init__(
        self,
        rng: random.Random,
        curve: CurveParams = SECP256K1,
        he_bits: Optional[int] = None,
        shares: Optional[Dict[int, KeyShare]] = None,
    ):
        self.rng = rng
        self.curve = curve
        self.he_bits = he_bits or he_bits_for(curve)
        self.shares: Dict[int, KeyShare] = dict(shares or {})
        self.online = True
        # highest state index this device has seen derived; reveals must be older
        self.latest_index: int = -1
        self.fixed_nonce: Optional[int] = None
        self._keygen: Dict[bytes, dict] = {}
        self._sign: Dict[bytes, dict] = {}

    def handle(self, frame: bytes) -> Optional[bytes]:
        if not self.online:
            return None
        tag, f = decode_round(frame, self.curve)
        try:
            handler = getattr(self, "_on_" + tag.name.lower())
        except AttributeError:
            raise ThresholdAbort(f"device does not accept {tag.name}") from None
        return handler(*f)

    def _abort(self, sid: bytes, reason: str) -> bytes:
        self._keygen.pop(sid, None)
        self._sign.pop(sid, None)
        return encode_round(Tag.ABORT, sid, reason.encode(), curve=self.curve)

    # keygen
    def _on_keygen_init(self, sid: bytes, count: int) -> bytes:
        c = self.curve
        secrets_ = [random_scalar(self.rng, c) for _ in range(count)]
        points = [base_mul(x, c) for x in secrets_]
        ctx = sid + b"D"
        proofs = [prove_dlog(x, P, self.rng, ctx) for x, P in zip(secrets_, points)]
        cc = self.rng.getrandbits(256).to_bytes(32, "big")
        opening = encode_round(Tag.KEYGEN_SHARE, sid, tuple(points), tuple(proofs), cc, curve=c)
        self._keygen[sid] = dict(secrets=secrets_, points=points, proofs=proofs, cc=cc)
        return encode_round(Tag.KEYGEN_COMMIT, sid, sha256(opening), curve=c)

    def _on_keygen_share(self, sid, points, proofs, cc2) -> bytes:
        st = self._keygen.get(sid)
        if st is None or len(points) != len(st["secrets"]) or len(proofs) != len(points):
            return self._abort(sid, "unexpected keygen share")
        for P, pf in zip(points, proofs):
            if not verify_dlog(P, pf, sid + b"G"):
                return self._abort(sid, "gateway knowledge proof failed")
        he = paillier_keygen(self.he_bits, self.rng)
        encs = [he.public.encrypt(x, self.rng).value for x in st["secrets"]]
        st.update(gw_points=points, cc2=cc2, he=he)
        return encode_round(
            Tag.KEYGEN_REVEAL, sid, tuple(st["points"]), tuple(st["proofs"]), st["cc"],
            he.public.N, tuple(encs), curve=self.curve,
        )

    def _on_keygen_confirm(self, sid, joint_points) -> None:
        st = self._keygen.pop(sid, None)
        if st is None:
            raise ThresholdAbort("confirm for unknown keygen")
        chain_code = sha256(st["cc"], st["cc2"])
        for slot, (x1, Q2, Q) in enumerate(zip(st["secrets"], st["gw_points"], joint_points)):
            if x1 * Q2 != Q:
                raise ThresholdAbort("joint public key mismatch")
            self.shares[slot] = KeyShare(
                PartyRole.DEVICE, x1, Q, chain_code, he_keys=st["he"]
            )
        return None

    # signing
    def _on_sign_init(self, sid, digest, slot, index) -> bytes:
        if slot not in self.shares:
            return self._abort(sid, "unknown key slot")
        share = _child(self.shares[slot], index)
        k1 = self.fixed_nonce or random_scalar(self.rng, self.curve)
        R1 = base_mul(k1, self.curve)
        proof = prove_dlog(k1, R1, self.rng, sid + b"D")
        opening = R1.encode() + proof.encode()
        self._sign[sid] = dict(share=share, digest=MessageDigest(digest), k1=k1, R1=R1, proof=proof)
        return encode_round(Tag.SIGN_NONCE_COMMIT, sid, sha256(opening), curve=self.curve)

    def _on_sign_nonce_share(self, sid, R2, proof) -> bytes:
        st = self._sign.get(sid)
        if st is None:
            return self._abort(sid, "unknown signing session")
        if not verify_dlog(R2, proof, sid + b"G"):
            return self._abort(sid, "gateway nonce proof failed")
        st["R"] = st["k1"] * R2
        return encode_round(Tag.SIGN_NONCE_REVEAL, sid, st["R1"], st["proof"], curve=self.curve)

    def _on_sign_partial(self, sid, c_value) -> bytes:
        st = self._sign.pop(sid, None)
        if st is None:
            return self._abort(sid, "unknown signing session")
        share: KeyShare = st["share"]
        n = self.curve.n
        try:
            s_prime = share.he_keys.decrypt(Ciphertext(c_value, share.he_keys.public)) % n
        except CryptoError as exc:
            return self._abort(sid, f"bad partial ciphertext: {exc}")
        s = pow(st["k1"], -1, n) * s_prime % n
        r = st["R"].x % n
        if r == 0 or s == 0:
            return self._abort(sid, "zero signature component")
        sig = EcdsaSignature(r, low_s(s, self.curve))
        if not ecdsa_verify(share.joint_public_key, st["digest"], sig):
            return self._abort(sid, "partial signature does not verify")
        return encode_round(Tag.SIGN_RESULT, sid, sig, curve=self.curve)

    # derivation and revocation
    def _on_derive(self, sid, slot, index, reveal_index) -> bytes:
        if slot not in self.shares:
            return self._abort(sid, "unknown key slot")
        child = derive_child(self.shares[slot], index)
        revealed = None
        if reveal_index != NO_REVEAL:
            revealed = self._release(slot, reveal_index, newer=index)
            if revealed is None:
                return self._abort(sid, "reveal not authorized")
        self.latest_index = max(self.latest_index, index)
        return encode_round(Tag.DERIVE_ACK, sid, child.joint_public_key, revealed, curve=self.curve)

    def _on_reveal_request(self, sid, slot, index) -> bytes:
        revealed = self._release(slot, index, newer=self.latest_index)
        if revealed is None:
            return self._abort(sid, "reveal not authorized")
        return encode_round(Tag.REVEAL_SHARE, sid, revealed, curve=self.curve)

    def _release(self, slot: int, index: int, newer: int) -> Optional[int]:
        # only states strictly older than one the device has already seen derived
        if slot != COMMITMENT_BASE or slot not in self.shares or index >= newer:
            return None
        return self.shares[slot].share


class GatewayParty:
    """Gateway side: starts every exchange and drives it to completion."""

    role = PartyRole.GATEWAY

    def __init__(
        self,
        rng: random.Random,
        curve: CurveParams = SECP256K1,
        shares: Optional[Dict[int, KeyShare]] = None,
    ):
        self.rng = rng
        self.curve = curve
        self.shares: Dict[int, KeyShare] = dict(shares or {})
        self.fixed_nonce: Optional[int] = None

    def _sid(self) -> bytes:
        return self.rng.getrandbits(128).to_bytes(16, "big")

    def _expect(self, reply: Optional[bytes], tag: Tag, sid: bytes) -> tuple:
        if reply is None:
            raise ThresholdAbort("device did not respond")
        got, f = decode_round(reply, self.curve)
        if got is Tag.ABORT:
            raise ThresholdAbort(f"device aborted: {f[1].decode(errors='replace')}")
        if got is not tag:
            raise ThresholdAbort(f"expected {tag.name}, got {got.name}")
        if f[0] != sid:
            raise ThresholdAbort("session id mismatch")
        return f[1:]

    def keygen(self, count: int = 1) -> Exchange:
        c = self.curve
        sid = self._sid()
        (commitment,) = self._expect(
            (yield encode_round(Tag.KEYGEN_INIT, sid, count, curve=c)), Tag.KEYGEN_COMMIT, sid
        )
        secrets_ = [random_scalar(self.rng, c) for _ in range(count)]
        points = [base_mul(x, c) for x in secrets_]
        proofs = [prove_dlog(x, P, self.rng, sid + b"G") for x, P in zip(secrets_, points)]
        cc2 = self.rng.getrandbits(256).to_bytes(32, "big")
        reply = yield encode_round(Tag.KEYGEN_SHARE, sid, tuple(points), tuple(proofs), cc2, curve=c)
        d_points, d_proofs, cc1, N, encs = self._expect(reply, Tag.KEYGEN_REVEAL, sid)
        opening = encode_round(Tag.KEYGEN_SHARE, sid, d_points, d_proofs, cc1, curve=c)
        if sha256(opening) != commitment:
            raise ThresholdAbort("device commitment opening mismatch")
        if len(d_points) != count or len(encs) != count:
            raise ThresholdAbort("wrong number of device key shares")
        for P, pf in zip(d_points, d_proofs):
            if not verify_dlog(P, pf, sid + b"D"):
                raise ThresholdAbort("device knowledge proof failed")
        pk = PaillierPublicKey(N)
        if N.bit_length() < 3 * c.n.bit_length() + 1:
            raise ThresholdAbort("encryption modulus too small")
        chain_code = sha256(cc1, cc2)
        joint = []
        for slot, (x2, Q1, enc) in enumerate(zip(secrets_, d_points, encs)):
            Q = x2 * Q1
            joint.append(Q)
            self.shares[slot] = KeyShare(
                PartyRole.GATEWAY, x2, Q, chain_code,
                encrypted_counterparty_material=Ciphertext(enc, pk),
            )
        yield encode_round(Tag.KEYGEN_CONFIRM, sid, tuple(joint), curve=c)
        return tuple(joint)

    def sign(
        self,
        digest: MessageDigest,
        slot: int = FUNDING,
        index: int = MASTER,
        session: Optional[SigningSession] = None,
    ) -> Exchange:
        c = self.curve
        n = c.n
        if slot not in self.shares:
            raise ThresholdAbort("no key share for slot")
        share = _child(self.shares[slot], index)
        session = session or SigningSession(self._sid())
        sid = session.session_id
        session.digest = digest
        try:
            out = encode_round(Tag.SIGN_INIT, sid, digest.digest, slot, index, curve=c)
            session.transcript.append(out)
            reply = yield out
            (commitment,) = self._expect(reply, Tag.SIGN_NONCE_COMMIT, sid)
            session.transcript.append(reply)
            session.advance(Phase.NONCE_REVEAL)
            k2 = self.fixed_nonce or random_scalar(self.rng, c)
            R2 = base_mul(k2, c)
            out = encode_round(
                Tag.SIGN_NONCE_SHARE, sid, R2, prove_dlog(k2, R2, self.rng, sid + b"G"), curve=c
            )
            session.transcript.append(out)
            reply = yield out
            R1, proof = self._expect(reply, Tag.SIGN_NONCE_REVEAL, sid)
            session.transcript.append(reply)
            if sha256(R1.encode() + proof.encode()) != commitment:
                raise ThresholdAbort("device nonce commitment mismatch")
            if not verify_dlog(R1, proof, sid + b"D"):
                raise ThresholdAbort("device nonce proof failed")
            session.advance(Phase.PARTIAL_CIPHERTEXT)
            r = (k2 * R1).x % n
            if r == 0:
                raise ZeroSignatureComponent("r == 0")
            k2_inv = pow(k2, -1, n)
            enc_x1 = share.encrypted_counterparty_material
            rho = self.rng.randrange(n)
            blinded = enc_x1.pk.encrypt(rho * n + k2_inv * digest.scalar(c) % n, self.rng)
            partial = blinded + enc_x1 * (k2_inv * r % n * share.share % n)
            out = encode_round(Tag.SIGN_PARTIAL, sid, partial.value, curve=c)
            session.transcript.append(out)
            reply = yield out
            (sig,) = self._expect(reply, Tag.SIGN_RESULT, sid)
            session.transcript.append(reply)
            if sig.r != r or not ecdsa_verify(share.joint_public_key, digest, sig):
                raise ThresholdAbort("final signature does not verify under the joint key")
        except BaseException:
            session.abort()
            raise
        session.advance(Phase.COMPLETE)
        session.signature = sig
        return sig

    def derive(self, slot: int, index: int, reveal_index: Optional[int] = None) -> Exchange:
        """2P-HD for ``index``; optionally also collects the device's release for an older state."""
        sid = self._sid()
        if slot not in self.shares:
            raise ThresholdAbort("no key share for slot")
        child = derive_child(self.shares[slot], index)
        reveal = NO_REVEAL if reveal_index is None else reveal_index
        reply = yield encode_round(Tag.DERIVE, sid, slot, index, reveal, curve=self.curve)
        point, released = self._expect(reply, Tag.DERIVE_ACK, sid)
        if point != child.joint_public_key:
            raise ThresholdAbort("device derived a different child key")
        secret = None
        if reveal_index is not None:
            secret = self._combine(slot, reveal_index, released)
        return child.joint_public_key, secret

    def reveal(self, slot: int, index: int) -> Exchange:
        sid = self._sid()
        reply = yield encode_round(Tag.REVEAL_REQUEST, sid, slot, index, curve=self.curve)
        (released,) = self._expect(reply, Tag.REVEAL_SHARE, sid)
        return self._combine(slot, index, released)

    def _combine(self, slot: int, index: int, device_share: Optional[int]) -> int:
        if device_share is None:
            raise ThresholdAbort("device withheld its share")
        child = derive_child(self.shares[slot], index)
        sigma = device_share * child.share % self.curve.n
        if base_mul(sigma, self.curve) != child.joint_public_key:
            raise ThresholdAbort("revealed secret does not match the commitment point")
        return sigma


# --- in-memory driver ---------------------------------------------------------------------


Tamper = Callable[[str, bytes], Optional[bytes]]


def run_exchange(
    exchange: Exchange,
    device: Optional[DeviceParty],
    tamper: Optional[Tamper] = None,
    log: Optional[List[bytes]] = None,
):
    """Shuttle frames between a gateway exchange and a device until it returns.

    ``tamper`` may rewrite (or drop, by returning None) frames in either
    direction; it receives "to_device" / "to_gateway" and the frame.
    """
    try:
        out = next(exchange)
    except StopIteration as stop:
        return stop.value
    while True:
        if tamper:
            out = tamper("to_device", out)
        if log is not None and out is not None:
            log.append(out)
        reply = device.handle(out) if (device is not None and out is not None) else None
        if tamper and reply is not None:
            reply = tamper("to_gateway", reply)
        if log is not None and reply is not None:
            log.append(reply)
        try:
            out = exchange.send(reply)
        except StopIteration as stop:
            return stop.value


def _parties_for(
    device_share: Optional[KeyShare], gateway_share: Optional[KeyShare], slot: int,
    rng_device: random.Random, rng_gateway: random.Random,
) -> Tuple[Optional[DeviceParty], GatewayParty]:
    curve = (gateway_share or device_share).curve if (gateway_share or device_share) else SECP256K1
    device = None
    if device_share is not None:
        device = DeviceParty(rng_device, curve, shares={slot: device_share})
    gateway = GatewayParty(rng_gateway, curve, shares={slot: gateway_share} if gateway_share else {})
    return device, gateway


def tkeygen(
    rng_device: Optional[random.Random],
    rng_gateway: Optional[random.Random],
    curve: CurveParams = SECP256K1,
    count: int = 1,
    he_bits: Optional[int] = None,
):
    """Run a keygen session; returns (device_share, gateway_share, joint_key).

    With ``count`` > 1 each element of the triple is a tuple, one per key slot;
    all slots come out of the same protocol run and share one Paillier key.
    """
    if rng_device is None or rng_gateway is None:
        raise ThresholdAbort("keygen needs both parties")
    device = DeviceParty(rng_device, curve, he_bits)
    gateway = GatewayParty(rng_gateway, curve)
    joint = run_exchange(gateway.keygen(count), device)
    if count == 1:
        return device.shares[0], gateway.shares[0], joint[0]
    return (
        tuple(device.shares[i] for i in range(count)),
        tuple(gateway.shares[i] for i in range(count)),
        joint,
    )


def new_session(rng: random.Random) -> SigningSession:
    return SigningSession(rng.getrandbits(128).to_bytes(16, "big"))


def tsign(
    session: SigningSession,
    device_share: Optional[KeyShare],
    gateway_share: Optional[KeyShare],
    digest: MessageDigest,
    rng_device: Optional[random.Random] = None,
    rng_gateway: Optional[random.Random] = None,
    nonces: Optional[Tuple[int, int]] = None,
    tamper: Optional[Tamper] = None,
) -> EcdsaSignature:
    """Two-party signature on ``digest`` under the shares' joint (or child) key.

    Raises :class:`ThresholdAbort` with ``session.phase == ABORTED`` if either
    share is missing or any check fails.  A zero r or s restarts with fresh
    nonces unless ``nonces`` pins them.
    """
    if session.phase is not Phase.NONCE_COMMIT or session.transcript:
        raise ThresholdAbort("signing session already used")
    if gateway_share is None:
        session.abort()
        raise ThresholdAbort("gateway share absent")
    rng_device = rng_device or random.Random()
    rng_gateway = rng_gateway or random.Random()
    # a derived share is signed as-is: the tweak is already folded into it
    device, gateway = _parties_for(device_share, gateway_share, FUNDING, rng_device, rng_gateway)
    if nonces:
        if device is not None:
            device.fixed_nonce = nonces[0]
        gateway.fixed_nonce = nonces[1]
    while True:
        try:
            return run_exchange(gateway.sign(digest, FUNDING, MASTER, session), device, tamper)
        except ZeroSignatureComponent:
            if nonces:
                raise
            session.phase = Phase.NONCE_COMMIT
            session.transcript.clear()
        except ThresholdAbort:
            session.abort()
            raise


def commitment_point(shares: Iterable[Optional[KeyShare]], state_index: int) -> Point:
    """Child public key for ``state_index``, agreed by both parties."""
    shares = list(shares)
    if len(shares) != 2 or any(s is None for s in shares):
        raise ThresholdAbort("commitment point needs both parties' shares")
    points = {derive_child(s, state_index).joint_public_key for s in shares}
    if len(points) != 1:
        raise ThresholdAbort("parties disagree on the commitment point")
    return points.pop()


def reveal_revocation_secret(
    device_share: Optional[KeyShare],
    gateway_share: Optional[KeyShare],
    state_index: int,
    device_authorizes: bool = True,
    gateway_authorizes: bool = True,
) -> int:
    """Joint release of the private key behind ``commitment_point(state_index)``."""
    if device_share is None or not device_authorizes:
        raise ThresholdAbort("device did not authorize the reveal")
    if gateway_share is None or not gateway_authorizes:
        raise ThresholdAbort("gateway did not authorize the reveal")
    curve = gateway_share.curve
    device = DeviceParty(random.Random(), curve, shares={COMMITMENT_BASE: device_share})
    device.latest_index = state_index + 1
    gateway = GatewayParty(random.Random(), curve, shares={COMMITMENT_BASE: gateway_share})
    return run_exchange(gateway.reveal(COMMITMENT_BASE, state_index), device)
