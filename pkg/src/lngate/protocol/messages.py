"""Protocol messages and their wire formats.

Two families travel in the system:

* IoT control messages between the device and the gateway.  Each is a fixed
  57-byte frame: 1-byte type, 24-byte AES-256-CTR body, 32-byte HMAC-SHA256 tag
  over type and body.
* Peer messages between the gateway and the bridge, serialized as
  type/length/value records.  Every peer message carries the channel id and the
  sender's sequence number.

Threshold round frames (see :mod:`lngate.threshold`) ride on the device link
wrapped in :class:`ThresholdFrame`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import hmac
import struct
from dataclasses import dataclass
from typing import ClassVar, Dict, Tuple, Type

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from ..crypto import SECP256K1, EcdsaSignature, Point


class FramingError(ValueError):
    pass


def node_id(name: str) -> bytes:
    """8-byte short id for a named node."""
    return hashlib.sha256(name.encode()).digest()[:8]


# --- IoT control messages ---------------------------------------------------------------


@dataclass(frozen=True)
class ControlMessage:
    TYPE: ClassVar[int] = 0

    @property
    def kind(self) -> str:
        return type(self).__name__

    def body(self) -> bytes:
        return b""

    @classmethod
    def from_body(cls, body: bytes) -> "ControlMessage":
        return cls()


@dataclass(frozen=True)
class OpenChannelRequest(ControlMessage):
    TYPE: ClassVar[int] = 1
    capacity: int = 0
    bridge_node_id: bytes = b"\x00" * 8

    def body(self) -> bytes:
        return struct.pack(">Q", self.capacity) + self.bridge_node_id

    @classmethod
    def from_body(cls, body: bytes) -> "OpenChannelRequest":
        return cls(struct.unpack(">Q", body[:8])[0], body[8:16])


@dataclass(frozen=True)
class SendPayment(ControlMessage):
    TYPE: ClassVar[int] = 2
    amount: int = 0
    destination_node_id: bytes = b"\x00" * 8
    parts: int = 1

    def body(self) -> bytes:
        return struct.pack(">Q", self.amount) + self.destination_node_id + bytes([self.parts])

    @classmethod
    def from_body(cls, body: bytes) -> "SendPayment":
        return cls(struct.unpack(">Q", body[:8])[0], body[8:16], body[16])


@dataclass(frozen=True)
class ChannelClosingRequest(ControlMessage):
    TYPE: ClassVar[int] = 3
    unilateral: bool = False

    def body(self) -> bytes:
        return bytes([int(self.unilateral)])

    @classmethod
    def from_body(cls, body: bytes) -> "ChannelClosingRequest":
        return cls(bool(body[0]))


@dataclass(frozen=True)
class PaymentSendSuccess(ControlMessage):
    TYPE: ClassVar[int] = 4


@dataclass(frozen=True)
class PaymentReceiveSuccess(ControlMessage):
    TYPE: ClassVar[int] = 5
    amount: int = 0

    def body(self) -> bytes:
        return struct.pack(">Q", self.amount)

    @classmethod
    def from_body(cls, body: bytes) -> "PaymentReceiveSuccess":
        return cls(struct.unpack(">Q", body[:8])[0])


@dataclass(frozen=True)
class PaymentFailed(ControlMessage):
    TYPE: ClassVar[int] = 6
    reason: int = 0

    def body(self) -> bytes:
        return bytes([self.reason])

    @classmethod
    def from_body(cls, body: bytes) -> "PaymentFailed":
        return cls(body[0])


CONTROL_TYPES: Dict[int, Type[ControlMessage]] = {
    c.TYPE: c for c in (
        OpenChannelRequest, SendPayment, ChannelClosingRequest,
        PaymentSendSuccess, PaymentReceiveSuccess, PaymentFailed,
    )
}

CONTROL_BODY = 24
CONTROL_TAG = 32
CONTROL_FRAME = 1 + CONTROL_BODY + CONTROL_TAG


class ControlCodec:
    """Encrypt-then-MAC framing for one direction of the device link.

    The CTR counter block is (direction, sequence number), so both ends derive
    it without sending a nonce; a replayed or reordered frame fails the tag.
    """

    def __init__(self, key_material: bytes, direction: int):
        self.enc_key = hashlib.sha256(b"enc" + key_material).digest()
        self.mac_key = hashlib.sha256(b"mac" + key_material).digest()
        self.direction = direction
        self.sent = 0
        self.received = 0

    def _ctr(self, seq: int) -> Cipher:
        iv = bytes([self.direction]) + struct.pack(">Q", seq) + b"\x00" * 7
        return Cipher(algorithms.AES(self.enc_key), modes.CTR(iv))

    def seal(self, msg: ControlMessage) -> bytes:
        seq = self.sent
        self.sent += 1
        plain = struct.pack(">I", seq) + msg.body()
        if len(plain) > CONTROL_BODY:
            raise FramingError("control body too long")
        plain = plain.ljust(CONTROL_BODY, b"\x00")
        enc = self._ctr(seq).encryptor()
        body = enc.update(plain) + enc.finalize()
        head = bytes([msg.TYPE])
        tag = hmac.new(self.mac_key, head + body, hashlib.sha256).digest()
        return head + body + tag

    def open(self, frame: bytes) -> ControlMessage:
        if len(frame) != CONTROL_FRAME:
            raise FramingError(f"control frame must be {CONTROL_FRAME} bytes")
        head, body, tag = frame[:1], frame[1:1 + CONTROL_BODY], frame[1 + CONTROL_BODY:]
        expected = hmac.new(self.mac_key, head + body, hashlib.sha256).digest()
        if not hmac.compare_digest(tag, expected):
            raise FramingError("control frame authentication failed")
        cls = CONTROL_TYPES.get(head[0])
        if cls is None:
            raise FramingError(f"unknown control type {head[0]}")
        seq = self.received
        dec = self._ctr(seq).decryptor()
        plain = dec.update(body) + dec.finalize()
        if struct.unpack(">I", plain[:4])[0] != seq:
            raise FramingError("control sequence mismatch")
        self.received += 1
        return cls.from_body(plain[4:])


@dataclass(frozen=True)
class ThresholdFrame:
    """One threshold round frame on the device link."""

    frame: bytes
    op: str = ""
    opening: bool = False  # first frame of a threshold operation

    @property
    def kind(self) -> str:
        return "ThresholdFrame"


# --- peer messages ------------------------------------------------------------------------
#
# record = type (2 bytes) | length (2 bytes) | channel id (32) | seq (4) | fields
# fields = field number (1) | length (2) | value, in declaration order


@dataclass(frozen=True)
class PeerMessage:
    TYPE: ClassVar[int] = 0
    FIELDS: ClassVar[Tuple[Tuple[str, str], ...]] = ()

    channel_id: bytes = b"\x00" * 32
    seq: int = 0

    @property
    def kind(self) -> str:
        return _PEER_NAMES[type(self)]


def _enc_value(kind: str, v) -> bytes:
    if kind == "u64":
        return struct.pack(">Q", v)
    if kind == "u32":
        return struct.pack(">I", v)
    if kind == "bytes":
        return bytes(v)
    if kind == "point":
        return v.encode()
    if kind == "sig":
        return v.encode()
    if kind == "sigs":
        return b"".join(s.encode() for s in v)
    if kind == "scalar":
        return v.to_bytes(32, "big")
    raise ValueError(kind)  # pragma: no cover


def _dec_value(kind: str, data: bytes, curve):
    if kind == "u64":
        return struct.unpack(">Q", data)[0]
    if kind == "u32":
        return struct.unpack(">I", data)[0]
    if kind == "bytes":
        return data
    if kind == "point":
        return Point.decode(data, curve)
    if kind == "sig":
        return EcdsaSignature.decode(data, curve)
    if kind == "sigs":
        return tuple(EcdsaSignature.decode(data[i:i + 64], curve) for i in range(0, len(data), 64))
    if kind == "scalar":
        return int.from_bytes(data, "big")
    raise ValueError(kind)  # pragma: no cover


def encode_peer(msg: PeerMessage) -> bytes:
    body = bytearray(msg.channel_id + struct.pack(">I", msg.seq))
    for num, (name, kind) in enumerate(msg.FIELDS):
        value = getattr(msg, name)
        if value is None:
            continue
        raw = _enc_value(kind, value)
        body += struct.pack(">BH", num, len(raw)) + raw
    if len(body) > 0xFFFF:
        raise FramingError("peer message too long")
    return struct.pack(">HH", msg.TYPE, len(body)) + bytes(body)


def decode_peer(data: bytes, curve=SECP256K1) -> PeerMessage:
    if len(data) < 4:
        raise FramingError("short peer record")
    mtype, length = struct.unpack(">HH", data[:4])
    body = data[4:]
    if len(body) != length:
        raise FramingError("peer record length mismatch")
    cls = _PEER_TYPES.get(mtype)
    if cls is None:
        raise FramingError(f"unknown peer message type {mtype}")
    kw = {"channel_id": body[:32], "seq": struct.unpack(">I", body[32:36])[0]}
    pos = 36
    while pos < len(body):
        num, flen = struct.unpack(">BH", body[pos:pos + 3])
        pos += 3
        if num >= len(cls.FIELDS):
            raise FramingError(f"unknown field {num} in {cls.__name__}")
        name, kind = cls.FIELDS[num]
        kw[name] = _dec_value(kind, body[pos:pos + flen], curve)
        pos += flen
    return cls(**kw)


def _peer(type_id: int, name: str, *fields: Tuple[str, str, object]):
    """Declare a peer message class with (name, kind, default) fields."""
    ns = {
        "TYPE": type_id,
        "FIELDS": tuple((f, k) for f, k, _ in fields),
        "__annotations__": {f: object for f, _, _ in fields},
    }
    for f, _, default in fields:
        ns[f] = default
    cls = type(name.title().replace("_", ""), (PeerMessage,), ns)
    cls = dataclass(frozen=True)(cls)
    _PEER_TYPES[type_id] = cls
    _PEER_NAMES[cls] = name
    return cls


_PEER_TYPES: Dict[int, type] = {}
_PEER_NAMES: Dict[type, str] = {}

OpenChannel = _peer(
    32, "open_channel",
    ("capacity", "u64", 0), ("funding_pubkey", "point", None),
    ("payment_basepoint", "point", None), ("delayed_basepoint", "point", None),
    ("revocation_basepoint", "point", None), ("iot_pubkey", "point", None),
    ("to_self_delay", "u32", 0), ("htlc_timeout", "u32", 0),
)
AcceptChannel = _peer(
    33, "accept_channel",
    ("funding_pubkey", "point", None), ("payment_basepoint", "point", None),
    ("delayed_basepoint", "point", None), ("revocation_basepoint", "point", None),
    ("first_per_commitment_point", "point", None), ("second_per_commitment_point", "point", None),
)
FundingCreated = _peer(
    34, "funding_created",
    ("funding_txid", "bytes", b""), ("funding_output_index", "u32", 0),
    ("signature", "sig", None), ("next_per_commitment_point", "point", None),
)
FundingSigned = _peer(35, "funding_signed", ("signature", "sig", None))
FundingLocked = _peer(36, "funding_locked")
Shutdown = _peer(38, "shutdown", ("fee_payer", "u32", 0))
ClosingSigned = _peer(39, "closing_signed", ("fee_offer", "u64", 0), ("signature", "sig", None))
UpdateAddHtlc = _peer(
    128, "update_add_htlc",
    ("htlc_id", "u64", 0), ("amount", "u64", 0), ("payment_hash", "bytes", b""),
    ("expiry", "u32", 0), ("routed_payload", "bytes", b""), ("service_fee", "u64", 0),
)
UpdateFulfillHtlc = _peer(130, "update_fulfill_htlc", ("htlc_id", "u64", 0), ("preimage", "bytes", b""))
UpdateFailHtlc = _peer(131, "update_fail_htlc", ("htlc_id", "u64", 0), ("reason", "bytes", b""))
CommitmentSigned = _peer(
    132, "commitment_signed", ("signature", "sig", None), ("htlc_signatures", "sigs", ()),
)
RevokeAndAck = _peer(
    133, "revoke_and_ack",
    ("per_commitment_secret", "scalar", None), ("next_per_commitment_point", "point", None),
)
PeerError = _peer(17, "error", ("data", "bytes", b""))


def routed_payload(next_hop: bytes, amount: int, payment_hash: bytes) -> bytes:
    """Cleartext stand-in for the onion packet: next hop, amount, payment hash."""
    return next_hop + struct.pack(">Q", amount) + payment_hash


def parse_routed_payload(data: bytes) -> Tuple[bytes, int, bytes]:
    if len(data) != 48:
        raise FramingError("routed payload must be 48 bytes")
    return data[:8], struct.unpack(">Q", data[8:16])[0], data[16:]


def peer_message_types() -> Dict[str, type]:
    return {name: cls for cls, name in _PEER_NAMES.items()}


def message_kind(msg) -> str:
    return msg.kind


def with_seq(msg: PeerMessage, channel_id: bytes, seq: int) -> PeerMessage:
    return dataclasses.replace(msg, channel_id=channel_id, seq=seq)


__all__ = [
    "AcceptChannel", "ChannelClosingRequest", "ClosingSigned", "CommitmentSigned",
    "ControlCodec", "ControlMessage", "FramingError", "FundingCreated", "FundingLocked",
    "FundingSigned", "OpenChannel", "OpenChannelRequest", "PaymentFailed",
    "PaymentReceiveSuccess", "PaymentSendSuccess", "PeerError", "PeerMessage",
    "RevokeAndAck", "SendPayment", "Shutdown", "ThresholdFrame", "UpdateAddHtlc",
    "UpdateFailHtlc", "UpdateFulfillHtlc", "decode_peer", "encode_peer", "node_id",
    "parse_routed_payload", "routed_payload", "with_seq",
]
