"""Tri-party channel state and the transactions built from it.

Balances are (x, y, z) for the IoT device, the bridge node and the gateway.  Only
the gateway and the bridge hold commitment versions; the IoT balance appears in
both as an output nobody can contest.  A state index advances once per
commitment round (add, fulfill or fail).
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

from .crypto import (
    SECP256K1,
    EcdsaSignature,
    Point,
    base_mul,
    ecdsa_sign,
    random_scalar,
    sha256,
)
from .ledger import (
    DEFAULT_HTLC_TIMEOUT,
    DEFAULT_TO_SELF_DELAY,
    HtlcOffered,
    HtlcReceived,
    Multisig2of2,
    Outpoint,
    Path,
    PayToKey,
    PayToKeyUnconditional,
    ToSelfDelayed,
    Transaction,
    TxIn,
    TxOut,
    Witness,
)

SAT_PER_BTC = 100_000_000
DEFAULT_OPEN_FEE = 222
DEFAULT_CLOSE_FEE = 183


class ChannelError(Exception):
    pass


class InsufficientFunds(ChannelError):
    pass


class InsufficientBalance(ChannelError):
    pass


class FeeExceedsAmount(ChannelError):
    pass


class UnknownHash(ChannelError):
    pass


class NotExpired(ChannelError):
    pass


class RevokedState(ChannelError):
    pass


class CannotRevokeCurrent(ChannelError):
    pass


class PendingHtlcs(ChannelError):
    pass


class Party(enum.Enum):
    IOT = "iot"
    GATEWAY = "gateway"
    BRIDGE = "bridge"


class Holder(enum.IntEnum):
    GATEWAY = 0
    BRIDGE = 1

    @property
    def counterparty(self) -> "Holder":
        return Holder.BRIDGE if self is Holder.GATEWAY else Holder.GATEWAY


class Direction(enum.Enum):
    OFFERED = "offered"  # IoT -> bridge
    RECEIVED = "received"  # bridge -> IoT


@dataclass(frozen=True)
class ChannelParams:
    capacity: int
    to_self_delay: int = DEFAULT_TO_SELF_DELAY
    htlc_timeout: int = DEFAULT_HTLC_TIMEOUT
    service_fee_rate: Fraction = Fraction(1, 10)
    base_fee: int = 0
    fee_per_sat: Fraction = Fraction(0)
    funding_depth: int = 3
    open_fee: int = DEFAULT_OPEN_FEE
    close_fee: int = DEFAULT_CLOSE_FEE
    commitment_fee: int = 0
    sweep_fee: int = 0

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError("capacity must be positive")
        if self.service_fee_rate < 0 or self.fee_per_sat < 0 or self.base_fee < 0:
            raise ValueError("fee rates must be non-negative")
        if self.funding_depth < 1 or self.to_self_delay < 1 or self.htlc_timeout < 1:
            raise ValueError("depths and delays must be at least one block")
        for name in ("open_fee", "close_fee", "commitment_fee", "sweep_fee"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def service_fee(amount: int, params: ChannelParams) -> int:
    return int(amount * params.service_fee_rate)


def bridge_fee(amount: int, params: ChannelParams) -> int:
    return params.base_fee + int(amount * params.fee_per_sat)


@dataclass(frozen=True)
class Htlc:
    htlc_id: int
    amount: int
    payment_hash: bytes
    direction: Direction
    expiry: int  # absolute height
    service_fee: int = 0


@dataclass(frozen=True)
class CommitmentState:
    index: int
    x: int
    y: int
    z: int
    htlcs: Tuple[Htlc, ...] = ()
    gateway_point: Optional[Point] = None
    bridge_point: Optional[Point] = None
    revoked: bool = False
    next_htlc_id: int = 0

    def __post_init__(self):
        if min(self.x, self.y, self.z) < 0:
            raise ValueError("balances must be non-negative")

    @property
    def in_flight(self) -> int:
        return sum(h.amount for h in self.htlcs)

    @property
    def total(self) -> int:
        return self.x + self.y + self.z + self.in_flight

    def point(self, holder: Holder) -> Optional[Point]:
        return self.gateway_point if holder is Holder.GATEWAY else self.bridge_point

    def find(self, payment_hash: bytes) -> Htlc:
        for h in self.htlcs:
            if h.payment_hash == payment_hash:
                return h
        raise UnknownHash(payment_hash.hex())

    def describe(self) -> str:
        htlcs = ";".join(
            f"{h.direction.value}:{h.amount}:{h.payment_hash.hex()[:12]}:exp{h.expiry}"
            for h in self.htlcs
        )
        return (
            f"index={self.index} x={self.x} y={self.y} z={self.z} "
            f"htlcs=[{htlcs}] revoked={int(self.revoked)}"
        )


def initial_state(params: ChannelParams) -> CommitmentState:
    return CommitmentState(0, params.capacity, 0, 0)


def _next(state: CommitmentState, **changes) -> CommitmentState:
    return replace(
        state, index=state.index + 1, gateway_point=None, bridge_point=None,
        revoked=False, **changes,
    )


def apply_send(
    state: CommitmentState, amount: int, params: ChannelParams, payment_hash: bytes, height: int
) -> CommitmentState:
    """IoT pays ``amount``; the gateway keeps its service fee and offers the rest."""
    if amount <= 0:
        raise ValueError("amount must be positive")
    if state.x < amount:
        raise InsufficientBalance(f"x={state.x} < {amount}")
    fee = service_fee(amount, params)
    if amount <= fee:
        raise FeeExceedsAmount(f"fee {fee} >= amount {amount}")
    return apply_offered(state, amount - fee, fee, payment_hash, height + params.htlc_timeout)


def apply_offered(
    state: CommitmentState, htlc_amount: int, fee: int, payment_hash: bytes, expiry: int
) -> CommitmentState:
    """Offered HTLC with an explicit service fee, as the bridge sees it on the wire."""
    if htlc_amount <= 0 or fee < 0:
        raise ValueError("HTLC amount must be positive and fee non-negative")
    if state.x < htlc_amount + fee:
        raise InsufficientBalance(f"x={state.x} < {htlc_amount + fee}")
    htlc = Htlc(state.next_htlc_id, htlc_amount, payment_hash, Direction.OFFERED, expiry, fee)
    return _next(
        state, x=state.x - htlc_amount - fee, z=state.z + fee, htlcs=state.htlcs + (htlc,),
        next_htlc_id=state.next_htlc_id + 1,
    )


def apply_receive(
    state: CommitmentState, amount: int, params: ChannelParams, payment_hash: bytes, height: int
) -> CommitmentState:
    """Bridge offers ``amount`` toward the IoT; no service fee on receives."""
    if amount <= 0:
        raise ValueError("amount must be positive")
    if state.y < amount:
        raise InsufficientBalance(f"bridge side y={state.y} < {amount}")
    htlc = Htlc(
        state.next_htlc_id, amount, payment_hash, Direction.RECEIVED,
        height + params.htlc_timeout,
    )
    return _next(
        state, y=state.y - amount, htlcs=state.htlcs + (htlc,),
        next_htlc_id=state.next_htlc_id + 1,
    )


def fulfill_htlc(state: CommitmentState, preimage: bytes) -> CommitmentState:
    htlc = state.find(sha256(preimage))
    rest = tuple(h for h in state.htlcs if h is not htlc)
    if htlc.direction is Direction.OFFERED:
        return _next(state, y=state.y + htlc.amount, htlcs=rest)
    return _next(state, x=state.x + htlc.amount, htlcs=rest)


def fail_htlc(
    state: CommitmentState, payment_hash: bytes, height: int, downstream_failed: bool = False
) -> CommitmentState:
    """Return an HTLC to its offerer (the service fee stays with the gateway).

    Without ``downstream_failed`` the HTLC must have expired.
    """
    htlc = state.find(payment_hash)
    if height < htlc.expiry and not downstream_failed:
        raise NotExpired(f"height {height} < expiry {htlc.expiry}")
    rest = tuple(h for h in state.htlcs if h is not htlc)
    if htlc.direction is Direction.OFFERED:
        return _next(state, x=state.x + htlc.amount, htlcs=rest)
    return _next(state, y=state.y + htlc.amount, htlcs=rest)


# --- keys ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ChannelKeys:
    """Public keys of a channel; private halves stay with their roles."""

    funding_joint: Point
    bridge_funding: Point
    iot: Point
    gateway_payment: Point
    gateway_delayed: Point
    gateway_revocation_base: Point
    bridge_payment: Point
    bridge_delayed: Point
    bridge_revocation_base: Point

    def payment(self, holder: Holder) -> Point:
        return self.gateway_payment if holder is Holder.GATEWAY else self.bridge_payment

    def delayed(self, holder: Holder) -> Point:
        return self.gateway_delayed if holder is Holder.GATEWAY else self.bridge_delayed

    def revocation_base(self, holder: Holder) -> Point:
        return (
            self.gateway_revocation_base if holder is Holder.GATEWAY
            else self.bridge_revocation_base
        )


def _rev_factors(base: Point, per_commitment: Point) -> Tuple[int, int]:
    n = base.curve.n
    b = base.encode()
    p = per_commitment.encode()
    return (
        int.from_bytes(sha256(b, p), "big") % n,
        int.from_bytes(sha256(p, b), "big") % n,
    )


def revocation_pubkey(base: Point, per_commitment: Point) -> Point:
    """Key only the holder of the base secret *and* the per-commitment secret can use."""
    f1, f2 = _rev_factors(base, per_commitment)
    return f1 * base + f2 * per_commitment


def revocation_privkey(base_secret: int, per_commitment_secret: int, curve=SECP256K1) -> int:
    base = base_mul(base_secret, curve)
    point = base_mul(per_commitment_secret, curve)
    f1, f2 = _rev_factors(base, point)
    return (base_secret * f1 + per_commitment_secret * f2) % curve.n


# --- transactions ------------------------------------------------------------------------


def build_funding_tx(
    iot_utxo: Tuple[Outpoint, int],
    capacity: int,
    joint_funding_key: Point,
    bridge_funding_key: Point,
    change_key: Point,
    fee: int = DEFAULT_OPEN_FEE,
) -> Transaction:
    outpoint, value = iot_utxo
    if value < capacity + fee:
        raise InsufficientFunds(f"utxo {value} < capacity {capacity} + fee {fee}")
    outputs = [TxOut(capacity, Multisig2of2(joint_funding_key, bridge_funding_key))]
    change = value - capacity - fee
    if change:
        outputs.append(TxOut(change, PayToKey(change_key)))
    return Transaction((TxIn(outpoint),), tuple(outputs), fee)


def commitment_locktime(index: int, holder: Holder) -> int:
    return 0x20000000 | (index << 1) | int(holder)


def build_commitment_tx(
    state: CommitmentState,
    holder: Holder,
    keys: ChannelKeys,
    params: ChannelParams,
    funding: Outpoint,
    allow_revoked: bool = False,
) -> Transaction:
    """Holder's version of ``state``.  Zero-value outputs are left out.

    Output order: IoT, holder's delayed output, counterparty, HTLCs by id.
    """
    if state.revoked and not allow_revoked:
        raise RevokedState(f"state {state.index} is revoked")
    own, other = (state.z, state.y) if holder is Holder.GATEWAY else (state.y, state.z)
    outputs: List[TxOut] = []
    if state.x < params.commitment_fee:
        raise InsufficientBalance("IoT balance does not cover the commitment fee")
    iot_amount = state.x - params.commitment_fee
    if iot_amount:
        outputs.append(TxOut(iot_amount, PayToKeyUnconditional(keys.iot)))
    if own:
        point = state.point(holder)
        if point is None:
            raise ChannelError(f"no commitment point for {holder.name} state {state.index}")
        rev = revocation_pubkey(keys.revocation_base(holder.counterparty), point)
        outputs.append(TxOut(own, ToSelfDelayed(keys.delayed(holder), rev, params.to_self_delay)))
    if other:
        outputs.append(TxOut(other, PayToKey(keys.payment(holder.counterparty))))
    for h in sorted(state.htlcs, key=lambda h: h.htlc_id):
        if h.direction is Direction.OFFERED:
            cond = HtlcOffered(h.payment_hash, keys.bridge_payment, keys.iot, params.htlc_timeout)
        else:
            cond = HtlcReceived(h.payment_hash, keys.iot, keys.bridge_payment, params.htlc_timeout)
        outputs.append(TxOut(h.amount, cond))
    return Transaction(
        (TxIn(funding),), tuple(outputs), params.commitment_fee, commitment_locktime(state.index, holder)
    )


def build_closing_tx(
    state: CommitmentState,
    negotiated_fee: int,
    requester: Party,
    keys: ChannelKeys,
    funding: Outpoint,
) -> Transaction:
    if state.htlcs:
        raise PendingHtlcs(f"{len(state.htlcs)} pending")
    balances = {Party.IOT: state.x, Party.BRIDGE: state.y, Party.GATEWAY: state.z}
    if balances[requester] < negotiated_fee:
        raise InsufficientBalance(f"{requester.value} cannot cover closing fee {negotiated_fee}")
    balances[requester] -= negotiated_fee
    outputs = []
    if balances[Party.IOT]:
        outputs.append(TxOut(balances[Party.IOT], PayToKeyUnconditional(keys.iot)))
    if balances[Party.BRIDGE]:
        outputs.append(TxOut(balances[Party.BRIDGE], PayToKey(keys.bridge_payment)))
    if balances[Party.GATEWAY]:
        outputs.append(TxOut(balances[Party.GATEWAY], PayToKey(keys.gateway_payment)))
    return Transaction((TxIn(funding),), tuple(outputs), negotiated_fee)


def build_sweep_tx(source: Transaction, index: int, dest: Point, fee: int = 0) -> Transaction:
    amount = source.outputs[index].amount
    if amount <= fee:
        raise InsufficientBalance("output does not cover the sweep fee")
    return Transaction((TxIn(source.outpoint(index)),), (TxOut(amount - fee, PayToKey(dest)),), fee)


def sign_digest(private_key: int, tx: Transaction, rng: random.Random, curve=SECP256K1) -> EcdsaSignature:
    """Single-key signature over a transaction's sighash."""
    while True:
        try:
            return ecdsa_sign(private_key, tx.sighash, random_scalar(rng, curve), curve)
        except ValueError:
            continue


def sign_single(tx: Transaction, path: Path, private_key: int, rng: random.Random,
                preimage: Optional[bytes] = None) -> Transaction:
    """Attach a one-signature witness to every input of ``tx``."""
    sig = sign_digest(private_key, tx, rng)
    return tx.with_witnesses([Witness(path, (sig,), preimage)] * len(tx.inputs))


def find_output(tx: Transaction, kind: type, key: Optional[Point] = None) -> Optional[int]:
    for i, out in enumerate(tx.outputs):
        if isinstance(out.condition, kind):
            if key is None or key in vars(out.condition).values():
                return i
    return None


# --- stateful view ---------------------------------------------------------------------------


@dataclass
class RevocationRecord:
    holder: Holder
    index: int
    secret: int


@dataclass
class Channel:
    """One role's view of a channel: state history plus revocation bookkeeping."""

    params: ChannelParams
    keys: Optional[ChannelKeys] = None
    funding: Optional[Outpoint] = None
    states: Dict[int, CommitmentState] = field(default_factory=dict)
    revocations: Dict[Tuple[Holder, int], RevocationRecord] = field(default_factory=dict)
    latest: int = 0

    def __post_init__(self):
        if not self.states:
            self.states[0] = initial_state(self.params)

    @property
    def current(self) -> CommitmentState:
        return self.states[self.latest]

    def advance(self, new: CommitmentState) -> CommitmentState:
        if new.index != self.latest + 1:
            raise ChannelError(f"expected state {self.latest + 1}, got {new.index}")
        if new.total != self.params.capacity:
            raise ChannelError("state breaks capacity conservation")
        self.states[new.index] = new
        self.latest = new.index
        return new

    def set_point(self, holder: Holder, index: int, point: Point) -> None:
        st = self.states[index]
        attr = "gateway_point" if holder is Holder.GATEWAY else "bridge_point"
        self.states[index] = replace(st, **{attr: point})

    def revoke_state(self, holder: Holder, index: int, secret: int) -> RevocationRecord:
        if index >= self.latest:
            raise CannotRevokeCurrent(f"state {index} is not older than {self.latest}")
        point = self.states[index].point(holder)
        if point is not None and base_mul(secret, point.curve) != point:
            raise ChannelError("revocation secret does not match the commitment point")
        rec = RevocationRecord(holder, index, secret)
        self.revocations[(holder, index)] = rec
        if all((h, index) in self.revocations for h in Holder):
            self.states[index] = replace(self.states[index], revoked=True)
        return rec

    def is_revoked(self, holder: Holder, index: int) -> bool:
        return (holder, index) in self.revocations

    def commitment_tx(self, holder: Holder, index: Optional[int] = None,
                      allow_revoked: bool = False) -> Transaction:
        index = self.latest if index is None else index
        if self.is_revoked(holder, index) and not allow_revoked:
            raise RevokedState(f"{holder.name} state {index} is revoked")
        return build_commitment_tx(
            self.states[index], holder, self.keys, self.params, self.funding, allow_revoked=True
        )

    def dump(self) -> str:
        lines = []
        for i in sorted(self.states):
            flags = "".join(
                h.name[0] for h in Holder if self.is_revoked(h, i)
            ) or "-"
            lines.append(f"{self.states[i].describe()} revoked_by={flags}")
        return "\n".join(lines)
