"""A small simulated chain with condition-bearing outputs.

Spend conditions are modelled abstractly (no script bytecode).  A transaction id
is the SHA-256 of the canonical serialization *without* witnesses, and that id is
also the digest every witness signature must cover.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple, Union

from .crypto import EcdsaSignature, MessageDigest, Point, ecdsa_verify, sha256

DEFAULT_TO_SELF_DELAY = 144
DEFAULT_HTLC_TIMEOUT = 40


# --- spend conditions --------------------------------------------------------------


@dataclass(frozen=True)
class PayToKey:
    key: Point

    def encode(self) -> bytes:
        return b"\x01" + self.key.encode()


@dataclass(frozen=True)
class PayToKeyUnconditional:
    """Plain key output that no other party can ever contest (the IoT output)."""

    key: Point

    def encode(self) -> bytes:
        return b"\x02" + self.key.encode()


@dataclass(frozen=True)
class Multisig2of2:
    key_a: Point
    key_b: Point

    def encode(self) -> bytes:
        return b"\x03" + self.key_a.encode() + self.key_b.encode()


@dataclass(frozen=True)
class ToSelfDelayed:
    owner_key: Point
    revocation_key: Point
    delay: int

    def __post_init__(self):
        if self.delay < 1:
            raise ValueError("to_self delay must be at least one block")

    def encode(self) -> bytes:
        return (
            b"\x04" + self.owner_key.encode() + self.revocation_key.encode()
            + struct.pack(">I", self.delay)
        )


@dataclass(frozen=True)
class _Htlc:
    payment_hash: bytes
    claim_key: Point
    refund_key: Point
    timeout: int

    _code = b"\x00"

    def __post_init__(self):
        if self.timeout < 1:
            raise ValueError("htlc timeout must be at least one block")
        if len(self.payment_hash) != 32:
            raise ValueError("payment hash must be 32 bytes")

    def encode(self) -> bytes:
        return (
            self._code + self.payment_hash + self.claim_key.encode()
            + self.refund_key.encode() + struct.pack(">I", self.timeout)
        )


@dataclass(frozen=True)
class HtlcOffered(_Htlc):
    _code = b"\x05"


@dataclass(frozen=True)
class HtlcReceived(_Htlc):
    _code = b"\x06"


SpendCondition = Union[
    PayToKey, PayToKeyUnconditional, Multisig2of2, ToSelfDelayed, HtlcOffered, HtlcReceived
]


# --- transactions ---------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Outpoint:
    txid: bytes
    index: int

    def encode(self) -> bytes:
        return self.txid + struct.pack(">I", self.index)

    def __str__(self) -> str:
        return f"{self.txid.hex()[:16]}:{self.index}"


class Path(enum.Enum):
    KEY = "key"
    MULTISIG = "multisig"
    OWNER = "owner"
    REVOCATION = "revocation"
    CLAIM = "claim"
    REFUND = "refund"


@dataclass(frozen=True)
class Witness:
    path: Path
    signatures: Tuple[EcdsaSignature, ...] = ()
    preimage: Optional[bytes] = None


@dataclass(frozen=True)
class TxIn:
    outpoint: Outpoint
    witness: Optional[Witness] = None


@dataclass(frozen=True)
class TxOut:
    amount: int
    condition: SpendCondition

    def __post_init__(self):
        if self.amount <= 0:
            raise ValueError("output amounts must be positive")


@dataclass(frozen=True)
class Transaction:
    inputs: Tuple[TxIn, ...]
    outputs: Tuple[TxOut, ...]
    fee: int = 0
    locktime: int = 0

    def __post_init__(self):
        ops = [i.outpoint for i in self.inputs]
        if len(set(ops)) != len(ops):
            raise ValueError("duplicate outpoint in transaction inputs")
        if self.fee < 0:
            raise ValueError("negative fee")

    def serialize(self) -> bytes:
        out = bytearray(struct.pack(">H", len(self.inputs)))
        for i in self.inputs:
            out += i.outpoint.encode()
        out += struct.pack(">H", len(self.outputs))
        for o in self.outputs:
            enc = o.condition.encode()
            out += struct.pack(">QH", o.amount, len(enc)) + enc
        out += struct.pack(">QI", self.fee, self.locktime)
        return bytes(out)

    @property
    def txid(self) -> bytes:
        return sha256(self.serialize())

    @property
    def sighash(self) -> MessageDigest:
        return MessageDigest(self.txid)

    def with_witnesses(self, witnesses: List[Witness]) -> "Transaction":
        if len(witnesses) != len(self.inputs):
            raise ValueError("one witness per input")
        ins = tuple(TxIn(i.outpoint, w) for i, w in zip(self.inputs, witnesses))
        return Transaction(ins, self.outputs, self.fee, self.locktime)

    def outpoint(self, index: int) -> Outpoint:
        return Outpoint(self.txid, index)

    @property
    def output_total(self) -> int:
        return sum(o.amount for o in self.outputs)


# --- chain ------------------------------------------------------------------------------


class RejectReason(enum.Enum):
    MISSING_UTXO = "MissingUtxo"
    BAD_SIGNATURE = "BadSignature"
    TIMELOCK_NOT_MET = "TimelockNotMet"
    BAD_PREIMAGE = "BadPreimage"
    CONFLICT = "Conflict"
    VALUE_MISMATCH = "ValueMismatch"


@dataclass(frozen=True)
class SubmitResult:
    accepted: bool
    reason: Optional[RejectReason] = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.accepted


ACCEPTED = SubmitResult(True)


class UnknownTransaction(KeyError):
    pass


@dataclass
class _Entry:
    tx: Transaction
    height: Optional[int]  # None while in the mempool
    minted: bool = False


@dataclass
class Chain:
    """Deterministic chain; conflicting spends resolve first-submitted-wins."""

    blocks: List[List[bytes]] = field(default_factory=list)
    mempool: List[bytes] = field(default_factory=list)
    _txs: Dict[bytes, _Entry] = field(default_factory=dict)
    _unspent: Dict[Outpoint, TxOut] = field(default_factory=dict)
    _spent_by: Dict[Outpoint, bytes] = field(default_factory=dict)
    _faucet_nonce: int = 0
    funded: int = 0
    fees: int = 0

    @property
    def height(self) -> int:
        return len(self.blocks)

    # funding
    def faucet(self, key: Point, amount: int) -> Outpoint:
        """Mint ``amount`` to ``key``; confirmed with the next block."""
        self._faucet_nonce += 1
        tx = Transaction((), (TxOut(amount, PayToKey(key)),), 0, self._faucet_nonce)
        self._add(tx, minted=True)
        return tx.outpoint(0)

    # queries
    def get(self, txid: bytes) -> Transaction:
        try:
            return self._txs[txid].tx
        except KeyError:
            raise UnknownTransaction(txid.hex()) from None

    def known(self, txid: bytes) -> bool:
        return txid in self._txs

    def confirmations(self, txid: bytes) -> int:
        entry = self._txs.get(txid)
        if entry is None:
            raise UnknownTransaction(txid.hex())
        if entry.height is None:
            return 0
        return self.height - entry.height + 1

    def inclusion_height(self, txid: bytes) -> Optional[int]:
        entry = self._txs.get(txid)
        if entry is None:
            raise UnknownTransaction(txid.hex())
        return entry.height

    def utxo(self, outpoint: Outpoint) -> Optional[TxOut]:
        return self._unspent.get(outpoint)

    def spender(self, outpoint: Outpoint) -> Optional[bytes]:
        return self._spent_by.get(outpoint)

    def unspent(self) -> Iterator[Tuple[Outpoint, TxOut]]:
        return iter(sorted(self._unspent.items(), key=lambda kv: kv[0]))

    def confirmed_value(self) -> int:
        """Value of the UTXO set as of the last block (mempool ignored)."""
        total = 0
        for txid, entry in self._txs.items():
            if entry.height is None:
                continue
            for i, out in enumerate(entry.tx.outputs):
                spender = self._spent_by.get(Outpoint(txid, i))
                if spender is None or self._txs[spender].height is None:
                    total += out.amount
        return total

    def balance_of(self, key: Point, confirmed_only: bool = True) -> int:
        total = 0
        for op, out in self._unspent.items():
            if confirmed_only and self._txs[op.txid].height is None:
                continue
            cond = out.condition
            if isinstance(cond, (PayToKey, PayToKeyUnconditional)) and cond.key == key:
                total += out.amount
        return total

    # submission
    def submit(self, tx: Transaction) -> SubmitResult:
        if tx.txid in self._txs:
            return SubmitResult(False, RejectReason.CONFLICT, "already known")
        spent_total = 0
        digest = tx.sighash
        for txin in tx.inputs:
            op = txin.outpoint
            if op in self._spent_by:
                return SubmitResult(False, RejectReason.CONFLICT, f"{op} already spent")
            prev = self._unspent.get(op)
            if prev is None:
                return SubmitResult(False, RejectReason.MISSING_UTXO, str(op))
            res = self._check(prev, txin.witness, op.txid, digest)
            if not res.accepted:
                return res
            spent_total += prev.amount
        if tx.output_total + tx.fee != spent_total:
            return SubmitResult(
                False, RejectReason.VALUE_MISMATCH,
                f"outputs {tx.output_total} + fee {tx.fee} != inputs {spent_total}",
            )
        self._add(tx)
        return ACCEPTED

    def _add(self, tx: Transaction, minted: bool = False) -> None:
        txid = tx.txid
        for txin in tx.inputs:
            del self._unspent[txin.outpoint]
            self._spent_by[txin.outpoint] = txid
        for i, out in enumerate(tx.outputs):
            self._unspent[Outpoint(txid, i)] = out
        self._txs[txid] = _Entry(tx, None, minted)
        self.mempool.append(txid)

    def _check(
        self, prev: TxOut, w: Optional[Witness], source: bytes, digest: MessageDigest
    ) -> SubmitResult:
        cond = prev.condition
        if w is None:
            return SubmitResult(False, RejectReason.BAD_SIGNATURE, "missing witness")
        depth = self.confirmations(source)

        def sigs_ok(*keys: Point) -> bool:
            if len(w.signatures) != len(keys):
                return False
            return all(ecdsa_verify(k, digest, s) for k, s in zip(keys, w.signatures))

        bad_sig = SubmitResult(False, RejectReason.BAD_SIGNATURE, f"{w.path.value} path")
        if isinstance(cond, (PayToKey, PayToKeyUnconditional)):
            if w.path is not Path.KEY:
                return bad_sig
            return ACCEPTED if sigs_ok(cond.key) else bad_sig
        if isinstance(cond, Multisig2of2):
            if w.path is not Path.MULTISIG:
                return bad_sig
            return ACCEPTED if sigs_ok(cond.key_a, cond.key_b) else bad_sig
        if isinstance(cond, ToSelfDelayed):
            if w.path is Path.OWNER:
                if depth < cond.delay:
                    return SubmitResult(
                        False, RejectReason.TIMELOCK_NOT_MET, f"depth {depth} < {cond.delay}"
                    )
                return ACCEPTED if sigs_ok(cond.owner_key) else bad_sig
            if w.path is Path.REVOCATION:
                if depth < 1:
                    return SubmitResult(False, RejectReason.TIMELOCK_NOT_MET, "unconfirmed source")
                return ACCEPTED if sigs_ok(cond.revocation_key) else bad_sig
            return bad_sig
        if isinstance(cond, _Htlc):
            if w.path is Path.CLAIM:
                if w.preimage is None or sha256(w.preimage) != cond.payment_hash:
                    return SubmitResult(False, RejectReason.BAD_PREIMAGE, "hash mismatch")
                return ACCEPTED if sigs_ok(cond.claim_key) else bad_sig
            if w.path is Path.REFUND:
                if depth < cond.timeout:
                    return SubmitResult(
                        False, RejectReason.TIMELOCK_NOT_MET, f"depth {depth} < {cond.timeout}"
                    )
                return ACCEPTED if sigs_ok(cond.refund_key) else bad_sig
            return bad_sig
        raise TypeError(f"unknown condition {cond!r}")  # pragma: no cover

    # mining
    def mine_block(self) -> int:
        block = list(self.mempool)
        self.mempool.clear()
        height = self.height + 1
        for txid in block:
            entry = self._txs[txid]
            entry.height = height
            if entry.minted:
                self.funded += entry.tx.output_total
            self.fees += entry.tx.fee
        self.blocks.append(block)
        return height

    def mine(self, blocks: int) -> int:
        for _ in range(blocks):
            self.mine_block()
        return self.height

    # export
    def dump(self) -> str:
        """One line per transaction, in chain order, mempool last."""
        lines = []
        order = [(h + 1, t) for h, blk in enumerate(self.blocks) for t in blk]
        order += [(None, t) for t in self.mempool]
        for height, txid in order:
            tx = self._txs[txid].tx
            ins = ",".join(str(i.outpoint) for i in tx.inputs) or "-"
            outs = ",".join(
                f"{o.amount}:{type(o.condition).__name__}" for o in tx.outputs
            ) or "-"
            where = "mempool" if height is None else str(height)
            lines.append(f"{txid.hex()} in=[{ins}] out=[{outs}] fee={tx.fee} height={where}")
        return "\n".join(lines)
