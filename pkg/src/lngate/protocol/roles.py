"""Role state machines: IoT device, gateway, bridge node and remote nodes.

Each role is a simulator endpoint.  Gateway and bridge run one handler at a time
per channel; a handler owns the flow from its initiating message to the end and
pulls the replies it expects out of the mailbox.  Any failure inside a handler
restores the channel to the checkpoint taken after the last completed round.

The gateway never emits ``commitment_signed`` or ``closing_signed`` for a digest
it has not just signed with the device, and never emits ``revoke_and_ack``
without the 2P-HD derivation of the point it carries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

from ..channel import (
    Channel,
    ChannelError,
    ChannelKeys,
    ChannelParams,
    CommitmentState,
    Holder,
    Party,
    apply_offered,
    apply_receive,
    apply_send,
    bridge_fee,
    build_closing_tx,
    build_commitment_tx,
    build_funding_tx,
    build_sweep_tx,
    fail_htlc,
    fulfill_htlc,
    revocation_privkey,
    sign_digest,
    sign_single,
)
from ..crypto import (
    SECP256K1,
    EcdsaSignature,
    MessageDigest,
    Point,
    base_mul,
    ecdsa_sign,
    ecdsa_verify,
    random_scalar,
    sha256,
)
from ..ledger import (
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
from ..sim.world import (
    Endpoint,
    Envelope,
    FlowTimeout,
    ProtocolViolation,
    Sealed,
    World,
    us,
)
from ..threshold import (
    COMMITMENT_BASE,
    FUNDING,
    MASTER,
    DeviceParty,
    GatewayParty,
    Tag,
    ThresholdAbort,
)
from .messages import (
    AcceptChannel,
    ChannelClosingRequest,
    ClosingSigned,
    CommitmentSigned,
    ControlCodec,
    ControlMessage,
    FramingError,
    FundingCreated,
    FundingLocked,
    FundingSigned,
    OpenChannel,
    OpenChannelRequest,
    PaymentFailed,
    PaymentReceiveSuccess,
    PaymentSendSuccess,
    PeerError,
    RevokeAndAck,
    SendPayment,
    Shutdown,
    ThresholdFrame,
    UpdateAddHtlc,
    UpdateFailHtlc,
    UpdateFulfillHtlc,
    node_id,
    parse_routed_payload,
    routed_payload,
    with_seq,
)

# frames each side handles per threshold operation; compute is spread over them
GATEWAY_FRAMES = {"tkeygen": 3, "tsign": 3, "derive_child": 1}
DEVICE_FRAMES = {"tkeygen": 3, "tsign": 3, "derive_child": 1}

FUNDING_INPUT = "funding_input"
FEE_PAYER = {Party.IOT: 0, Party.GATEWAY: 1, Party.BRIDGE: 2}
FEE_PAYER_BY_CODE = {v: k for k, v in FEE_PAYER.items()}

FAIL_UNKNOWN_DESTINATION = 1
FAIL_NO_CHANNEL = 2
FAIL_INSUFFICIENT = 3
FAIL_ABORTED = 4

SETTLE_TIMEOUT_MS = 120_000
LOCK_TIMEOUT_MS = 3_600_000

_FLOW_ERRORS = (FlowTimeout, ProtocolViolation, ThresholdAbort, ChannelError, FramingError, ValueError)


class GatingError(RuntimeError):
    """A gateway message would go out without its threshold precondition."""


@dataclass(frozen=True)
class Command:
    """Local instruction from the scenario runner to a role."""

    action: str
    args: Tuple[Tuple[str, object], ...] = ()

    @property
    def kind(self) -> str:
        return f"command:{self.action}"

    def get(self, key: str, default=None):
        return dict(self.args).get(key, default)


@dataclass(frozen=True)
class InboundPayment:
    """A key-send HTLC arriving at the bridge from a remote sender."""

    sender: str
    amount: int
    payment_hash: bytes
    channel_id: bytes

    @property
    def kind(self) -> str:
        return "inbound_payment"


@dataclass
class RemoteNode:
    """A node beyond the bridge; only its balance and reachability matter."""

    name: str
    balance: int = 0
    online: bool = True

    @property
    def node_id(self) -> bytes:
        return node_id(self.name)


def _short(name: str) -> str:
    return name.split("-")[0]


# --- shared machinery -------------------------------------------------------------------


class Machine(Endpoint):
    """Endpoint with a single-handler main loop over initiator messages."""

    INITIATORS: frozenset = frozenset()

    def __init__(self, world: World, name: str, node: str, channel: int = 0):
        super().__init__(world, name, node, channel)
        self.peer_seq = 0
        self.channel_id = sha256(b"channel", struct.pack(">I", channel))
        world.block_hooks.append(self._on_block_guard)

    def start(self) -> None:
        self.env.process(self._loop())

    def _wanted(self, env: Envelope) -> bool:
        return isinstance(env.msg, Command) or env.kind in self.INITIATORS

    def defers(self, env: Envelope) -> bool:
        return self._wanted(env)

    def _loop(self):
        while True:
            env = yield self.mailbox.get(self._wanted)
            if not self.online:
                continue
            self.world.enter()
            try:
                yield from self.dispatch(env)
            except _FLOW_ERRORS as exc:
                self.log("abort", error=type(exc).__name__, reason=str(exc))
                self.on_abort(env, exc)
                yield from self.after_abort(env, exc)
            finally:
                self.world.leave()

    def dispatch(self, env: Envelope):  # pragma: no cover - overridden
        raise NotImplementedError
        yield

    def on_abort(self, env: Envelope, exc: Exception) -> None:
        pass

    def after_abort(self, env: Envelope, exc: Exception):
        return
        yield

    def send_peer(self, dst: str, msg, **detail) -> None:
        self.peer_seq += 1
        self.send(dst, with_seq(msg, self.channel_id, self.peer_seq), **detail)

    def step(self, name: str, **detail) -> None:
        self.log("step", step=name, **detail)

    def _on_block_guard(self, height: int) -> None:
        if self.online:
            self.on_block(height)


class ChannelRole(Machine):
    """State shared by the two channel peers: channel view, points, checkpoints."""

    holder: Holder

    def __init__(self, world: World, name: str, node: str, params: ChannelParams, channel: int = 0):
        super().__init__(world, name, node, channel)
        self.params = params
        self.chan: Optional[Channel] = None
        self.remote_points: Dict[int, Point] = {}
        self.local_points: Dict[int, Point] = {}
        self.remote_sigs: Dict[int, EcdsaSignature] = {}  # counterparty sig on our versions
        self.open = False
        self.closed = False
        self._checkpoint = None
        self.payment_secret = random_scalar(self.rng)
        self.delayed_secret = random_scalar(self.rng)
        self.revocation_base_secret = random_scalar(self.rng)
        self.collusion: Dict[str, object] = {}
        self._pending_share: List[dict] = []

    # checkpoints
    def checkpoint(self) -> None:
        self._checkpoint = self._snapshot()

    def _snapshot(self):
        chan = None
        if self.chan is not None:
            chan = replace(self.chan, states=dict(self.chan.states),
                           revocations=dict(self.chan.revocations))
        return chan, dict(self.remote_points), dict(self.local_points), dict(self.remote_sigs)

    def on_abort(self, env: Envelope, exc: Exception) -> None:
        if self._checkpoint is not None:
            saved = self._checkpoint
            self.chan, self.remote_points, self.local_points, self.remote_sigs = saved
            self._checkpoint = self._snapshot()
            self.log("restored", index=self.chan.latest if self.chan else -1)
        self.purge()

    # state helpers
    @property
    def current(self) -> CommitmentState:
        return self.chan.current

    def stage(self, new: CommitmentState) -> CommitmentState:
        """Attach both per-commitment points and advance the local view."""
        gw = self._point(Holder.GATEWAY, new.index)
        br = self._point(Holder.BRIDGE, new.index)
        new = replace(new, gateway_point=gw, bridge_point=br)
        self.chan.advance(new)
        return new

    def _point(self, holder: Holder, index: int) -> Optional[Point]:
        pts = self.local_points if holder is self.holder else self.remote_points
        return pts.get(index)

    def version(self, holder: Holder, index: Optional[int] = None) -> Transaction:
        index = self.chan.latest if index is None else index
        return build_commitment_tx(
            self.chan.states[index], holder, self.chan.keys, self.params, self.chan.funding,
            allow_revoked=True,
        )

    def verify_remote_sig(self, tx: Transaction, sig: EcdsaSignature, key: Point) -> None:
        if sig is None or not ecdsa_verify(key, tx.sighash, sig):
            raise ProtocolViolation(f"{self.name}: counterparty signature does not verify")

    @property
    def height(self) -> int:
        return self.world.chain.height

    # on-chain watching
    def on_block(self, height: int) -> None:
        if self.chan is None or self.chan.funding is None:
            return
        chain = self.world.chain
        spender = chain.spender(self.chan.funding)
        if spender is None or chain.confirmations(spender) < 1:
            self._run_pending_shares()
            return
        tx = chain.get(spender)
        if not tx.locktime & 0x20000000:
            self._run_pending_shares()
            return
        index, holder = (tx.locktime & 0x1FFFFFFF) >> 1, Holder(tx.locktime & 1)
        if holder is self.holder:
            self._sweep_own(tx, index)
        else:
            self._punish(tx, index)
        self._run_pending_shares()

    def _to_self_output(self, tx: Transaction) -> Optional[int]:
        for i, out in enumerate(tx.outputs):
            if isinstance(out.condition, ToSelfDelayed):
                return i
        return None

    def _sweep_own(self, tx: Transaction, index: int) -> None:
        i = self._to_self_output(tx)
        if i is None:
            return
        chain = self.world.chain
        op = tx.outpoint(i)
        if chain.utxo(op) is None or chain.confirmations(tx.txid) < tx.outputs[i].condition.delay:
            return
        sweep = build_sweep_tx(tx, i, base_mul(self.payment_secret), self.params.sweep_fee)
        sweep = sign_single(sweep, Path.OWNER, self.delayed_secret, self.rng)
        if self.world.submit(self.name, sweep, f"sweep:{_short(self.name)}"):
            self.log("sweep", index=index, amount=sweep.output_total)
            if self.chan.is_revoked(self.holder, index):
                self._queue_share("offline", sweep, tx, index)

    def _punish(self, tx: Transaction, index: int) -> None:
        i = self._to_self_output(tx)
        if i is None:
            return
        chain = self.world.chain
        if chain.utxo(tx.outpoint(i)) is None:
            return
        rec = self.chan.revocations.get((self.holder.counterparty, index))
        if rec is None:
            return
        key = revocation_privkey(self.revocation_base_secret, rec.secret)
        sweep = build_sweep_tx(tx, i, base_mul(self.payment_secret), self.params.sweep_fee)
        sweep = sign_single(sweep, Path.REVOCATION, key, self.rng)
        if self.world.submit(self.name, sweep, f"penalty:{_short(self.name)}"):
            self.log("penalty", index=index, amount=sweep.output_total)
            self._queue_share("punish", sweep, tx, index)

    # collusion: hand part of the on-chain outcome to the counterparty
    def _queue_share(self, branch: str, sweep: Transaction, commitment: Transaction, index: int):
        ratio = self.collusion.get(branch)
        if ratio is None:
            return
        own_key = base_mul(self.payment_secret)
        inputs = [sweep.outpoint(0)]
        total = sweep.output_total
        if branch == "punish":
            # the loot is the swept output plus our own balance in the same commitment
            for j, out in enumerate(commitment.outputs):
                if isinstance(out.condition, PayToKey) and out.condition.key == own_key:
                    inputs.append(commitment.outpoint(j))
                    total += out.amount
        self._pending_share.append(dict(inputs=inputs, total=total, ratio=ratio, branch=branch))

    def _run_pending_shares(self) -> None:
        chain = self.world.chain
        still = []
        for item in self._pending_share:
            ready = all(
                chain.utxo(op) is not None and chain.confirmations(op.txid) >= 1
                for op in item["inputs"]
            )
            if not ready:
                still.append(item)
                continue
            given = int(item["ratio"] * item["total"])
            keep = item["total"] - given
            counter_key = self.chan.keys.payment(self.holder.counterparty)
            outs = []
            if given:
                outs.append(TxOut(given, PayToKey(counter_key)))
            if keep:
                outs.append(TxOut(keep, PayToKey(base_mul(self.payment_secret))))
            tx = Transaction(tuple(TxIn(op) for op in item["inputs"]), tuple(outs), 0)
            tx = sign_single(tx, Path.KEY, self.payment_secret, self.rng)
            if self.world.submit(self.name, tx, f"share:{_short(self.name)}"):
                self.log("share", branch=item["branch"], given=given, kept=keep)
        self._pending_share = still


# --- IoT device -------------------------------------------------------------------------


class IotDevice(Endpoint):
    """Constrained device: wallet key, threshold share holder, control channel."""

    device_class = "iot"

    def __init__(self, world: World, name: str, gateway: str, pairing_key: bytes, channel: int = 0):
        super().__init__(world, name, name, channel)
        self.gateway = gateway
        self.party = DeviceParty(self.rng)
        self.wallet_secret = random_scalar(self.rng)
        self.codec_out = ControlCodec(pairing_key, 0)
        self.codec_in = ControlCodec(pairing_key, 1)
        self.requested_capacity = 0
        self.utxo: Optional[Tuple[Outpoint, int]] = None
        self.received: List[ControlMessage] = []
        self._waiters: List[Tuple[frozenset, object]] = []
        world.block_hooks.append(self._on_block_guard)

    @property
    def wallet_key(self) -> Point:
        return base_mul(self.wallet_secret)

    def start(self) -> None:
        self.env.process(self._loop())

    def _on_block_guard(self, height: int) -> None:
        if self.online:
            self.on_block(height)

    def _loop(self):
        while True:
            env = yield self.mailbox.get()
            if not self.online:
                continue
            self.world.enter()
            try:
                if isinstance(env.msg, ThresholdFrame):
                    yield from self._on_frame(env.msg)
                elif isinstance(env.msg, Sealed):
                    yield from self._on_control(env.msg)
            except (ThresholdAbort, FramingError, ValueError) as exc:
                self.log("abort", error=type(exc).__name__, reason=str(exc))
            finally:
                self.world.leave()

    def _crypto_ms(self) -> float:
        c = self.profile.device
        return c.aes_ms + c.hmac_ms

    def _on_frame(self, tf: ThresholdFrame):
        if tf.op == FUNDING_INPUT:
            txid, capacity = tf.frame[:32], struct.unpack(">Q", tf.frame[32:40])[0]
            if capacity != self.requested_capacity:
                raise ThresholdAbort("funding amount differs from the request")
            sig = sign_digest_raw(self.wallet_secret, txid, self.rng)
            self.send(self.gateway, ThresholdFrame(sig.encode(), FUNDING_INPUT))
            return
        frames = DEVICE_FRAMES.get(tf.op, 1)
        yield from self.compute(self.profile.threshold_ms(tf.op, device_side=True) / frames)
        reply = self.party.handle(tf.frame)
        if reply is not None:
            self.send(self.gateway, ThresholdFrame(reply, tf.op))

    def _on_control(self, sealed: Sealed):
        yield from self.compute(self._crypto_ms())
        msg = self.codec_in.open(sealed.frame)
        self.received.append(msg)
        self.log("control_received", msg=msg.kind)
        for i, (kinds, ev) in enumerate(self._waiters):
            if msg.kind in kinds:
                del self._waiters[i]
                ev.succeed(msg)
                break

    def request(self, msg: ControlMessage, until: Tuple[str, ...] = (),
                timeout_ms: float = SETTLE_TIMEOUT_MS):
        """Seal and send ``msg``; optionally wait for a reply of one of ``until``."""
        self.world.enter()
        try:
            if isinstance(msg, OpenChannelRequest):
                self.requested_capacity = msg.capacity
            yield from self.compute(self._crypto_ms())
            self.send(self.gateway, Sealed(self.codec_out.seal(msg)))
            if not until:
                return None
            ev = self.env.event()
            waiter = (frozenset(until), ev)
            self._waiters.append(waiter)
            result = yield ev | self.env.timeout(us(timeout_ms))
            if ev not in result:
                self._waiters.remove(waiter)
                self.log("request_timeout", msg=msg.kind)
                return None
            return result[ev]
        finally:
            self.world.leave()

    def on_block(self, height: int) -> None:
        """Collect the unconditional output of any commitment that reaches the chain."""
        chain = self.world.chain
        for txid in chain.blocks[-1] if chain.blocks else []:
            tx = chain.get(txid)
            if not tx.locktime & 0x20000000:
                continue
            for i, out in enumerate(tx.outputs):
                cond = out.condition
                if isinstance(cond, PayToKeyUnconditional) and cond.key == self.wallet_key:
                    sweep = build_sweep_tx(tx, i, self.wallet_key)
                    sweep = sign_single(sweep, Path.KEY, self.wallet_secret, self.rng)
                    if self.world.submit(self.name, sweep, "sweep:iot"):
                        self.log("sweep", amount=out.amount, depth=chain.confirmations(txid))


def sign_digest_raw(secret: int, digest: bytes, rng) -> EcdsaSignature:
    while True:
        try:
            return ecdsa_sign(secret, MessageDigest(digest), random_scalar(rng))
        except ValueError:
            continue


# --- gateway ------------------------------------------------------------------------------


class GatewayMachine(ChannelRole):
    INITIATORS = frozenset({
        "OpenChannelRequest", "SendPayment", "ChannelClosingRequest",
        "PaymentSendSuccess", "PaymentReceiveSuccess", "PaymentFailed",
        "update_add_htlc", "shutdown",
    })
    holder = Holder.GATEWAY

    def __init__(self, world: World, name: str, iot: str, bridges: Dict[bytes, str],
                 params: ChannelParams, pairing_key: bytes,
                 iot_pubkey: Point, iot_utxo: Tuple[Outpoint, int], channel: int = 0):
        super().__init__(world, name, "gateway", params, channel)
        self.iot = iot
        self.bridges = bridges
        self.bridge: Optional[str] = None
        self.party = GatewayParty(self.rng)
        self.codec_in = ControlCodec(pairing_key, 0)
        self.codec_out = ControlCodec(pairing_key, 1)
        self.iot_pubkey = iot_pubkey
        self.iot_utxo = iot_utxo
        self.signed_digests: set = set()
        self.derived: set = set()
        self.ransom = False
        self.joint_funding: Optional[Point] = None

    # control channel
    def _wanted(self, env: Envelope) -> bool:
        if isinstance(env.msg, Sealed):
            return env.msg.kind in self.INITIATORS
        return super()._wanted(env)

    def _crypto_ms(self) -> float:
        c = self.profile.desktop
        return c.aes_ms + c.hmac_ms

    def send_control(self, msg: ControlMessage):
        yield from self.compute(self._crypto_ms())
        self.send(self.iot, Sealed(self.codec_out.seal(msg)))

    def dispatch(self, env: Envelope):
        msg = env.msg
        if isinstance(msg, Sealed):
            if self.ransom:
                self.log("ignored", msg=msg.kind)
                return
            yield from self.compute(self._crypto_ms())
            ctl = self.codec_in.open(msg.frame)
            self.log("control_received", msg=ctl.kind)
            if isinstance(ctl, OpenChannelRequest):
                yield from self.open_flow(ctl)
            elif isinstance(ctl, SendPayment):
                yield from self.send_flow(ctl)
            elif isinstance(ctl, ChannelClosingRequest):
                if ctl.unilateral:
                    yield from self.unilateral_close()
                else:
                    yield from self.mutual_close(Party.IOT)
            return
        if isinstance(msg, Command):
            yield from self.command(msg)
        elif isinstance(msg, UpdateAddHtlc):
            yield from self.receive_flow(msg)
        elif isinstance(msg, Shutdown):
            yield from self.mutual_close(FEE_PAYER_BY_CODE[msg.fee_payer], initiated_by_bridge=True)

    def command(self, cmd: Command):
        if cmd.action == "close":
            if cmd.get("mode") == "unilateral":
                yield from self.send_control(ChannelClosingRequest(True))
                yield from self.unilateral_close()
            else:
                yield from self.mutual_close(Party.GATEWAY)
        elif cmd.action == "broadcast_revoked":
            yield from self.broadcast_revoked(cmd.get("state"))

    def after_abort(self, env: Envelope, exc: Exception):
        msg = env.msg
        if isinstance(msg, Sealed) and not self.ransom:
            kind = msg.kind
            if kind == "SendPayment":
                yield from self.send_control(PaymentFailed(FAIL_ABORTED))
        if isinstance(msg, Shutdown) and self.bridge:
            self.send_peer(self.bridge, PeerError(data=b"close aborted"))

    # threshold over the device link
    def threshold(self, op: str, exchange, **detail):
        frames = GATEWAY_FRAMES.get(op, 1)
        share_ms = self.profile.threshold_ms(op, device_side=False) / frames
        self.log("threshold_start", op=op, **detail)
        opening = True
        try:
            out = next(exchange)
            while True:
                yield from self.compute(share_ms)
                self.send(self.iot, ThresholdFrame(out, op, opening))
                opening = False
                if out[0] == Tag.KEYGEN_CONFIRM:
                    reply = None
                else:
                    env = yield from self.expect(self.iot, ThresholdFrame)
                    reply = env.msg.frame
                out = exchange.send(reply)
        except StopIteration as stop:
            result = stop.value
        except (FlowTimeout, ThresholdAbort, ProtocolViolation) as exc:
            self.log("threshold", op=op, status="aborted", reason=str(exc), **detail)
            raise ThresholdAbort(f"{op}: {exc}") from exc
        self.log("threshold", op=op, status="complete", **detail)
        return result

    def tsign(self, tx: Transaction, label: str, slot: int = FUNDING):
        digest = tx.sighash
        sig = yield from self.threshold(
            "tsign", self.party.sign(digest, slot, MASTER), digest=digest.hex()[:16], target=label
        )
        self.signed_digests.add(digest.digest)
        return sig

    def derive(self, index: int, reveal: Optional[int]):
        point, secret = yield from self.threshold(
            "derive_child", self.party.derive(COMMITMENT_BASE, index, reveal), index=index
        )
        self.derived.add(index)
        self.local_points[index] = point
        return point, secret

    def _gated_signed(self, tx: Transaction, kind: str, msg) -> None:
        if tx.sighash.digest not in self.signed_digests:
            raise GatingError(f"{kind} for a digest without a completed tsign")
        self.send_peer(self.bridge, msg, digest=tx.sighash.hex()[:16])

    def _gated_raa(self, secret: Optional[int], index: int) -> None:
        if index not in self.derived:
            raise GatingError("revoke_and_ack without a derivation of the next point")
        self.send_peer(
            self.bridge,
            RevokeAndAck(per_commitment_secret=secret, next_per_commitment_point=self.local_points[index]),
            next_index=index,
        )

    # opening
    def open_flow(self, req: OpenChannelRequest):
        bridge = self.bridges.get(req.bridge_node_id)
        if bridge is None:
            raise ProtocolViolation("unknown bridge node")
        self.bridge = bridge
        params = replace(self.params, capacity=req.capacity)
        self.params = params
        joint = yield from self.threshold("tkeygen", self.party.keygen(2))
        self.joint_funding = joint[FUNDING]
        self.send_peer(bridge, OpenChannel(
            capacity=params.capacity, funding_pubkey=self.joint_funding,
            payment_basepoint=base_mul(self.payment_secret),
            delayed_basepoint=base_mul(self.delayed_secret),
            revocation_basepoint=base_mul(self.revocation_base_secret),
            iot_pubkey=self.iot_pubkey, to_self_delay=params.to_self_delay,
            htlc_timeout=params.htlc_timeout,
        ))
        acc = (yield from self.expect(bridge, AcceptChannel, PeerError)).msg
        if isinstance(acc, PeerError):
            raise ProtocolViolation(f"bridge refused the channel: {acc.data.decode(errors='replace')}")
        keys = ChannelKeys(
            funding_joint=self.joint_funding, bridge_funding=acc.funding_pubkey, iot=self.iot_pubkey,
            gateway_payment=base_mul(self.payment_secret), gateway_delayed=base_mul(self.delayed_secret),
            gateway_revocation_base=base_mul(self.revocation_base_secret),
            bridge_payment=acc.payment_basepoint, bridge_delayed=acc.delayed_basepoint,
            bridge_revocation_base=acc.revocation_basepoint,
        )
        funding = build_funding_tx(
            self.iot_utxo, params.capacity, keys.funding_joint, keys.bridge_funding,
            self.iot_pubkey, params.open_fee,
        )
        self.step("build_funding_tx", txid=funding.txid.hex()[:16], fee=funding.fee)
        self.remote_points[0] = acc.first_per_commitment_point
        self.remote_points[1] = acc.second_per_commitment_point
        yield from self.derive(1, None)
        self.chan = Channel(params, keys, funding.outpoint(0))
        self.chan.set_point(Holder.BRIDGE, 0, self.remote_points[0])
        first = self.version(Holder.BRIDGE, 0)
        self.step("build_commitment_tx", holder="bridge", index=0)
        sig = yield from self.tsign(first, "commitment:bridge:0")
        self._gated_signed(first, "funding_created", FundingCreated(
            funding_txid=funding.txid, funding_output_index=0, signature=sig,
            next_per_commitment_point=self.local_points[1],
        ))
        fs = (yield from self.expect(bridge, FundingSigned)).msg
        own = self.version(Holder.GATEWAY, 0)
        self.verify_remote_sig(own, fs.signature, keys.bridge_funding)
        self.remote_sigs[0] = fs.signature
        # the device signs its own wallet input; the gateway cannot spend IoT coins
        frame = funding.txid + struct.pack(">QQ", params.capacity, funding.fee)
        self.send(self.iot, ThresholdFrame(frame, FUNDING_INPUT))
        env = yield from self.expect(self.iot, ThresholdFrame)
        wallet_sig = EcdsaSignature.decode(env.msg.frame)
        signed = funding.with_witnesses([Witness(Path.KEY, (wallet_sig,))])
        if not self.world.submit(self.name, signed, "funding"):
            raise ProtocolViolation("funding transaction rejected")
        self.step("broadcast_funding", txid=funding.txid.hex()[:16])
        yield from self.world.await_depth(funding.txid, params.funding_depth)
        self.step("funding_depth_reached", depth=self.world.chain.confirmations(funding.txid))
        self.send_peer(bridge, FundingLocked())
        yield from self.expect(bridge, FundingLocked, timeout_ms=LOCK_TIMEOUT_MS)
        self.open = True
        self.log("channel_open", capacity=params.capacity)
        self.checkpoint()

    # commitment rounds
    def round_local_first(self, new: CommitmentState, label: str):
        """We propose: tsign, commitment_signed, then the bridge revokes and signs back."""
        j = self.chan.latest
        staged = self.stage(new)
        theirs = self.version(Holder.BRIDGE)
        sig = yield from self.tsign(theirs, f"commitment:bridge:{staged.index}")
        self._gated_signed(theirs, "commitment_signed", CommitmentSigned(signature=sig))
        raa = (yield from self.expect(self.bridge, RevokeAndAck)).msg
        self._take_bridge_revocation(raa, j)
        cs = (yield from self.expect(self.bridge, CommitmentSigned)).msg
        self.verify_remote_sig(self.version(Holder.GATEWAY), cs.signature, self.chan.keys.bridge_funding)
        self.remote_sigs[staged.index] = cs.signature
        yield from self._revoke_own(j)
        self.checkpoint()
        self.log("round_complete", index=staged.index, label=label, state=staged.describe())

    def round_remote_first(self, new: CommitmentState, label: str):
        """The bridge proposes: its commitment_signed, our revocation, then our signature."""
        j = self.chan.latest
        staged = self.stage(new)
        cs = (yield from self.expect(self.bridge, CommitmentSigned)).msg
        self.verify_remote_sig(self.version(Holder.GATEWAY), cs.signature, self.chan.keys.bridge_funding)
        self.remote_sigs[staged.index] = cs.signature
        yield from self._revoke_own(j)
        theirs = self.version(Holder.BRIDGE)
        sig = yield from self.tsign(theirs, f"commitment:bridge:{staged.index}")
        self._gated_signed(theirs, "commitment_signed", CommitmentSigned(signature=sig))
        raa = (yield from self.expect(self.bridge, RevokeAndAck)).msg
        self._take_bridge_revocation(raa, j)
        self.checkpoint()
        self.log("round_complete", index=staged.index, label=label, state=staged.describe())

    def _revoke_own(self, j: int):
        _, secret = yield from self.derive(j + 2, j)
        self.chan.revoke_state(Holder.GATEWAY, j, secret)
        self._gated_raa(secret, j + 2)

    def _take_bridge_revocation(self, raa, j: int) -> None:
        secret = raa.per_commitment_secret
        if secret is None or base_mul(secret) != self.remote_points.get(j):
            raise ProtocolViolation("bridge revealed a wrong per-commitment secret")
        self.chan.revoke_state(Holder.BRIDGE, j, secret)
        self.remote_points[j + 2] = raa.next_per_commitment_point

    # payments
    def _require_open(self) -> None:
        if not self.open or self.closed:
            raise ChannelError("channel is not open")

    def send_flow(self, req: SendPayment):
        self._require_open()
        parts = max(1, req.parts)
        if req.amount < parts:
            raise ValueError("amount too small to split")
        amounts = [req.amount // parts] * parts
        amounts[0] += req.amount - sum(amounts)
        ok = True
        for amount in amounts:
            ok = (yield from self._send_part(amount, req.destination_node_id)) and ok
        if ok:
            yield from self.send_control(PaymentSendSuccess())
        else:
            yield from self.send_control(PaymentFailed(FAIL_UNKNOWN_DESTINATION))

    def _send_part(self, amount: int, destination: bytes):
        preimage = self.rng.getrandbits(256).to_bytes(32, "big")
        h = sha256(preimage)
        new = apply_send(self.current, amount, self.params, h, self.height)
        htlc = new.htlcs[-1]
        self.step("add_htlc", amount=amount, htlc=htlc.amount, fee=htlc.service_fee)
        # key send: the preimage travels to the final hop inside the routed payload
        self.world.keysend[h] = preimage
        self.send_peer(self.bridge, UpdateAddHtlc(
            htlc_id=htlc.htlc_id, amount=htlc.amount, payment_hash=h, expiry=htlc.expiry,
            routed_payload=routed_payload(destination, htlc.amount, h), service_fee=htlc.service_fee,
        ))
        yield from self.round_local_first(new, "add")
        env = yield from self.expect(
            self.bridge, UpdateFulfillHtlc, UpdateFailHtlc, timeout_ms=SETTLE_TIMEOUT_MS
        )
        if isinstance(env.msg, UpdateFulfillHtlc):
            if sha256(env.msg.preimage) != h:
                raise ProtocolViolation("fulfilled with a wrong preimage")
            settled = fulfill_htlc(self.current, env.msg.preimage)
            ok = True
        else:
            settled = fail_htlc(self.current, h, self.height, downstream_failed=True)
            ok = False
        yield from self.round_remote_first(settled, "fulfill" if ok else "fail")
        return ok

    def receive_flow(self, add: UpdateAddHtlc):
        self._require_open()
        new = apply_receive(self.current, add.amount, self.params, add.payment_hash, self.height)
        new = replace(new, htlcs=new.htlcs[:-1] + (replace(new.htlcs[-1], expiry=add.expiry),))
        yield from self.round_remote_first(new, "add")
        # the gateway terminates the key send on the device's behalf
        preimage = self.world.keysend.get(add.payment_hash)
        if preimage is None:
            raise ProtocolViolation("no preimage for incoming key send")
        self.send_peer(self.bridge, UpdateFulfillHtlc(htlc_id=add.htlc_id, preimage=preimage))
        yield from self.round_local_first(fulfill_htlc(self.current, preimage), "fulfill")
        yield from self.send_control(PaymentReceiveSuccess(add.amount))

    # closing
    def mutual_close(self, requester: Party, initiated_by_bridge: bool = False):
        self._require_open()
        if requester is Party.GATEWAY:
            yield from self.send_control(ChannelClosingRequest(False))
        self.send_peer(self.bridge, Shutdown(fee_payer=FEE_PAYER[requester]))
        if not initiated_by_bridge:
            yield from self.expect(self.bridge, Shutdown)
        state = self.current
        target = self.params.close_fee
        offer = target // 2
        while True:
            tx = build_closing_tx(state, offer, requester, self.chan.keys, self.chan.funding)
            sig = yield from self.tsign(tx, f"closing:{offer}")
            self._gated_signed(tx, "closing_signed", ClosingSigned(fee_offer=offer, signature=sig))
            reply = (yield from self.expect(self.bridge, ClosingSigned)).msg
            agreed = build_closing_tx(state, reply.fee_offer, requester, self.chan.keys, self.chan.funding)
            self.verify_remote_sig(agreed, reply.signature, self.chan.keys.bridge_funding)
            if reply.fee_offer == offer:
                break
            offer = reply.fee_offer
        witness = Witness(Path.MULTISIG, (sig, reply.signature))
        final = agreed.with_witnesses([witness])
        if not self.world.submit(self.name, final, "closing"):
            raise ProtocolViolation("closing transaction rejected")
        self.step("broadcast_closing", fee=offer, payer=requester.value)
        self.world.mine(1)
        self.closed = True
        self.log("channel_closed", mode="mutual", fee=offer, payer=requester.value)

    def unilateral_close(self):
        self._require_open()
        tx = self.version(Holder.GATEWAY)
        sig = yield from self.tsign(tx, f"commitment:gateway:{self.chan.latest}")
        final = tx.with_witnesses([Witness(Path.MULTISIG, (sig, self.remote_sigs[self.chan.latest]))])
        if not self.world.submit(self.name, final, f"commitment:gateway:{self.chan.latest}"):
            raise ProtocolViolation("commitment rejected")
        self.step("broadcast_commitment", index=self.chan.latest)
        self.closed = True
        self.world.mine(self.params.to_self_delay + 1)
        self.log("channel_closed", mode="unilateral", index=self.chan.latest)

    def broadcast_revoked(self, index: int):
        """Cheat: publish an old version.  The device co-signs blindly."""
        self._require_open()
        if index not in self.remote_sigs or index >= self.chan.latest:
            raise ChannelError(f"no revoked gateway state {index}")
        tx = self.version(Holder.GATEWAY, index)
        sig = yield from self.tsign(tx, f"commitment:gateway:{index}")
        final = tx.with_witnesses([Witness(Path.MULTISIG, (sig, self.remote_sigs[index]))])
        if not self.world.submit(self.name, final, f"revoked:gateway:{index}"):
            raise ProtocolViolation("revoked commitment rejected")
        self.log("broadcast_revoked", index=index, state=self.chan.states[index].describe())
        self.closed = True
        self.world.mine(self.params.to_self_delay + 3)


# --- bridge -------------------------------------------------------------------------------


class BridgeMachine(ChannelRole):
    INITIATORS = frozenset({"open_channel", "update_add_htlc", "shutdown", "inbound_payment", "error"})
    holder = Holder.BRIDGE

    def __init__(self, world: World, name: str, gateway: str, params: ChannelParams,
                 liquidity: int = 0, channel: int = 0, accept: bool = True):
        super().__init__(world, name, "bridge", params, channel)
        self.gateway = gateway
        self.seed = self.rng.getrandbits(256).to_bytes(32, "big")
        self.funding_secret = random_scalar(self.rng)
        self.liquidity = liquidity
        self.accept = accept
        self.joint_funding: Optional[Point] = None

    def commitment_secret(self, index: int) -> int:
        return int.from_bytes(sha256(self.seed, struct.pack(">Q", index)), "big") % SECP256K1.n

    def commitment_point(self, index: int) -> Point:
        p = base_mul(self.commitment_secret(index))
        self.local_points[index] = p
        return p

    def dispatch(self, env: Envelope):
        msg = env.msg
        if isinstance(msg, Command):
            yield from self.command(msg)
        elif isinstance(msg, OpenChannel):
            yield from self.accept_flow(msg)
        elif isinstance(msg, UpdateAddHtlc):
            yield from self.forward_flow(msg)
        elif isinstance(msg, InboundPayment):
            yield from self.inbound_flow(msg)
        elif isinstance(msg, Shutdown):
            yield from self.respond_close(msg)
        elif isinstance(msg, PeerError):
            self.log("peer_error", data=msg.data.decode(errors="replace"))

    def command(self, cmd: Command):
        if cmd.action == "close":
            if cmd.get("mode") == "unilateral":
                yield from self.unilateral_close()
            else:
                yield from self.mutual_close()
        elif cmd.action == "broadcast_revoked":
            yield from self.broadcast_revoked(cmd.get("state"))

    def after_abort(self, env: Envelope, exc: Exception):
        msg = env.msg
        if isinstance(msg, InboundPayment):
            self.log("payment_refused", sender=msg.sender, amount=msg.amount)
        if isinstance(msg, Command) and msg.action == "close" and msg.get("mode") != "unilateral":
            if self.open and not self.closed:
                self.log("fallback_unilateral", reason=str(exc))
                yield from self.unilateral_close()
        return
        yield

    # opening
    def accept_flow(self, oc):
        if not self.accept:
            self.send_peer(self.gateway, PeerError(data=b"channel refused"))
            self.log("open_refused")
            return
        params = replace(self.params, capacity=oc.capacity, to_self_delay=oc.to_self_delay,
                         htlc_timeout=oc.htlc_timeout)
        self.params = params
        self.joint_funding = oc.funding_pubkey
        self.send_peer(self.gateway, AcceptChannel(
            funding_pubkey=base_mul(self.funding_secret),
            payment_basepoint=base_mul(self.payment_secret),
            delayed_basepoint=base_mul(self.delayed_secret),
            revocation_basepoint=base_mul(self.revocation_base_secret),
            first_per_commitment_point=self.commitment_point(0),
            second_per_commitment_point=self.commitment_point(1),
        ))
        fc = (yield from self.expect(self.gateway, FundingCreated)).msg
        keys = ChannelKeys(
            funding_joint=oc.funding_pubkey, bridge_funding=base_mul(self.funding_secret),
            iot=oc.iot_pubkey, gateway_payment=oc.payment_basepoint,
            gateway_delayed=oc.delayed_basepoint, gateway_revocation_base=oc.revocation_basepoint,
            bridge_payment=base_mul(self.payment_secret), bridge_delayed=base_mul(self.delayed_secret),
            bridge_revocation_base=base_mul(self.revocation_base_secret),
        )
        self.chan = Channel(params, keys, Outpoint(fc.funding_txid, fc.funding_output_index))
        self.chan.set_point(Holder.BRIDGE, 0, self.local_points[0])
        own = self.version(Holder.BRIDGE, 0)
        self.verify_remote_sig(own, fc.signature, keys.funding_joint)
        self.remote_sigs[0] = fc.signature
        self.remote_points[1] = fc.next_per_commitment_point
        theirs = self.version(Holder.GATEWAY, 0)
        self.send_peer(self.gateway, FundingSigned(signature=sign_digest(self.funding_secret, theirs, self.rng)))
        yield from self.expect(self.gateway, FundingLocked, timeout_ms=LOCK_TIMEOUT_MS)
        txid = fc.funding_txid
        chain = self.world.chain
        if not chain.known(txid) or chain.confirmations(txid) < params.funding_depth:
            raise ProtocolViolation("funding_locked before the funding depth")
        self.send_peer(self.gateway, FundingLocked())
        self.open = True
        self.checkpoint()

    # rounds, mirror images of the gateway's
    def _sign_theirs(self) -> CommitmentSigned:
        tx = self.version(Holder.GATEWAY)
        return CommitmentSigned(signature=sign_digest(self.funding_secret, tx, self.rng))

    def _revoke_own(self, j: int) -> None:
        secret = self.commitment_secret(j)
        self.chan.revoke_state(Holder.BRIDGE, j, secret)
        self.send_peer(self.gateway, RevokeAndAck(
            per_commitment_secret=secret, next_per_commitment_point=self.commitment_point(j + 2),
        ))

    def _take_gateway_revocation(self, raa, j: int) -> None:
        secret = raa.per_commitment_secret
        known = self.remote_points.get(j)
        if secret is None or (known is not None and base_mul(secret) != known):
            raise ProtocolViolation("gateway revealed a wrong per-commitment secret")
        self.chan.revoke_state(Holder.GATEWAY, j, secret)
        self.remote_points[j + 2] = raa.next_per_commitment_point

    def _take_gateway_sig(self, index: int):
        cs = (yield from self.expect(self.gateway, CommitmentSigned)).msg
        self.verify_remote_sig(self.version(Holder.BRIDGE), cs.signature, self.chan.keys.funding_joint)
        self.remote_sigs[index] = cs.signature

    def round_remote_first(self, new: CommitmentState, label: str):
        j = self.chan.latest
        staged = self.stage(new)
        yield from self._take_gateway_sig(staged.index)
        self._revoke_own(j)
        self.send_peer(self.gateway, self._sign_theirs())
        raa = (yield from self.expect(self.gateway, RevokeAndAck)).msg
        self._take_gateway_revocation(raa, j)
        self.checkpoint()
        self.log("round_complete", index=staged.index, label=label, state=staged.describe())

    def round_local_first(self, new: CommitmentState, label: str):
        j = self.chan.latest
        staged = self.stage(new)
        self.send_peer(self.gateway, self._sign_theirs())
        raa = (yield from self.expect(self.gateway, RevokeAndAck)).msg
        self._take_gateway_revocation(raa, j)
        yield from self._take_gateway_sig(staged.index)
        self._revoke_own(j)
        self.checkpoint()
        self.log("round_complete", index=staged.index, label=label, state=staged.describe())

    # payments
    def forward_flow(self, add: UpdateAddHtlc):
        if not self.open or self.closed:
            raise ChannelError("channel is not open")
        new = apply_offered(self.current, add.amount, add.service_fee, add.payment_hash, add.expiry)
        yield from self.round_remote_first(new, "add")
        next_hop, amount, h = parse_routed_payload(add.routed_payload)
        dest = next((n for n in self.world.remote_nodes.values() if n.node_id == next_hop), None)
        fee = bridge_fee(amount, self.params)
        yield self.env.timeout(us(self.profile.remote_leg_ms))
        preimage = self.world.keysend.get(h)
        if dest is None or not dest.online or preimage is None or amount <= fee \
                or self.liquidity < amount - fee:
            self.log("forward_failed", amount=amount, known=dest is not None)
            self.send_peer(self.gateway, UpdateFailHtlc(htlc_id=add.htlc_id, reason=b"unknown next hop"))
            settled = fail_htlc(self.current, h, self.height, downstream_failed=True)
            yield from self.round_local_first(settled, "fail")
            return
        self.liquidity -= amount - fee
        dest.balance += amount - fee
        self.log("forwarded", dest=dest.name, amount=amount - fee, fee=fee)
        self.send_peer(self.gateway, UpdateFulfillHtlc(htlc_id=add.htlc_id, preimage=preimage))
        yield from self.round_local_first(fulfill_htlc(self.current, preimage), "fulfill")

    def inbound_flow(self, pay: InboundPayment):
        if not self.open or self.closed or pay.channel_id != self.channel_id:
            raise ChannelError("no channel to the payment's next hop")
        sender = self.world.remote_nodes[pay.sender]
        fee = bridge_fee(pay.amount, self.params)
        if sender.balance < pay.amount + fee:
            raise ChannelError("sender cannot cover the payment")
        new = apply_receive(self.current, pay.amount, self.params, pay.payment_hash, self.height)
        htlc = new.htlcs[-1]
        self.send_peer(self.gateway, UpdateAddHtlc(
            htlc_id=htlc.htlc_id, amount=htlc.amount, payment_hash=htlc.payment_hash,
            expiry=htlc.expiry, routed_payload=routed_payload(self.channel_id[:8], pay.amount, pay.payment_hash),
        ))
        yield from self.round_local_first(new, "add")
        ful = (yield from self.expect(self.gateway, UpdateFulfillHtlc, timeout_ms=SETTLE_TIMEOUT_MS)).msg
        if sha256(ful.preimage) != pay.payment_hash:
            raise ProtocolViolation("fulfilled with a wrong preimage")
        yield from self.round_remote_first(fulfill_htlc(self.current, ful.preimage), "fulfill")
        sender.balance -= pay.amount + fee
        self.liquidity += pay.amount + fee
        self.log("received_upstream", sender=sender.name, amount=pay.amount, fee=fee)

    # closing
    def respond_close(self, sd: Shutdown):
        if not self.open or self.closed:
            raise ChannelError("channel is not open")
        self.send_peer(self.gateway, Shutdown(fee_payer=sd.fee_payer))
        yield from self._negotiate(FEE_PAYER_BY_CODE[sd.fee_payer])

    def mutual_close(self):
        if not self.open or self.closed:
            raise ChannelError("channel is not open")
        self.send_peer(self.gateway, Shutdown(fee_payer=FEE_PAYER[Party.BRIDGE]))
        env = yield from self.expect(self.gateway, Shutdown, PeerError)
        if isinstance(env.msg, PeerError):
            raise ProtocolViolation("gateway refused to close")
        yield from self._negotiate(Party.BRIDGE)

    def _negotiate(self, requester: Party):
        state = self.current
        target = self.params.close_fee
        while True:
            env = yield from self.expect(self.gateway, ClosingSigned, PeerError)
            if isinstance(env.msg, PeerError):
                raise ProtocolViolation(f"gateway: {env.msg.data.decode(errors='replace')}")
            offer = env.msg
            tx = build_closing_tx(state, offer.fee_offer, requester, self.chan.keys, self.chan.funding)
            self.verify_remote_sig(tx, offer.signature, self.chan.keys.funding_joint)
            fee = offer.fee_offer if offer.fee_offer >= target else target
            reply_tx = build_closing_tx(state, fee, requester, self.chan.keys, self.chan.funding)
            self.send_peer(self.gateway, ClosingSigned(
                fee_offer=fee, signature=sign_digest(self.funding_secret, reply_tx, self.rng)
            ))
            if fee == offer.fee_offer:
                break
        self.closed = True
        self.log("channel_closed", mode="mutual", fee=fee, payer=requester.value)

    def unilateral_close(self):
        if not self.open or self.closed:
            raise ChannelError("channel is not open")
        index = self.chan.latest
        tx = self.version(Holder.BRIDGE)
        own = sign_digest(self.funding_secret, tx, self.rng)
        final = tx.with_witnesses([Witness(Path.MULTISIG, (self.remote_sigs[index], own))])
        if not self.world.submit(self.name, final, f"commitment:bridge:{index}"):
            raise ProtocolViolation("commitment rejected")
        self.step("broadcast_commitment", index=index)
        self.closed = True
        self.world.mine(self.params.to_self_delay + 1)
        self.log("channel_closed", mode="unilateral", index=index)
        yield from ()

    def broadcast_revoked(self, index: int):
        if not self.open or self.closed:
            raise ChannelError("channel is not open")
        if index not in self.remote_sigs or index >= self.chan.latest:
            raise ChannelError(f"no revoked bridge state {index}")
        tx = self.version(Holder.BRIDGE, index)
        own = sign_digest(self.funding_secret, tx, self.rng)
        final = tx.with_witnesses([Witness(Path.MULTISIG, (self.remote_sigs[index], own))])
        if not self.world.submit(self.name, final, f"revoked:bridge:{index}"):
            raise ProtocolViolation("revoked commitment rejected")
        self.log("broadcast_revoked", index=index, state=self.chan.states[index].describe())
        self.closed = True
        self.world.mine(self.params.to_self_delay + 3)
        yield from ()
