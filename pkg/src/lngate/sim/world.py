"""Discrete-event kernel: endpoints, links, the trace, and the chain.

The clock is integer microseconds.  Messages on a directed link are delivered in
FIFO order.  The device link can be bandwidth-limited; its medium is shared by
both directions.  Peer messages are charged an LN processing cost on the
receiver's CPU when they are taken out of the mailbox.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import simpy

from ..ledger import Chain, Transaction
from ..protocol.messages import (
    CONTROL_TYPES,
    PeerMessage,
    ThresholdFrame,
    decode_peer,
    encode_peer,
)
from .profiles import LatencyProfile, WireCost

DEFAULT_TIMEOUT_MS = 30_000


def us(ms: float) -> int:
    return int(round(ms * 1000))


class FlowTimeout(Exception):
    pass


class ProtocolViolation(Exception):
    pass


@dataclass(frozen=True)
class Sealed:
    """An encrypted control frame on the device link."""

    frame: bytes

    @property
    def kind(self) -> str:
        return CONTROL_TYPES[self.frame[0]].__name__


@dataclass
class Envelope:
    src: str
    dst: str
    msg: Any
    link: str
    sent_at: int
    wire: Optional[WireCost] = None

    @property
    def kind(self) -> str:
        return self.msg.kind


@dataclass
class TraceEvent:
    t: int
    actor: str
    kind: str
    flow: Optional[int]
    detail: Dict[str, Any] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, Any]:
        return {"t": self.t, "actor": self.actor, "kind": self.kind, "flow": self.flow,
                "detail": self.detail}

    def text(self) -> str:
        parts = " ".join(f"{k}={_plain(v)}" for k, v in sorted(self.detail.items()))
        flow = "-" if self.flow is None else str(self.flow)
        return f"{self.t:>12} f{flow:<3} {self.actor:<10} {self.kind} {parts}".rstrip()


def _plain(v: Any) -> str:
    if isinstance(v, bytes):
        return v.hex()
    if isinstance(v, (list, tuple)):
        return ",".join(_plain(x) for x in v)
    return str(v)


class Endpoint:
    """Addressable role instance with a mailbox and a CPU."""

    device_class = "desktop"

    def __init__(self, world: "World", name: str, node: str, channel: int = 0):
        self.world = world
        self.name = name
        self.node = node
        self.channel = channel
        self.mailbox = simpy.FilterStore(world.env)
        self.online = True
        self.rng = world.rng(name)
        world.register(self)

    @property
    def env(self) -> simpy.Environment:
        return self.world.env

    @property
    def profile(self) -> LatencyProfile:
        return self.world.profile

    def log(self, kind: str, **detail) -> None:
        self.world.log(self.name, kind, **detail)

    def compute(self, ms: float):
        if ms <= 0:
            return
        cpu = self.world.cpu(self.node)
        with cpu.request() as req:
            yield req
            yield self.env.timeout(us(ms))

    def send(self, dst: str, msg: Any, **detail) -> None:
        self.world.transmit(self, dst, msg, **detail)

    def expect(self, src: str, *types, timeout_ms: Optional[float] = DEFAULT_TIMEOUT_MS):
        def match(e: Envelope) -> bool:
            if e.src != src:
                return False
            # a message that starts a new flow waits for the current one to finish
            return not types or isinstance(e.msg, types) or not self.defers(e)

        get = self.mailbox.get(match)
        if timeout_ms is None:
            env = yield get
        else:
            timer = self.env.timeout(us(timeout_ms))
            result = yield get | timer
            if get not in result:
                get.cancel()
                raise FlowTimeout(f"{self.name}: no message from {src} within {timeout_ms} ms")
            env = result[get]
        if types and not isinstance(env.msg, types):
            wanted = "/".join(getattr(t, "__name__", str(t)) for t in types)
            raise ProtocolViolation(f"{self.name}: expected {wanted} from {src}, got {env.kind}")
        if env.link == "peer":
            yield from self.compute(self.profile.peer_processing_ms)
        return env

    def defers(self, env: Envelope) -> bool:
        return False

    def purge(self) -> int:
        """Drop stale mid-flow messages; queued flow starters survive."""
        items = self.mailbox.items
        keep = [e for e in items if self.defers(e)]
        dropped = len(items) - len(keep)
        items[:] = keep
        return dropped

    def on_block(self, height: int) -> None:
        pass


class World:
    def __init__(self, profile: LatencyProfile, seed: int = 0):
        self.env = simpy.Environment()
        self.profile = profile
        self.seed = seed
        self.chain = Chain()
        self.events: List[TraceEvent] = []
        self.endpoints: Dict[str, Endpoint] = {}
        self._cpus: Dict[str, simpy.Resource] = {}
        self._link_last: Dict[Tuple[str, str], int] = {}
        self._medium_free: Dict[frozenset, int] = {}
        self.flow_by_channel: Dict[int, Optional[int]] = {}
        self.tx_labels: Dict[bytes, str] = {}
        self.keysend: Dict[bytes, bytes] = {}
        self.remote_nodes: Dict[str, Any] = {}
        self.block_hooks: List[Callable[[int], None]] = []
        self.auto_mine = True
        self.active = 0
        self.in_flight = 0
        self._change = self.env.event()

    # plumbing
    def rng(self, label: str) -> random.Random:
        return random.Random(f"{self.seed}:{label}")

    def register(self, ep: Endpoint) -> None:
        if ep.name in self.endpoints:
            raise ValueError(f"duplicate endpoint {ep.name}")
        self.endpoints[ep.name] = ep

    def cpu(self, node: str) -> simpy.Resource:
        if node not in self._cpus:
            self._cpus[node] = simpy.Resource(self.env, capacity=1)
        return self._cpus[node]

    def log(self, actor: str, kind: str, **detail) -> TraceEvent:
        ep = self.endpoints.get(actor)
        flow = self.flow_by_channel.get(ep.channel) if ep is not None else detail.pop("_flow", None)
        detail.pop("_flow", None)
        ev = TraceEvent(self.env.now, actor, kind, flow, detail)
        self.events.append(ev)
        return ev

    # activity tracking, so the runner can wait for all machines to settle
    def enter(self) -> None:
        self.active += 1

    def leave(self) -> None:
        self.active -= 1
        self._poke()

    def _poke(self) -> None:
        ev, self._change = self._change, self.env.event()
        ev.succeed()

    @property
    def busy(self) -> bool:
        return self.active > 0 or self.in_flight > 0

    def quiescent(self):
        """Wait until no handler runs and no message is on a link."""
        while True:
            while self.busy:
                yield self._change
            # a delivered message is picked up by its handler within the same instant
            yield self.env.timeout(0)
            yield self.env.timeout(0)
            if not self.busy:
                return

    # transport
    def transmit(self, src: Endpoint, dst_name: str, msg: Any, **extra) -> None:
        dst = self.endpoints[dst_name]
        link = "iot" if "iot" in (src.device_class, dst.device_class) else "peer"
        now = self.env.now
        wire = None
        if link == "iot":
            wire, delay = self._device_link(src, dst, msg)
        else:
            delay = us(self.profile.peer_link_ms)
        payload = msg
        if isinstance(msg, PeerMessage):
            payload = decode_peer(encode_peer(msg))
        arrival = max(now + delay, self._link_last.get((src.name, dst.name), 0))
        self._link_last[(src.name, dst.name)] = arrival
        env = Envelope(src.name, dst.name, payload, link, now, wire)
        detail = {"msg": msg.kind, "to": dst.name, "link": link}
        if wire is not None:
            detail.update(wire_bytes=wire.bytes, packets=wire.packets)
        if isinstance(msg, ThresholdFrame):
            detail["op"] = msg.op
        detail.update(extra)
        src.log("send", **detail)
        self.in_flight += 1
        self.env.process(self._deliver(arrival - now, env))

    def inject(self, dst_name: str, msg: Any, src: str = "runner", delay_ms: float = 0.0) -> None:
        """Deliver a message from outside the simulated topology (commands, remote HTLCs)."""
        link = "remote" if src != "runner" else "local"
        self.in_flight += 1
        self.env.process(self._deliver(us(delay_ms), Envelope(src, dst_name, msg, link, self.env.now)))

    def _device_link(self, src: Endpoint, dst: Endpoint, msg: Any) -> Tuple[WireCost, int]:
        p = self.profile
        w = p.wire
        if isinstance(msg, ThresholdFrame):
            cost = w.frame_cost(len(msg.frame), opening=msg.opening)
            extra_rtt = w.op_setup_round_trips if msg.opening else 0
        elif isinstance(msg, Sealed):
            cost = w.frame_cost(len(msg.frame), text=False)
            extra_rtt = 0
        else:
            raise TypeError(f"unexpected device-link message {type(msg).__name__}")
        medium = frozenset((src.name, dst.name))
        start = max(self.env.now, self._medium_free.get(medium, 0))
        tx = us(p.transmit_ms(cost.bytes))
        self._medium_free[medium] = start + tx
        delay = (start - self.env.now) + tx + us(p.iot_link_ms) * (1 + 2 * extra_rtt)
        return cost, delay

    def _deliver(self, delay: int, env: Envelope):
        yield self.env.timeout(delay)
        dst = self.endpoints[env.dst]
        try:
            if not dst.online:
                dst.log("drop", msg=env.kind, frm=env.src)
                return
            yield dst.mailbox.put(env)
        finally:
            self.in_flight -= 1
            self._poke()

    # chain
    def submit(self, actor: str, tx: Transaction, label: str) -> bool:
        res = self.chain.submit(tx)
        if res.accepted:
            self.tx_labels[tx.txid] = label
        self.log(actor, "tx_submit", label=label, txid=tx.txid.hex()[:16], fee=tx.fee,
                 accepted=res.accepted, reason=res.reason.value if res.reason else "")
        return res.accepted

    def mine(self, blocks: int = 1, actor: str = "chain") -> int:
        for _ in range(blocks):
            confirmed = list(self.chain.mempool)
            height = self.chain.mine_block()
            labels = [self.tx_labels.get(t, "tx") for t in confirmed]
            self.log(actor, "block", height=height, txs=len(confirmed), labels=labels)
            for hook in list(self.block_hooks):
                hook(height)
        return self.chain.height

    def await_depth(self, txid: bytes, depth: int, poll_ms: float = 1000.0):
        """Wait until ``txid`` has ``depth`` confirmations, mining at zero cost if allowed."""
        while self.chain.confirmations(txid) < depth:
            if self.auto_mine:
                self.mine(1)
            else:
                yield self.env.timeout(us(poll_ms))

    # export
    def trace_json(self) -> str:
        return json.dumps([e.as_dict() for e in self.events], sort_keys=True, indent=1)

    def trace_text(self) -> str:
        return "\n".join(e.text() for e in self.events)
