"""Scenario execution, metrics and invariant checks.

``run_scenario`` wires one channel (device, gateway, bridge) into a fresh
world, executes each directive as a flow and waits for the world to settle
before the next one.  Metrics are a fold over the trace, so they can always be
recomputed from a saved trace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Optional, Tuple

from ..channel import SAT_PER_BTC, ChannelParams
from ..crypto import base_mul, sha256
from ..game import (
    Action,
    GameParameters,
    backward_induction,
    build_closure_game,
    build_collusion_game,
    validate_parameters,
)
from ..protocol import flows
from ..protocol.messages import ChannelClosingRequest, OpenChannelRequest, SendPayment, node_id
from ..protocol.roles import (
    BridgeMachine,
    Command,
    GatewayMachine,
    InboundPayment,
    IotDevice,
    RemoteNode,
)
from .profiles import LatencyProfile, get_profile, with_overrides
from .scenario import Directive, Scenario
from .world import World, us

DEFAULT_LIQUIDITY = 100 * SAT_PER_BTC
DEFAULT_SENDER_FUNDS = 100 * SAT_PER_BTC

_TERMINAL_CONTROL = {
    "send": ("PaymentSendSuccess", "PaymentFailed"),
    "receive": ("PaymentReceiveSuccess", "PaymentFailed"),
}

# share ratio -> (role holding it, branch it applies to)
_SHARE_ROLE = {"a": ("gateway", "punish"), "b": ("bridge", "offline"),
               "c": ("bridge", "punish"), "d": ("gateway", "offline")}


def channel_params(sc: Scenario, capacity: int) -> ChannelParams:
    kw: Dict[str, Any] = {"capacity": capacity}
    names = {"service_rate": "service_fee_rate", "base": "base_fee", "per_sat": "fee_per_sat",
             "onchain_open": "open_fee", "onchain_close": "close_fee"}
    for k, v in sc.fees.items():
        kw[names[k]] = v
    kw.update(sc.timelocks)
    return ChannelParams(**kw)


@dataclass
class Deployment:
    """Device, gateway and bridge for one channel."""

    index: int
    iot: IotDevice
    gateway: GatewayMachine
    bridge: BridgeMachine
    params: ChannelParams
    bridge_id: str
    change: int = 0

    @property
    def names(self) -> Tuple[str, str, str]:
        return self.iot.name, self.gateway.name, self.bridge.name


@dataclass
class FlowRecord:
    flow: int
    kind: str
    line: int
    channel: int
    start: int
    end: int = 0
    status: str = "ok"
    detail: Dict[str, Any] = field(default_factory=dict)


class Harness:
    """A world plus the deployments living in it."""

    def __init__(self, profile: LatencyProfile, seed: int = 0):
        self.world = World(profile, seed)
        self.deployments: List[Deployment] = []
        self.records: List[FlowRecord] = []
        self.minted = 0
        self.outside = 0  # value held off-chain outside the channel at start
        self._next_flow = 0

    @property
    def env(self):
        return self.world.env

    # setup
    def remote(self, name: str, funds: int = 0) -> RemoteNode:
        nodes = self.world.remote_nodes
        if name not in nodes:
            nodes[name] = RemoteNode(name, funds)
            self.outside += funds
        return nodes[name]

    def deploy(self, params: ChannelParams, bridge_id: str, funds: Optional[int] = None,
               liquidity: int = DEFAULT_LIQUIDITY) -> Deployment:
        i = len(self.deployments)
        suffix = "" if i == 0 else f"-{i}"
        w = self.world
        pairing = w.rng(f"pairing{suffix}").getrandbits(256).to_bytes(32, "big")
        iot = IotDevice(w, "iot" + suffix, "gateway" + suffix, pairing, channel=i)
        funds = params.capacity + params.open_fee if funds is None else funds
        utxo = w.chain.faucet(iot.wallet_key, funds)
        self.minted += funds
        w.mine(1, actor="faucet")
        bridge = BridgeMachine(w, "bridge" + suffix, "gateway" + suffix, params,
                               liquidity=liquidity, channel=i)
        self.outside += liquidity
        gateway = GatewayMachine(
            w, "gateway" + suffix, iot.name, {node_id(bridge_id): bridge.name}, params,
            pairing, iot.wallet_key, (utxo, funds), channel=i,
        )
        for m in (iot, gateway, bridge):
            m.start()
        dep = Deployment(i, iot, gateway, bridge, params, bridge_id, funds - params.capacity - params.open_fee)
        self.deployments.append(dep)
        return dep

    # flow bracketing
    def begin(self, kind: str, dep: Optional[Deployment], line: int = 0, **detail) -> FlowRecord:
        fid = self._next_flow
        self._next_flow += 1
        ch = dep.index if dep is not None else -1
        rec = FlowRecord(fid, kind, line, ch, self.env.now, detail=detail)
        self.records.append(rec)
        if dep is not None:
            self.world.flow_by_channel[ch] = fid
        self.world.log("runner", "flow_start", _flow=fid, flow_kind=kind, line=line, channel=ch, **detail)
        return rec

    def finish(self, rec: FlowRecord, dep: Optional[Deployment]) -> FlowRecord:
        events = [e for e in self.world.events if e.flow == rec.flow]
        rec.end = _flow_end(events, rec, dep)
        rec.status = _status(events, rec, dep)
        self.world.log("runner", "flow_end", _flow=rec.flow, flow_kind=rec.kind, status=rec.status,
                       duration_us=rec.end - rec.start)
        if dep is not None:
            self.world.flow_by_channel[dep.index] = None
        return rec

    def settle(self):
        yield from self.world.quiescent()

    # flows, each a simpy generator
    def open(self, dep: Deployment, line: int = 0):
        rec = self.begin("open", dep, line, capacity=dep.params.capacity)
        req = OpenChannelRequest(dep.params.capacity, node_id(dep.bridge_id))
        yield from dep.iot.request(req)
        yield from self.settle()
        return self.finish(rec, dep)

    def send(self, dep: Deployment, amount: int, dest: str, split: int = 1, line: int = 0,
             settle: bool = True):
        self.remote(dest)
        rec = self.begin("send", dep, line, amount=amount, dest=dest, split=split)
        req = SendPayment(amount, node_id(dest), split)
        yield from dep.iot.request(req, until=_TERMINAL_CONTROL["send"])
        if settle:
            yield from self.settle()
        return self.finish(rec, dep)

    def receive(self, dep: Deployment, amount: int, sender: str, line: int = 0):
        self.remote(sender, DEFAULT_SENDER_FUNDS)
        rec = self.begin("receive", dep, line, amount=amount, sender=sender)
        preimage = self.world.rng(f"keysend:{rec.flow}").getrandbits(256).to_bytes(32, "big")
        h = sha256(preimage)
        self.world.keysend[h] = preimage
        self.world.inject(dep.bridge.name, InboundPayment(sender, amount, h, dep.bridge.channel_id),
                          src=sender, delay_ms=self.world.profile.remote_leg_ms)
        yield from self.settle()
        return self.finish(rec, dep)

    def close(self, dep: Deployment, by: str, mode: str, line: int = 0):
        rec = self.begin("close", dep, line, by=by, mode=mode)
        if by == "iot":
            yield from dep.iot.request(ChannelClosingRequest(mode == "unilateral"))
        else:
            target = dep.gateway if by == "gateway" else dep.bridge
            self.world.inject(target.name, Command("close", (("mode", mode),)))
        yield from self.settle()
        return self.finish(rec, dep)

    def mine(self, blocks: int, line: int = 0):
        rec = self.begin("mine", None, line, blocks=blocks)
        self.world.mine(blocks)
        yield from self.settle()
        return self.finish(rec, None)

    def adversary(self, dep: Deployment, d: Directive):
        who, action = d["who"], d["action"]
        role = {"iot": dep.iot, "gateway": dep.gateway, "bridge": dep.bridge}[who]
        rec = self.begin("adversary", dep, d.line, who=who, action=action)
        if action == "offline":
            role.online = False
            role.log("offline")
        elif action == "ransom":
            role.ransom = True
            role.log("ransom")
        else:
            for key, ratio in d.get("share", {}).items():
                holder, branch = _SHARE_ROLE[key]
                getattr(dep, holder).collusion[branch] = ratio
            state = d["state"]
            before = _game_inputs(self, dep, who, state)
            self.world.inject(role.name, Command("broadcast_revoked", (("state", state),)))
            yield from self.settle()
            rec.detail["game"] = game_check(self, dep, who, before, d.get("share", {}))
        yield from self.settle()
        return self.finish(rec, dep)

    # value accounting
    def snapshot(self) -> Dict[str, Any]:
        w = self.world
        chain = w.chain
        held: Dict[str, int] = {}
        for dep in self.deployments:
            held[dep.iot.name] = chain.balance_of(dep.iot.wallet_key, confirmed_only=False)
            held[dep.gateway.name] = chain.balance_of(base_mul(dep.gateway.payment_secret), False)
            held[dep.bridge.name] = chain.balance_of(base_mul(dep.bridge.payment_secret), False)
            held[dep.bridge.name + ":liquidity"] = dep.bridge.liquidity
        for name, node in sorted(w.remote_nodes.items()):
            held["remote:" + name] = node.balance
        utxo_total = sum(out.amount for _, out in chain.unspent())
        mempool_fees = sum(chain.get(t).fee for t in chain.mempool)
        attributed = sum(v for k, v in held.items() if not k.endswith(":liquidity") and not k.startswith("remote:"))
        channels = {}
        for dep in self.deployments:
            for role in (dep.gateway, dep.bridge):
                if role.chan is not None:
                    s = role.chan.current
                    channels[role.name] = dict(index=s.index, x=s.x, y=s.y, z=s.z, in_flight=s.in_flight,
                                               total=s.total, capacity=role.chan.params.capacity)
        off_chain = sum(n.balance for n in w.remote_nodes.values()) + sum(d.bridge.liquidity for d in self.deployments)
        return dict(
            t=w.env.now, height=chain.height, held=held, channels=channels,
            locked=utxo_total - attributed, fees=chain.fees + mempool_fees,
            total=utxo_total + chain.fees + mempool_fees + off_chain,
            expected=self.minted + self.outside,
        )


def _flow_end(events, rec: FlowRecord, dep: Optional[Deployment]) -> int:
    if dep is not None and rec.kind in _TERMINAL_CONTROL:
        for e in events:
            if e.actor == dep.iot.name and e.kind == "control_received" \
                    and e.detail["msg"] in _TERMINAL_CONTROL[rec.kind]:
                return e.t
    real = [e for e in events if e.actor != "runner"]
    return real[-1].t if real else rec.start


def _status(events, rec: FlowRecord, dep: Optional[Deployment]) -> str:
    if any(e.kind in ("abort", "request_timeout") for e in events):
        return "aborted"
    if dep is None or rec.kind in ("mine", "adversary"):
        return "ok"
    got = {e.detail["msg"] for e in events if e.actor == dep.iot.name and e.kind == "control_received"}
    if rec.kind == "open":
        return "ok" if dep.gateway.open and dep.bridge.open else "failed"
    if rec.kind == "send":
        return "ok" if "PaymentSendSuccess" in got else "failed"
    if rec.kind == "receive":
        return "ok" if "PaymentReceiveSuccess" in got else "failed"
    if rec.kind == "close":
        return "ok" if dep.gateway.closed or dep.bridge.closed else "failed"
    return "ok"


# --- game cross-check ---------------------------------------------------------------------


def _game_inputs(h: Harness, dep: Deployment, who: str, index: int) -> Dict[str, Any]:
    role = dep.gateway if who == "gateway" else dep.bridge
    chan = role.chan
    chain = h.world.chain
    cur = chan.current
    old = chan.states.get(index)
    return dict(
        current=(cur.x, cur.y, cur.z), revoked=None if old is None else (old.x, old.y, old.z),
        revoked_in_flight=0 if old is None else old.in_flight, capacity=chan.params.capacity,
        index=index,
        before={
            "bridge": chain.balance_of(base_mul(dep.bridge.payment_secret), False),
            "gateway": chain.balance_of(base_mul(dep.gateway.payment_secret), False),
            "iot": chain.balance_of(dep.iot.wallet_key, False),
        },
    )


def scripted_path(who: str, reactor_online: bool, share: Dict[str, Fraction]) -> Dict[str, Action]:
    """Actions the scenario plays, keyed by game node name."""
    react = Action.PUNISH if reactor_online else Action.OFFLINE
    if who == "bridge":
        share_node, key = (("gateway_shares_loot", "a") if reactor_online else ("bridge_shares_gain", "b"))
        path = {"start": "BridgeStarts", "bridge_first": Action.BROADCAST_REVOKED, "gateway_reacts": react}
    else:
        share_node, key = (("bridge_shares_loot", "c") if reactor_online else ("gateway_shares_gain", "d"))
        path = {"start": "GatewayStarts", "gateway_first": Action.BROADCAST_REVOKED, "bridge_reacts": react}
    path[share_node] = Action.SHARE if key in share else Action.DO_NOT_SHARE
    return path


def walk(root, path: Dict[str, Any]):
    node = root
    while not node.is_terminal:
        choice = path[node.name]
        node = node.child(choice)
    return node


def game_check(h: Harness, dep: Deployment, who: str, before: Dict[str, Any],
               share: Dict[str, Fraction]) -> Dict[str, Any]:
    chain = h.world.chain
    gained = {
        "bridge": chain.balance_of(base_mul(dep.bridge.payment_secret), False) - before["before"]["bridge"],
        "gateway": chain.balance_of(base_mul(dep.gateway.payment_secret), False) - before["before"]["gateway"],
        "iot": chain.balance_of(dep.iot.wallet_key, False) - before["before"]["iot"],
    }
    out: Dict[str, Any] = {"ledger": gained, "index": before["index"]}
    if before["revoked"] is None:
        out.update(checked=False, reason="no such state")
        return out
    x, y, z = before["current"]
    x1, y1, z1 = before["revoked"]
    ratios = {k: share.get(k, Fraction(1, 2)) for k in "abcd"}
    g = GameParameters(before["capacity"], x, y, z, x1, y1, z1, x1, y1, z1, **ratios)
    problems = validate_parameters(g)
    if before["revoked_in_flight"]:
        problems.append("revoked state carries HTLCs")
    if problems:
        out.update(checked=False, reason="; ".join(problems))
        return out
    reactor = dep.gateway if who == "bridge" else dep.bridge
    root = build_collusion_game(g) if share else build_closure_game(g)
    term = walk(root, scripted_path(who, reactor.online, share))
    spe = backward_induction(root)
    expected = {"bridge": int(term.payoff.bridge), "gateway": int(term.payoff.gateway), "iot": int(term.payoff.iot)}
    out.update(
        checked=True, terminal=term.name, expected=expected, match=expected == gained,
        spe={k: v.value for k, v in sorted(spe.profile.items())},
    )
    return out


# --- metrics ------------------------------------------------------------------------------


def flow_metrics(events, rec: FlowRecord) -> Dict[str, Any]:
    mine = [e for e in events if e.flow == rec.flow]
    ops = {"tkeygen": 0, "tsign": 0, "derive_child": 0}
    iot_bytes = iot_packets = messages = peer_messages = 0
    service = onchain = 0
    for e in mine:
        d = e.detail
        if e.kind == "threshold" and d.get("status") == "complete":
            ops[d["op"]] += 1
        elif e.kind == "send":
            if d.get("link") == "iot":
                iot_bytes += d.get("wire_bytes", 0)
                iot_packets += d.get("packets", 0)
                messages += 1
            else:
                peer_messages += 1
        elif e.kind == "step" and d.get("step") == "add_htlc":
            service += d["fee"]
        elif e.kind == "tx_submit" and d.get("accepted"):
            onchain += d["fee"]
    duration_us = rec.end - rec.start
    kbps = round(iot_bytes * 8 / (duration_us / 1000), 3) if duration_us > 0 else None
    return dict(
        flow=rec.flow, kind=rec.kind, line=rec.line, channel=rec.channel, status=rec.status,
        duration_ms=duration_us / 1000, iot_bytes=iot_bytes, iot_packets=iot_packets,
        iot_messages=messages, peer_messages=peer_messages, service_fee=service, onchain_fee=onchain,
        implied_kbps=kbps, **ops, detail=_jsonable(rec.detail),
    )


def metrics_report(result: "RunResult") -> Dict[str, Any]:
    per_flow = [flow_metrics(result.world.events, r) for r in result.records]
    chain = result.world.chain
    by_label: Dict[str, int] = {}
    for block in chain.blocks:
        for txid in block:
            fee = chain.get(txid).fee
            if fee:
                label = result.world.tx_labels.get(txid, "tx").split(":")[0]
                by_label[label] = by_label.get(label, 0) + fee
    totals = {k: sum(f[k] for f in per_flow) for k in
              ("tkeygen", "tsign", "derive_child", "iot_bytes", "iot_packets", "service_fee")}
    p = result.world.profile
    return dict(
        profile=dict(name=p.name, fitted=p.fitted, iot_link_ms=p.iot_link_ms, iot_link_kbps=p.iot_link_kbps,
                     peer_link_ms=p.peer_link_ms, peer_processing_ms=p.peer_processing_ms),
        seed=result.seed,
        flows=per_flow,
        totals=dict(totals, onchain_fees=by_label, onchain_fee_total=sum(by_label.values())),
        final=_jsonable(result.snapshots[-1]) if result.snapshots else {},
        violations=result.violations,
    )


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, bytes):
        return v.hex()
    if isinstance(v, Action):
        return v.value
    return v


# --- invariants ---------------------------------------------------------------------------


def check_gating(events, gateways: List[str]) -> List[str]:
    """Every gated gateway message follows the threshold operation it needs."""
    problems = []
    signed = {g: set() for g in gateways}
    derived = {g: set() for g in gateways}
    for e in events:
        if e.actor not in signed:
            continue
        d = e.detail
        if e.kind == "threshold" and d.get("status") == "complete":
            if d["op"] == "tsign":
                signed[e.actor].add(d["digest"])
            elif d["op"] == "derive_child":
                derived[e.actor].add(d["index"])
        elif e.kind == "send" and d.get("msg") in ("commitment_signed", "closing_signed", "funding_created"):
            if d.get("digest") not in signed[e.actor]:
                problems.append(f"{e.actor} sent {d['msg']} at t={e.t} without a tsign of its digest")
        elif e.kind == "send" and d.get("msg") == "revoke_and_ack":
            if d.get("next_index") not in derived[e.actor]:
                problems.append(f"{e.actor} sent revoke_and_ack at t={e.t} without derive_child")
    return problems


def expected_steps(rec: FlowRecord) -> Optional[List[str]]:
    if rec.kind == "open":
        return list(flows.OPEN_STEPS)
    if rec.kind == "send":
        return flows.send_steps(rec.detail.get("split", 1))
    if rec.kind == "receive":
        return list(flows.RECEIVE_STEPS)
    if rec.kind == "close" and rec.detail.get("mode") == "mutual":
        return flows.mutual_close_steps(rec.detail["by"])
    return None


def check_step_order(events, records: List[FlowRecord]) -> List[str]:
    problems = []
    for rec in records:
        want = expected_steps(rec)
        if want is None or rec.status != "ok":
            continue
        got = flows.project(events, rec.flow)
        i = flows.first_mismatch(got, want)
        if i is not None:
            g = got[i] if i < len(got) else "<end>"
            w = want[i] if i < len(want) else "<end>"
            problems.append(f"flow {rec.flow} ({rec.kind}, line {rec.line}) step {i}: got {g}, expected {w}")
    return problems


def check_value(snap: Dict[str, Any]) -> List[str]:
    problems = []
    if snap["total"] != snap["expected"]:
        problems.append(f"value at t={snap['t']}: {snap['total']} != {snap['expected']}")
    for name, ch in snap["channels"].items():
        if ch["total"] != ch["capacity"]:
            problems.append(f"{name} channel total {ch['total']} != capacity {ch['capacity']}")
    return problems


# --- scenario entry point -----------------------------------------------------------------


@dataclass
class RunResult:
    scenario: Scenario
    seed: int
    world: World
    records: List[FlowRecord]
    snapshots: List[Dict[str, Any]]
    violations: List[str]
    deployment: Optional[Deployment]

    @property
    def events(self):
        return self.world.events

    def flows_of(self, kind: str) -> List[FlowRecord]:
        return [r for r in self.records if r.kind == kind]

    def report(self) -> Dict[str, Any]:
        return metrics_report(self)

    def report_json(self) -> str:
        return json.dumps(self.report(), sort_keys=True, indent=1)

    def trace_json(self) -> str:
        return self.world.trace_json()

    def trace_text(self) -> str:
        return self.world.trace_text()


def resolve_profile(sc: Scenario, profile: Optional[str] = None) -> LatencyProfile:
    base = get_profile(profile or sc.profile)
    return with_overrides(base, **sc.latency) if sc.latency else base


def run_scenario(sc: Scenario, profile: Optional[str] = None, seed: Optional[int] = None) -> RunResult:
    seed = sc.seed if seed is None else seed
    h = Harness(resolve_profile(sc, profile), seed)
    state: Dict[str, Any] = {"dep": None}
    snapshots: List[Dict[str, Any]] = [h.snapshot()]

    def script():
        for d in sc.flows:
            dep = state["dep"]
            if d.kind == "open":
                params = channel_params(sc, d["capacity"])
                dep = state["dep"] = h.deploy(params, d["bridge"], d.get("funds"),
                                              d.get("liquidity", DEFAULT_LIQUIDITY))
                yield from h.open(dep, d.line)
            elif d.kind == "send":
                yield from h.send(dep, d["amount"], d["dest"], d.get("split", 1), d.line)
            elif d.kind == "receive":
                yield from h.receive(dep, d["amount"], d["from"], d.line)
            elif d.kind == "close":
                yield from h.close(dep, d["by"], d["mode"], d.line)
            elif d.kind == "mine":
                yield from h.mine(d["blocks"], d.line)
            elif d.kind == "adversary":
                yield from h.adversary(dep, d)
            snapshots.append(h.snapshot())

    h.env.process(script())
    h.env.run()
    violations: List[str] = []
    gateways = [d.gateway.name for d in h.deployments]
    violations += check_gating(h.world.events, gateways)
    violations += check_step_order(h.world.events, h.records)
    for snap in snapshots:
        violations += check_value(snap)
    for rec in h.records:
        g = rec.detail.get("game")
        if g and g.get("checked") and not g["match"]:
            violations.append(f"flow {rec.flow}: ledger outcome {g['ledger']} differs from game terminal {g['expected']}")
    return RunResult(sc, seed, h.world, h.records, snapshots, violations,
                     h.deployments[0] if h.deployments else None)


# --- scalability ----------------------------------------------------------------------------


def run_scalability(devices: int, payments: int, profile: str = "wifi", seed: int = 0,
                    capacity: int = 10 * SAT_PER_BTC, amount: int = 1000,
                    start_jitter_ms: float = 100.0) -> Dict[str, Any]:
    """Each device fires a burst of key sends at once; all gateways share one host.

    A payment's delay runs from the burst start to the device receiving its
    outcome, so it includes queueing behind the device's own earlier payments.
    """
    h = Harness(get_profile(profile), seed)
    params = ChannelParams(capacity=capacity)
    deps = [h.deploy(params, "B1") for _ in range(devices)]
    h.remote("D1")
    jitter = h.world.rng("burst-start")
    delays: List[float] = []

    def payment(dep: Deployment, start: int):
        reply = yield from dep.iot.request(SendPayment(amount, node_id("D1")), until=_TERMINAL_CONTROL["send"])
        if reply is not None and reply.kind == "PaymentSendSuccess":
            delays.append((h.env.now - start) / 1000)

    def burst(dep: Deployment):
        # devices never start in perfect lockstep; without an offset identical
        # devices can fall into a collision-free phase that hides contention
        yield h.env.timeout(us(jitter.uniform(0, start_jitter_ms)))
        rec = h.begin("burst", dep, payments=payments)
        procs = [h.env.process(payment(dep, rec.start)) for _ in range(payments)]
        yield h.env.all_of(procs)
        h.finish(rec, dep)

    def all_devices():
        for dep in deps:
            yield from h.open(dep)
        yield h.env.all_of([h.env.process(burst(dep)) for dep in deps])

    h.env.process(all_devices())
    h.env.run()
    return dict(devices=devices, payments=payments, completed=len(delays),
                mean_delay_ms=sum(delays) / len(delays) if delays else None,
                delays_ms=delays)
